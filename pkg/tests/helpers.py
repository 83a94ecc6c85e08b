"""Shared test fixtures: a minimal linear generator and exact 1-d samplers."""

from collections import OrderedDict
from types import SimpleNamespace

import numpy as np

from ebsal import tensor as T
from ebsal.data import Sample
from ebsal.tensor import Tensor, as_tensor


class LinearStub:
    """Image-independent generator: prediction = A @ z, shaped like a 1x1xM map."""

    def __init__(self, A, requires_grad=True):
        A = np.asarray(A, dtype=T.default_dtype())
        self.A = Tensor(A, requires_grad=requires_grad)
        self.cfg = SimpleNamespace(latent_dim=A.shape[1], input_size=(1, 1))

    def parameters(self):
        return OrderedDict([("stub.A", self.A)])

    def forward_batch(self, images, z):
        out = T.matmul(as_tensor(z), T.transpose(self.A, (1, 0)))
        return T.reshape(out, (out.shape[0], 1, 1, out.shape[1]))

    def __call__(self, images, z):
        return self.forward_batch(images, z)


def linear_dataset(A, n, sigma_eps, seed=0):
    """Samples from s = A z + eps with z ~ N(0, I), as 1x{M}x1 mask images."""
    g = np.random.default_rng(seed)
    A = np.asarray(A, dtype=np.float64)
    m, d = A.shape
    z = g.standard_normal((n, d))
    s = z @ A.T + sigma_eps * g.standard_normal((n, m))
    dt = T.default_dtype()
    return [
        Sample(
            image=np.zeros((1, m, 3), dtype=dt),
            mask=s[i][None, :, None].astype(dt),
            meta={"index": i},
        )
        for i in range(n)
    ]


def inverse_cdf_sampler(energy_fn, half_width, n_grid=20001):
    """Exact sampler for a 1-d unnormalized density exp(-energy_fn(z)).

    Builds the CDF by trapezoid accumulation on a fine grid and inverts it by
    interpolation; independent of any Langevin machinery.
    """
    grid = np.linspace(-half_width, half_width, n_grid)
    density = np.exp(-energy_fn(grid[:, None]))
    cdf = np.concatenate([[0.0], np.cumsum((density[1:] + density[:-1]) / 2 * np.diff(grid))])
    cdf /= cdf[-1]
    # collapse duplicate CDF values so interpolation stays monotone
    keep = np.concatenate([[True], np.diff(cdf) > 0])
    cdf, grid = cdf[keep], grid[keep]

    def draw(uniforms):
        return np.interp(uniforms, cdf, grid)

    return draw
