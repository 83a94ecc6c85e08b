"""Trainable energy-based prior over the latent code.

The prior density is an exponential tilting of an isotropic Gaussian
reference: p(z) proportional to exp(-U(z) - ||z||^2 / (2 sigma_z^2)), where
U is a small MLP (latent_dim -> hidden -> hidden -> 1, GELU after each layer
except the last). The normalizing constant is never needed during training;
a quadrature estimate exists for low-dimensional test oracles only.

A frozen-at-zero variant (``gaussian_mode=True``) reduces the prior to the
plain Gaussian reference and is used as the alternating-backprop baseline:
same code path, U pinned to zero and excluded from updates.
"""

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor, as_tensor


class EBMPrior:
    """Energy U(z) + ||z||^2 / (2 sigma_z^2) with trainable U."""

    def __init__(
        self,
        latent_dim: int,
        hidden: int = 60,
        sigma_z: float = 1.0,
        gaussian_mode: bool = False,
        rng: np.random.Generator | None = None,
        init_std: float = 0.1,
    ):
        if latent_dim < 1 or hidden < 1:
            raise DimensionError("latent_dim and hidden must be positive")
        if sigma_z <= 0:
            raise ValueError("sigma_z must be positive")
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.sigma_z = float(sigma_z)
        self.gaussian_mode = bool(gaussian_mode)

        if gaussian_mode:
            draw = lambda *shape: np.zeros(shape)
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            draw = lambda *shape: rng.normal(0.0, init_std, size=shape)
        trainable = not gaussian_mode
        dt = T.default_dtype()
        self.w1 = Tensor(draw(hidden, latent_dim).astype(dt), requires_grad=trainable)
        self.b1 = Tensor(np.zeros(hidden, dtype=dt), requires_grad=trainable)
        self.w2 = Tensor(draw(hidden, hidden).astype(dt), requires_grad=trainable)
        self.b2 = Tensor(np.zeros(hidden, dtype=dt), requires_grad=trainable)
        self.w3 = Tensor(draw(1, hidden).astype(dt), requires_grad=trainable)
        self.b3 = Tensor(np.zeros(1, dtype=dt), requires_grad=trainable)

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(
            (f"prior.{n}", getattr(self, n)) for n in ("w1", "b1", "w2", "b2", "w3", "b3")
        )

    # -- forward -----------------------------------------------------------

    def _as_batch(self, z) -> tuple[Tensor, bool]:
        zt = as_tensor(z)
        single = zt.ndim == 1
        if single:
            zt = T.reshape(zt, (1, zt.shape[0]))
        if zt.ndim != 2 or zt.shape[1] != self.latent_dim:
            raise DimensionError(
                f"latent vectors must have length {self.latent_dim}, got shape {zt.shape}"
            )
        return zt, single

    def u_alpha(self, z) -> Tensor:
        """MLP energy correction U(z); [B, d] -> [B] (scalar for a single vector)."""
        zt, single = self._as_batch(z)
        h = T.gelu(T.add(T.matmul(zt, T.transpose(self.w1, (1, 0))), self.b1))
        h = T.gelu(T.add(T.matmul(h, T.transpose(self.w2, (1, 0))), self.b2))
        out = T.add(T.matmul(h, T.transpose(self.w3, (1, 0))), self.b3)
        out = T.reshape(out, (out.shape[0],))
        if single:
            out = T.reshape(out, ())
        return out

    def energy(self, z) -> Tensor:
        """Full energy per latent vector: U(z) + ||z||^2 / (2 sigma_z^2)."""
        zt, single = self._as_batch(z)
        quad = T.scale(T.tensor_sum(T.mul(zt, zt), axis=1), 0.5 / self.sigma_z**2)
        if single:
            quad = T.reshape(quad, ())
        if self.gaussian_mode:
            return quad
        return T.add(self.u_alpha(z), quad)

    # -- gradients (pure functions on numpy arrays) -------------------------

    def grad_energy_z(self, z: np.ndarray) -> np.ndarray:
        """d energy / d z, one row per latent vector."""
        z = np.asarray(z, dtype=T.default_dtype())
        single = z.ndim == 1
        zb = z[None, :] if single else z
        if zb.ndim != 2 or zb.shape[1] != self.latent_dim:
            raise DimensionError(f"latent vectors must have length {self.latent_dim}")
        if self.gaussian_mode:
            grad = zb / self.sigma_z**2
        else:
            zt = Tensor(zb, requires_grad=True)
            with T.frozen(self.parameters().values()):
                total = T.tensor_sum(self.energy(zt))
                T.backward(total)
            grad = zt.grad
        return grad[0] if single else grad

    def grad_u_params(self, z: np.ndarray) -> "OrderedDict[str, np.ndarray]":
        """d U(z) / d parameters for a single latent vector."""
        return self.grad_u_params_mean(np.asarray(z)[None, :])

    def grad_u_params_mean(self, z: np.ndarray) -> "OrderedDict[str, np.ndarray]":
        """Mean over rows of the per-sample parameter gradients of U."""
        if self.gaussian_mode:
            raise ValueError("the Gaussian-mode prior has no trainable energy parameters")
        z = np.asarray(z, dtype=T.default_dtype())
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise DimensionError(f"expected [n, {self.latent_dim}] latent batch")
        params = self.parameters()
        saved = {name: p.grad for name, p in params.items()}
        for p in params.values():
            p.grad = None
        T.backward(T.tensor_mean(self.u_alpha(Tensor(z))))
        out = OrderedDict(
            (name, np.zeros_like(p.data) if p.grad is None else p.grad.copy())
            for name, p in params.items()
        )
        for name, p in params.items():
            p.grad = saved[name]
        return out

    # -- quadrature oracle (tests only) --------------------------------------

    def partition_oracle(self, grid_half_width: float, points_per_axis: int) -> float:
        """Trapezoidal estimate of the integral of exp(-energy); d <= 2 only."""
        return partition_estimate(
            lambda zb: self.energy(Tensor(zb)).data,
            self.latent_dim,
            grid_half_width,
            points_per_axis,
        )


def partition_estimate(energy_fn, dim: int, grid_half_width: float, points_per_axis: int) -> float:
    """Trapezoid-rule integral of exp(-energy_fn) over [-w, w]^dim, dim <= 2.

    ``energy_fn`` maps an [n, dim] array of latent vectors to n energies.
    """
    if dim > 2:
        raise DimensionError("partition estimate supports latent dimension <= 2 only")
    if points_per_axis < 64:
        raise ValueError("points_per_axis must be >= 64")
    axis = np.linspace(-grid_half_width, grid_half_width, points_per_axis)
    if dim == 1:
        values = np.exp(-np.asarray(energy_fn(axis[:, None])))
        return float(np.trapezoid(values, axis))
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    values = np.exp(-np.asarray(energy_fn(pts))).reshape(points_per_axis, points_per_axis)
    return float(np.trapezoid(np.trapezoid(values, axis, axis=1), axis))
