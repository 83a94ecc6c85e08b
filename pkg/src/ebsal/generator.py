"""Image-conditioned saliency generator with latent injection.

The mapping from (image, latent code) to a saliency map has three stages:

* an encoder producing an L-level feature pyramid, either windowed
  multi-head self-attention blocks with patch merging, or a plain
  convolutional stack (one config field flips between them);
* per-level 3x3 reductions to a common channel width, with the latent code
  replicated spatially and fused into the deepest level;
* top-down aggregation: at each level the reduced features are concatenated
  with all upsampled higher-level outputs, passed through a channel
  attention gate, and projected back to the common width; a final 3x3 head
  emits a one-channel map, upsampled to the input resolution.

Outputs are raw real values (the observation model is Gaussian); clamping to
[0, 1] happens only in inference and metric code.
"""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor, as_tensor


@dataclass
class GeneratorConfig:
    input_size: tuple[int, int] = (64, 64)
    levels: int = 4
    base_channels: int = 16
    latent_dim: int = 32
    encoder_kind: str = "attention"  # or "conv"
    heads: int = 2
    window: int = 4
    attention_reduction: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        h, w = self.input_size
        step = 2 ** (self.levels + 1)
        if h % step or w % step:
            raise DimensionError(
                f"input size {h}x{w} must be divisible by 2^(levels+1) = {step}"
            )
        if self.base_channels < 4:
            raise DimensionError("base_channels must be >= 4")
        if self.base_channels % self.attention_reduction:
            raise DimensionError("base_channels must be divisible by attention_reduction")
        if self.encoder_kind not in ("attention", "conv"):
            raise ValueError(f"unknown encoder_kind {self.encoder_kind!r}")
        if self.encoder_kind == "attention":
            if self.base_channels % self.heads:
                raise DimensionError("base_channels must be divisible by heads")
            for level in range(1, self.levels + 1):
                side = min(h, w) // (4 * 2 ** (level - 1))
                eff = min(self.window, side)
                if side % eff:
                    raise DimensionError(
                        f"window {self.window} incompatible with token grid side {side} "
                        f"at level {level}"
                    )

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** (level - 1)

    def grid(self, level: int) -> tuple[int, int]:
        h, w = self.input_size
        s = 4 * 2 ** (level - 1)
        return h // s, w // s

    def effective_window(self, level: int) -> int:
        return min(self.window, min(self.grid(level)))

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "levels": self.levels,
            "base_channels": self.base_channels,
            "latent_dim": self.latent_dim,
            "encoder_kind": self.encoder_kind,
            "heads": self.heads,
            "window": self.window,
            "attention_reduction": self.attention_reduction,
            "mlp_ratio": self.mlp_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        return cls(**d)


@dataclass
class FeaturePyramid:
    """Encoder feature maps and their common-width reductions."""

    f: list  # f[l-1]: [B, channels(l), h_l, w_l], spatial stride 4 * 2^(l-1)
    f_prime: list  # same spatial sizes, all base_channels wide

    def __post_init__(self):
        for a, b in zip(self.f, self.f[1:]):
            if a.shape[2] != 2 * b.shape[2] or a.shape[3] != 2 * b.shape[3]:
                raise DimensionError("pyramid levels must halve spatially")
        widths = {t.shape[1] for t in self.f_prime}
        if len(widths) > 1:
            raise DimensionError("reduced pyramid levels must share channel count")


# ---------------------------------------------------------------------------
# parameter containers


class _Layer:
    def parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, _Layer):
                for sub, t in value.parameters().items():
                    out[f"{name}.{sub}"] = t
            elif isinstance(value, list) and value and isinstance(value[0], _Layer):
                for i, layer in enumerate(value):
                    for sub, t in layer.parameters().items():
                        out[f"{name}.{i}.{sub}"] = t
        return out


def _param(rng, std, *shape) -> Tensor:
    data = rng.normal(0.0, std, size=shape).astype(T.default_dtype())
    return Tensor(data, requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=T.default_dtype()), requires_grad=True)


class Conv(_Layer):
    def __init__(self, cin, cout, k, rng, std=None, stride=1, padding=None):
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        std = std if std is not None else np.sqrt(2.0 / (cin * k * k))
        self.w = _param(rng, std, cout, cin, k, k)
        self.b = _zeros(cout)

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.w, stride=self.stride, padding=self.padding)
        return T.add(y, T.reshape(self.b, (1, -1, 1, 1)))


class StridedDownConv(_Layer):
    """3x3 stride-2 convolution; even inputs use top/left zero padding so the
    output size is exactly half (symmetric padding cannot make it integral)."""

    def __init__(self, cin, cout, rng, std=None):
        std = std if std is not None else np.sqrt(2.0 / (cin * 9))
        self.w = _param(rng, std, cout, cin, 3, 3)
        self.b = _zeros(cout)

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(T.pad2d(x, ((1, 0), (1, 0))), self.w, stride=2, padding=0)
        return T.add(y, T.reshape(self.b, (1, -1, 1, 1)))


class Dense(_Layer):
    def __init__(self, cin, cout, rng, std=None):
        std = std if std is not None else np.sqrt(1.0 / cin)
        self.w = _param(rng, std, cin, cout)
        self.b = _zeros(cout)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)


# ---------------------------------------------------------------------------
# attention pieces


def multi_head_self_attention(tokens, heads: int, wq, wk, wv, wo, rel_bias=None) -> Tensor:
    """Standard scaled dot-product self-attention over token sets.

    ``tokens`` is [N, n, C] (or [n, C] for a single set); each projection is a
    Dense layer; ``rel_bias`` is an optional [heads, n, n] logit offset shared
    across sets.
    """
    x = as_tensor(tokens)
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    N, n, c = x.shape
    if c % heads:
        raise DimensionError(f"channels {c} not divisible by heads {heads}")
    dh = c // heads

    def split_heads(t):
        return T.transpose(T.reshape(t, (N, n, heads, dh)), (0, 2, 1, 3))

    q = split_heads(wq(x))
    k = split_heads(wk(x))
    v = split_heads(wv(x))
    logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if rel_bias is not None:
        logits = T.add(logits, rel_bias)
    attn = T.softmax(logits, axis=-1)
    out = T.matmul(attn, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (N, n, c))
    out = wo(out)
    if single:
        out = T.reshape(out, (n, c))
    return out


class WindowBlock(_Layer):
    """Window-partitioned self-attention + MLP, both with residual connections."""

    def __init__(self, dim, heads, window, mlp_ratio, rng):
        self.dim = dim
        self.heads = heads
        self.window = window
        std = np.sqrt(1.0 / dim)
        self.wq = Dense(dim, dim, rng, std)
        self.wk = Dense(dim, dim, rng, std)
        self.wv = Dense(dim, dim, rng, std)
        self.wo = Dense(dim, dim, rng, std)
        self.fc1 = Dense(dim, mlp_ratio * dim, rng, np.sqrt(2.0 / dim))
        self.fc2 = Dense(mlp_ratio * dim, dim, rng, np.sqrt(2.0 / (mlp_ratio * dim)))
        # learned per-window relative position bias, zero at init
        side = 2 * window - 1
        self.bias_table = _zeros(heads, side * side)
        self._bias_one_hot = Tensor(_relative_one_hot(window), requires_grad=False)

    def _rel_bias(self) -> Tensor:
        n = self.window * self.window
        flat = T.matmul(self._bias_one_hot, T.transpose(self.bias_table, (1, 0)))
        return T.transpose(T.reshape(flat, (n, n, self.heads)), (2, 0, 1))

    def __call__(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        w = self.window
        tokens = _window_partition(x, w)
        attended = multi_head_self_attention(
            tokens, self.heads, self.wq, self.wk, self.wv, self.wo, rel_bias=self._rel_bias()
        )
        x = T.add(x, _window_merge(attended, B, C, H, W, w))
        tokens = T.reshape(T.transpose(x, (0, 2, 3, 1)), (B * H * W, C))
        mlp = self.fc2(T.gelu(self.fc1(tokens)))
        mlp = T.transpose(T.reshape(mlp, (B, H, W, C)), (0, 3, 1, 2))
        return T.add(x, mlp)


def _relative_one_hot(window: int) -> np.ndarray:
    """One-hot [n*n, (2w-1)^2] selecting the bias-table entry per token pair."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"), -1)
    coords = coords.reshape(-1, 2)
    rel = coords[:, None, :] - coords[None, :, :] + window - 1
    index = rel[..., 0] * (2 * window - 1) + rel[..., 1]
    table = np.zeros((window**2 * window**2, (2 * window - 1) ** 2), dtype=T.default_dtype())
    table[np.arange(index.size), index.ravel()] = 1.0
    return table


def _window_partition(x: Tensor, w: int) -> Tensor:
    B, C, H, W = x.shape
    if H % w or W % w:
        raise DimensionError(f"window {w} does not divide token grid {H}x{W}")
    t = T.transpose(x, (0, 2, 3, 1))  # B H W C
    t = T.reshape(t, (B, H // w, w, W // w, w, C))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (B * (H // w) * (W // w), w * w, C))


def _window_merge(tokens: Tensor, B, C, H, W, w: int) -> Tensor:
    t = T.reshape(tokens, (B, H // w, W // w, w, w, C))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    t = T.reshape(t, (B, H, W, C))
    return T.transpose(t, (0, 3, 1, 2))


def _space_to_depth(x: Tensor, r: int) -> Tensor:
    B, C, H, W = x.shape
    if H % r or W % r:
        raise DimensionError(f"spatial size {H}x{W} not divisible by {r}")
    t = T.reshape(x, (B, C, H // r, r, W // r, r))
    t = T.transpose(t, (0, 1, 3, 5, 2, 4))
    return T.reshape(t, (B, C * r * r, H // r, W // r))


class PatchEmbed(_Layer):
    def __init__(self, dim, rng, patch=4, in_channels=3):
        self.patch = patch
        self.proj = Conv(in_channels * patch * patch, dim, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(_space_to_depth(x, self.patch))


class PatchMerge(_Layer):
    def __init__(self, dim, rng):
        self.proj = Conv(4 * dim, 2 * dim, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(_space_to_depth(x, 2))


class AttentionEncoder(_Layer):
    def __init__(self, cfg: GeneratorConfig, rng):
        self.embed = PatchEmbed(cfg.base_channels, rng)
        self.blocks = [
            WindowBlock(cfg.channels(l), cfg.heads, cfg.effective_window(l), cfg.mlp_ratio, rng)
            for l in range(1, cfg.levels + 1)
        ]
        self.merges = [PatchMerge(cfg.channels(l), rng) for l in range(1, cfg.levels)]

    def __call__(self, x: Tensor) -> list:
        maps = []
        stage = self.embed(x)
        for l, block in enumerate(self.blocks):
            stage = block(stage)
            maps.append(stage)
            if l < len(self.merges):
                stage = self.merges[l](stage)
        return maps


class ConvEncoder(_Layer):
    def __init__(self, cfg: GeneratorConfig, rng):
        self.stem = StridedDownConv(3, cfg.base_channels, rng)
        self.convs = []
        self.downs = []
        for l in range(1, cfg.levels + 1):
            cin = cfg.base_channels if l == 1 else cfg.channels(l - 1)
            cout = cfg.channels(l)
            self.convs.append(Conv(cin, cout, 3, rng))
            self.downs.append(StridedDownConv(cout, cout, rng))

    def __call__(self, x: Tensor) -> list:
        maps = []
        stage = T.gelu(self.stem(x))
        for conv, down in zip(self.convs, self.downs):
            stage = down(T.gelu(conv(stage)))
            maps.append(stage)
        return maps


# ---------------------------------------------------------------------------
# decoder pieces


class ChannelAttention(_Layer):
    """Gate each channel by a squeeze-excite score: GAP -> FC -> GELU -> FC -> sigmoid."""

    def __init__(self, channels, reduction, rng, std=0.1):
        if channels % reduction:
            raise DimensionError(f"channels {channels} not divisible by reduction {reduction}")
        self.fc1 = Dense(channels, channels // reduction, rng, std)
        self.fc2 = Dense(channels // reduction, channels, rng, std)

    def __call__(self, x: Tensor) -> Tensor:
        gate = T.sigmoid(self.fc2(T.gelu(self.fc1(T.global_avg_pool(x)))))
        return T.mul(x, T.reshape(gate, gate.shape + (1, 1)))


DECODER_INIT_STD = 0.1  # decoder weights drawn from N(0, 0.01)


class Generator(_Layer):
    """T(image, z): encoder pyramid, latent injection, aggregation decoder."""

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.cfg = cfg
        if cfg.encoder_kind == "attention":
            self.encoder = AttentionEncoder(cfg, rng)
        else:
            self.encoder = ConvEncoder(cfg, rng)
        C, L = cfg.base_channels, cfg.levels
        self.reduce = [
            Conv(cfg.channels(l), C, 3, rng, std=DECODER_INIT_STD) for l in range(1, L + 1)
        ]
        self.inject = Conv(C + cfg.latent_dim, C, 3, rng, std=DECODER_INIT_STD)
        self.gates = []
        self.fuse = []
        for l in range(L - 1, 0, -1):
            cat = C * (L - l + 1)
            self.gates.append(ChannelAttention(cat, cfg.attention_reduction, rng))
            self.fuse.append(Conv(cat, C, 3, rng, std=DECODER_INIT_STD))
        self.head = Conv(C, 1, 3, rng, std=DECODER_INIT_STD)

    # -- stages -------------------------------------------------------------

    def encode(self, images: Tensor) -> FeaturePyramid:
        """Images [B, 3, H, W] in [0, 1] -> feature pyramid."""
        images = as_tensor(images)
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError("encode expects images shaped [B, 3, H, W]")
        if (images.shape[2], images.shape[3]) != self.cfg.input_size:
            raise DimensionError(
                f"images are {images.shape[2]}x{images.shape[3]}, "
                f"generator was built for {self.cfg.input_size}"
            )
        f = self.encoder(images)
        f_prime = [reduce(t) for reduce, t in zip(self.reduce, f)]
        return FeaturePyramid(f=f, f_prime=f_prime)

    def inject_latent(self, deepest: Tensor, z: Tensor) -> Tensor:
        """Replicate z over the deepest grid, concatenate, project back."""
        z = as_tensor(z)
        if z.ndim == 1:
            z = T.reshape(z, (1, -1))
        B, C, h, w = deepest.shape
        if z.shape != (B, self.cfg.latent_dim):
            raise DimensionError(
                f"latent batch must be [{B}, {self.cfg.latent_dim}], got {z.shape}"
            )
        tiled = T.upsample_nearest(T.reshape(z, (B, self.cfg.latent_dim, 1, 1)), (h, w))
        return self.inject(T.concat([deepest, tiled], axis=1))

    def aggregate(self, level: int, reduced: Tensor, higher: list) -> Tensor:
        """Fuse reduced features at ``level`` with all higher-level outputs."""
        target = reduced.shape[2:]
        ups = []
        for t in higher:
            fh = target[0] // t.shape[2]
            fw = target[1] // t.shape[3]
            ups.append(T.upsample_nearest(t, (fh, fw)))
        cat = T.concat([reduced] + ups, axis=1)
        idx = self.cfg.levels - 1 - level
        return self.fuse[idx](self.gates[idx](cat))

    def decode(self, f_prime: list, z: Tensor) -> Tensor:
        outputs = [self.inject_latent(f_prime[-1], z)]  # deepest first
        for level in range(self.cfg.levels - 1, 0, -1):
            outputs.append(self.aggregate(level, f_prime[level - 1], outputs))
        final = self.head(outputs[-1])
        return T.upsample_nearest(final, (4, 4))

    # -- entry points ---------------------------------------------------------

    def forward_batch(self, images, z) -> Tensor:
        """[B, 3, H, W] x [B, d] -> raw saliency maps [B, 1, H, W]."""
        pyramid = self.encode(images)
        return self.decode(pyramid.f_prime, z)

    def forward(self, image, z) -> Tensor:
        """Single image [H, W, 3] x latent [d] -> raw map [H, W, 1]."""
        image = as_tensor(image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise DimensionError("forward expects one image shaped [H, W, 3]")
        batch = T.reshape(T.transpose(image, (2, 0, 1)), (1, 3) + image.shape[:2])
        z = as_tensor(z)
        out = self.forward_batch(batch, T.reshape(z, (1, -1)))
        return T.transpose(T.reshape(out, out.shape[1:]), (1, 2, 0))

    def __call__(self, images, z) -> Tensor:
        return self.forward_batch(images, z)

    def predictor(self, images):
        """Closure z -> prediction with the z-independent pyramid precomputed.

        Used by the posterior sampler: encoder features cannot change during
        a chain, so they are evaluated once, detached, and reused every step.
        """
        with T.no_grad():
            pyramid = self.encode(as_tensor(images))
        cached = [t.detach() for t in pyramid.f_prime]
        return lambda z: self.decode(cached, z)

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((f"generator.{k}", v) for k, v in _Layer.parameters(self).items())
