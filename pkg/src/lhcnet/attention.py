"""Local multi-head channel self-attention (LHC) block.

Rows of every attention matrix are whole feature maps: a head scores the
``C`` channels of its spatial slice against each other and recombines the
value maps of that slice. Pipeline for one block::

    x -> Q = avgpool_p(x), K = maxpool_p(x), V = avgpool_3(conv_s(x))
      -> split into n heads of shape [C, H*W/n]
      -> shared dense embedding of q and k      -> [C, d]
      -> scores S = q~ k~^T                     -> [C, C]
      -> per-row scale d^(g + T), T = sigmoid(mean(S) w2 + b2)
      -> softmax rows, A = W v                  -> [C, H*W/n]
      -> merge heads, add residual
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ConfigError, ShapeError, Tensor

VALUE_POOL = 3


@dataclass(frozen=True)
class LhcConfig:
    """Hyperparameters of one block.

    ``n`` heads, embedding size ``d`` per head, query/key pool size ``p``,
    value convolution kernel ``s``, scaling constant ``g`` and the
    ``(H, W, C)`` shape of the block input.
    """

    n: int
    d: int
    p: int = 3
    s: int = 3
    g: float = 1.0
    input_shape: tuple[int, int, int] = (56, 56, 64)

    def __post_init__(self):
        h, w, c = self.input_shape
        if min(self.n, self.d, self.p, self.s, h, w, c) < 1:
            raise ConfigError(f"all sizes must be positive: {self}")
        if self.g < 0:
            raise ConfigError(f"scaling constant g must be nonnegative, got {self.g}")
        if (h * w) % self.n:
            raise ConfigError(f"H*W = {h * w} is not divisible by n = {self.n}")
        for size, what in ((self.p, "pool size"), (self.s, "kernel size")):
            if size % 2 == 0:
                raise ConfigError(f"{what} must be odd, got {size}")

    @property
    def channels(self) -> int:
        return self.input_shape[2]

    @property
    def head_size(self) -> int:
        """Flattened spatial length handled by one head, ``H*W/n``."""
        h, w, _ = self.input_shape
        return h * w // self.n

    @property
    def n_params(self) -> int:
        c = self.channels
        return (
            self.n * (self.head_size * self.d + self.d)
            + (c * c + c)
            + (self.s * self.s * c * c + c)
        )


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass(frozen=True)
class LhcWeights:
    w1: tuple[Tensor, ...]
    b1: tuple[Tensor, ...]
    w2: Tensor
    b2: Tensor
    kernel: Tensor
    conv_bias: Tensor

    @classmethod
    def init(cls, cfg: LhcConfig, seed: int | np.random.Generator = 0, dtype="float64") -> "LhcWeights":
        """Glorot-uniform matrices and kernel, zero biases."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        c, m, d, s = cfg.channels, cfg.head_size, cfg.d, cfg.s
        w1 = tuple(Tensor(_glorot(rng, (m, d), m, d), dtype) for _ in range(cfg.n))
        b1 = tuple(Tensor(np.zeros(d), dtype) for _ in range(cfg.n))
        w2 = Tensor(_glorot(rng, (c, c), c, c), dtype)
        kernel = Tensor(_glorot(rng, (s, s, c, c), s * s * c, s * s * c), dtype)
        return cls(w1, b1, w2, Tensor(np.zeros(c), dtype), kernel, Tensor(np.zeros(c), dtype))

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        """Checkpoint names: ``{prefix}head{h}.w1`` (1-based), ``{prefix}w2`` ..."""
        out = {}
        for h, (w, b) in enumerate(zip(self.w1, self.b1), start=1):
            out[f"{prefix}head{h}.w1"] = w
            out[f"{prefix}head{h}.b1"] = b
        out[f"{prefix}w2"] = self.w2
        out[f"{prefix}b2"] = self.b2
        out[f"{prefix}conv.kernel"] = self.kernel
        out[f"{prefix}conv.bias"] = self.conv_bias
        return out

    @classmethod
    def from_named(cls, tensors: dict[str, Tensor], n: int, prefix: str = "") -> "LhcWeights":
        return cls(
            tuple(tensors[f"{prefix}head{h}.w1"] for h in range(1, n + 1)),
            tuple(tensors[f"{prefix}head{h}.b1"] for h in range(1, n + 1)),
            tensors[f"{prefix}w2"],
            tensors[f"{prefix}b2"],
            tensors[f"{prefix}conv.kernel"],
            tensors[f"{prefix}conv.bias"],
        )

    def tensors(self) -> list[Tensor]:
        return list(self.named().values())

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tensors())

    def check(self, cfg: LhcConfig) -> None:
        c, m, d, s = cfg.channels, cfg.head_size, cfg.d, cfg.s
        if len(self.w1) != cfg.n or len(self.b1) != cfg.n:
            raise ShapeError(f"expected {cfg.n} head embeddings, got {len(self.w1)}")
        expected = {"w1": (m, d), "b1": (d,)}
        for h in range(cfg.n):
            for name, t in (("w1", self.w1[h]), ("b1", self.b1[h])):
                if t.shape != expected[name]:
                    raise ShapeError(f"head {h + 1} {name} has shape {t.shape}, expected {expected[name]}")
        for name, t, shape in (
            ("w2", self.w2, (c, c)),
            ("b2", self.b2, (c,)),
            ("conv.kernel", self.kernel, (s, s, c, c)),
            ("conv.bias", self.conv_bias, (c,)),
        ):
            if t.shape != shape:
                raise ShapeError(f"{name} has shape {t.shape}, expected {shape}")


def _check_input(x: Tensor, cfg: LhcConfig) -> None:
    if tuple(x.shape[-3:]) != tuple(cfg.input_shape) or x.ndim not in (3, 4):
        raise ShapeError(f"input shape {x.shape} does not match block input {cfg.input_shape}")


def compute_qkv(x: Tensor, cfg: LhcConfig, wts: LhcWeights) -> tuple[Tensor, Tensor, Tensor]:
    x = T.as_tensor(x)
    _check_input(x, cfg)
    q = T.avg_pool2d_same(x, cfg.p)
    k = T.max_pool2d_same(x, cfg.p)
    v = T.avg_pool2d_same(T.conv2d_same(x, wts.kernel, wts.conv_bias), VALUE_POOL)
    return q, k, v


def split_heads(t: Tensor, n: int) -> list[Tensor]:
    """``[..., H, W, C]`` -> n matrices ``[..., C, H*W/n]``.

    The spatial grid is flattened row-major and cut into contiguous blocks,
    so head 1 holds the top band of the image when ``n`` divides ``H``.
    """
    *lead, h, w, c = t.shape
    if (h * w) % n:
        raise ConfigError(f"H*W = {h * w} is not divisible by n = {n}")
    flat = T.reshape(t, (*lead, h * w, c))
    return T.split(T.swap_last(flat), n, axis=-1)


def merge_heads(heads: list[Tensor], spatial: tuple[int, int]) -> Tensor:
    """Inverse of :func:`split_heads`; ``spatial`` is ``(H, W)``."""
    shapes = {hd.shape for hd in heads}
    if len(shapes) != 1:
        raise ShapeError(f"heads have inconsistent shapes {sorted(shapes)}")
    *lead, c, m = heads[0].shape
    h, w = spatial
    if m * len(heads) != h * w:
        raise ShapeError(f"{len(heads)} heads of length {m} cannot fill a {h}x{w} grid")
    joined = T.swap_last(T.concat(heads, axis=-1))
    return T.reshape(joined, (*lead, h, w, c))


def embed_qk(q_h: Tensor, k_h: Tensor, w1_h: Tensor, b1_h: Tensor) -> tuple[Tensor, Tensor]:
    """Shared dense embedding: the same ``w1_h, b1_h`` map queries and keys."""
    if q_h.shape != k_h.shape:
        raise ShapeError(f"query {q_h.shape} and key {k_h.shape} differ")
    if q_h.shape[-1] != w1_h.shape[0] or b1_h.shape != (w1_h.shape[1],):
        raise ShapeError(f"cannot embed {q_h.shape} with w1 {w1_h.shape}, b1 {b1_h.shape}")
    return T.matmul(q_h, w1_h) + b1_h, T.matmul(k_h, w1_h) + b1_h


def attention_scores(q_emb: Tensor, k_emb: Tensor) -> Tensor:
    return T.matmul(q_emb, T.swap_last(k_emb))


def dynamic_scaling(s_h: Tensor, w2: Tensor, b2: Tensor, d: int, g: float) -> tuple[Tensor, Tensor]:
    """Per-row learned temperature.

    Returns ``(scale, normalized)`` where ``scale[i] = sigmoid(mean_j(S) w2 + b2)[i]``
    lies in (0, 1) and ``normalized[i, j] = S[i, j] / d ** (g + scale[i])``.
    """
    if d < 2:
        raise ConfigError(f"embedding size d must be at least 2 for dynamic scaling, got {d}")
    *lead, c, c2 = s_h.shape
    if c != c2:
        raise ShapeError(f"scores must be square, got {s_h.shape}")
    row_mean = T.reshape(T.mean_rows(s_h), (*lead, 1, c))
    scale = T.sigmoid(T.matmul(row_mean, w2) + b2)
    scale = T.reshape(scale, (*lead, c))
    # divisor in log space: d^(g+t) = exp((g+t) ln d)
    log_divisor = (T.reshape(scale, (*lead, c, 1)) + g) * math.log(d)
    return scale, s_h * T.exp(-log_divisor)


def attention_weights(normalized: Tensor) -> Tensor:
    return T.softmax_rows(normalized)


def head_attention(normalized: Tensor, v_h: Tensor) -> Tensor:
    """Each output row is a convex combination of the rows of ``v_h``."""
    if normalized.shape[-1] != v_h.shape[-2]:
        raise ShapeError(f"weights {normalized.shape} do not match values {v_h.shape}")
    return T.matmul(attention_weights(normalized), v_h)


@dataclass
class BranchTrace:
    """Intermediate per-head tensors of one block evaluation."""

    scores: list[Tensor] = field(default_factory=list)
    scales: list[Tensor] = field(default_factory=list)
    weights: list[Tensor] = field(default_factory=list)
    heads: list[Tensor] = field(default_factory=list)


def lhc_branch(x: Tensor, cfg: LhcConfig, wts: LhcWeights, trace: BranchTrace | None = None) -> Tensor:
    """Attention output without the residual connection."""
    x = T.as_tensor(x)
    wts.check(cfg)
    q, k, v = compute_qkv(x, cfg, wts)
    qs, ks, vs = (split_heads(t, cfg.n) for t in (q, k, v))
    outputs = []
    for h in range(cfg.n):
        q_emb, k_emb = embed_qk(qs[h], ks[h], wts.w1[h], wts.b1[h])
        s_h = attention_scores(q_emb, k_emb)
        scale, normalized = dynamic_scaling(s_h, wts.w2, wts.b2, cfg.d, cfg.g)
        a_h = head_attention(normalized, vs[h])
        outputs.append(a_h)
        if trace is not None:
            trace.scores.append(s_h)
            trace.scales.append(scale)
            trace.weights.append(attention_weights(normalized))
            trace.heads.append(a_h)
    return merge_heads(outputs, cfg.input_shape[:2])


def lhc_forward(x: Tensor, cfg: LhcConfig, wts: LhcWeights) -> Tensor:
    """``x + LHC(x)``; output shape equals input shape."""
    x = T.as_tensor(x)
    return x + lhc_branch(x, cfg, wts)
