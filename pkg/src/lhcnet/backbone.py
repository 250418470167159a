"""ResNet-style host network with LHC insertion points.

Two kinds of spec share one description:

* :func:`build_full_spec` describes the 224x224 ResNet34v2 host with five
  LHC blocks. It exists for parameter accounting and checkpoint naming; its
  strided stem is not executable here.
* :func:`build_tiny_spec` is a stride-1 stem plus small pre-activation
  residual stages, trainable on a laptop core.

Insertion positions are named ``"stem"`` or ``"stage{k}"`` (1-based) and
refer to the output of that layer group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attention import LhcConfig, LhcWeights, lhc_branch
from .tensor import ConfigError, ShapeError, Tensor

DEFAULT_GATE_INIT = (0.0, 0.0, 0.0, -1.0, -0.5)
RESNET34V2_REPORTED_PARAMS = 27_600_000


@dataclass(frozen=True)
class StageSpec:
    filters: int
    blocks: int
    downsample: bool = False


@dataclass(frozen=True)
class Insertion:
    position: str
    config: LhcConfig


@dataclass(frozen=True)
class BackboneSpec:
    input_shape: tuple[int, int, int]
    stem_filters: int
    stages: tuple[StageSpec, ...]
    insertions: tuple[Insertion, ...] = ()
    num_classes: int = 7
    stem_kernel: int = 3
    stem_stride: int = 1
    gate_mode: str = "plain"
    gate_init: tuple[float, ...] = ()
    seed: int = 0
    # host size reported for a pretrained backbone whose exact layers are not modelled here
    reported_backbone_params: int | None = None

    def __post_init__(self):
        if self.gate_mode not in ("plain", "gated"):
            raise ConfigError(f"gate mode must be 'plain' or 'gated', got {self.gate_mode!r}")
        if self.gate_mode == "gated" and len(self.gate_init) != len(self.insertions):
            raise ConfigError(
                f"{len(self.insertions)} insertions need as many gate values, got {len(self.gate_init)}"
            )
        shapes = self.position_shapes()
        for i, ins in enumerate(self.insertions, start=1):
            if ins.position not in shapes:
                raise ConfigError(f"block {i}: unknown position {ins.position!r}")
            if tuple(ins.config.input_shape) != shapes[ins.position]:
                raise ShapeError(
                    f"block {i} at {ins.position} expects {ins.config.input_shape}, "
                    f"layer produces {shapes[ins.position]}"
                )

    def position_shapes(self) -> dict[str, tuple[int, int, int]]:
        h, w, _ = self.input_shape
        if h % self.stem_stride or w % self.stem_stride:
            raise ShapeError(f"input {self.input_shape} not divisible by stem stride {self.stem_stride}")
        h, w = h // self.stem_stride, w // self.stem_stride
        out = {"stem": (h, w, self.stem_filters)}
        for k, st in enumerate(self.stages, start=1):
            if st.downsample:
                if h % 2 or w % 2:
                    raise ShapeError(f"stage {k} cannot halve a {h}x{w} grid")
                h, w = h // 2, w // 2
            out[f"stage{k}"] = (h, w, st.filters)
        return out

    @property
    def is_executable(self) -> bool:
        return self.stem_stride == 1 and self.reported_backbone_params is None


def build_full_spec(gated: bool = False, seed: int = 0) -> BackboneSpec:
    """ResNet34v2 host (224x224x3 input, 7 classes) with the five-block layout."""
    table = [
        ("stem", 8, 196, (56, 56, 64)),
        ("stage1", 8, 196, (56, 56, 64)),
        ("stage2", 7, 56, (28, 28, 128)),
        ("stage3", 7, 14, (14, 14, 256)),
        ("stage4", 1, 25, (7, 7, 512)),
    ]
    insertions = tuple(
        Insertion(pos, LhcConfig(n=n, d=d, p=3, s=3, g=1.0, input_shape=shape))
        for pos, n, d, shape in table
    )
    return BackboneSpec(
        input_shape=(224, 224, 3),
        stem_filters=64,
        stem_kernel=7,
        stem_stride=4,
        stages=(
            StageSpec(64, 3),
            StageSpec(128, 4, downsample=True),
            StageSpec(256, 6, downsample=True),
            StageSpec(512, 3, downsample=True),
        ),
        insertions=insertions,
        gate_mode="gated" if gated else "plain",
        gate_init=DEFAULT_GATE_INIT if gated else (),
        seed=seed,
        reported_backbone_params=RESNET34V2_REPORTED_PARAMS,
    )


def build_tiny_spec(
    input_shape=(16, 16, 3),
    filters=(8, 16),
    heads: int = 4,
    position: str = "stage1",
    gated: bool = False,
    num_classes: int = 7,
    seed: int = 0,
) -> BackboneSpec:
    """Two-stage network with one LHC block; ``d = H*W / (2n)`` at the insertion."""
    stages = tuple(StageSpec(f, 1, downsample=k > 0) for k, f in enumerate(filters))
    probe = BackboneSpec(input_shape=tuple(input_shape), stem_filters=filters[0], stages=stages)
    h, w, c = probe.position_shapes()[position]
    cfg = LhcConfig(n=heads, d=max(2, h * w // (2 * heads)), p=3, s=3, g=1.0, input_shape=(h, w, c))
    return replace(
        probe,
        insertions=(Insertion(position, cfg),),
        num_classes=num_classes,
        gate_mode="gated" if gated else "plain",
        gate_init=(0.0,) if gated else (),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# parameter census
# ---------------------------------------------------------------------------


def _conv_params(k: int, c_in: int, c_out: int) -> int:
    return k * k * c_in * c_out + c_out


def backbone_param_count(spec: BackboneSpec) -> int:
    """Host parameters only (no LHC blocks, no gates)."""
    if spec.reported_backbone_params is not None:
        return spec.reported_backbone_params
    c = spec.input_shape[2]
    total = _conv_params(spec.stem_kernel, c, spec.stem_filters)
    c = spec.stem_filters
    for st in spec.stages:
        if st.filters != c:
            total += _conv_params(1, c, st.filters)
            c = st.filters
        total += st.blocks * 2 * _conv_params(3, c, c)
    return total + c * spec.num_classes + spec.num_classes


@dataclass(frozen=True)
class ParamCensus:
    total: int
    backbone_only: int
    attention_only: int
    per_block: tuple[int, ...]
    gates: int = 0

    @property
    def attention_share(self) -> float:
        return self.attention_only / self.total


def count_params(spec: BackboneSpec) -> ParamCensus:
    per_block = tuple(ins.config.n_params for ins in spec.insertions)
    gates = len(spec.insertions) if spec.gate_mode == "gated" else 0
    backbone = backbone_param_count(spec)
    attention = sum(per_block)
    return ParamCensus(backbone + attention + gates, backbone, attention, per_block, gates)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def gated_residual(x: Tensor, branch: Tensor, theta: Tensor) -> Tensor:
    """``x + tanh(theta) * branch`` with a scalar ``theta``."""
    if x.shape != branch.shape:
        raise ShapeError(f"residual shapes differ: {x.shape} vs {branch.shape}")
    return x + T.tanh(theta) * branch


def _block_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1000 + index])


def _he(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def init_backbone_params(spec: BackboneSpec, dtype="float64") -> dict[str, Tensor]:
    rng = np.random.default_rng([spec.seed, 0])
    params: dict[str, Tensor] = {}

    def conv(name, k, c_in, c_out):
        params[f"{name}.kernel"] = Tensor(_he(rng, (k, k, c_in, c_out), k * k * c_in), dtype)
        params[f"{name}.bias"] = Tensor(np.zeros(c_out), dtype)

    c = spec.input_shape[2]
    conv("stem", spec.stem_kernel, c, spec.stem_filters)
    c = spec.stem_filters
    for k, st in enumerate(spec.stages, start=1):
        if st.filters != c:
            conv(f"stage{k}.proj", 1, c, st.filters)
            c = st.filters
        for b in range(1, st.blocks + 1):
            conv(f"stage{k}.block{b}.conv1", 3, c, c)
            conv(f"stage{k}.block{b}.conv2", 3, c, c)
    limit = math.sqrt(6.0 / (c + spec.num_classes))
    params["head.w"] = Tensor(rng.uniform(-limit, limit, (c, spec.num_classes)), dtype)
    params["head.b"] = Tensor(np.zeros(spec.num_classes), dtype)
    return params


def init_block_params(spec: BackboneSpec, index: int, dtype="float64") -> dict[str, Tensor]:
    """Seeded initial weights of block ``index`` (1-based); reproducible per block."""
    cfg = spec.insertions[index - 1].config
    named = LhcWeights.init(cfg, _block_rng(spec.seed, index), dtype).named(f"block{index}.")
    if spec.gate_mode == "gated":
        named[f"block{index}.gate"] = Tensor(spec.gate_init[index - 1], dtype)
    return named


@dataclass(frozen=True)
class Model:
    """Spec, named parameters and per-block on/off switches."""

    spec: BackboneSpec
    params: dict[str, Tensor]
    enabled: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        if not self.enabled:
            object.__setattr__(self, "enabled", (True,) * len(self.spec.insertions))

    def block_weights(self, index: int) -> LhcWeights:
        cfg = self.spec.insertions[index - 1].config
        return LhcWeights.from_named(self.params, cfg.n, f"block{index}.")

    def with_params(self, params: dict[str, Tensor]) -> "Model":
        return replace(self, params=dict(params))

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())


def init_model(spec: BackboneSpec, dtype="float64") -> Model:
    params = init_backbone_params(spec, dtype)
    for i in range(1, len(spec.insertions) + 1):
        params.update(init_block_params(spec, i, dtype))
    return Model(spec, params)


def _insert(model: Model, position: str, h: Tensor, taps: dict | None) -> Tensor:
    for i, ins in enumerate(model.spec.insertions, start=1):
        if ins.position != position:
            continue
        if taps is not None:
            taps[f"block{i}.input"] = h
        if not model.enabled[i - 1]:
            continue
        branch = lhc_branch(h, ins.config, model.block_weights(i))
        if model.spec.gate_mode == "gated":
            h = gated_residual(h, branch, model.params[f"block{i}.gate"])
        else:
            h = h + branch
    return h


def tiny_forward(model: Model, x, taps: dict | None = None) -> Tensor:
    """Class logits ``[B, num_classes]`` for a batch ``[B, H, W, C]``.

    Layout: stem conv + relu; per stage an optional 2x2 mean downsample, a
    1x1 projection when the width changes, and pre-activation residual
    blocks ``h + conv2(relu(conv1(relu(h))))``; then relu, global average
    and a dense classifier. Enabled LHC blocks run after their position.
    """
    spec, p = model.spec, model.params
    if not spec.is_executable:
        raise ConfigError("this spec is for parameter accounting only (strided stem)")
    x = T.as_tensor(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(f"expected batch of {spec.input_shape}, got {x.shape}")
    h = T.relu(T.conv2d_same(x, p["stem.kernel"], p["stem.bias"]))
    h = _insert(model, "stem", h, taps)
    c = spec.stem_filters
    for k, st in enumerate(spec.stages, start=1):
        if st.downsample:
            h = T.downsample2(h)
        if st.filters != c:
            h = T.conv2d_same(h, p[f"stage{k}.proj.kernel"], p[f"stage{k}.proj.bias"])
            c = st.filters
        for b in range(1, st.blocks + 1):
            name = f"stage{k}.block{b}"
            inner = T.conv2d_same(T.relu(h), p[f"{name}.conv1.kernel"], p[f"{name}.conv1.bias"])
            inner = T.conv2d_same(T.relu(inner), p[f"{name}.conv2.kernel"], p[f"{name}.conv2.bias"])
            h = h + inner
        h = _insert(model, f"stage{k}", h, taps)
    pooled = T.mean(T.relu(h), axis=(1, 2))
    return T.matmul(pooled, p["head.w"]) + p["head.b"]
