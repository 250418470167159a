"""Plain-text key/value configs and the tensor container.

Key/value files hold one ``key = value`` pair per line; ``#`` starts a
comment and the ``schema`` key carries the format version::

    schema = 1
    kind = backbone
    input_shape = 16,16,3

A tensor container is two files sharing a stem: ``<stem>.manifest.json``
lists every tensor (name, shape, precision, byte offset, byte length) and
``<stem>.bin`` holds the little-endian data back to back in manifest order.
Checkpoint tensor names:

========================  ======================================
``stem.kernel/bias``      stem convolution
``stage{k}.proj.*``       1x1 width projection of stage k
``stage{k}.block{b}.*``   ``conv1``/``conv2`` of residual block b
``head.w``, ``head.b``    classifier
``block{i}.head{h}.w1``   embedding of head h in LHC block i (also ``b1``)
``block{i}.w2``, ``b2``   dynamic-scaling layer of block i
``block{i}.conv.*``       value convolution ``kernel``/``bias``
``block{i}.gate``         residual gate (gated mode only)
========================  ======================================
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .attention import LhcConfig
from .backbone import BackboneSpec, Insertion, Model, StageSpec
from .data import AugmentConfig, TtaPlan, Transform
from .tensor import ConfigError, Tensor
from .train import StageConfig

SCHEMA_VERSION = 1

_PRECISIONS = {
    "float64": "<f8",
    "float32": "<f4",
    "int64": "<i8",
    "uint8": "u1",
}


# ---------------------------------------------------------------------------
# key/value text
# ---------------------------------------------------------------------------


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value
    version = out.get("schema")
    if version is None:
        raise ConfigError("missing 'schema' key")
    if int(version) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {version}; expected {SCHEMA_VERSION}")
    return out


def format_kv(values: dict[str, object]) -> str:
    lines = [f"schema = {SCHEMA_VERSION}"]
    for k, v in values.items():
        if k == "schema":
            continue
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, (tuple, list)):
            v = ",".join(_fmt(x) for x in v)
        else:
            v = _fmt(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def write_kv(path, values: dict[str, object]) -> None:
    Path(path).write_text(format_kv(values))


def _bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


# ---------------------------------------------------------------------------
# typed configs
# ---------------------------------------------------------------------------


def spec_to_kv(spec: BackboneSpec) -> dict[str, object]:
    out: dict[str, object] = {
        "kind": "backbone",
        "input_shape": spec.input_shape,
        "num_classes": spec.num_classes,
        "stem_filters": spec.stem_filters,
        "stem_kernel": spec.stem_kernel,
        "stem_stride": spec.stem_stride,
        "stages": len(spec.stages),
    }
    for k, st in enumerate(spec.stages, start=1):
        out[f"stage{k}.filters"] = st.filters
        out[f"stage{k}.blocks"] = st.blocks
        out[f"stage{k}.downsample"] = st.downsample
    out["blocks"] = len(spec.insertions)
    for i, ins in enumerate(spec.insertions, start=1):
        c = ins.config
        out[f"block{i}.position"] = ins.position
        out[f"block{i}.heads"] = c.n
        out[f"block{i}.dim"] = c.d
        out[f"block{i}.pool"] = c.p
        out[f"block{i}.kernel"] = c.s
        out[f"block{i}.scale"] = float(c.g)
    out["gate_mode"] = spec.gate_mode
    if spec.gate_init:
        out["gate_init"] = tuple(float(g) for g in spec.gate_init)
    out["seed"] = spec.seed
    if spec.reported_backbone_params is not None:
        out["reported_backbone_params"] = spec.reported_backbone_params
    return out


def spec_from_kv(kv: dict[str, str]) -> BackboneSpec:
    try:
        stages = tuple(
            StageSpec(
                int(kv[f"stage{k}.filters"]),
                int(kv[f"stage{k}.blocks"]),
                _bool(kv.get(f"stage{k}.downsample", "false")),
            )
            for k in range(1, int(kv["stages"]) + 1)
        )
        probe = BackboneSpec(
            input_shape=_ints(kv["input_shape"]),
            stem_filters=int(kv["stem_filters"]),
            stages=stages,
            stem_stride=int(kv.get("stem_stride", 1)),
        )
        shapes = probe.position_shapes()
        insertions = []
        for i in range(1, int(kv.get("blocks", 0)) + 1):
            pos = kv[f"block{i}.position"]
            if pos not in shapes:
                raise ConfigError(f"block{i}: unknown position {pos!r}")
            cfg = LhcConfig(
                n=int(kv[f"block{i}.heads"]),
                d=int(kv[f"block{i}.dim"]),
                p=int(kv.get(f"block{i}.pool", 3)),
                s=int(kv.get(f"block{i}.kernel", 3)),
                g=float(kv.get(f"block{i}.scale", 1.0)),
                input_shape=shapes[pos],
            )
            insertions.append(Insertion(pos, cfg))
        reported = kv.get("reported_backbone_params")
        return BackboneSpec(
            input_shape=_ints(kv["input_shape"]),
            stem_filters=int(kv["stem_filters"]),
            stages=stages,
            insertions=tuple(insertions),
            num_classes=int(kv.get("num_classes", 7)),
            stem_kernel=int(kv.get("stem_kernel", 3)),
            stem_stride=int(kv.get("stem_stride", 1)),
            gate_mode=kv.get("gate_mode", "plain"),
            gate_init=_floats(kv.get("gate_init", "")),
            seed=int(kv.get("seed", 0)),
            reported_backbone_params=None if reported is None else int(reported),
        )
    except KeyError as exc:
        raise ConfigError(f"missing key {exc.args[0]!r}") from None


def stages_to_kv(stages: list[StageConfig]) -> dict[str, object]:
    out: dict[str, object] = {"stages": len(stages)}
    for k, st in enumerate(stages, start=1):
        p = f"stage{k}."
        out.update(
            {
                p + "optimizer": st.optimizer,
                p + "lr": float(st.lr),
                p + "momentum": float(st.momentum),
                p + "batch_size": st.batch_size,
                p + "patience": st.patience,
                p + "max_epochs": st.max_epochs,
                p + "rotation_deg": float(st.augment.rotation_deg),
                p + "shift_frac": float(st.augment.shift_frac),
                p + "zoom_frac": float(st.augment.zoom_frac),
                p + "hflip": st.augment.hflip,
                p + "freeze_backbone": st.freeze_backbone,
            }
        )
    return out


def stages_from_kv(kv: dict[str, str]) -> list[StageConfig]:
    stages = []
    for k in range(1, int(kv.get("stages", 0)) + 1):
        p = f"stage{k}."
        g = lambda key, default: kv.get(p + key, default)  # noqa: E731
        stages.append(
            StageConfig(
                optimizer=g("optimizer", "sgd"),
                lr=float(g("lr", 0.01)),
                batch_size=int(g("batch_size", 64)),
                patience=int(g("patience", 3)),
                augment=AugmentConfig(
                    rotation_deg=float(g("rotation_deg", 0)),
                    shift_frac=float(g("shift_frac", 0)),
                    zoom_frac=float(g("zoom_frac", 0)),
                    hflip=_bool(g("hflip", "false")),
                ),
                max_epochs=int(g("max_epochs", 500)),
                momentum=float(g("momentum", 0)),
                freeze_backbone=_bool(g("freeze_backbone", "false")),
            )
        )
    return stages


def plan_to_kv(plan: TtaPlan) -> dict[str, object]:
    """One line per transform: ``flip,dx,dy,rotation,zoom,weight``."""
    out: dict[str, object] = {"kind": "tta", "transforms": len(plan)}
    for i, (t, w) in enumerate(zip(plan.transforms, plan.weights), start=1):
        out[f"t{i}"] = (int(t.flip), float(t.dx), float(t.dy), float(t.rotation), float(t.zoom), float(w))
    return out


def plan_from_kv(kv: dict[str, str]) -> TtaPlan:
    transforms, weights = [], []
    for i in range(1, int(kv["transforms"]) + 1):
        flip, dx, dy, rot, zoom, w = _floats(kv[f"t{i}"])
        transforms.append(Transform(bool(flip), dx, dy, rot, zoom))
        weights.append(w)
    return TtaPlan(tuple(transforms), tuple(weights))


# ---------------------------------------------------------------------------
# tensor container
# ---------------------------------------------------------------------------


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_name(stem.name + ".manifest.json"), stem.with_name(stem.name + ".bin")


def save_tensors(stem, tensors: dict[str, object], meta: dict | None = None) -> Path:
    """Write a container; returns the manifest path."""
    manifest_path, buffer_path = _paths(stem)
    entries = []
    offset = 0
    with open(buffer_path, "wb") as fh:
        for name, value in tensors.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            precision = str(arr.dtype)
            if precision not in _PRECISIONS:
                raise ValueError(f"{name}: unsupported precision {precision}")
            raw = np.ascontiguousarray(arr, dtype=_PRECISIONS[precision]).tobytes()
            fh.write(raw)
            entries.append(
                {"name": name, "shape": list(arr.shape), "precision": precision, "offset": offset, "nbytes": len(raw)}
            )
            offset += len(raw)
    manifest = {
        "schema": SCHEMA_VERSION,
        "buffer": buffer_path.name,
        "byteorder": "little",
        "tensors": entries,
        "meta": meta or {},
    }
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest_path


def load_tensors(stem) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path, _ = _paths(stem)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported container schema {manifest.get('schema')}")
    raw = (manifest_path.parent / manifest["buffer"]).read_bytes()
    out = {}
    for e in manifest["tensors"]:
        dtype = np.dtype(_PRECISIONS[e["precision"]])
        chunk = raw[e["offset"]:e["offset"] + e["nbytes"]]
        out[e["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(e["shape"]).astype(dtype.newbyteorder("="))
    return out, manifest.get("meta", {})


def save_model(stem, model: Model) -> Path:
    meta = {"spec": format_kv(spec_to_kv(model.spec)), "enabled": [bool(e) for e in model.enabled]}
    return save_tensors(stem, model.params, meta)


def load_model(stem) -> Model:
    arrays, meta = load_tensors(stem)
    spec = spec_from_kv(parse_kv(meta["spec"]))
    params = {k: Tensor(v) for k, v in arrays.items()}
    return Model(spec, params, tuple(meta.get("enabled", ())))
