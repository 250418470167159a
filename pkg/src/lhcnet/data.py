"""FER2013 ingestion, preprocessing, augmentation and test-time augmentation.

Image arrays are ``(H, W)`` or ``(H, W, C)`` with pixel centers on integer
coordinates. Every resampling step is bilinear:

* :func:`resize_bilinear` uses the half-pixel-center convention
  ``src = (dst + 0.5) * in / out - 0.5`` with edge clamping.
* geometric transforms (flip, shift, zoom, rotation about the image
  center) sample the inverse map and fill outside pixels with zero.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, TextIO

import numpy as np

from .tensor import ConfigError

EMOTIONS = ("anger", "disgust", "fear", "happiness", "sadness", "surprise", "neutral")
SPLITS = ("Training", "PublicTest", "PrivateTest")
IMAGE_SIDE = 48
N_PIXELS = IMAGE_SIDE * IMAGE_SIDE


@dataclass(frozen=True, eq=False)
class FerRecord:
    label: int
    pixels: np.ndarray
    split: str = "Training"

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.size != N_PIXELS:
            raise ValueError(f"expected {N_PIXELS} pixels, got {px.size}")
        if not 0 <= self.label < len(EMOTIONS):
            raise ValueError(f"label {self.label} out of range 0..{len(EMOTIONS) - 1}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        px = px.astype(np.uint8).reshape(IMAGE_SIDE, IMAGE_SIDE)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    def __eq__(self, other):
        if not isinstance(other, FerRecord):
            return NotImplemented
        return (
            self.label == other.label
            and self.split == other.split
            and np.array_equal(self.pixels, other.pixels)
        )


class FerParseError(ValueError):
    """Raised with every malformed row; ``errors`` holds ``(line, message)``."""

    def __init__(self, errors: list[tuple[int, str]]):
        self.errors = errors
        lines = "\n".join(f"  row {n}: {msg}" for n, msg in errors[:20])
        more = f"\n  ... {len(errors) - 20} more" if len(errors) > 20 else ""
        super().__init__(f"{len(errors)} malformed row(s):\n{lines}{more}")


def parse_fer_csv(stream: TextIO) -> dict[str, list[FerRecord]]:
    """Read ``emotion,pixels,Usage`` rows; an optional header line is skipped."""
    out: dict[str, list[FerRecord]] = {s: [] for s in SPLITS}
    errors: list[tuple[int, str]] = []
    for line_no, row in enumerate(csv.reader(stream), start=1):
        if not row:
            continue
        if line_no == 1 and row[0].strip().lower() == "emotion":
            continue
        if len(row) != 3:
            errors.append((line_no, f"expected 3 fields, got {len(row)}"))
            continue
        label_s, pixels_s, usage = (f.strip() for f in row)
        try:
            label = int(label_s)
        except ValueError:
            errors.append((line_no, f"label {label_s!r} is not an integer"))
            continue
        if not 0 <= label < len(EMOTIONS):
            errors.append((line_no, f"label {label} out of range 0..6"))
            continue
        if usage not in SPLITS:
            errors.append((line_no, f"unknown usage tag {usage!r}"))
            continue
        fields = pixels_s.split()
        if len(fields) != N_PIXELS:
            errors.append((line_no, f"expected {N_PIXELS} pixel values, got {len(fields)}"))
            continue
        try:
            px = np.array([int(v) for v in fields])
        except ValueError:
            errors.append((line_no, "non-integer pixel value"))
            continue
        if px.min() < 0 or px.max() > 255:
            errors.append((line_no, "pixel value outside 0..255"))
            continue
        out[usage].append(FerRecord(label, px, usage))
    if errors:
        raise FerParseError(errors)
    return out


def write_fer_csv(records: Iterable[FerRecord], stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["emotion", "pixels", "Usage"])
    for r in records:
        writer.writerow([r.label, " ".join(map(str, r.pixels.ravel().tolist())), r.split])


def class_counts(records: Iterable[FerRecord]) -> dict[str, int]:
    counts = np.bincount([r.label for r in records], minlength=len(EMOTIONS))
    return dict(zip(EMOTIONS, counts.tolist()))


# ---------------------------------------------------------------------------
# pixel operations
# ---------------------------------------------------------------------------


def _as_hwc(img) -> tuple[np.ndarray, bool]:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        return arr[:, :, None], True
    if arr.ndim == 3:
        return arr, False
    raise ValueError(f"expected (H, W) or (H, W, C) image, got shape {arr.shape}")


def _gather_bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample an (H, W, C) image at float coordinates; outside neighbours read 0."""
    h, w, _ = img.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = (rows - r0)[..., None]
    fc = (cols - c0)[..., None]
    out = np.zeros(rows.shape + (img.shape[2],))
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = img[np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)]
            out += np.where(valid[..., None], vals, 0.0) * wr * wc
    return out


def resize_bilinear(img, out_size: int | tuple[int, int]) -> np.ndarray:
    """Bilinear resize, half-pixel centers, clamped at the borders."""
    arr, squeeze = _as_hwc(img)
    oh, ow = (out_size, out_size) if isinstance(out_size, int) else out_size
    if oh < 1 or ow < 1:
        raise ValueError(f"target size must be positive, got {(oh, ow)}")
    h, w, _ = arr.shape
    ys = np.clip((np.arange(oh) + 0.5) * h / oh - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow) + 0.5) * w / ow - 0.5, 0, w - 1)
    rows, cols = np.meshgrid(ys, xs, indexing="ij")
    out = _gather_bilinear(arr, rows, cols)
    return out[:, :, 0] if squeeze else out


def gray_to_rgb(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    return np.repeat(arr[:, :, None], 3, axis=2)


def quantize_truncate(img) -> np.ndarray:
    """Floor toward zero and clamp to 0..255 (uint8)."""
    arr = np.asarray(img, dtype=np.float64)
    if np.isnan(arr).any() or (arr < 0).any():
        raise ValueError("truncation input must be nonnegative and finite")
    return np.minimum(np.floor(arr), 255).astype(np.uint8)


@dataclass(frozen=True)
class PreprocessConfig:
    size: int = 224
    rgb: bool = True


def preprocess_pixels(pixels, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """48x48 grey -> bilinear resize -> truncation -> optional RGB; uint8 (S, S, C)."""
    img = np.asarray(pixels, dtype=np.float64).reshape(IMAGE_SIDE, IMAGE_SIDE)
    if cfg.size != IMAGE_SIDE:
        img = resize_bilinear(img, cfg.size)
    q = quantize_truncate(img)
    return gray_to_rgb(q) if cfg.rgb else q[:, :, None]


# ---------------------------------------------------------------------------
# geometric transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Transform:
    """Horizontal flip, then shift by ``(dx, dy)`` pixels, zoom and rotation
    (radians, counterclockwise) about the image center."""

    flip: bool = False
    dx: float = 0.0
    dy: float = 0.0
    rotation: float = 0.0
    zoom: float = 1.0

    @property
    def is_identity(self) -> bool:
        return not self.flip and self.dx == 0 and self.dy == 0 and self.rotation == 0 and self.zoom == 1

    def matrix(self, h: int, w: int) -> np.ndarray:
        """Forward map on homogeneous ``(row, col, 1)`` coordinates."""
        cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
        flip = np.array([[1, 0, 0], [0, -1, w - 1], [0, 0, 1]], dtype=float) if self.flip else np.eye(3)
        shift = np.array([[1, 0, self.dy], [0, 1, self.dx], [0, 0, 1]], dtype=float)
        to_c = np.array([[1, 0, -cr], [0, 1, -cc], [0, 0, 1]], dtype=float)
        from_c = np.array([[1, 0, cr], [0, 1, cc], [0, 0, 1]], dtype=float)
        cos, sin = math.cos(self.rotation), math.sin(self.rotation)
        rz = np.array([[cos, -sin, 0], [sin, cos, 0], [0, 0, 1]]) @ np.diag([self.zoom, self.zoom, 1.0])
        return from_c @ rz @ to_c @ shift @ flip


def apply_transform(img, t: Transform) -> np.ndarray:
    arr, squeeze = _as_hwc(img)
    if t.is_identity:
        out = arr.copy()
    else:
        h, w, _ = arr.shape
        inv = np.linalg.inv(t.matrix(h, w))
        rows, cols = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
        src_r = inv[0, 0] * rows + inv[0, 1] * cols + inv[0, 2]
        src_c = inv[1, 0] * rows + inv[1, 1] * cols + inv[1, 2]
        # snap values that are integral up to rounding so exact permutations stay exact
        src_r = np.where(np.abs(src_r - np.round(src_r)) < 1e-9, np.round(src_r), src_r)
        src_c = np.where(np.abs(src_c - np.round(src_c)) < 1e-9, np.round(src_c), src_c)
        out = _gather_bilinear(arr, src_r, src_c)
    return out[:, :, 0] if squeeze else out


@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: float = 0.0
    shift_frac: float = 0.0
    zoom_frac: float = 0.0
    hflip: bool = False
    seed: int = 0

    def __post_init__(self):
        if min(self.rotation_deg, self.shift_frac, self.zoom_frac) < 0:
            raise ConfigError(f"augmentation ranges must be nonnegative: {self}")

    @property
    def is_identity(self) -> bool:
        return self.rotation_deg == 0 and self.shift_frac == 0 and self.zoom_frac == 0 and not self.hflip


def record_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream per ``(seed, keys...)``, e.g. ``(seed, epoch, index)``."""
    return np.random.default_rng([seed, *keys])


def sample_transform(shape: tuple[int, int], cfg: AugmentConfig, rng: np.random.Generator) -> Transform:
    h, w = shape
    rot = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    dx = rng.uniform(-cfg.shift_frac, cfg.shift_frac) * w
    dy = rng.uniform(-cfg.shift_frac, cfg.shift_frac) * h
    zoom = rng.uniform(1.0 - cfg.zoom_frac, 1.0 + cfg.zoom_frac)
    flip = bool(cfg.hflip and rng.random() < 0.5)
    return Transform(flip=flip, dx=dx, dy=dy, rotation=rot, zoom=zoom)


def augment(img, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.is_identity:
        return np.array(img, dtype=np.float64)
    arr = np.asarray(img)
    return apply_transform(arr, sample_transform(arr.shape[:2], cfg, rng))


# ---------------------------------------------------------------------------
# test-time augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TtaConfig:
    shift_pixels: float = 10.0
    rotation: float = 0.4
    zoom: float = 1.1
    identity_weight: float = 3.0


@dataclass(frozen=True)
class TtaPlan:
    transforms: tuple[Transform, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if not self.transforms or len(self.transforms) != len(self.weights):
            raise ConfigError("plan needs one weight per transform and at least one transform")
        if min(self.weights) <= 0:
            raise ConfigError("plan weights must be positive")

    def __len__(self) -> int:
        return len(self.transforms)


def identity_plan() -> TtaPlan:
    return TtaPlan((Transform(),), (1.0,))


def tta_enumerate(cfg: TtaConfig = TtaConfig()) -> TtaPlan:
    """Flip x shift x rotation, then flip x zoom x rotation; exact duplicates dropped."""
    s, r = cfg.shift_pixels, cfg.rotation
    rotations = (-r, 0.0, r)
    seen: list[Transform] = []
    for flip in (False, True):
        for dx in (-s, 0.0, s):
            for dy in (-s, 0.0, s):
                for rot in rotations:
                    seen.append(Transform(flip, dx, dy, rot, 1.0))
    for flip in (False, True):
        for zoom in (1.0, cfg.zoom):
            for rot in rotations:
                seen.append(Transform(flip, 0.0, 0.0, rot, zoom))
    unique = list(dict.fromkeys(seen))
    weights = tuple(cfg.identity_weight if t.is_identity else 1.0 for t in unique)
    return TtaPlan(tuple(unique), weights)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def tta_aggregate(logit_sets, plan: TtaPlan) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean of per-transform class probabilities and its argmax.

    ``logit_sets`` has shape ``(len(plan), B, K)``.
    """
    logits = np.asarray(logit_sets, dtype=np.float64)
    weights = np.asarray(plan.weights, dtype=np.float64)
    if logits.shape[0] != len(weights):
        raise ValueError(f"{logits.shape[0]} logit sets for a plan of {len(weights)} transforms")
    if weights.sum() == 0:
        raise ValueError("weight sum is zero")
    probs = np.tensordot(weights, _softmax(logits), axes=1) / weights.sum()
    return probs, probs.argmax(axis=-1)


def tta_predict(
    predict: Callable[[np.ndarray], np.ndarray], images: np.ndarray, plan: TtaPlan
) -> tuple[np.ndarray, np.ndarray]:
    """Run ``predict`` (batch -> logits) on every transformed copy of ``images``."""
    sets = [
        predict(np.stack([apply_transform(img, t) for img in images])) for t in plan.transforms
    ]
    return tta_aggregate(np.stack(sets), plan)


# ---------------------------------------------------------------------------
# synthetic records
# ---------------------------------------------------------------------------


def synthetic_records(n: int, seed: int = 0, split: str = "Training", noise: float = 20.0) -> list[FerRecord]:
    """Class-dependent 48x48 images for desk-scale runs.

    Class ``k`` places a bright Gaussian blob at one of seven fixed spots on a
    mid-grey face-like ellipse, plus pixel noise. Labels cycle over classes.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:IMAGE_SIDE, 0:IMAGE_SIDE].astype(float)
    c = (IMAGE_SIDE - 1) / 2
    face = 90.0 * (((yy - c) / 22) ** 2 + ((xx - c) / 17) ** 2 < 1)
    angles = np.linspace(0, 2 * np.pi, len(EMOTIONS), endpoint=False)
    records = []
    for i in range(n):
        label = i % len(EMOTIONS)
        cy = c + 13 * math.sin(angles[label]) + rng.normal(0, 1.0)
        cx = c + 13 * math.cos(angles[label]) + rng.normal(0, 1.0)
        blob = 140.0 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 4.0**2))
        img = face + blob + rng.normal(0, noise, size=face.shape) + 20.0
        records.append(FerRecord(label, np.clip(img, 0, 255).astype(np.uint8), split))
    return records


@dataclass
class SplitArrays:
    """Preprocessed images ``(N, S, S, C)`` uint8 and labels ``(N,)``."""

    images: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)


def preprocess_records(records: list[FerRecord], cfg: PreprocessConfig = PreprocessConfig()) -> SplitArrays:
    images = np.stack([preprocess_pixels(r.pixels, cfg) for r in records]) if records else np.zeros(
        (0, cfg.size, cfg.size, 3 if cfg.rgb else 1), dtype=np.uint8
    )
    labels = np.array([r.label for r in records], dtype=np.int64)
    return SplitArrays(images, labels)
