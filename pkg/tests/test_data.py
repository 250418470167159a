import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lhcnet.data import (
    EMOTIONS,
    N_PIXELS,
    AugmentConfig,
    FerParseError,
    FerRecord,
    PreprocessConfig,
    TtaConfig,
    TtaPlan,
    Transform,
    apply_transform,
    augment,
    class_counts,
    gray_to_rgb,
    identity_plan,
    parse_fer_csv,
    preprocess_pixels,
    preprocess_records,
    quantize_truncate,
    record_rng,
    resize_bilinear,
    synthetic_records,
    tta_aggregate,
    tta_enumerate,
    tta_predict,
    write_fer_csv,
)
from lhcnet.tensor import ConfigError


def reference_resize(img, oh, ow):
    """Scalar half-pixel bilinear resize with edge clamping."""
    h, w = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        y = min(max((i + 0.5) * h / oh - 0.5, 0.0), h - 1)
        y0 = int(math.floor(y))
        y1 = min(y0 + 1, h - 1)
        for j in range(ow):
            x = min(max((j + 0.5) * w / ow - 0.5, 0.0), w - 1)
            x0 = int(math.floor(x))
            x1 = min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                         + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    return out


def csv_row(label, pixels, usage):
    return f"{label},{' '.join(str(int(p)) for p in pixels)},{usage}\n"


# --- parsing ---


def test_parse_single_row():
    text = "emotion,pixels,Usage\n" + csv_row(0, np.zeros(N_PIXELS), "Training")
    out = parse_fer_csv(io.StringIO(text))
    (rec,) = out["Training"]
    assert rec.label == 0 and rec.split == "Training"
    assert rec.pixels.shape == (48, 48) and not rec.pixels.any()
    assert out["PublicTest"] == [] and out["PrivateTest"] == []


def test_parse_without_header():
    text = csv_row(3, np.full(N_PIXELS, 7), "PrivateTest")
    assert parse_fer_csv(io.StringIO(text))["PrivateTest"][0].label == 3


def test_truncated_pixels_name_the_row():
    text = (
        "emotion,pixels,Usage\n"
        + csv_row(1, np.ones(N_PIXELS), "Training")
        + csv_row(2, np.ones(N_PIXELS - 5), "Training")
    )
    with pytest.raises(FerParseError, match="row 3") as exc:
        parse_fer_csv(io.StringIO(text))
    assert exc.value.errors == [(3, f"expected {N_PIXELS} pixel values, got {N_PIXELS - 5}")]


def test_all_malformed_rows_itemized():
    good = csv_row(1, np.ones(N_PIXELS), "Training")
    text = good + "1,2\n" + csv_row(4, np.ones(N_PIXELS), "Validation") + csv_row(9, np.ones(N_PIXELS), "Training") + good
    with pytest.raises(FerParseError) as exc:
        parse_fer_csv(io.StringIO(text))
    rows = [n for n, _ in exc.value.errors]
    assert rows == [2, 3, 4]
    assert "3 fields" in exc.value.errors[0][1] and "usage" in exc.value.errors[1][1]


def test_record_invariants():
    with pytest.raises(ValueError):
        FerRecord(7, np.zeros(N_PIXELS))
    with pytest.raises(ValueError):
        FerRecord(0, np.zeros(N_PIXELS - 1))


def test_parse_serialize_round_trip():
    recs = synthetic_records(12, seed=3) + synthetic_records(5, seed=4, split="PublicTest")
    buf = io.StringIO()
    write_fer_csv(recs, buf)
    first = parse_fer_csv(io.StringIO(buf.getvalue()))
    again = io.StringIO()
    write_fer_csv([r for split in first.values() for r in split], again)
    assert first["Training"] == recs[:12] and first["PublicTest"] == recs[12:]
    assert again.getvalue() == buf.getvalue()


def test_class_counts():
    recs = synthetic_records(15)
    counts = class_counts(recs)
    assert list(counts) == list(EMOTIONS)
    assert counts["anger"] == 3 and counts["disgust"] == 2 and sum(counts.values()) == 15


# --- resize / colour / truncation ---


def test_resize_constant():
    assert np.allclose(resize_bilinear(np.full((48, 48), 93.0), 224), 93.0, atol=1e-12)


def test_resize_checkerboard_center():
    out = resize_bilinear(np.array([[0.0, 100.0], [100.0, 0.0]]), 4)
    center = out[1:3, 1:3]
    assert np.allclose(center, [[37.5, 62.5], [62.5, 37.5]])
    assert center.mean() == pytest.approx(50.0)
    assert np.allclose(out, reference_resize(np.array([[0.0, 100.0], [100.0, 0.0]]), 4, 4))


@pytest.mark.parametrize("shape,out", [((5, 7), (11, 4)), ((48, 48), (20, 20)), ((3, 3), (9, 9))])
def test_resize_matches_reference(shape, out):
    img = np.random.default_rng(0).uniform(0, 255, size=shape)
    assert np.allclose(resize_bilinear(img, out), reference_resize(img, *out), atol=1e-10)


@settings(max_examples=30)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.floats(0, 255)),
       st.integers(1, 20))
def test_resize_stays_within_extrema(img, size):
    out = resize_bilinear(img, size)
    assert out.min() >= img.min() - 1e-9 and out.max() <= img.max() + 1e-9


def test_resize_same_size_is_identity():
    img = np.random.default_rng(1).uniform(0, 255, size=(6, 6))
    assert np.allclose(resize_bilinear(img, 6), img, atol=1e-12)


def test_gray_to_rgb():
    img = np.arange(12).reshape(3, 4)
    rgb = gray_to_rgb(img)
    assert rgb.shape == (3, 4, 3)
    assert all(np.array_equal(rgb[:, :, k], img) for k in range(3))


def test_truncation_examples():
    assert quantize_truncate(np.array([3.7, 3.0, 255.9, 300.0, 0.2])).tolist() == [3, 3, 255, 255, 0]
    with pytest.raises(ValueError):
        quantize_truncate(np.array([1.0, -0.5]))
    with pytest.raises(ValueError):
        quantize_truncate(np.array([np.nan]))


def test_truncation_shifts_mean_by_half():
    field = np.random.default_rng(0).uniform(0, 255, size=200_000)
    shift = field.mean() - quantize_truncate(field).astype(float).mean()
    assert shift == pytest.approx(0.5, abs=0.01)


def test_preprocess_is_pure_and_shaped():
    px = synthetic_records(1, seed=2)[0].pixels
    a, b = preprocess_pixels(px), preprocess_pixels(px)
    assert a.dtype == np.uint8 and a.shape == (224, 224, 3)
    assert np.array_equal(a, b)
    small = preprocess_pixels(px, PreprocessConfig(size=16, rgb=False))
    assert small.shape == (16, 16, 1)
    assert np.array_equal(preprocess_pixels(px, PreprocessConfig(size=48))[:, :, 0], px)


# --- augmentation ---


def test_zero_ranges_are_identity():
    img = np.random.default_rng(0).uniform(0, 255, size=(16, 16, 3))
    assert np.array_equal(augment(img, AugmentConfig(), record_rng(0, 1)), img)


def test_augment_deterministic():
    img = np.random.default_rng(0).uniform(0, 255, size=(16, 16, 3))
    cfg = AugmentConfig(rotation_deg=30, shift_frac=0.1, zoom_frac=0.1, hflip=True, seed=4)
    a = augment(img, cfg, record_rng(7, 2, 3))
    b = augment(img, cfg, record_rng(7, 2, 3))
    c = augment(img, cfg, record_rng(7, 2, 4))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_quarter_turn_matches_index_permutation():
    img = np.arange(35.0).reshape(7, 5)[:5, :5] ** 1.5
    out = apply_transform(img, Transform(rotation=math.pi / 2))
    assert np.allclose(out, np.rot90(img, 1), atol=1e-6)
    back = apply_transform(img, Transform(rotation=-math.pi / 2))
    assert np.allclose(back, np.rot90(img, -1), atol=1e-6)


def test_flip_and_integer_shift():
    img = np.random.default_rng(1).uniform(size=(6, 8))
    assert np.array_equal(apply_transform(img, Transform(flip=True)), img[:, ::-1])
    shifted = apply_transform(img, Transform(dx=2, dy=-1))
    want = np.zeros_like(img)
    want[:-1, 2:] = img[1:, :-2]
    assert np.allclose(shifted, want, atol=1e-12)


def test_zoom_magnifies_about_center():
    img = np.zeros((9, 9))
    img[4, 4] = 1.0
    img[4, 6] = 1.0
    out = apply_transform(img, Transform(zoom=2.0))
    assert out[4, 4] == pytest.approx(1.0)
    assert out[4, 8] == pytest.approx(1.0)
    assert out[4, 6] == pytest.approx(0.0)


def test_augment_ranges_validated():
    with pytest.raises(ConfigError):
        AugmentConfig(rotation_deg=-1)


# --- TTA ---


def test_tta_plan_constants():
    plan = tta_enumerate()
    assert len(plan) == 60
    assert sum(plan.weights) == 62
    ids = [k for k, t in enumerate(plan.transforms) if t.is_identity]
    # flip no, dx 0, dy 0, rot 0: position 9 + 3 + 1 in the first batch
    assert ids == [13] and plan.weights[13] == 3
    assert sorted(set(plan.weights)) == [1.0, 3.0]
    assert len(set(plan.transforms)) == 60
    assert tta_enumerate() == plan


def test_tta_plan_covers_both_batches():
    plan = tta_enumerate()
    shifts = {(t.dx, t.dy) for t in plan.transforms}
    assert shifts == {(dx, dy) for dx in (-10.0, 0.0, 10.0) for dy in (-10.0, 0.0, 10.0)}
    zoomed = [t for t in plan.transforms if t.zoom != 1.0]
    assert len(zoomed) == 6 and all(t.zoom == 1.1 and t.dx == t.dy == 0 for t in zoomed)
    assert {t.rotation for t in plan.transforms} == {-0.4, 0.0, 0.4}


def test_plan_weights_validated():
    with pytest.raises(ConfigError):
        TtaPlan((Transform(),), (0.0,))
    with pytest.raises(ConfigError):
        TtaPlan((), ())


def test_identity_plan_equals_plain_inference():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(48, 7))
    images = rng.uniform(size=(5, 4, 4, 3))
    predict = lambda b: b.reshape(len(b), -1) @ w  # noqa: E731
    probs, preds = tta_predict(predict, images, identity_plan())
    logits = predict(images)
    want = np.exp(logits - logits.max(1, keepdims=True))
    want /= want.sum(1, keepdims=True)
    assert np.allclose(probs, want, atol=1e-15)
    assert np.array_equal(preds, logits.argmax(1))


def test_aggregate_of_equal_vectors_is_unchanged():
    logits = np.random.default_rng(1).normal(size=(3, 7))
    plan = tta_enumerate()
    probs, preds = tta_aggregate(np.broadcast_to(logits, (len(plan), 3, 7)), plan)
    want = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    assert np.allclose(probs, want, atol=1e-14)
    assert np.array_equal(preds, want.argmax(1))


def test_aggregate_weights_identity_three_times():
    plan = TtaPlan((Transform(), Transform(flip=True)), (3.0, 1.0))
    sets = np.array([[[0.0, 0.0]], [[50.0, -50.0]]])
    probs, _ = tta_aggregate(sets, plan)
    assert np.allclose(probs, [[(3 * 0.5 + 1.0) / 4, (3 * 0.5) / 4]], atol=1e-12)


def test_aggregate_count_mismatch():
    with pytest.raises(ValueError):
        tta_aggregate(np.zeros((2, 1, 7)), identity_plan())


def test_tta_deterministic_and_input_independent_plan():
    rng = np.random.default_rng(2)
    images = rng.uniform(0, 255, size=(2, 24, 24, 3))
    w = rng.normal(size=(24 * 24 * 3, 7)) * 1e-3
    predict = lambda b: b.reshape(len(b), -1) @ w  # noqa: E731
    a = tta_predict(predict, images, tta_enumerate())
    b = tta_predict(predict, images, tta_enumerate())
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert tta_enumerate(TtaConfig()) == tta_enumerate()


def test_preprocess_records_batch():
    recs = synthetic_records(4, seed=1)
    split = preprocess_records(recs, PreprocessConfig(size=16))
    assert split.images.shape == (4, 16, 16, 3) and split.labels.tolist() == [0, 1, 2, 3]
    empty = preprocess_records([], PreprocessConfig(size=16))
    assert empty.images.shape == (0, 16, 16, 3) and len(empty) == 0
