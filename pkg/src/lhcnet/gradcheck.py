"""Central finite-difference gradient checks against the tape."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attention import LhcConfig, LhcWeights, lhc_forward
from .tensor import GradTape, Tensor, backward


def analytic_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    leaves = [Tensor(a, dtype="float64") for a in arrays]
    with GradTape() as tape:
        loss = fn(*leaves)
    return backward(tape, loss, leaves)


def numeric_gradients(
    fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], rel_step: float = 1e-5
) -> list[np.ndarray]:
    """Central differences with step ``rel_step * (1 + |w|)`` per entry."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for k, a in enumerate(base):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            w = flat[i]
            h = rel_step * (1.0 + abs(w))
            flat[i] = w + h
            up = fn(*[Tensor(b) for b in base]).item()
            flat[i] = w - h
            down = fn(*[Tensor(b) for b in base]).item()
            flat[i] = w
            gflat[i] = (up - down) / (2.0 * h)
        out.append(g)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / max(|a|, |b|)`` in the 2-norm; absolute error when both vanish."""
    diff = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    return diff / scale if scale > 1e-10 else diff


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    errors: tuple[float, ...]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def check_gradients(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    tolerance: float = 1e-4,
    name: str = "",
) -> GradCheckResult:
    analytic = analytic_gradients(fn, arrays)
    numeric = numeric_gradients(fn, arrays)
    errors = tuple(relative_error(a, n) for a, n in zip(analytic, numeric))
    return GradCheckResult(name, errors, tolerance)


# ---------------------------------------------------------------------------
# standard suite
# ---------------------------------------------------------------------------

SHAPES_2D = ((2, 3), (4, 4), (3, 5))
SHAPES_MAP = ((3, 3, 2), (4, 5, 1), (2, 4, 5, 3))


def primitive_suite(seed: int = 0, tolerance: float = 1e-4) -> list[GradCheckResult]:
    """Every differentiable primitive on three random shapes each."""
    rng = np.random.default_rng(seed)
    results = []

    def run(name, fn, *arrays):
        results.append(check_gradients(fn, arrays, tolerance, name))

    for shape in SHAPES_2D:
        m, k = shape
        n = m + 1
        probe = rng.normal(size=shape)
        weight = lambda t, p=probe: T.sum(t * T.Tensor(p))  # noqa: E731
        run(f"add{shape}", lambda a, b: weight(a + b), rng.normal(size=shape), rng.normal(size=shape))
        run(f"sub{shape}", lambda a, b: weight(a - b), rng.normal(size=shape), rng.normal(size=shape))
        run(f"mul{shape}", lambda a, b: weight(a * b), rng.normal(size=shape), rng.normal(size=shape))
        run(f"div{shape}", lambda a, b: weight(a / b), rng.normal(size=shape), rng.uniform(1, 2, size=shape))
        run(f"neg{shape}", lambda a: weight(-a), rng.normal(size=shape))
        run(f"matmul{shape}", lambda a, b: T.sum(T.tanh(T.matmul(a, b))), rng.normal(size=(m, k)), rng.normal(size=(k, n)))
        run(f"transpose{shape}", lambda a: T.sum(T.swap_last(a) * T.Tensor(probe.T)), rng.normal(size=shape))
        run(f"reshape{shape}", lambda a: weight(T.reshape(T.reshape(a, (-1,)), shape)), rng.normal(size=shape))
        run(f"exp{shape}", lambda a: weight(T.exp(a)), rng.normal(size=shape))
        run(f"log{shape}", lambda a: weight(T.log(a)), rng.uniform(0.5, 2, size=shape))
        run(f"tanh{shape}", lambda a: weight(T.tanh(a)), rng.normal(size=shape))
        run(f"sigmoid{shape}", lambda a: weight(T.sigmoid(a)), rng.normal(size=shape))
        run(f"relu{shape}", lambda a: weight(T.relu(a)), rng.normal(size=shape) + np.sign(rng.normal(size=shape)) * 0.1)
        run(f"softmax_rows{shape}", lambda a: weight(T.softmax_rows(a)), rng.normal(size=shape))
        run(f"log_softmax_rows{shape}", lambda a: weight(T.log_softmax_rows(a)), rng.normal(size=shape))
        run(f"mean_rows{shape}", lambda a: T.sum(T.tanh(T.mean_rows(a))), rng.normal(size=shape))
        run(f"sum{shape}", lambda a: T.sum(T.tanh(T.sum(a, axis=0))), rng.normal(size=shape))
        run(f"mean{shape}", lambda a: T.sum(T.tanh(T.mean(a, axis=0))), rng.normal(size=shape))
        labels = rng.integers(0, k, size=m)
        run(f"pick{shape}", lambda a: T.sum(T.tanh(T.pick(a, labels))), rng.normal(size=shape))
        run(
            f"split_concat{shape}",
            lambda a: weight(T.concat(list(reversed(T.split(a, shape[0], axis=0))), axis=0)),
            rng.normal(size=shape),
        )

    for shape in SHAPES_MAP:
        probe = rng.normal(size=shape)
        weight = lambda t, p=probe: T.sum(t * T.Tensor(p))  # noqa: E731
        run(f"avg_pool2d_same{shape}", lambda a: weight(T.avg_pool2d_same(a, 3)), rng.normal(size=shape))
        run(f"max_pool2d_same{shape}", lambda a: weight(T.max_pool2d_same(a, 3)), rng.normal(size=shape))
        c = shape[-1]
        f = c + 1
        out_probe = rng.normal(size=shape[:-1] + (f,))
        run(
            f"conv2d_same{shape}",
            lambda a, k, b: T.sum(T.conv2d_same(a, k, b) * T.Tensor(out_probe)),
            rng.normal(size=shape),
            rng.normal(size=(3, 3, c, f)),
            rng.normal(size=(f,)),
        )
    for shape in ((2, 4, 2), (4, 6, 3), (2, 2, 2, 1)):
        run(f"downsample2{shape}", lambda a: T.sum(T.tanh(T.downsample2(a))), rng.normal(size=shape))
    return results


def block_check(seed: int = 0, tolerance: float = 1e-3) -> GradCheckResult:
    """Full LHC block, H=W=4, C=3, n=2, d=2, p=3, s=3, g=1; loss = sum(y * probe)."""
    cfg = LhcConfig(n=2, d=2, p=3, s=3, g=1.0, input_shape=(4, 4, 3))
    rng = np.random.default_rng(seed)
    wts = LhcWeights.init(cfg, seed)
    arrays = [rng.normal(size=cfg.input_shape)] + [
        t.numpy() + 0.1 * rng.normal(size=t.shape) for t in wts.tensors()
    ]
    probe = rng.normal(size=cfg.input_shape)
    names = list(wts.named())

    def fn(x, *flat):
        w = LhcWeights.from_named(dict(zip(names, flat)), cfg.n)
        return T.sum(lhc_forward(x, cfg, w) * T.Tensor(probe))

    return check_gradients(fn, arrays, tolerance, "lhc_block")
