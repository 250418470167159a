"""Head redundancy and head efficiency tools.

Efficiency measures count free embedding parameters per constrained
dimension (``G1``/``L1``) or per constrained relationship (``G2``/``L2``)
for a toy task: two source maps ``i, j`` must be routed into a target map.
A global head sees the whole ``H*W`` grid; ``n`` local heads each see one
section, of which ``A`` can activate one of the two maps, ``B`` both and
``C`` neither.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .attention import BranchTrace, lhc_branch
from .backbone import Model, init_block_params, tiny_forward
from .tensor import ConfigError

REGION_COLUMNS = ("A", "B", "C", "G1", "L1", "G2", "L2", "local_wins_dims", "local_wins_relations")


@dataclass(frozen=True)
class EfficiencyPoint:
    H: int
    W: int
    d: int
    n: int
    A: int
    B: int
    C_count: int = 0

    def __post_init__(self):
        if min(self.H, self.W, self.d, self.n) < 1:
            raise ConfigError(f"H, W, d, n must be positive: {self}")
        if min(self.A, self.B, self.C_count) < 0 or self.A + self.B + self.C_count != self.n:
            raise ConfigError(f"A + B + C must equal n with nonnegative terms: {self}")


@dataclass(frozen=True)
class Efficiency:
    G1: Fraction
    G2: Fraction
    L1: Fraction
    L2: Fraction


def efficiency_measures(pt: EfficiencyPoint) -> Efficiency:
    """Exact rational values of the four measures."""
    if pt.A + pt.B == 0:
        raise ConfigError("L1/L2 undefined when no section can activate (A + B = 0)")
    hw, d = pt.H * pt.W, pt.d
    local = Fraction(hw, pt.n)
    g1 = Fraction(hw * d) / (6 * (hw + d))
    g2 = Fraction(1, 6)
    single = local * d / (2 * (local + d))
    double = local * d / (6 * (local + d))
    l1 = (pt.A * single + pt.B * double) / (pt.A + pt.B)
    l2 = (Fraction(pt.A, 2) + Fraction(pt.B, 6)) / (pt.A + pt.B)
    return Efficiency(g1, g2, l1, l2)


def region_scan(H: int, W: int, n: int, d: int) -> list[dict]:
    """All splits with ``1 <= A + B <= n``; ``C`` takes the remainder."""
    rows = []
    for a, b in itertools.product(range(n + 1), repeat=2):
        if not 1 <= a + b <= n:
            continue
        e = efficiency_measures(EfficiencyPoint(H, W, d, n, a, b, n - a - b))
        rows.append(
            {
                "A": a,
                "B": b,
                "C": n - a - b,
                "G1": e.G1,
                "L1": e.L1,
                "G2": e.G2,
                "L2": e.L2,
                "local_wins_dims": e.L1 > e.G1,
                "local_wins_relations": e.L2 > e.G2,
            }
        )
    return rows


def region_csv(rows: list[dict]) -> str:
    """CSV with columns ``A,B,C,G1,L1,G2,L2,local_wins_dims,local_wins_relations``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REGION_COLUMNS)
    for r in rows:
        writer.writerow(
            [r["A"], r["B"], r["C"]]
            + [f"{float(r[k]):.12g}" for k in ("G1", "L1", "G2", "L2")]
            + [int(r["local_wins_dims"]), int(r["local_wins_relations"])]
        )
    return buf.getvalue()


# ---------------------------------------------------------------------------
# inter-head correlation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrelationResult:
    mean: float
    matrix: np.ndarray
    pairs: int
    undefined: int


def pairwise_head_correlation(head_outputs) -> CorrelationResult:
    """Mean Pearson correlation over unordered head pairs.

    Each entry of ``head_outputs`` is flattened. Pairs involving a
    zero-variance head are undefined: they are left out of the mean and
    counted in ``undefined``.
    """
    flat = np.stack([np.asarray(h, dtype=np.float64).ravel() for h in head_outputs])
    n = flat.shape[0]
    if n < 2:
        raise ConfigError("correlation needs at least two heads")
    centered = flat - flat.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    matrix = np.full((n, n), np.nan)
    values = []
    undefined = 0
    for i, j in itertools.combinations(range(n), 2):
        if norms[i] == 0 or norms[j] == 0:
            undefined += 1
            continue
        r = float(np.clip(centered[i] @ centered[j] / (norms[i] * norms[j]), -1.0, 1.0))
        matrix[i, j] = matrix[j, i] = r
        values.append(r)
    np.fill_diagonal(matrix, 1.0)
    mean = float(np.mean(values)) if values else float("nan")
    return CorrelationResult(mean, matrix, len(values), undefined)


def block_head_outputs(model: Model, probe_batch, block_index: int) -> list[np.ndarray]:
    """Pre-merge per-head outputs ``A_h`` of one block over a probe batch."""
    _check_index(model, block_index)
    taps: dict = {}
    tiny_forward(model, probe_batch, taps=taps)
    trace = BranchTrace()
    cfg = model.spec.insertions[block_index - 1].config
    lhc_branch(taps[f"block{block_index}.input"], cfg, model.block_weights(block_index), trace)
    return [h.numpy() for h in trace.heads]


def head_output_correlation(model: Model, probe_batch, block_index: int = 1) -> CorrelationResult:
    return pairwise_head_correlation(block_head_outputs(model, probe_batch, block_index))


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

ABLATION_MODES = ("switch_off", "detrain", "reinit_seed")


def _check_index(model: Model, block_index: int) -> None:
    if not 1 <= block_index <= len(model.spec.insertions):
        raise IndexError(
            f"block index {block_index} out of range 1..{len(model.spec.insertions)}"
        )


def ablate_block(model: Model, block_index: int, mode: str = "switch_off", seed: int | None = None) -> Model:
    """Return a modified copy; the input model is untouched.

    ``switch_off`` turns the block into the identity. ``detrain`` restores the
    block's seeded initial weights. ``reinit_seed`` draws fresh initial
    weights from ``seed``.
    """
    _check_index(model, block_index)
    if mode not in ABLATION_MODES:
        raise ConfigError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
    if mode == "switch_off":
        enabled = list(model.enabled)
        enabled[block_index - 1] = False
        return replace(model, enabled=tuple(enabled))
    spec = model.spec if mode == "detrain" else replace(model.spec, seed=model.spec.seed if seed is None else seed)
    dtype = next(iter(model.params.values())).precision
    fresh = init_block_params(spec, block_index, dtype)
    params = dict(model.params)
    for name, t in fresh.items():
        if name.endswith(".gate"):
            continue
        params[name] = t
    return model.with_params(params)


def restore_block(model: Model, block_index: int) -> Model:
    """Re-enable a switched-off block."""
    _check_index(model, block_index)
    enabled = list(model.enabled)
    enabled[block_index - 1] = True
    return replace(model, enabled=tuple(enabled))
