"""Command-line entry point: ``lhcnet <subcommand> [flags]``.

Every subcommand writes only into ``--out`` and leaves a ``manifest.kv``
recording its arguments, so a run can be replayed.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import analysis, backbone, data, gradcheck, storage, train
from .attention import LhcWeights, lhc_forward
from .tensor import ConfigError, ShapeError

SPLIT_CODES = {name: i for i, name in enumerate(data.SPLITS)}


class CliError(Exception):
    """One-line diagnostic; exits with status 2."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _resolve_spec(value: str, seed: int | None = None) -> backbone.BackboneSpec:
    if value == "full":
        spec = backbone.build_full_spec()
    elif value == "full-gated":
        spec = backbone.build_full_spec(gated=True)
    elif value == "tiny":
        spec = backbone.build_tiny_spec()
    else:
        path = Path(value)
        if not path.exists():
            raise CliError(f"spec file not found: {value}")
        spec = storage.spec_from_kv(storage.read_kv(path))
    if seed is not None:
        spec = replace(spec, seed=seed)
    return spec


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def synthetic_dataset(n: int, size: int, seed: int) -> dict[str, data.SplitArrays]:
    cfg = data.PreprocessConfig(size=size, rgb=True)
    counts = {"Training": n, "PublicTest": max(7, n // 4), "PrivateTest": max(7, n // 4)}
    out = {}
    for k, (split, count) in enumerate(counts.items()):
        out[split] = data.preprocess_records(data.synthetic_records(count, seed=seed * 10 + k, split=split), cfg)
    return out


def save_dataset(stem: Path, splits: dict[str, data.SplitArrays]) -> Path:
    images = np.concatenate([s.images for s in splits.values()])
    labels = np.concatenate([s.labels for s in splits.values()])
    codes = np.concatenate([np.full(len(s), SPLIT_CODES[k], dtype=np.int64) for k, s in splits.items()])
    return storage.save_tensors(stem, {"images": images, "labels": labels, "split": codes}, {"kind": "dataset"})


def load_dataset(value: str, size: int, seed: int) -> dict[str, data.SplitArrays]:
    """``synthetic:N``, a FER2013 CSV, or a container stem written by ``ingest``."""
    if value.startswith("synthetic:"):
        return synthetic_dataset(int(value.split(":", 1)[1]), size, seed)
    path = Path(value)
    if path.suffix == ".csv":
        with open(path, newline="") as fh:
            records = data.parse_fer_csv(fh)
        cfg = data.PreprocessConfig(size=size, rgb=True)
        return {k: data.preprocess_records(v, cfg) for k, v in records.items()}
    stem = Path(str(path).removesuffix(".manifest.json"))
    if not Path(str(stem) + ".manifest.json").exists():
        raise CliError(f"dataset not found: {value}")
    arrays, _ = storage.load_tensors(stem)
    return {
        name: data.SplitArrays(arrays["images"][arrays["split"] == code], arrays["labels"][arrays["split"] == code])
        for name, code in SPLIT_CODES.items()
    }


def _model_for(args, spec: backbone.BackboneSpec | None = None) -> backbone.Model:
    if getattr(args, "checkpoint", None):
        return storage.load_model(Path(args.checkpoint.removesuffix(".manifest.json")))
    spec = spec or _resolve_spec(args.spec, args.seed)
    return backbone.init_model(spec)


def _input_size(model: backbone.Model) -> int:
    h, w, _ = model.spec.input_shape
    if h != w:
        raise CliError(f"square model input required, got {model.spec.input_shape}")
    return h


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_check_shapes(args, out: Path) -> int:
    spec = _resolve_spec(args.spec, args.seed)
    rng = np.random.default_rng(args.seed)
    rows, ok = [], True
    for i, ins in enumerate(spec.insertions, start=1):
        x = rng.normal(size=ins.config.input_shape)
        y = lhc_forward(x, ins.config, LhcWeights.init(ins.config, args.seed))
        same = y.shape == x.shape
        ok &= same
        rows.append([i, ins.position, "x".join(map(str, x.shape)), "x".join(map(str, y.shape)), int(same)])
        print(f"block{i} at {ins.position}: {x.shape} -> {y.shape} {'ok' if same else 'MISMATCH'}")
    if spec.is_executable:
        model = backbone.init_model(spec)
        logits = backbone.tiny_forward(model, rng.normal(size=(2, *spec.input_shape)))
        same = logits.shape == (2, spec.num_classes)
        ok &= same
        rows.append([0, "logits", f"2x{'x'.join(map(str, spec.input_shape))}", "x".join(map(str, logits.shape)), int(same)])
        print(f"network: batch of 2 -> logits {logits.shape}")
    _write_csv(out / "shapes.csv", ["block", "position", "input_shape", "output_shape", "ok"], rows)
    if not ok:
        raise CliError("shape preservation violated")
    return 0


def cmd_grad_check(args, out: Path) -> int:
    results = gradcheck.primitive_suite(args.seed) + [gradcheck.block_check(args.seed)]
    rows = [[r.name, f"{r.max_error:.3e}", r.tolerance, int(r.passed)] for r in results]
    _write_csv(out / "gradcheck.csv", ["check", "max_rel_error", "tolerance", "passed"], rows)
    failed = [r for r in results if not r.passed]
    worst = max(results, key=lambda r: r.max_error / r.tolerance)
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed; worst {worst.name} {worst.max_error:.2e}")
    if failed:
        raise CliError(f"gradient check failed: {', '.join(r.name for r in failed)}")
    return 0


def cmd_count_params(args, out: Path) -> int:
    spec = _resolve_spec(args.spec)
    census = backbone.count_params(spec)
    rows = [[f"block{i}", n] for i, n in enumerate(census.per_block, start=1)]
    rows += [
        ["attention", census.attention_only],
        ["gates", census.gates],
        ["backbone", census.backbone_only],
        ["total", census.total],
        ["attention_share", f"{census.attention_share:.6f}"],
    ]
    _write_csv(out / "params.csv", ["item", "value"], rows)
    print(f"total {census.total:,} ({census.total / 1e6:.1f}M)")
    print(f"backbone {census.backbone_only:,}  attention {census.attention_only:,}")
    print(f"attention share {100 * census.attention_share:.1f}%")
    return 0


def cmd_ingest(args, out: Path) -> int:
    if not args.dataset:
        raise CliError("--dataset is required")
    cfg = storage.read_kv(args.config) if args.config else {}
    size = int(cfg.get("size", 224))
    splits = load_dataset(args.dataset, size, args.seed)
    save_dataset(out / "dataset", splits)
    rows = []
    for name, s in splits.items():
        counts = np.bincount(s.labels, minlength=len(data.EMOTIONS))
        rows.append([name, len(s), *counts.tolist()])
        print(f"{name}: {len(s)} images")
    _write_csv(out / "counts.csv", ["split", "total", *data.EMOTIONS], rows)
    return 0


def _datasets(args, model: backbone.Model) -> dict[str, train.Dataset]:
    if not args.dataset:
        raise CliError("--dataset is required")
    splits = load_dataset(args.dataset, _input_size(model), args.seed)
    return {k: train.Dataset.from_split(v) for k, v in splits.items()}


def cmd_train(args, out: Path) -> int:
    kv = storage.read_kv(args.config) if args.config else None
    stages = storage.stages_from_kv(kv) if kv else train.standard_stages()
    if not stages:
        raise CliError("config defines no stages")
    model = _model_for(args)
    sets = _datasets(args, model)
    result = train.run_protocol(model, sets["Training"], sets["PublicTest"], stages, seed=args.seed)
    storage.save_model(out / "model", result.model)
    (out / "history.csv").write_text(train.history_csv(result.stages))
    storage.write_kv(
        out / "result.kv",
        {
            "base_loss": result.base_loss,
            "final_loss": result.final_loss,
            "accepted": result.verdict.accepted,
            "divergent": result.verdict.divergent,
            "stopped_early": tuple(int(h.stopped_early) for h in result.stages),
            "best_epoch": tuple(h.best_epoch for h in result.stages),
        },
    )
    print(f"base loss {result.base_loss:.4f} -> final loss {result.final_loss:.4f}; "
          f"{'accepted' if result.verdict.accepted else 'rejected'}")
    return 0


def _evaluate(args, out: Path, tta: data.TtaPlan | None) -> int:
    model = _model_for(args)
    sets = _datasets(args, model)
    split = sets[args.split]
    if len(split) == 0:
        raise CliError(f"split {args.split} is empty")
    res = train.evaluate(model, split, tta)
    _write_csv(out / "confusion.csv", ["true\\pred", *data.EMOTIONS[: res.confusion.shape[1]]],
               [[data.EMOTIONS[i], *row.tolist()] for i, row in enumerate(res.confusion)])
    _write_csv(out / "probabilities.csv", [f"p{k}" for k in range(res.probabilities.shape[1])],
               [[f"{p:.12g}" for p in row] for row in res.probabilities])
    storage.write_kv(out / "eval.kv", {"split": args.split, "accuracy": res.accuracy,
                                       "tta_transforms": len(tta) if tta else 0})
    print(f"{args.split} accuracy {100 * res.accuracy:.2f}% ({'TTA' if tta else 'no TTA'})")
    return 0


def _plan(value: str) -> data.TtaPlan | None:
    if value == "off":
        return None
    if value == "on":
        return data.tta_enumerate()
    return storage.plan_from_kv(storage.read_kv(value))


def cmd_evaluate(args, out: Path) -> int:
    return _evaluate(args, out, _plan(args.tta or "off"))


def cmd_tta_eval(args, out: Path) -> int:
    plan = _plan(args.tta or "on")
    if plan is None:
        raise CliError("tta-eval needs --tta on or a plan file")
    storage.write_kv(out / "plan.kv", storage.plan_to_kv(plan))
    return _evaluate(args, out, plan)


def cmd_analyze_heads(args, out: Path) -> int:
    model = _model_for(args)
    sets = _datasets(args, model)
    probe = sets[args.split]
    if len(probe) == 0:
        raise CliError(f"split {args.split} is empty")
    idx = args.block_index
    heads = analysis.block_head_outputs(model, probe.images, idx)
    corr = analysis.pairwise_head_correlation(heads) if len(heads) > 1 else None
    ablated = analysis.ablate_block(model, idx, args.mode)
    base = train.evaluate(model, probe).accuracy
    after = train.evaluate(ablated, probe).accuracy
    if corr is not None:
        n = corr.matrix.shape[0]
        _write_csv(out / "head_correlation.csv", ["head_i", "head_j", "pearson"],
                   [[i + 1, j + 1, f"{corr.matrix[i, j]:.12g}"] for i in range(n) for j in range(i + 1, n)])
    storage.write_kv(out / "heads.kv", {
        "block_index": idx,
        "heads": len(heads),
        "mean_correlation": float("nan") if corr is None else corr.mean,
        "undefined_pairs": 0 if corr is None else corr.undefined,
        "mode": args.mode,
        "accuracy": base,
        "ablated_accuracy": after,
    })
    if corr is not None:
        print(f"block{idx}: mean head correlation {corr.mean:.3f} over {corr.pairs} pairs")
    print(f"accuracy {100 * base:.2f}% -> {100 * after:.2f}% after {args.mode}")
    return 0


def cmd_efficiency_scan(args, out: Path) -> int:
    hw = args.height * args.width
    d_exact = args.d_ratio * hw / args.n
    d = int(round(d_exact))
    if d < 1 or abs(d - d_exact) > 1e-9:
        raise CliError(f"d = {d_exact} is not a positive integer; pick compatible sizes")
    rows = analysis.region_scan(args.height, args.width, args.n, d)
    (out / "region.csv").write_text(analysis.region_csv(rows))
    wins = sum(r["local_wins_dims"] for r in rows)
    print(f"H={args.height} W={args.width} n={args.n} d={d}: local heads win on dimensions "
          f"in {wins}/{len(rows)} splits")
    return 0


COMMANDS = {
    "check-shapes": cmd_check_shapes,
    "grad-check": cmd_grad_check,
    "count-params": cmd_count_params,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "tta-eval": cmd_tta_eval,
    "analyze-heads": cmd_analyze_heads,
    "efficiency-scan": cmd_efficiency_scan,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lhcnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="plain-text key/value config")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="lhcnet-out", help="output directory")
        p.add_argument("--dataset", help="FER2013 CSV, ingested container, or synthetic:N")
        p.add_argument("--spec", default="tiny", help="full | full-gated | tiny | path to spec file")
        p.add_argument("--tta", help="on | off | path to plan file")
        p.add_argument("--block-index", type=int, default=1)
        p.add_argument("--mode", default="switch_off", choices=analysis.ABLATION_MODES)
        p.add_argument("--checkpoint", help="model container stem written by train")
        p.add_argument("--split", default="PrivateTest", choices=data.SPLITS)
        if name == "efficiency-scan":
            p.add_argument("--n", type=int, default=8)
            p.add_argument("--d-ratio", type=float, default=0.5, help="d as a fraction of H*W/n")
            p.add_argument("--height", type=int, default=56)
            p.add_argument("--width", type=int, default=56)
    return parser


def _manifest(args, argv, started: str, status: int) -> dict:
    values = {"subcommand": args.command, "argv": " ".join(argv), "seed": args.seed, "out": args.out}
    for key in ("config", "dataset", "spec", "tta", "checkpoint"):
        if getattr(args, key, None):
            values[key] = getattr(args, key)
    values.update({"status": status, "started": started,
                   "finished": datetime.now(timezone.utc).isoformat(timespec="seconds")})
    return values


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    try:
        status = COMMANDS[args.command](args, out)
    except (CliError, ConfigError, ShapeError, FileNotFoundError, KeyError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = 2
    storage.write_kv(out / "manifest.kv", _manifest(args, argv, started, status))
    print(f"[{args.command}] {time.perf_counter() - t0:.2f}s -> {out}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
