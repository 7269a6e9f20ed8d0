"""Command-line entry point: ``pointdg <subcommand> [options]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import scan_bench, write_bench_csv
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, TrainConfig, _coerce, parse_overrides, resolve_config
from .data import DataFormatError, ProtocolError, generate_synthetic_benchmark, load_dataset
from .dds import cds_order, ids_order
from .gradcheck import run_suite
from .model import build_model
from .train import (
    TrainingAborted,
    ablation_csv,
    ablation_presets,
    evaluate,
    render_table,
    run_ablation_matrix,
    run_leave_one_out,
    summarize_ablation,
    write_features,
)

log = logging.getLogger("pointdg")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
INVALID = (ValueError, ConfigError, ProtocolError, DataFormatError, CheckpointError, FileExistsError, FileNotFoundError, KeyError)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this CLI reserves 2 for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file (TrainConfig field names)")
    g = p.add_argument_group("config overrides (take precedence over --config)")
    for f in dataclasses.fields(TrainConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar=f.type.upper(), default=None)


def _config_from(args) -> TrainConfig:
    overrides = {}
    for f in dataclasses.fields(TrainConfig):
        raw = getattr(args, "cfg_" + f.name)
        if raw is not None:
            overrides[f.name] = _coerce(f.name, raw)
    return resolve_config(args.config, overrides)


def _domain_index(datasets, name: str) -> int:
    names = {ds.name: ds.domain_id for ds in datasets}
    if name in names:
        return names[name]
    if name.isdigit() and int(name) in names.values():
        return int(name)
    raise ConfigError(f"unknown domain {name!r}; have {sorted(names)}")


def _progress(quiet: bool):
    if quiet:
        return None

    def report(target, m, acc):
        acc_s = "" if acc != acc else f" acc={acc:.4f}"
        print(f"[{target}] epoch {m.epoch:3d} loss={m.loss:.4f} lr={m.lr:.2e} mask={m.mean_mask:.3f}{acc_s}", flush=True)

    return report


def cmd_gen_data(args) -> int:
    manifest = generate_synthetic_benchmark(
        args.out, args.seed, args.train_per_class, args.test_per_class, force=args.force
    )
    print(json.dumps(manifest["counts"], sort_keys=True))
    return EXIT_OK


def _print_loo(res) -> None:
    for name, acc in res.accuracies.items():
        print(f"{name}: {acc:.4f}")
    print(f"avg: {res.average:.4f}  wall: {res.wall_time:.1f}s")
    if res.run_dir is not None:
        print(f"run dir: {res.run_dir}")


def cmd_train(args) -> int:
    cfg = _config_from(args)
    datasets = load_dataset(args.data)
    target = _domain_index(datasets, args.target)
    res = run_leave_one_out(
        args.data, cfg, args.out, args.run_id or f"train-{args.target}-seed{cfg.seed}", [target], datasets,
        _progress(args.quiet),
    )
    _print_loo(res)
    return EXIT_OK


def cmd_loo(args) -> int:
    cfg = _config_from(args)
    datasets = load_dataset(args.data)
    targets = [_domain_index(datasets, t) for t in args.targets.split(",")] if args.targets else None
    res = run_leave_one_out(args.data, cfg, args.out, args.run_id, targets, datasets, _progress(args.quiet))
    _print_loo(res)
    return EXIT_OK


def load_grid(path: str | Path, base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """One entry per line: ``name: key=value key=value ...`` over the base config."""
    grid = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"grid line needs 'name: key=value ...', got {line!r}")
        name, rest = line.split(":", 1)
        grid.append((name.strip(), base.replace(**parse_overrides(rest.split()))))
    return grid


def cmd_ablate(args) -> int:
    base = _config_from(args)
    if args.grid:
        grid = load_grid(args.grid, base)
    else:
        grid = ablation_presets(base)[args.preset]
    seeds = [int(s) for s in args.seeds.split(",")]
    datasets = load_dataset(args.data)
    targets = [_domain_index(datasets, t) for t in args.targets.split(",")] if args.targets else None
    rows = run_ablation_matrix(args.data, grid, seeds, args.out, targets, datasets)
    print(render_table(summarize_ablation(rows)), end="")
    if args.out is None:
        print(ablation_csv(rows), end="")
    return EXIT_OK


def _load_model(ckpt: Path):
    sidecar = ckpt.with_suffix(".cfg")
    if not sidecar.exists():
        raise FileNotFoundError(f"missing config sidecar {sidecar}")
    cfg = resolve_config(sidecar)
    state = load_checkpoint(ckpt)
    num_classes = state["head.bias"].shape[0]
    model = build_model(cfg, num_classes)
    model.load_state_dict(state)
    return model, cfg


def _eval_checkpoint(args):
    model, cfg = _load_model(Path(args.checkpoint))
    datasets = load_dataset(args.data)
    d = _domain_index(datasets, args.domain)
    ds = next(x for x in datasets if x.domain_id == d and x.split == args.split)
    return evaluate(model, ds, cfg), ds


def cmd_eval(args) -> int:
    ev, ds = _eval_checkpoint(args)
    print(f"{ds.name}/{ds.split}: accuracy {ev.accuracy:.4f} on {len(ds.clouds)} clouds")
    print("per-class: " + " ".join(f"{a:.4f}" for a in ev.per_class))
    if args.features:
        write_features(Path(args.features), ev)
    return EXIT_OK


def cmd_export_features(args) -> int:
    ev, ds = _eval_checkpoint(args)
    write_features(Path(args.out), ev)
    print(f"wrote {len(ev.sample_ids)} rows to {args.out}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results, elapsed = run_suite(args.seed)
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:15s} max_rel_err={r.error:.3e} tol={r.tol:.0e} compared={r.compared}/{r.probed} {status}")
    worst = max(r.error for r in results if r.name != "model")
    print(f"max primitive error {worst:.3e}; model error {results[-1].error:.3e}; {elapsed:.1f}s")
    return EXIT_OK if all(r.ok for r in results) else EXIT_RUNTIME


def cmd_scan_bench(args) -> int:
    rows = scan_bench(reps=args.reps, width=args.width, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_bench_csv(out / "bench.csv", rows)
    for r in rows:
        print(f"L={r['L']:5d} mean={r['mean_ms']:.3f}ms std={r['std_ms']:.3f}ms ratio_vs_half={r['ratio_vs_half']:.3f}")
    return EXIT_OK


def _fmt_perm(p: np.ndarray) -> str:
    return "[" + ",".join(str(int(v)) for v in p) + "]"


def cmd_inspect_scan(args) -> int:
    print("IDS " + _fmt_perm(ids_order(args.L, args.blocks).perm))
    print("CDS " + _fmt_perm(cds_order(args.L, args.blocks).perm))
    return EXIT_OK


def build_parser() -> Parser:
    p = Parser(prog="pointdg", description="Point-cloud domain generalization with state-space models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("gen-data", help="write the synthetic 4-domain benchmark")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train-per-class", type=int, default=200)
    s.add_argument("--test-per-class", type=int, default=50)
    s.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    s.set_defaults(func=cmd_gen_data)

    for name, fn, doc in (("train", cmd_train, "one held-out target"), ("loo", cmd_loo, "leave-one-domain-out")):
        s = sub.add_parser(name, help=doc)
        s.add_argument("--data", required=True)
        s.add_argument("--out", default="runs")
        s.add_argument("--run-id")
        s.add_argument("--quiet", action="store_true")
        if name == "train":
            s.add_argument("--target", required=True, help="domain name or index")
        else:
            s.add_argument("--targets", help="comma-separated subset of domains")
        _add_config_flags(s)
        s.set_defaults(func=fn)

    s = sub.add_parser("ablate", help="run an ablation grid with shared seeds")
    s.add_argument("--data", required=True)
    grp = s.add_mutually_exclusive_group(required=True)
    grp.add_argument("--preset", choices=sorted(ablation_presets(TrainConfig())))
    grp.add_argument("--grid", help="file with 'name: key=value ...' lines")
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--targets")
    s.add_argument("--out")
    _add_config_flags(s)
    s.set_defaults(func=cmd_ablate)

    for name, fn in (("eval", cmd_eval), ("export-features", cmd_export_features)):
        s = sub.add_parser(name, help="evaluate a checkpoint" if name == "eval" else "dump pooled features")
        s.add_argument("--checkpoint", required=True, help=".pdgm file with a .cfg sidecar")
        s.add_argument("--data", required=True)
        s.add_argument("--domain", required=True)
        s.add_argument("--split", default="test", choices=("train", "test"))
        if name == "eval":
            s.add_argument("--features", help="also write features CSV here")
        else:
            s.add_argument("--out", required=True)
        s.set_defaults(func=fn)

    s = sub.add_parser("grad-check", help="finite-difference gradient suite")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("scan-bench", help="SSM block time as the sequence length doubles")
    s.add_argument("--out", default=".")
    s.add_argument("--reps", type=int, default=20)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_scan_bench)

    s = sub.add_parser("inspect-scan", help="print the IDS and CDS permutations")
    s.add_argument("--L", type=int, required=True, help="tokens per block")
    s.add_argument("--blocks", type=int, default=3)
    s.set_defaults(func=cmd_inspect_scan)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except INVALID as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingAborted, FloatingPointError, RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
