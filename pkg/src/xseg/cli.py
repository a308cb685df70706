"""Command-line front end.

Exit codes: 0 success, 2 usage or configuration error, 3 filesystem refusal,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import warnings
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from . import checkpoint as ckpt
from .config import ConfigError, load_config
from .data import DataError, SynthSpec, generate_synthetic, load_manifest, load_sample, resize_for_network, save_manifest
from .gradcheck import run_suite
from .metrics import HEADERS, METRICS, aggregate, records_csv, table_csv
from .pipeline import (
    PipelineError, ProvenanceError, SplitError, derive_seed, evaluate, halve_portable, run_pipeline, run_stage,
    stage_table,
)
from .report import _write, bench_dir, render_plots, timing_csv, write_report
from .trainer import NonFiniteLossError, logs_csv
from .unet import UNet, build

EXIT_OK, EXIT_USAGE, EXIT_REFUSED, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("xseg")


class Refusal(Exception):
    """Refuse to touch the filesystem in the requested way."""


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _prepare_out(path: Path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise Refusal(f"--out {path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise Refusal(f"--out {path} is not empty; pass --force to write into it")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _run_manifest(out: Path, command: str, cfg_bytes: bytes | None, seed, outputs, started: str, extra=None):
    m = {
        "tool_version": __version__,
        "command": command,
        "config_hash": hashlib.sha256(cfg_bytes).hexdigest() if cfg_bytes is not None else None,
        "master_seed": seed,
        "timestamps": {command: {"started": started, "finished": _now()}},
        "outputs": sorted(outputs),
    }
    m.update(extra or {})
    _write(out / "run_manifest.json", json.dumps(m, indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# synth


def _synth_spec(d: dict, where: str) -> SynthSpec:
    names = {f.name for f in fields(SynthSpec)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    try:
        return SynthSpec(**d)
    except (TypeError, ValueError, DataError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def read_synth_file(path: Path) -> list[tuple[str | None, SynthSpec, bool]]:
    """Parse a synth spec file into (subdirectory, spec, split_halves) jobs.

    Either one spec object (``{"domain": ..., ...}``) or
    ``{"domains": {"<name>": {...}, ...}}`` with optional shared ``"defaults"``.
    A portable entry may set ``"halves": true`` to also write stratified
    transfer and held-out manifests.
    """
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"spec file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    data = dict(data)
    data.pop("schema_version", None)
    if "domains" not in data:
        halves = bool(data.pop("halves", False))
        return [(None, _synth_spec(data, str(path)), halves)]
    defaults = data.pop("defaults", {})
    domains = data.pop("domains")
    if data:
        raise ConfigError(f"{path}: unknown key(s) {sorted(data)}")
    if not isinstance(domains, dict) or not domains:
        raise ConfigError(f"{path}: 'domains' must be a non-empty object")
    jobs = []
    for name, d in domains.items():
        d = {**defaults, "domain": name, **d}
        halves = bool(d.pop("halves", False))
        jobs.append((name, _synth_spec(d, f"{path}:{name}"), halves))
    return jobs


def cmd_synth(args) -> int:
    jobs = read_synth_file(args.spec)
    out = _prepare_out(args.out, args.force)
    written = []
    for sub, spec, halves in jobs:
        target = out / sub if sub else out
        manifest = generate_synthetic(spec, target)
        written.append(manifest.path.relative_to(out).as_posix())
        if halves:
            transfer, heldout = halve_portable(manifest, derive_seed(spec.seed, 0xB0))
            for name, m in (("transfer_manifest.txt", transfer), ("heldout_manifest.txt", heldout)):
                save_manifest(m, target / name)
                written.append((target / name).relative_to(out).as_posix())
        print(f"{spec.domain}: {len(manifest)} samples -> {manifest.path}")
    for p in written:
        log.info("wrote %s", p)
    return EXIT_OK


# --------------------------------------------------------------------------
# train


def _metrics_rows(rep: int, run) -> list:
    return [
        ({"repetition": rep, "source_id": sid, "label": lb}, rec)
        for sid, lb, rec in zip(run.splits["test"], run.test_labels, run.test_records)
    ]


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    stage = getattr(cfg, args.stage)
    manifest = load_manifest(args.data)
    if len(manifest) == 0:
        raise ConfigError(f"{args.data}: manifest has no entries")
    if args.init:
        init = ckpt.load_checkpoint(args.init, cfg.model).state_dict()
        init_desc = str(args.init)
    else:
        init = build(cfg.model, derive_seed(cfg.seed, 0)).state_dict()
        init_desc = "random"
    out = _prepare_out(args.out, args.force)
    started = _now()
    samples = [resize_for_network(load_sample(e), cfg.model.input_size, cfg.model.in_channels) for e in manifest.entries]
    reps = args.repetitions or 1
    outputs, rows, runs = [], [], []
    for rep in range(reps):
        seed = derive_seed(cfg.seed, 1, rep)
        run = run_stage(init, cfg.model, samples, stage, cfg.fractions, derive_seed(seed, 1), derive_seed(seed, 2),
                        cfg.threshold, f"rep{rep}")
        runs.append(run)
        name = f"rep{rep:02d}"
        ckpt.save_checkpoint(UNet(cfg.model, run.state), out / "checkpoints" / f"{name}.xseg",
                             f"{args.stage} from {init_desc}")
        _write(out / "logs" / f"{args.stage}_{name}.csv", logs_csv(run.logs))
        outputs += [f"checkpoints/{name}.xseg", f"logs/{args.stage}_{name}.csv"]
        rows += _metrics_rows(rep, run)
        print(f"repetition {rep}: best epoch {run.best_epoch}/{len(run.logs)}")
    _write(out / "metrics.csv", records_csv(rows))
    table = stage_table(runs)
    _write(out / "aggregate.csv", table_csv([({"class": c}, s) for c, s in table.items()]))
    cfg_bytes = cfg.canonical_bytes()
    (out / "config.json").write_bytes(cfg_bytes)
    outputs += ["metrics.csv", "aggregate.csv", "config.json"]
    _run_manifest(out, "train", cfg_bytes, cfg.seed, outputs, started, {"init": init_desc, "stage": args.stage})
    print(_human_table(table))
    return EXIT_OK


# --------------------------------------------------------------------------
# pipeline


def cmd_pipeline(args) -> int:
    cfg = load_config(args.config)
    out = _prepare_out(args.out, args.force)
    started = _now()
    report = run_pipeline(cfg, args.workers)
    write_report(report, out, started, _now())
    print(_human_comparison(report.comparison))
    return EXIT_OK


# --------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    manifest = load_manifest(args.data)
    if len(manifest) == 0:
        raise ConfigError(f"{args.data}: manifest has no entries")
    model = ckpt.load_checkpoint(args.checkpoint)
    out = _prepare_out(args.out, args.force)
    started = _now()
    cfg = model.config
    samples = [resize_for_network(load_sample(e), cfg.input_size, cfg.in_channels) for e in manifest.entries]
    records = evaluate(model, samples, args.threshold, args.batch_size)
    ids = [e.image.name for e in manifest.entries]
    labels = [s.label for s in samples]
    _write(out / "per_image.csv", records_csv(
        [({"source_id": i, "label": lb}, r) for i, lb, r in zip(ids, labels, records)]
    ))
    table = aggregate(records, labels)
    _write(out / "aggregate.csv", table_csv([({"class": c}, s) for c, s in table.items()]))
    _run_manifest(out, "eval", None, None, ["per_image.csv", "aggregate.csv"], started,
                  {"checkpoint": str(args.checkpoint), "data": str(args.data)})
    print(_human_table(table))
    return EXIT_OK


# --------------------------------------------------------------------------
# gradcheck, bench, report


def cmd_gradcheck(args) -> int:
    ops = None if args.ops == "all" else [o.strip() for o in args.ops.split(",") if o.strip()]
    try:
        reports = run_suite(ops, args.seed, args.trials, args.tolerance, inject_bug=args.inject_bug)
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from None
    width = max(len(r.op) for r in reports)
    print(f"{'op':<{width}}  {'max_rel_error':>13}  {'tolerance':>9}  result")
    for r in reports:
        print(f"{r.op:<{width}}  {r.max_rel_error:>13.3e}  {r.tolerance:>9.1e}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.op for r in reports if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_bench(args) -> int:
    root = Path(args.logs)
    if not root.is_dir():
        raise ConfigError(f"logs directory not found: {root}")
    groups = bench_dir(root)
    if not groups:
        raise ConfigError(f"no epoch-log CSV files under {root}")
    text = timing_csv(groups)
    if args.csv:
        _write(Path(args.csv), text)
    print("Mean time and standard deviation per epoch (ms)")
    print(f"{'stage':<10} {'training':>24} {'validation':>24}")
    for stage, s in groups.items():
        tr, va = s["train_ms"], s["val_ms"]
        print(f"{stage:<10} {tr.mean:>12.2f} ± {tr.std:<9.2f} {va.mean:>12.2f} ± {va.std:<9.2f} (n={tr.n})")
    if not args.csv:
        print()
        print(text, end="")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    if not run.is_dir():
        raise ConfigError(f"run directory not found: {run}")
    if not (run / "logs").is_dir() and not (run / "comparison.csv").is_file():
        raise ConfigError(f"{run} does not look like a pipeline or train output directory")
    if (run / "comparison.csv").is_file():
        with open(run / "comparison.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        print(f"{'stage':<8} {'class':<13} {'DICE':>8} {'JACC':>8}")
        for r in rows:
            print(f"{r['stage']:<8} {r['class']:<13} {float(r['DICE_mean']):>8.4f} {float(r['JACC_mean']):>8.4f}")
    if args.plots:
        for p in render_plots(run):
            print(p)
    return EXIT_OK


# --------------------------------------------------------------------------
# text summaries


def _human_table(table) -> str:
    buf = io.StringIO()
    cols = ("dice", "jacc", "sens", "spec", "acc")
    buf.write(f"{'class':<13}" + "".join(f"{HEADERS[m]:>18}" for m in cols) + "\n")
    for cls, summ in table.items():
        cells = []
        for m in cols:
            s = summ[m]
            cells.append(f"{'n/a':>18}" if s.mean is None else f"{s.mean:>9.4f} ± {s.std:<6.4f}")
        buf.write(f"{cls:<13}" + "".join(cells) + "\n")
    return buf.getvalue().rstrip("\n")


def _human_comparison(cmp) -> str:
    lines = [f"{'class':<13} {'stage1 DICE':>12} {'stage2 DICE':>12} {'delta':>9}"]
    for cls, d in cmp.deltas.items():
        if cls == "overall":
            a = sum(r["stage1"]["overall"].dice for r in cmp.per_rep) / len(cmp.per_rep)
            b = sum(r["stage2"]["overall"].dice for r in cmp.per_rep) / len(cmp.per_rep)
        else:
            a = cmp.table[("stage1", cls)]["dice"].mean
            b = cmp.table[("stage2", cls)]["dice"].mean
        lines.append(f"{cls:<13} {a:>12.4f} {b:>12.4f} {d['dice']:>+9.4f}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xseg", description="Two-stage transfer learning for lung segmentation.")
    p.add_argument("--version", action="version", version=f"xseg {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="repeat for more detail")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--spec", required=True, type=Path, help="JSON synth spec")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--force", action="store_true", help="write into a non-empty --out")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="split, train and test one stage")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--data", required=True, type=Path, help="dataset manifest")
    s.add_argument("--init", type=Path, help="initial weights (XSEG checkpoint); random when omitted")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--stage", choices=("stage0", "stage1", "stage2"), default="stage1",
                   help="which stage section of the config to use (default stage1)")
    s.add_argument("--repetitions", type=int, help="number of randomized holdout repetitions (default 1)")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("pipeline", help="run stage 0, then stage 1 and stage 2 for every repetition")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--workers", type=int, help="parallel repetitions (default XSEG_THREADS or CPU count)")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    s.add_argument("--checkpoint", required=True, type=Path)
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    s.add_argument("--ops", default="all", help="'all' or a comma-separated list")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--inject-bug", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", help="per-epoch timing summary from epoch-log CSVs")
    s.add_argument("--logs", required=True, type=Path)
    s.add_argument("--csv", type=Path, help="write the CSV summary here instead of stdout")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("report", help="summarize a run directory and optionally draw SVG plots")
    s.add_argument("--run", required=True, type=Path)
    s.add_argument("--plots", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    logging.captureWarnings(True)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except Refusal as exc:
        print(f"xseg: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"xseg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, ckpt.CheckpointError, PipelineError, ProvenanceError, SplitError) as exc:
        print(f"xseg: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PermissionError as exc:
        print(f"xseg: {exc}", file=sys.stderr)
        return EXIT_REFUSED


if __name__ == "__main__":
    sys.exit(main())
