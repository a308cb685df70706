"""Write a PipelineReport to disk and render SVG figures from a run directory."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from pathlib import Path

from . import __version__
from . import checkpoint as ckpt
from .metrics import HEADERS, METRICS, Summary, mean_record, summarize, table_csv
from .pipeline import PipelineReport
from .trainer import bench, logs_csv, read_logs_csv
from .unet import UNet


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def comparison_csv(report_or_comparison) -> str:
    cmp = getattr(report_or_comparison, "comparison", report_or_comparison)
    rows = [({"stage": stage, "class": cls}, summ) for (stage, cls), summ in cmp.table.items()]
    return table_csv(rows)


def deltas_csv(cmp) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class"] + [f"{HEADERS[m]}_delta" for m in METRICS])
    for cls, row in cmp.deltas.items():
        w.writerow([cls] + ["" if row[m] is None else repr(float(row[m])) for m in METRICS])
    return buf.getvalue()


def repetitions_csv(report: PipelineReport, stage: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["repetition", "seed", "best_epoch", "epochs", "n_test"] + [HEADERS[m] for m in METRICS])
    for r in report.repetitions:
        run = getattr(r, stage)
        rec = mean_record(run.test_records)
        w.writerow(
            [r.rep, r.seed, run.best_epoch, len(run.logs), len(run.test_records)]
            + ["" if getattr(rec, m) is None else repr(float(getattr(rec, m))) for m in METRICS]
        )
    return buf.getvalue()


def timing_csv(groups: dict[str, dict[str, Summary]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "phase", "mean_ms", "std_ms", "epochs"])
    for stage, summ in groups.items():
        for phase, key in (("training", "train_ms"), ("validation", "val_ms")):
            s = summ[key]
            w.writerow([stage, phase, repr(s.mean), repr(s.std), s.n])
    return buf.getvalue()


def write_report(report: PipelineReport, out: Path, started: str, finished: str) -> dict:
    """Materialize the run directory; returns the run manifest."""
    out = Path(out)
    cfg = report.config
    cfg_bytes = cfg.canonical_bytes()
    outputs = []

    def emit(rel: str, text: str):
        _write(out / rel, text)
        outputs.append(rel)

    (out / "config.json").write_bytes(cfg_bytes)
    outputs.append("config.json")
    for stage in ("stage1", "stage2"):
        table = report.stage_tables[stage]
        emit(f"{stage}_table.csv", table_csv([({"class": c}, s) for c, s in table.items()]))
        emit(f"{stage}_repetitions.csv", repetitions_csv(report, stage))
    emit("comparison.csv", comparison_csv(report.comparison))
    emit("deltas.csv", deltas_csv(report.comparison))
    emit("timing.csv", timing_csv(report.timing))
    if report.stage0_logs:
        emit("logs/stage0.csv", logs_csv(report.stage0_logs))

    ck = out / "checkpoints"
    ckpt.save_checkpoint(UNet(cfg.model, report.stage0_state), ck / "stage0.xseg", report.stage0_source)
    outputs.append("checkpoints/stage0.xseg")
    splits = {}
    for r in report.repetitions:
        for stage in ("stage1", "stage2"):
            run = getattr(r, stage)
            name = f"{stage}_rep{r.rep:02d}"
            emit(f"logs/{name}.csv", logs_csv(run.logs))
            ckpt.save_checkpoint(UNet(cfg.model, run.state), ck / f"{name}.xseg", f"{stage} repetition {r.rep}")
            outputs.append(f"checkpoints/{name}.xseg")
            splits[name] = run.splits
    splits["portable_heldout"] = report.heldout_ids
    splits["portable_transfer"] = report.transfer_ids
    emit("splits.json", json.dumps(splits, indent=1, sort_keys=True) + "\n")

    summary = {
        "stage_tables": {
            st: {c: {m: vars(s) for m, s in tab.items()} for c, tab in t.items()}
            for st, t in report.stage_tables.items()
        },
        "comparison": {f"{k[0]}/{k[1]}": {m: vars(s) for m, s in v.items()} for k, v in report.comparison.table.items()},
        "deltas": report.comparison.deltas,
        "heldout_overall_dice": {
            stage: summarize(rep[stage]["overall"].dice for rep in report.comparison.per_rep).mean
            for stage in ("stage1", "stage2")
        },
        "stage0": report.stage0_source,
    }
    emit("report.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")

    manifest = {
        "tool_version": __version__,
        "config_hash": hashlib.sha256(cfg_bytes).hexdigest(),
        "master_seed": cfg.seed,
        "repetition_seeds": [r.seed for r in report.repetitions],
        "timestamps": {"pipeline": {"started": started, "finished": finished}},
        "outputs": sorted(outputs),
    }
    _write(out / "run_manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


# --------------------------------------------------------------------------
# timing over arbitrary log directories


def collect_logs(root: Path) -> dict[str, list]:
    """Epoch-log CSVs under ``root`` grouped by stage prefix (``stage1_rep03.csv`` -> ``stage1``)."""
    groups: dict[str, list] = {}
    for path in sorted(Path(root).rglob("*.csv")):
        with open(path, newline="") as fh:
            header = fh.readline().strip().split(",")
        if header[:3] != ["epoch", "train_loss", "val_loss"]:
            continue
        key = path.stem.split("_rep")[0]
        groups.setdefault(key, []).extend(read_logs_csv(path))
    return groups


def bench_dir(root: Path) -> dict[str, dict[str, Summary]]:
    groups = collect_logs(root)
    return {k: bench(v) for k, v in groups.items() if v}


# --------------------------------------------------------------------------
# SVG figures

_W, _H, _PAD = 640, 360, 50
_COLORS = {"train_loss": "#1f77b4", "val_loss": "#d62728", "stage1": "#7f7f7f", "stage2": "#2ca02c"}


def curve_stats(series: list[list[float]]) -> list[tuple[int, float, float, int]]:
    """(epoch, mean, std, n) over the repetitions that reached each epoch."""
    longest = max((len(s) for s in series), default=0)
    out = []
    for e in range(longest):
        vals = [s[e] for s in series if len(s) > e]
        sm = summarize(vals)
        out.append((e + 1, sm.mean, sm.std, sm.n))
    return out


def _svg_open(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f"<!-- xseg {__version__} -->",
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
    ]


def loss_curves_svg(title: str, curves: dict[str, list[tuple[int, float, float, int]]]) -> str:
    pts = [(e, m - s, m + s) for c in curves.values() for e, m, s, _ in c]
    if not pts:
        return "\n".join(_svg_open(title) + ["</svg>"]) + "\n"
    xmax = max(p[0] for p in pts)
    ylo = min(p[1] for p in pts)
    yhi = max(p[2] for p in pts)
    if yhi - ylo < 1e-12:
        yhi = ylo + 1.0

    def sx(e):
        return _PAD + (e - 1) / max(xmax - 1, 1) * (_W - 2 * _PAD)

    def sy(v):
        return _H - _PAD - (v - ylo) / (yhi - ylo) * (_H - 2 * _PAD)

    parts = _svg_open(title)
    parts.append(f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>')
    parts.append(f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="black"/>')
    parts.append(f'<text x="{_W / 2}" y="{_H - 15}" text-anchor="middle" font-family="sans-serif" font-size="11">epoch (1..{xmax})</text>')
    parts.append(f'<text x="5" y="{_PAD - 5}" font-family="sans-serif" font-size="11">{yhi:.3f}</text>')
    parts.append(f'<text x="5" y="{_H - _PAD}" font-family="sans-serif" font-size="11">{ylo:.3f}</text>')
    for i, (name, c) in enumerate(curves.items()):
        color = _COLORS.get(name, "#333333")
        upper = " ".join(f"{sx(e):.2f},{sy(m + s):.2f}" for e, m, s, _ in c)
        lower = " ".join(f"{sx(e):.2f},{sy(m - s):.2f}" for e, m, s, _ in reversed(c))
        parts.append(f'<polygon class="band" data-series="{name}" points="{upper} {lower}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{sx(e):.2f},{sy(m):.2f}" for e, m, _, _ in c)
        means = " ".join(repr(float(m)) for _, m, _, _ in c)
        parts.append(
            f'<polyline class="mean" data-series="{name}" data-mean="{means}" points="{line}" '
            f'fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(f'<text x="{_W - _PAD - 80}" y="{_PAD + 15 * i}" fill="{color}" font-family="sans-serif" font-size="11">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def bars_svg(title: str, groups: list[str], series: dict[str, list[float]]) -> str:
    parts = _svg_open(title)
    vals = [v for vs in series.values() for v in vs if v is not None]
    lo = min(vals + [0.0])
    hi = max(vals + [1e-12])
    n_series = len(series)
    gw = (_W - 2 * _PAD) / max(len(groups), 1)
    bw = gw * 0.8 / max(n_series, 1)
    for gi, g in enumerate(groups):
        x0 = _PAD + gi * gw + gw * 0.1
        parts.append(f'<text x="{x0 + gw * 0.4}" y="{_H - _PAD + 15}" text-anchor="middle" font-family="sans-serif" font-size="11">{g}</text>')
        for si, (name, vs) in enumerate(series.items()):
            v = vs[gi] or 0.0
            h = (v - lo) / (hi - lo) * (_H - 2 * _PAD) if hi > lo else 0
            parts.append(
                f'<rect data-series="{name}" data-group="{g}" data-value="{v!r}" x="{x0 + si * bw:.2f}" '
                f'y="{_H - _PAD - h:.2f}" width="{bw:.2f}" height="{h:.2f}" fill="{_COLORS.get(name, "#555")}"/>'
            )
    for si, name in enumerate(series):
        parts.append(f'<text x="{_W - _PAD - 60}" y="{_PAD + 15 * si}" fill="{_COLORS.get(name, "#555")}" font-family="sans-serif" font-size="11">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_plots(run: Path) -> list[Path]:
    """Loss-curve SVG per stage and held-out comparison bar charts, plus their CSV data."""
    run = Path(run)
    plots = run / "plots"
    written = []
    groups: dict[str, list[list]] = {}
    for path in sorted((run / "logs").glob("*_rep*.csv")):
        groups.setdefault(path.stem.split("_rep")[0], []).append(read_logs_csv(path))
    for stage, reps in groups.items():
        curves = {
            key: curve_stats([[getattr(e, key) for e in logs] for logs in reps])
            for key in ("train_loss", "val_loss")
        }
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["series", "epoch", "mean", "std", "n"])
        for key, c in curves.items():
            for e, m, s, n in c:
                w.writerow([key, e, repr(m), repr(s), n])
        _write(plots / f"{stage}_loss.csv", buf.getvalue())
        _write(plots / f"{stage}_loss.svg", loss_curves_svg(f"{stage}: loss over {len(reps)} repetition(s)", curves))
        written += [plots / f"{stage}_loss.svg", plots / f"{stage}_loss.csv"]

    cmp_path = run / "comparison.csv"
    if cmp_path.is_file():
        with open(cmp_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        classes = list(dict.fromkeys(r["class"] for r in rows))
        for metric in ("DICE", "JACC", "SENS"):
            series = {
                stage: [
                    float(next(r for r in rows if r["stage"] == stage and r["class"] == c)[f"{metric}_mean"])
                    for c in classes
                ]
                for stage in ("stage1", "stage2")
            }
            p = plots / f"comparison_{metric.lower()}.svg"
            _write(p, bars_svg(f"Held-out {metric}: before vs after the second stage", classes, series))
            written.append(p)
    return written
