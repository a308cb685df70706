"""Two-stage transfer methodology: source model -> general domain -> portable domain."""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ExperimentConfig, StageConfig
from .data import LABELS, DatasetManifest, Sample, load_manifest, load_sample, resize_for_network, stack
from .metrics import METRICS, MetricsRecord, Summary, mean_record, metrics, summarize
from .trainer import EpochLog, TrainResult, bench, train
from .unet import ModelConfig, UNet, build, model_hash

log = logging.getLogger(__name__)


class SplitError(ValueError):
    pass


class ProvenanceError(RuntimeError):
    pass


class PipelineError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# splitting


def _largest_remainder(quotas: dict[str, float], total: int, caps: dict[str, int]) -> dict[str, int]:
    alloc = {k: min(int(np.floor(q)), caps[k]) for k, q in quotas.items()}
    # ties resolved by class order, which is the dict order
    order = sorted(quotas, key=lambda k: -(quotas[k] - np.floor(quotas[k])))
    while sum(alloc.values()) < total:
        progressed = False
        for k in order:
            if sum(alloc.values()) >= total:
                break
            if alloc[k] < caps[k]:
                alloc[k] += 1
                progressed = True
        if not progressed:
            break
    return alloc


def split(labels: list[str], fractions=(0.6, 0.2, 0.2), seed: int = 0, stratify: bool = True):
    """Seeded (train, validation, test) index lists.

    Sizes are floor(n * f_train) and floor(n * f_val) with the remainder to
    test; class proportions are preserved within rounding when ``stratify``.
    """
    n = len(labels)
    if n < 5:
        raise SplitError(f"need at least 5 samples to split, got {n}")
    rng = np.random.default_rng(seed)
    n_train = int(np.floor(n * fractions[0] + 1e-9))
    n_val = int(np.floor(n * fractions[1] + 1e-9))
    if not stratify:
        perm = rng.permutation(n)
        return [sorted(perm[:n_train].tolist()), sorted(perm[n_train : n_train + n_val].tolist()), sorted(perm[n_train + n_val :].tolist())]

    classes = {c: [i for i, lb in enumerate(labels) if lb == c] for c in LABELS}
    classes = {c: idx for c, idx in classes.items() if idx}
    perms = {c: [idx[j] for j in rng.permutation(len(idx))] for c, idx in classes.items()}
    sizes = {c: len(idx) for c, idx in classes.items()}
    tr = _largest_remainder({c: s * fractions[0] for c, s in sizes.items()}, n_train, sizes)
    empty = [c for c in classes if tr[c] == 0]
    if empty:
        raise SplitError(f"class(es) {empty} too small to appear in the training split")
    rest = {c: sizes[c] - tr[c] for c in classes}
    va = _largest_remainder({c: s * fractions[1] for c, s in sizes.items()}, n_val, rest)
    out = ([], [], [])
    for c, idx in perms.items():
        out[0].extend(idx[: tr[c]])
        out[1].extend(idx[tr[c] : tr[c] + va[c]])
        out[2].extend(idx[tr[c] + va[c] :])
    return [sorted(part) for part in out]


def halve_portable(manifest: DatasetManifest, seed: int) -> tuple[DatasetManifest, DatasetManifest]:
    """Stratified 50/50 split into (transfer half, held-out half)."""
    rng = np.random.default_rng(seed)
    labels = manifest.labels()
    first, second, leftovers = [], [], []
    for c in LABELS:
        idx = [i for i, lb in enumerate(labels) if lb == c]
        idx = [idx[j] for j in rng.permutation(len(idx))]
        half = len(idx) // 2
        first.extend(idx[:half])
        second.extend(idx[half : 2 * half])
        if len(idx) % 2:
            leftovers.append(idx[-1])
    if leftovers:
        warnings.warn(
            f"odd class counts in portable manifest; {len(leftovers)} leftover sample(s) "
            "assigned by largest remainder",
            stacklevel=2,
        )
        k = (len(leftovers) + 1) // 2
        first.extend(leftovers[:k])
        second.extend(leftovers[k:])
    return (
        manifest.subset(sorted(first), "portable-transfer"),
        manifest.subset(sorted(second), "portable-heldout"),
    )


def derive_seed(*parts: int) -> int:
    return int(np.random.default_rng([int(p) for p in parts]).integers(0, 2**31 - 1))


# --------------------------------------------------------------------------
# stage execution


@dataclass
class StageRun:
    state: dict[str, np.ndarray]  # quantized best weights, exactly what the checkpoint holds
    init_hash: str
    test_records: list[MetricsRecord]
    test_labels: list[str]
    logs: list[EpochLog]
    best_epoch: int
    splits: dict[str, list[str]]


def evaluate(model: UNet, samples: list[Sample], threshold: float = 0.5, batch_size: int = 8) -> list[MetricsRecord]:
    images, masks = stack(samples)
    pred = model.predict(images, batch_size)
    return [metrics(p[0], t[0], threshold) for p, t in zip(pred, masks)]


def run_stage(
    initial: dict[str, np.ndarray],
    model_cfg: ModelConfig,
    samples: list[Sample],
    stage: StageConfig,
    fractions,
    split_seed: int,
    train_seed: int,
    threshold: float = 0.5,
    tag: str = "stage",
) -> StageRun:
    """Split, train from ``initial`` weights, evaluate the best model on the test split."""
    tr_idx, va_idx, te_idx = split([s.label for s in samples], fractions, split_seed)
    model = UNet(model_cfg, initial)
    init_hash = model_hash(model)
    cfg = replace(stage.train, seed=train_seed)
    result: TrainResult = train(
        model, [samples[i] for i in tr_idx], [samples[i] for i in va_idx], stage.optimizer, cfg
    )
    best = ckpt.quantize(result.model)
    test = [samples[i] for i in te_idx]
    records = evaluate(best, test, threshold, cfg.batch_size)
    log.info("%s: best epoch %d of %d, test DICE %.4f", tag, result.best_epoch, len(result.logs),
             np.mean([r.dice for r in records]))
    return StageRun(
        best.state_dict(),
        init_hash,
        records,
        [s.label for s in test],
        result.logs,
        result.best_epoch,
        {k: [samples[i].source_id for i in ix] for k, ix in (("train", tr_idx), ("val", va_idx), ("test", te_idx))},
    )


# --------------------------------------------------------------------------
# comparison on the held-out half


@dataclass
class Comparison:
    # {(stage, class): {metric: Summary over repetitions}}
    table: dict[tuple[str, str], dict[str, Summary]]
    # {class or 'overall': {metric: mean over repetitions of (stage2 - stage1)}}
    deltas: dict[str, dict[str, float | None]]
    # per repetition {stage: {class or 'overall': MetricsRecord of means}}
    per_rep: list[dict[str, dict[str, MetricsRecord]]]


def class_means(records: list[MetricsRecord], labels: list[str]) -> dict[str, MetricsRecord]:
    out = {}
    for c in LABELS:
        rs = [r for r, lb in zip(records, labels) if lb == c]
        if rs:
            out[c] = mean_record(rs)
    out["overall"] = mean_record(records)
    return out


def check_heldout(heldout: DatasetManifest | None, heldout_ids: set[str], seen_ids: set[str]) -> None:
    if heldout is not None and heldout.provenance != "portable-heldout":
        raise ProvenanceError(f"held-out manifest has provenance {heldout.provenance!r}, expected 'portable-heldout'")
    leaked = heldout_ids & seen_ids
    if leaked:
        raise ProvenanceError(f"{len(leaked)} held-out image(s) were used for training/validation, e.g. {sorted(leaked)[0]}")


def compare_stages(
    stage1: list[UNet],
    stage2: list[UNet],
    heldout: list[Sample],
    threshold: float = 0.5,
    seen_ids: set[str] = frozenset(),
    manifest: DatasetManifest | None = None,
) -> Comparison:
    """Evaluate each repetition's stage-1 and stage-2 model on the same held-out images."""
    if len(stage1) != len(stage2) or not stage1:
        raise ValueError("need one stage-1 and one stage-2 model per repetition")
    check_heldout(manifest, {s.source_id for s in heldout}, set(seen_ids))
    labels = [s.label for s in heldout]
    per_rep = []
    for m1, m2 in zip(stage1, stage2):
        per_rep.append({
            "stage1": class_means(evaluate(m1, heldout, threshold), labels),
            "stage2": class_means(evaluate(m2, heldout, threshold), labels),
        })
    classes = [c for c in LABELS if c in per_rep[0]["stage1"]]
    table = {}
    for stage in ("stage1", "stage2"):
        for c in classes:
            table[(stage, c)] = {m: summarize(getattr(rep[stage][c], m) for rep in per_rep) for m in METRICS}
    deltas = {}
    for c in classes + ["overall"]:
        row = {}
        for m in METRICS:
            diffs = []
            for rep in per_rep:
                a, b = getattr(rep["stage1"][c], m), getattr(rep["stage2"][c], m)
                if a is not None and b is not None:
                    diffs.append(b - a)
            row[m] = summarize(diffs).mean
        deltas[c] = row
    return Comparison(table, deltas, per_rep)


# --------------------------------------------------------------------------
# whole pipeline


@dataclass
class RepetitionResult:
    rep: int
    seed: int
    stage1: StageRun
    stage2: StageRun


@dataclass
class PipelineReport:
    config: ExperimentConfig
    stage0_state: dict[str, np.ndarray]
    stage0_logs: list[EpochLog]
    stage0_source: str
    repetitions: list[RepetitionResult]
    stage_tables: dict[str, dict[str, dict[str, Summary]]]
    comparison: Comparison
    heldout_ids: list[str]
    transfer_ids: list[str]
    timing: dict[str, dict[str, Summary]] = field(default_factory=dict)


@dataclass
class Datasets:
    source: list[Sample] | None
    general: list[Sample]
    transfer: list[Sample]
    heldout: list[Sample]
    heldout_manifest: DatasetManifest
    transfer_manifest: DatasetManifest


def _load_prepared(manifest: DatasetManifest, size: int, channels: int, base: Path) -> list[Sample]:
    # identity = image path relative to the config directory, so ids stay
    # unique across manifests and stable across runs
    out = []
    for e in manifest.entries:
        s = resize_for_network(load_sample(e), size, channels)
        out.append(replace(s, source_id=os.path.relpath(e.image.resolve(), base.resolve())))
    return out


def resolve_datasets(cfg: ExperimentConfig) -> tuple[dict[str, DatasetManifest], Path | None]:
    """Load every manifest the run needs and check all referenced files exist."""
    need = ["general"]
    if "portable" in cfg.datasets:
        need.append("portable")
    else:
        need += ["portable_transfer", "portable_heldout"]
    stage0_ckpt = None
    if cfg.stage0.checkpoint:
        stage0_ckpt = Path(cfg.stage0.checkpoint)
        if not stage0_ckpt.is_absolute():
            stage0_ckpt = cfg.base_dir / stage0_ckpt
        if not stage0_ckpt.is_file():
            raise PipelineError(f"stage-0 checkpoint not found: {stage0_ckpt}")
    elif cfg.stage0.emulate:
        need.append("source")
    else:
        raise PipelineError(
            "no stage-0 weights: set stage0.checkpoint to an XSEG checkpoint, "
            "or enable stage0.emulate with a 'source' dataset"
        )
    manifests = {}
    for key in need:
        path = cfg.dataset_path(key)
        if path is None:
            raise PipelineError(f"datasets.{key} is required by this configuration")
        m = load_manifest(path)
        missing = [str(p) for e in m.entries for p in (e.image, e.mask) if not p.is_file()]
        if missing:
            raise PipelineError(f"{path}: {len(missing)} referenced file(s) missing, e.g. {missing[0]}")
        manifests[key] = m
    return manifests, stage0_ckpt


def load_datasets(cfg: ExperimentConfig, manifests: dict[str, DatasetManifest]) -> Datasets:
    S, C = cfg.model.input_size, cfg.model.in_channels
    if "portable" in manifests:
        transfer_m, heldout_m = halve_portable(manifests["portable"], derive_seed(cfg.seed, 0xB0))
    else:
        transfer_m, heldout_m = manifests["portable_transfer"], manifests["portable_heldout"]
        if transfer_m.ids() & heldout_m.ids():
            raise ProvenanceError("portable transfer and held-out manifests overlap")
    base = cfg.base_dir
    return Datasets(
        _load_prepared(manifests["source"], S, C, base) if "source" in manifests else None,
        _load_prepared(manifests["general"], S, C, base),
        _load_prepared(transfer_m, S, C, base),
        _load_prepared(heldout_m, S, C, base),
        heldout_m,
        transfer_m,
    )


def obtain_stage0(cfg: ExperimentConfig, data: Datasets, ckpt_path: Path | None):
    if ckpt_path is not None:
        model = ckpt.load_checkpoint(ckpt_path, cfg.model)
        return model.state_dict(), [], f"external:{ckpt_path.name}"
    model = build(cfg.model, derive_seed(cfg.seed, 0))
    run = run_stage(
        model.state_dict(), cfg.model, data.source, cfg.stage0, cfg.fractions,
        derive_seed(cfg.seed, 0, 1), derive_seed(cfg.seed, 0, 2), cfg.threshold, "stage0",
    )
    return run.state, run.logs, "emulated-source"


def _repetition(args) -> RepetitionResult:
    cfg, stage0_state, data, rep = args
    seed = derive_seed(cfg.seed, 1, rep)
    split_seed = derive_seed(seed, 1)
    s1 = run_stage(stage0_state, cfg.model, data.general, cfg.stage1, cfg.fractions,
                   split_seed, derive_seed(seed, 2), cfg.threshold, f"rep{rep}/stage1")
    s2 = run_stage(s1.state, cfg.model, data.transfer, cfg.stage2, cfg.fractions,
                   split_seed, derive_seed(seed, 3), cfg.threshold, f"rep{rep}/stage2")
    return RepetitionResult(rep, seed, s1, s2)


def worker_count() -> int:
    env = os.environ.get("XSEG_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise PipelineError(f"XSEG_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def stage_table(runs: list[StageRun]) -> dict[str, dict[str, Summary]]:
    """Mean/std over repetitions of each repetition's per-class test means."""
    per_rep = [class_means(r.test_records, r.test_labels) for r in runs]
    keys = [c for c in LABELS + ("overall",) if any(c in p for p in per_rep)]
    return {
        c: {m: summarize(getattr(p[c], m) for p in per_rep if c in p) for m in METRICS}
        for c in keys
    }


def run_pipeline(cfg: ExperimentConfig, workers: int | None = None) -> PipelineReport:
    manifests, stage0_ckpt = resolve_datasets(cfg)
    data = load_datasets(cfg, manifests)
    stage0_state, stage0_logs, stage0_source = obtain_stage0(cfg, data, stage0_ckpt)

    jobs = [(cfg, stage0_state, data, r) for r in range(cfg.repetitions)]
    workers = min(workers or worker_count(), cfg.repetitions)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reps = list(pool.map(_repetition, jobs))
    else:
        reps = [_repetition(j) for j in jobs]

    seen = set()
    for r in reps:
        for run in (r.stage1, r.stage2):
            seen.update(run.splits["train"])
            seen.update(run.splits["val"])
    comparison = compare_stages(
        [UNet(cfg.model, r.stage1.state) for r in reps],
        [UNet(cfg.model, r.stage2.state) for r in reps],
        data.heldout,
        cfg.threshold,
        seen,
        data.heldout_manifest,
    )
    timing = {}
    for stage in ("stage1", "stage2"):
        logs = [e for r in reps for e in getattr(r, stage).logs]
        timing[stage] = bench(logs)
    return PipelineReport(
        cfg,
        stage0_state,
        stage0_logs,
        stage0_source,
        reps,
        {"stage1": stage_table([r.stage1 for r in reps]), "stage2": stage_table([r.stage2 for r in reps])},
        comparison,
        [s.source_id for s in data.heldout],
        [s.source_id for s in data.transfer],
        timing,
    )
