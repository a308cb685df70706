"""Acceptance gate. Each test prints one ``[ACCEPT] PASS|FAIL`` line, then asserts."""

import json
import re
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import auc_pairs, count_metrics, mean_std
from xseg import checkpoint as ckpt
from xseg.cli import main
from xseg.data import SynthSpec, resize_for_network, synth_sample
from xseg.gradcheck import OPS
from xseg.losses import DiceConfig, smooth_dice_loss
from xseg.metrics import metrics
from xseg.tensor import Tensor
from xseg.trainer import AugmentConfig, OptimizerConfig, TrainConfig, augment, train
from xseg.unet import ModelConfig, build, model_hash

from conftest import tiny_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def verdict(capsys):
    def report(name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[ACCEPT] {'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return report


def test_gradient_correctness(verdict, capsys):
    required = {"conv2d", "conv_transpose2d", "maxpool2d", "batchnorm2d", "relu", "sigmoid", "concat",
                "dice_paper", "dice_standard"}
    t0 = time.perf_counter()
    code = main(["gradcheck", "--trials", "10", "--tolerance", "1e-4"])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out
    passed = set(re.findall(r"^(\S+)\s.*PASS$", out, re.M))
    ok = code == 0 and required <= passed and required <= set(OPS) and elapsed < 60
    verdict("gradient correctness", ok, f"exit {code}, {len(passed)} ops passed, {elapsed:.1f}s")


def test_metric_oracle_equivalence(verdict):
    rng = np.random.default_rng(2024)
    mismatches, auc_err = 0, 0.0
    for k in range(500):
        # coarse probabilities force many ties in the rank statistic
        levels = (5, 11, 256)[k % 3]
        pred = np.round(rng.random((16, 16)) * (levels - 1)) / (levels - 1)
        target = (rng.random((16, 16)) < rng.uniform(0.05, 0.95)).astype(np.uint8)
        if k % 50 == 0:
            target[:] = 0
        rec = metrics(pred, target)
        oracle = count_metrics(pred.ravel().tolist(), target.ravel().tolist())
        mismatches += sum(getattr(rec, m) != v for m, v in oracle.items())
        flat_p, flat_t = pred.ravel().tolist(), target.ravel().tolist()
        ref = auc_pairs([p for p, t in zip(flat_p, flat_t) if t], [p for p, t in zip(flat_p, flat_t) if not t])
        if ref is None or rec.auc is None:
            mismatches += (ref is None) != (rec.auc is None)
        else:
            auc_err = max(auc_err, abs(rec.auc - ref))
    verdict("metric oracle equivalence", mismatches == 0 and auc_err <= 1e-9,
            f"{mismatches} count-metric mismatches, max AUC error {auc_err:.2e}")


def test_loss_closed_forms(verdict):
    def loss(p, t, form):
        return float(smooth_dice_loss(Tensor(np.asarray(p, float)), np.asarray(t, float), DiceConfig(1.0, form)).data)

    got = [
        loss([1, 1, 1, 1], [1, 1, 1, 1], "paper-eq1"),
        loss([1, 1, 0, 0], [0, 0, 1, 1], "paper-eq1"),
        loss([0, 0, 0, 0], [0, 0, 0, 0], "paper-eq1"),
        loss([0, 0, 0, 0], [0, 0, 0, 0], "standard"),
    ]
    want = [-1 / 9, 0.6, -1.0, 0.0]
    err = max(abs(g - w) for g, w in zip(got, want))
    verdict("loss closed forms", err <= 1e-12, f"max error {err:.1e}")


def test_worked_metrics_example(verdict):
    rec = metrics(np.array([1.0, 0, 0, 0]), np.array([1, 1, 0, 0]))
    want = {"acc": 0.75, "dice": 2 / 3, "jacc": 0.5, "sens": 0.5, "spec": 1.0, "prec": 5 / 6, "reca": 0.75,
            "f1": (2 / 3 + 0.8) / 2}
    err = max(abs(getattr(rec, k) - v) for k, v in want.items())
    verdict("worked metrics example", err <= 1e-4, f"max error {err:.1e}")


class _Script:
    def __init__(self, losses):
        self.losses, self.calls = list(losses), 0

    def __call__(self, model):
        self.calls += 1
        return self.losses[self.calls - 1]


def test_early_stopping_semantics(verdict):
    spec = SynthSpec("general", 2, 16, seed=0)
    data = [resize_for_network(synth_sample(spec, i, ("covid", "normal")[i % 2]), 16) for i in range(4)]
    cfg = ModelConfig(base_width=2, depth=1, input_size=16)
    losses = [9, 8, 7.5, 7, 7, 7.5] + [7.0] * 40
    details, ok = [], True
    for patience in (1, 2, 20):
        hashes = {}
        res = train(build(cfg, 0), data[:2], data[2:], OptimizerConfig(),
                    TrainConfig(max_epochs=100, early_stop_patience=patience, batch_size=2, seed=1),
                    validate=_Script(losses), on_epoch_end=lambda log, m: hashes.__setitem__(log.epoch, model_hash(m)))
        good = len(res.logs) == 4 + patience and res.best_epoch == 4 and model_hash(res.model) == hashes[4]
        ok &= good
        details.append(f"p={patience}: {len(res.logs)} epochs")
    verdict("early stopping semantics", ok, ", ".join(details))


def test_overfit_one_sample(verdict):
    sample = resize_for_network(synth_sample(SynthSpec("general", 1, 64, seed=5), 0, "covid"), 64)
    model = build(ModelConfig(base_width=8, depth=2, input_size=64), 0)
    init = model_hash(model)
    cfg = TrainConfig(max_epochs=200, early_stop_patience=200, batch_size=1, seed=0,
                      dice=DiceConfig(1.0, "standard"), augment=AugmentConfig(rotation_probability=0.0))
    t0 = time.perf_counter()
    res = train(model, [sample], [sample], OptimizerConfig(learning_rate=1e-2), cfg)
    elapsed = time.perf_counter() - t0
    ok = res.best_val_loss < 0.05 and elapsed < 600 and model_hash(res.model) != init
    verdict("overfit one sample", ok,
            f"best loss {res.best_val_loss:.4f} at epoch {res.best_epoch}, {elapsed:.0f}s")


@pytest.mark.slow
def test_transfer_effect(verdict, tmp_path):
    t0 = time.perf_counter()
    assert main(["synth", "--spec", str(CONFIGS / "desk_synth.json"), "--out", str(tmp_path / "data")]) == 0
    cfg = json.loads((CONFIGS / "desk.json").read_text())
    (tmp_path / "desk.json").write_text(json.dumps(cfg))
    assert main(["pipeline", "--config", str(tmp_path / "desk.json"), "--out", str(tmp_path / "run")]) == 0
    elapsed = time.perf_counter() - t0
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    delta = report["deltas"]["overall"]["dice"]
    s1, s2 = report["heldout_overall_dice"]["stage1"], report["heldout_overall_dice"]["stage2"]
    verdict("transfer effect", delta >= 0.02 and elapsed < 45 * 60,
            f"held-out DICE {s1:.4f} -> {s2:.4f} (delta {delta:+.4f}), {elapsed / 60:.1f} min")


def test_pipeline_determinism(verdict, tiny_run_dir, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["pipeline", "--config", str(tiny_run_dir / "config.json"), "--out", str(out)]) == 0
        outs.append({f: (out / f).read_bytes() for f in ("stage1_table.csv", "stage2_table.csv", "comparison.csv")})
    verdict("determinism", outs[0] == outs[1], "stage tables and comparison byte-identical" if outs[0] == outs[1] else "differs")


def test_augmentation_statistics(verdict):
    base = resize_for_network(synth_sample(SynthSpec("general", 1, 8, seed=0), 0, "normal"), 8)
    angles = [augment(base, np.random.default_rng([3, i]), AugmentConfig())[1] for i in range(10_000)]
    used = [a for a in angles if a is not None]
    ok = 7350 <= len(used) <= 7650 and all(-10 <= a <= 10 for a in used)
    verdict("augmentation statistics", ok, f"{len(used)} rotations, angles in [{min(used):.2f}, {max(used):.2f}]")


def test_checkpoint_roundtrip(verdict, tmp_path):
    cfg = ModelConfig(base_width=4, depth=2, input_size=32)
    a = ckpt.save_checkpoint(build(cfg, 1), tmp_path / "a.xseg")
    b = ckpt.save_checkpoint(ckpt.load_checkpoint(a, cfg), tmp_path / "b.xseg")
    same = a.read_bytes() == b.read_bytes()
    try:
        ckpt.load_checkpoint(a, ModelConfig(base_width=8, depth=2, input_size=32))
        rejected = False
    except ckpt.CheckpointError:
        rejected = True
    verdict("checkpoint round-trip", same and rejected, f"byte-identical={same}, mismatch rejected={rejected}")


def test_timing_harness(verdict, tmp_path):
    logs = tmp_path / "logs"
    logs.mkdir()
    fixture = {"stage1_rep00.csv": [12.5, 14.0, 9.5], "stage1_rep01.csv": [20.0, 11.0], "stage2_rep00.csv": [3.0, 5.0]}
    for name, ms in fixture.items():
        rows = ["epoch,train_loss,val_loss,lr,train_ms,val_ms"]
        rows += [f"{i},0.5,0.5,0.001,{t},{t / 2}" for i, t in enumerate(ms, 1)]
        (logs / name).write_text("\n".join(rows) + "\n")
    assert main(["bench", "--logs", str(logs), "--csv", str(tmp_path / "t.csv")]) == 0
    import csv

    with open(tmp_path / "t.csv", newline="") as fh:
        got = {(r["stage"], r["phase"]): (float(r["mean_ms"]), float(r["std_ms"]), int(r["epochs"])) for r in csv.DictReader(fh)}
    pooled = fixture["stage1_rep00.csv"] + fixture["stage1_rep01.csv"]
    want = {
        ("stage1", "training"): (*mean_std(pooled), 5),
        ("stage1", "validation"): (*mean_std([x / 2 for x in pooled]), 5),
        ("stage2", "training"): (*mean_std(fixture["stage2_rep00.csv"]), 2),
        ("stage2", "validation"): (*mean_std([1.5, 2.5]), 2),
    }
    ok = set(got) == set(want) and all(
        abs(got[k][0] - want[k][0]) <= 1e-12 and abs(got[k][1] - want[k][1]) <= 1e-12 and got[k][2] == want[k][2]
        for k in want
    )
    verdict("timing harness", ok, f"stage1 training mean {got[('stage1', 'training')][0]} over {got[('stage1', 'training')][2]} epochs")
