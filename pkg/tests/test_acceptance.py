"""Acceptance gate: one PASS/FAIL line per criterion, printed as each test finishes."""
import os
import time

import numpy as np
import pytest

from spineseg import tensor_core as tc
from spineseg.attention import (SwinBlock, WindowSpec, adaptive_gate, scaled_dot_attention,
                                swin_block, window_partition, window_reverse)
from spineseg.cli import cmd_gradcheck, main
from spineseg.config import load_config
from spineseg.data import read_volume, write_volume
from spineseg.fusion import adaptive_fuse
from spineseg.losses import combined_loss, cross_entropy, dice_loss, segmentation_metrics
from spineseg.training import Trainer, datasets_for, evaluate, mean_metrics

from test_losses import brute_force_metrics

ROOT = os.path.join(os.path.dirname(os.path.abspath(__file__)), os.pardir)
CONFIGS = os.path.join(ROOT, "configs")


@pytest.fixture
def verdict(capsys):
    def record(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {number}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, f"criterion {number} ({title}) failed: {detail}"
    return record


def test_gradient_correctness(verdict):
    cfg = load_config(os.path.join(CONFIGS, "tiny.cfg"))
    m = cfg.model
    shape_ok = (m.embed_dim == 8 and m.depths == (2,) and m.heads == (2,) and m.window == 2
                and m.num_classes == 3 and m.in_channels == 1 and cfg.gradcheck_dims == (8, 8, 8)
                and cfg.probes >= 5 and cfg.h == 1e-4)
    t0 = time.perf_counter()
    report = cmd_gradcheck(cfg, cfg.probes, cfg.h)
    elapsed = time.perf_counter() - t0
    worst = max(report, key=report.get)
    ok = shape_ok and report[worst] < 1e-5 and elapsed < 120
    verdict(1, "gradient correctness", ok,
            f"worst {worst} rel err {report[worst]:.2e} over {len(report)} tensors, {elapsed:.1f}s")


def test_metric_oracle(verdict):
    rep = segmentation_metrics(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]), 2)
    pinned = (round(rep.mIoU, 4), round(rep.mDice, 4), rep.mAcc) == (0.5833, 0.7333, 0.75)
    r = np.random.default_rng(20240)
    mismatches = 0
    for _ in range(1000):
        k = int(r.integers(1, 5))
        shape = tuple(int(s) for s in r.integers(1, 5, size=3))
        pred, truth = r.integers(0, k, size=shape), r.integers(0, k, size=shape)
        got = segmentation_metrics(pred, truth, k)
        mismatches += (got.mIoU, got.mDice, got.mAcc) != brute_force_metrics(pred, truth, k)
    verdict(2, "metric oracle equivalence", pinned and mismatches == 0,
            f"{mismatches} mismatches in 1000 cases, worked example {'ok' if pinned else 'wrong'}")


def test_loss_identity(verdict):
    r = np.random.default_rng(31)
    worst = 0.0
    for lam in (0.0, 0.5, 1.0, 2.0):
        for _ in range(100):
            k = int(r.integers(2, 5))
            shape = tuple(int(s) for s in r.integers(1, 6, size=3))
            probs = tc.softmax(r.normal(size=(k,) + shape) * 3, axis=0)
            lab = r.integers(0, k, size=shape)
            total, _ = combined_loss(probs, lab, lam)
            worst = max(worst, abs(total - (cross_entropy(probs, lab) + lam * dice_loss(probs, lab))))
    verdict(3, "loss identity", worst <= 1e-12, f"max |L - (CE + lam*Dice)| = {worst:.1e}")


def test_attention_invariants(verdict):
    r = np.random.default_rng(41)
    dim, heads, w = 8, 2, 2
    x = r.normal(size=(dim, 4, 4, 4))
    row_err, round_trip, gate_lo, gate_hi = 0.0, True, 1.0, 0.0
    for shift in (0, w // 2):
        spec = WindowSpec(w, shift)
        round_trip &= np.array_equal(window_reverse(window_partition(x, spec), spec, x.shape[1:]), x)
        store = tc.ParameterStore()
        block = SwinBlock(store, "blk", dim, heads, spec, rng=np.random.default_rng(shift))
        for scale in (1.0, 10.0):
            block.forward(x * scale)
            row_err = max(row_err, float(np.max(np.abs(block.last_attention.sum(-1) - 1.0))))
            gate_lo = min(gate_lo, float(block.last_gate.min()))
            gate_hi = max(gate_hi, float(block.last_gate.max()))
    q, k, v = (r.normal(size=(5, 2, 8, 4)) * 30 for _ in range(3))
    row_err = max(row_err, float(np.max(np.abs(scaled_dot_attention(q, k, v)[1].sum(-1) - 1.0))))
    # extreme gate inputs must still stay strictly inside (0, 1)
    store = tc.ParameterStore()
    SwinBlock(store, "g", dim, heads, WindowSpec(w), rng=np.random.default_rng(0))
    for name in store.names():
        if ".gate." in name:
            store.set_value(name, store[name] * 1e3)
    g = adaptive_gate(window_partition(x * 1e3, WindowSpec(w)), store, "g.gate", dim, heads)
    gate_lo, gate_hi = min(gate_lo, float(g.min())), max(gate_hi, float(g.max()))

    store = tc.ParameterStore()
    SwinBlock(store, "b", dim, heads, WindowSpec(w, 1), rng=np.random.default_rng(5))
    ref = swin_block(x, WindowSpec(w, 1), store, "b", heads, ablate_adaptive=True)
    for name in store.names():
        if ".gate." in name:
            store.set_value(name, r.normal(size=store[name].shape) * 100)
    invariant = swin_block(x, WindowSpec(w, 1), store, "b", heads, ablate_adaptive=True).tobytes() == ref.tobytes()

    ok = row_err <= 1e-9 and round_trip and 0.0 < gate_lo and gate_hi < 1.0 and invariant
    verdict(4, "attention invariants", ok,
            f"row-sum err {row_err:.1e}, round trip {round_trip}, gates in [{gate_lo:.3g}, 1 - {1.0 - gate_hi:.3g}], "
            f"ablated output invariant {invariant}")


def test_fusion_invariants(verdict, tmp_path):
    cfg = load_config(os.path.join(CONFIGS, "smoke.cfg"))
    train, _ = datasets_for(cfg)
    trainer = Trainer(cfg, train)
    sums = []
    trainer.run(30, callback=lambda t, step, _: sums.append(float(t.model.fusion_weights().sum())))
    weights = trainer.model.fusion_weights()
    sum_err = max(abs(s - 1.0) for s in sums)

    r = np.random.default_rng(51)
    outside = 0
    for _ in range(200):
        n = int(r.integers(1, 5))
        feats = [r.normal(size=(2, 3, 3, 3)) * r.uniform(0.1, 10) for _ in range(n)]
        y = adaptive_fuse(feats, r.normal(size=n) * 5)
        stack = np.stack(feats)
        outside += int(np.sum((y < stack.min(0)) | (y > stack.max(0))))
    ok = sum_err <= 1e-12 and outside == 0 and len(sums) == 30
    verdict(5, "fusion invariants", ok,
            f"max |sum(w) - 1| = {sum_err:.1e} over {len(sums)} steps (w = {np.round(weights, 4).tolist()}), "
            f"{outside} voxels outside the branch envelope")


def test_overfit_smoke(verdict, tmp_path):
    cfg_path = os.path.join(CONFIGS, "smoke.cfg")
    cfg = load_config(cfg_path)
    t0 = time.perf_counter()
    assert main(["train", "--config", cfg_path, "--out", str(tmp_path / "a")]) == 0
    elapsed = time.perf_counter() - t0
    assert main(["train", "--config", cfg_path, "--out", str(tmp_path / "b")]) == 0
    ckpt = (tmp_path / "a" / "model.ssck").read_bytes()
    deterministic = ckpt == (tmp_path / "b" / "model.ssck").read_bytes()
    trainer = Trainer.from_checkpoint(str(tmp_path / "a" / "model.ssck"))
    train, _ = datasets_for(cfg)
    fg = mean_metrics(evaluate(trainer.model, train, include_background=False))[1]
    ok = (cfg.steps <= 300 and cfg.synth_train == 1 and cfg.synth_dims == (24, 24, 24)
          and fg >= 0.90 and deterministic and elapsed < 600)
    verdict(6, "overfit smoke", ok,
            f"foreground mDice {fg:.4f} after {cfg.steps} steps, {elapsed:.0f}s, deterministic {deterministic}")


def test_ablation_shape(verdict, tmp_path):
    cfg_path = os.path.join(CONFIGS, "ablation.cfg")
    cfg = load_config(cfg_path)
    bench_ok = (cfg.synth_train == 12 and cfg.synth_test == 4 and cfg.synth_dims == (32, 32, 32)
                and cfg.model.seed == 0 and cfg.synth_seed == 0)
    t0 = time.perf_counter()
    assert main(["ablation", "--config", cfg_path, "--out", str(tmp_path / "single")]) == 0
    single = time.perf_counter() - t0
    t0 = time.perf_counter()
    assert main(["ablation", "--config", cfg_path, "--out", str(tmp_path / "threaded"), "--threads", "4"]) == 0
    threaded = time.perf_counter() - t0

    table = (tmp_path / "single" / "ablation.tsv").read_text()
    reproducible = table == (tmp_path / "threaded" / "ablation.tsv").read_text()
    rows = [line.split("\t") for line in table.splitlines()[1:]]
    names = [r[0] for r in rows]
    mdice = {r[0]: float(r[3]) for r in rows}
    shaped = names == ["Ours", "Remove multi-scale fusion", "Removing Adaptive Attention", "Baseline"]
    best = max(mdice, key=mdice.get)
    ours_max = shaped and mdice["Ours"] == max(mdice.values())
    ok = bench_ok and shaped and ours_max and reproducible and single < 3600 and threaded < 900
    with open(tmp_path / "single" / "ablation.txt") as fh:
        print(fh.read())
    verdict(7, "ablation-shape reproduction", ok,
            "mDice " + ", ".join(f"{n} {v:.4f}" for n, v in mdice.items())
            + f"; best row {best}; rerun byte-identical {reproducible}; "
            f"{single / 60:.1f} min single thread, {threaded / 60:.1f} min with --threads 4")


def test_determinism_and_persistence(verdict, tmp_path):
    cfg_path = tmp_path / "run.cfg"
    with open(os.path.join(CONFIGS, "tiny.cfg")) as fh:
        base = fh.read()
    cfg_path.write_text(base + "model.num_classes = 4\ndata.synth_train = 2\ndata.synth_dims = 8,8,8\n"
                        "data.n_vertebrae = 2\ntrain.steps = 8\ntrain.lr = 0.01\n"
                        "train.eval_interval = 0\ntrain.checkpoint_interval = 4\n")
    runs = []
    for tag in ("a", "b"):
        assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / tag)]) == 0
        runs.append((tmp_path / tag / "model.ssck").read_bytes())
    same = runs[0] == runs[1]
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "r"),
                 "--resume", str(tmp_path / "a" / "ckpt_step000004.ssck")]) == 0
    resumed = (tmp_path / "r" / "model.ssck").read_bytes() == runs[0]

    r = np.random.default_rng(81)
    round_trip = True
    for i in range(20):
        shape = tuple(int(s) for s in r.integers(1, 7, size=int(r.integers(1, 5))))
        arr = r.normal(size=shape) if i % 2 else r.integers(0, 256, size=shape).astype(np.uint8)
        write_volume(str(tmp_path / "v.ssv"), arr)
        back = read_volume(str(tmp_path / "v.ssv"))
        round_trip &= back.dtype == arr.dtype and back.tobytes() == arr.tobytes()
    verdict(8, "determinism and persistence", same and resumed and round_trip,
            f"identical checkpoints {same}, resume bit-exact {resumed}, SSV1 round trip {round_trip}")
