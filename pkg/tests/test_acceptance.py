"""Acceptance criteria, one test per criterion.

Each test records a pass/fail line through the ``acceptance`` fixture; the
lines are printed in the terminal summary under "acceptance criteria".
"""
import dataclasses
import math
import time

import numpy as np
import pytest

from echocotr.cli import main
from echocotr.data import Split, SynthSpec, synth_generate
from echocotr.engine import Tensor, conv3d_reference
from echocotr.flops import count_flops, format_flops
from echocotr.model import DPE, EchoCoTrModel, GlobalMHRA, LocalMHRA, preset, tiny_config
from echocotr.sampling import SampleSpec
from echocotr.train import (AdamW, TrainConfig, adamw_step, compute_metrics, evaluate,
                            make_batch, stream, train, train_step, warm_start_head)

import gradsuite
import samplingsuite

F64 = np.float64


def randomize(module, rng, scale):
    for p in module.parameters():
        p.data[...] = rng.normal(0.0, scale, size=p.shape)


# ---------------------------------------------------------------- 1

def test_gradient_suite(acceptance):
    with acceptance.criterion(1, "gradient suite") as info:
        t0 = time.perf_counter()
        ops = gradsuite.op_gradient_errors(seed=0)
        model = gradsuite.model_gradient_suite(seed=0)
        elapsed = time.perf_counter() - t0
        op_worst = max(max(v) for v in ops.values())
        model_worst = max(model.values())
        info["detail"] = (f"{len(ops)} op families, ops max {op_worst:.1e}, "
                          f"model max {model_worst:.1e} over {len(model)} shapes, {elapsed:.0f}s")
        assert min(len(v) for v in ops.values()) >= 5
        assert len(model) >= 5
        assert op_worst < gradsuite.OP_TOL
        assert model_worst < gradsuite.MODEL_TOL
        assert elapsed < 120


# ---------------------------------------------------------------- 2

def test_structural_oracles(acceptance):
    with acceptance.criterion(2, "structural oracles") as info:
        rng = np.random.default_rng(3)
        local = LocalMHRA(4, 5, 0.0, rng, F64)
        randomize(local, rng, 0.3)
        x = rng.normal(size=(2, 4, 3, 6, 6))
        v = conv3d_reference(x, local.value.weight.data, local.value.bias.data)
        a = conv3d_reference(v, local.affinity.weight.data, local.affinity.bias.data, 1, 2, 4)
        p = conv3d_reference(a, local.proj.weight.data, local.proj.bias.data)
        local_err = float(np.abs(local.branch(Tensor(x)).data - p).max())

        dpe = DPE(4, 3, rng, F64)
        randomize(dpe, rng, 0.3)
        expected = x.copy()
        w, b = dpe.conv.weight.data, dpe.conv.bias.data
        for c in range(4):
            expected[:, c] += conv3d_reference(x[:, c:c + 1], w[c:c + 1], b[c:c + 1], 1, 1)[:, 0]
        dpe_err = float(np.abs(dpe(Tensor(x)).data - expected).max())

        att = GlobalMHRA(8, 4, 0.0, rng, F64)
        randomize(att, rng, 0.5)
        tokens = rng.normal(size=(1, 8, 2, 2, 2)).reshape(1, 8, 8).transpose(0, 2, 1)
        base = att.attention(Tensor(tokens)).data
        row_err = float(np.abs(att.last_attention.sum(axis=-1) - 1).max())
        perm_err = 0.0
        for seed in range(20):
            perm = np.random.default_rng(seed).permutation(8)
            out = att.attention(Tensor(tokens[:, perm])).data
            perm_err = max(perm_err, float(np.abs(out - base[:, perm]).max()))

        info["detail"] = (f"local {local_err:.1e}, DPE {dpe_err:.1e}, rows {row_err:.1e}, "
                          f"permutation {perm_err:.1e}")
        assert local_err < 1e-6 and dpe_err < 1e-6 and row_err < 1e-6
        # permutation changes only the order of floating-point sums
        assert perm_err <= 1e-12


# ---------------------------------------------------------------- 3

def test_sampling_exhaustive(acceptance):
    with acceptance.criterion(3, "sampling exhaustive") as info:
        t0 = time.perf_counter()
        clips = samplingsuite.check_uniform_grid()
        annotated = samplingsuite.check_annotated_modes()
        elapsed = time.perf_counter() - t0
        info["detail"] = f"{clips} uniform clips, {annotated} annotated trials, {elapsed:.1f}s"
        assert clips == 300 * 4 * 4 * 5 and annotated == 400
        assert elapsed < 30


# ---------------------------------------------------------------- 4

def test_shape_pipeline(acceptance):
    with acceptance.criterion(4, "shape pipeline") as info:
        model = EchoCoTrModel(preset("S"), stream(0, "init")).eval()
        y = model(Tensor(np.zeros((1, 1, 36, 112, 112), dtype=np.float32)))
        grids = model.last_grids
        assert grids == [(18, 28, 28), (18, 14, 14), (18, 7, 7), (18, 3, 3)]
        assert y.shape == (1,) and np.isfinite(y.data).all()
        y2 = model(Tensor(np.zeros((1, 1, 2, 112, 112), dtype=np.float32)))
        assert y2.shape == (1,) and np.isfinite(y2.data).all()
        info["detail"] = f"grids {grids}; two-frame grids {model.last_grids}"


# ---------------------------------------------------------------- 5

def test_flops_reproduction(acceptance):
    with acceptance.criterion(5, "FLOPs reproduction") as info:
        s, b = preset("S"), preset("B")
        fs, fb = count_flops(s, (36, 112, 112)), count_flops(b, (36, 112, 112))
        info["detail"] = (f"S {format_flops(fs)} ({fs / 19.611e9 - 1:+.1%}), "
                          f"B {format_flops(fb)} ({fb / 44.907e9 - 1:+.1%})")
        assert abs(fs / 19.611e9 - 1) <= 0.20
        assert abs(fb / 44.907e9 - 1) <= 0.20
        assert fb > fs
        for cfg in (s, b):
            frames = [count_flops(cfg, (t, 112, 112)) for t in (2, 4, 8, 16, 24, 32, 36, 40)]
            assert all(lo < hi for lo, hi in zip(frames, frames[1:]))
            base = count_flops(cfg)
            for i in range(4):
                deeper = list(cfg.stage_depths)
                deeper[i] += 1
                assert count_flops(dataclasses.replace(cfg, stage_depths=tuple(deeper))) > base


# ---------------------------------------------------------------- 6

def brute_metrics(pred, target):
    n = len(pred)
    mae = math.fsum(abs(p - t) for p, t in zip(pred, target)) / n
    ss_res = math.fsum((p - t) ** 2 for p, t in zip(pred, target))
    mean = math.fsum(target) / n
    ss_tot = math.fsum((t - mean) ** 2 for t in target)
    return mae, math.sqrt(ss_res / n), 1 - ss_res / ss_tot


def test_metrics_and_optimizer(acceptance):
    with acceptance.criterion(6, "metrics/optimizer oracles") as info:
        metric_err = 0.0
        for n in (2, 5, 50, 1000, 10_000):
            rng = np.random.default_rng(n)
            target = rng.uniform(10, 80, size=n)
            pred = target + rng.normal(0, 6, size=n)
            m = compute_metrics(pred, target)
            ref = brute_metrics(pred.tolist(), target.tolist())
            metric_err = max(metric_err, *(abs(a - r) for a, r in zip((m.mae, m.rmse, m.r2), ref)))

        # first step: m_hat = g and v_hat = g^2, so the update is lr * g / (|g| + eps)
        cfg = TrainConfig(lr=0.1, weight_decay=0.0, model=tiny_config())
        p, _ = adamw_step([np.array(1.0)], [np.array(1.0)], None, cfg, 1)
        first_err = abs(float(p[0]) - 0.9)
        cfg_wd = TrainConfig(lr=0.1, weight_decay=0.01, model=tiny_config())
        p, _ = adamw_step([np.array(2.0)], [np.array(-3.0)], None, cfg_wd, 1)
        first_err = max(first_err, abs(float(p[0]) - (2.0 - 0.1 * 0.01 * 2.0 + 0.1)))

        rng = np.random.default_rng(0)
        theta0 = rng.normal(size=6)
        grads = [rng.normal(size=6) for _ in range(25)]
        t = Tensor(theta0.copy(), dtype=F64)
        opt = AdamW([t], lr=0.01, weight_decay=0.0)
        m = v = np.zeros(6)
        ref = theta0.copy()
        for step, g in enumerate(grads, start=1):
            t.grad = g
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.999 ** step)) + 1e-8)
        adam_err = float(np.abs(t.data - ref).max())

        info["detail"] = f"metrics {metric_err:.1e}, first step {first_err:.1e}, Adam {adam_err:.1e}"
        assert metric_err < 1e-9
        assert first_err < 1e-6
        assert adam_err < 1e-12


# ---------------------------------------------------------------- 7

SYNTH_SEEDS = (0, 1, 2, 3, 4)


def synthetic_run(seed: int) -> dict:
    spec = SynthSpec(height=32, width=32, frames_per_cycle=16, num_cycles=3)
    splits = ["TRAIN"] * 200 + ["VAL"] * 50 + ["TEST"] * 50
    clips, records = synth_generate(300, spec, seed=100 + seed, splits=splits)
    videos = {r.file_name: c for c, r in zip(clips, records)}
    by_split = {s: [r for r in records if r.split is s] for s in Split}
    cfg = TrainConfig(epochs=20, batch_size=8, lr=1e-4, weight_decay=1e-4, seed=seed,
                      spec=SampleSpec(16, 2), model=tiny_config())
    t0 = time.perf_counter()
    model, log = train(by_split[Split.TRAIN], by_split[Split.VAL], videos, cfg)
    test = evaluate(model, by_split[Split.TEST], videos, cfg.spec)
    elapsed = time.perf_counter() - t0
    mean = np.mean([r.ef for r in by_split[Split.TRAIN]])
    baseline = np.mean([abs(r.ef - mean) for r in by_split[Split.TEST]])
    return {"ratio": test.mae / baseline, "seconds": elapsed,
            "val_mae": [e.val.mae for e in log]}


@pytest.fixture(scope="module")
def synthetic_runs():
    return [synthetic_run(s) for s in SYNTH_SEEDS]


@pytest.mark.slow
def test_synthetic_learning(acceptance, synthetic_runs):
    with acceptance.criterion(7, "synthetic learning") as info:
        passed = sum(r["ratio"] < 0.5 and r["seconds"] <= 600 for r in synthetic_runs)
        info["detail"] = (f"{passed}/5 seeds; MAE/baseline "
                          + ", ".join(f"{r['ratio']:.2f}" for r in synthetic_runs)
                          + f"; slowest {max(r['seconds'] for r in synthetic_runs):.0f}s")
        assert passed >= 4


@pytest.mark.slow
def test_synthetic_val_mae_falls_over_first_epochs(synthetic_runs):
    falling = [all(a > b for a, b in zip(r["val_mae"][:3], r["val_mae"][1:3]))
               for r in synthetic_runs]
    assert sum(falling) >= 4, [r["val_mae"][:3] for r in synthetic_runs]


# ---------------------------------------------------------------- 8

def test_cli_reproducibility(acceptance, tmp_path, capsys):
    with acceptance.criterion(8, "reproducibility") as info:
        assert main(["synth", "--count", "12", "--seed", "2", "--out", str(tmp_path / "ds")]) == 0
        common = ["--manifest", str(tmp_path / "ds" / "manifest.csv"), "--frames", "8",
                  "--freq", "2", "--stage-depths", "1,1,1,1", "--stage-dims", "8,16,32,64",
                  "--head-dim", "16"]
        for run in ("a", "b"):
            assert main(["train", *common, "--epochs", "2", "--batch", "4", "--seed", "11",
                         "--out", str(tmp_path / run)]) == 0
        for name in ("weights.ecw", "epoch_log.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        capsys.readouterr()
        outputs = []
        for run in ("e1", "e2"):
            assert main(["eval", *common, "--weights", str(tmp_path / "a" / "weights.ecw"),
                         "--out", str(tmp_path / run)]) == 0
            outputs.append(capsys.readouterr().out)
        preds = [(tmp_path / r / "predictions_test.csv").read_bytes() for r in ("e1", "e2")]
        assert outputs[0] == outputs[1] and preds[0] == preds[1]
        info["detail"] = f"weights and log byte-identical; eval {outputs[0].strip()}"


# ---------------------------------------------------------------- 9

def test_overfit_sanity(acceptance):
    with acceptance.criterion(9, "overfit sanity") as info:
        cfg = TrainConfig(model=tiny_config())
        clips, records = synth_generate(4, SynthSpec(frames_per_cycle=16, num_cycles=1), seed=0,
                                        splits=["TRAIN"] * 4)
        videos = {r.file_name: c for c, r in zip(clips, records)}
        model = EchoCoTrModel(cfg.model, stream(cfg.seed, "init"))
        model.set_drop_path_rng(stream(cfg.seed, "drop_path"))
        warm_start_head(model, [r.ef for r in records])
        opt = AdamW(model.parameters(), cfg.lr, cfg.weight_decay)
        x, y = make_batch(records, videos, SampleSpec(16, 1, start=0), None, cfg.norm_mean,
                          cfg.norm_std)
        losses = [train_step(model, opt, x, y) for _ in range(50)]
        ratio = min(losses) / losses[0]
        info["detail"] = (f"initial MSE {losses[0]:.1f}, best {min(losses):.3f} "
                          f"at step {int(np.argmin(losses)) + 1} ({ratio:.2%})")
        assert ratio < 0.01
