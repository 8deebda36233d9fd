"""The ten acceptance criteria, each at its stated tolerance.

Every criterion records PASS or FAIL with its wall time; the lines are
printed as they complete and again in the terminal summary.
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from gradcheck import GRAD_NET, gradient_check, relative_error
from oracles import hand_count, naive_psnr, naive_ssim
from iqtcfm.config import SamplerConfig, SimulatorConfig, TrainingConfig, desk_config, tiny_config
from iqtcfm.core import DatasetManifest, PairedSample, make_rng
from iqtcfm.flow import cfm_loss, integrate, interpolate, sample_noise
from iqtcfm.metrics import METHOD_TITLES, psnr, ssim
from iqtcfm.network import build_model, count_params, load_checkpoint, pixel_shuffle, pixel_unshuffle
from iqtcfm.pipeline import main, run_dir_for
from iqtcfm.simulator import WM, DegradationParams, degrade, sample_params_ind, sample_params_ood
from iqtcfm.training import OptimizerState, adam_step, cosine_lr, make_batch

RESULTS = {}


@contextmanager
def criterion(n, title):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException:
        RESULTS[n] = ("FAIL", title, time.perf_counter() - t0)
        print(f"criterion {n}: FAIL {title}")
        raise
    RESULTS[n] = ("PASS", title, time.perf_counter() - t0)
    print(f"criterion {n}: PASS {title}")


def test_c01_structural_exactness():
    with criterion(1, "pixel shuffle/unshuffle exact inverse"):
        t0 = time.perf_counter()
        rng = make_rng(0, "c1")
        for _ in range(100):
            c, h, w = (int(v) for v in rng.integers(1, 9, size=3))
            x = rng.standard_normal((c, 2 * h, 2 * w)).astype(np.float32)
            assert np.array_equal(pixel_shuffle(pixel_unshuffle(x)), x)
        y = pixel_unshuffle(np.arange(1, 17, dtype=np.float32).reshape(1, 4, 4))
        assert y[:, 0, 0].tolist() == [1, 2, 5, 6]
        assert y[0].tolist() == [[1, 3], [9, 11]]
        assert time.perf_counter() - t0 < 1.0


def test_c02_gradient_correctness():
    with criterion(2, "finite-difference gradients per block type"):
        t0 = time.perf_counter()
        assert GRAD_NET.depth == 2 and GRAD_NET.base_channels == 4
        res = gradient_check(per_block=20, seed=0, size=16)
        assert set(res) == {"stem", "res_se", "down", "up", "transformer", "head"}
        for kind, rows in res.items():
            assert len(rows) >= 20
            worst = max(relative_error(a, b) for _, _, a, b in rows)
            assert worst < 1e-3, (kind, worst)
        assert time.perf_counter() - t0 < 120


def test_c03_ode_fidelity():
    with criterion(3, "Euler order and Gaussian transport"):
        t0 = time.perf_counter()
        x0 = np.array([1.0])
        errs = [abs(integrate(lambda x, t, c: -x, x0, None, SamplerConfig(n_steps=n))[0] - math.exp(-1)) for n in (10, 20, 40, 80)]
        for a, b in zip(errs, errs[1:]):
            assert 0.4 <= b / a <= 0.6

        m, s, n = 0.7, 0.4, 10_000

        def field(x, t, cond):
            var = (1 - t) ** 2 + (t * s) ** 2
            return m + (t * s * s - (1 - t)) / var * (x - t * m)

        z = sample_noise((n,), make_rng(0, "c3")).astype(np.float64)
        x1 = integrate(field, z, None, SamplerConfig(n_steps=200, method="midpoint"))
        assert abs(x1.mean() - m) < 3 * s / math.sqrt(n)
        assert abs(x1.var() - s * s) < 3 * s * s * math.sqrt(2 / (n - 1))
        assert time.perf_counter() - t0 < 60


def test_c04_flow_identities():
    with criterion(4, "path endpoints, zero loss, zero-head first batch"):
        rng = make_rng(0, "c4")
        a = rng.standard_normal((1, 64, 64)).astype(np.float32)
        b = rng.random((1, 64, 64)).astype(np.float32)
        assert np.array_equal(interpolate(a, b, 0.0), a)
        assert np.array_equal(interpolate(a, b, 1.0), b)
        assert cfm_loss(b - a, b - a) == 0.0
        net = desk_config().network
        model = build_model(net, make_rng(0, "init"))
        samples = [PairedSample(rng.random((1, 64, 64)).astype(np.float32), rng.random((1, 64, 64)).astype(np.float32), f"s{i}") for i in range(4)]
        x_t, t, tgt, cond = make_batch(samples, make_rng(1))
        loss = float(cfm_loss(model(x_t, cond, t), tgt).detach())
        assert abs(loss - float((tgt.double() ** 2).mean())) < 1e-6


def test_c05_simulator_contract():
    with criterion(5, "InD/OOD gates and measured WM SNR"):
        cfg = SimulatorConfig()
        r1, r2 = make_rng(0, "c5", "ind"), make_rng(0, "c5", "ood")
        ind = [sample_params_ind(cfg, r1) for _ in range(5000)]
        assert all(p.mahalanobis < 1 and p.snr_wm > p.snr_gm for p in ind)
        ood = [sample_params_ood(cfg, r2) for _ in range(5000)]
        assert all(p.mahalanobis >= 1 for p in ood)
        high = np.full((1, 128, 128), 0.8, np.float32)
        mask = np.full((128, 128), WM, np.uint8)
        mask[:2] = 1
        out = degrade(high, mask, DegradationParams(10.0, 8.0, 1.0, 1, 0.0), make_rng(0, "c5", "snr"))
        region = out[0][4:]
        assert region.size >= 10**4
        assert abs(region.mean() / region.std() / 10.0 - 1) < 0.05


def test_c06_metric_oracles():
    with criterion(6, "PSNR/SSIM against double-precision oracles"):
        rng = make_rng(0, "c6")
        for _ in range(10):
            x = rng.random((24, 24))
            y = np.clip(x + rng.normal(0, rng.uniform(0.02, 0.2), x.shape), 0, 1)
            assert abs(psnr(x, y) - naive_psnr(x, y)) < 1e-6
            assert abs(ssim(x, y) - naive_ssim(x, y)) < 1e-6
            assert ssim(x, x) == 1.0
        assert abs(psnr(np.zeros((8, 8)), np.full((8, 8), 0.1)) - 20.0) < 1e-9


def test_c07_scheduler_optimizer():
    with criterion(7, "cosine endpoints and first Adam step"):
        cfg = TrainingConfig()
        assert cosine_lr(0, cfg) == 1e-4
        assert cosine_lr(cfg.epochs, cfg) == 1e-6
        p = [torch.zeros(1, dtype=torch.float64)]
        opt = OptimizerState.zeros_like(p)
        adam_step(p, [torch.ones(1, dtype=torch.float64)], opt, 1e-4, TrainingConfig(weight_decay=0.0))
        assert abs(float(p[0]) - (-1e-4 / (1 + 1e-8))) < 1e-9


def _pipeline(runs_dir):
    argv = ["--config", "desk", "--runs-dir", str(runs_dir)]
    t0 = time.perf_counter()
    for cmd in ("simulate", "train", "infer", "evaluate", "report"):
        assert main([cmd, *argv]) == 0, cmd
    run = desk_config()
    run.paths.runs_dir = str(runs_dir)
    return run_dir_for(run), time.perf_counter() - t0


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    a, seconds = _pipeline(tmp_path_factory.mktemp("desk_a"))
    b, _ = _pipeline(tmp_path_factory.mktemp("desk_b"))
    return a, b, seconds


def _aggregate(run_dir, split):
    out = {}
    import csv

    with open(run_dir / "reports" / f"{split}_aggregate.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            if r["metric"] in ("psnr", "ssim") and r["mean"] != "n/a":
                out[(r["method"], r["metric"])] = float(r["mean"])
    return out


def test_c08_end_to_end_ordering(desk_runs):
    with criterion(8, "desk run: CFM beats interpolation, InD above OOD"):
        run_dir, _, seconds = desk_runs
        cfg = desk_config()
        m = DatasetManifest.read(run_dir / "manifest")
        assert m.counts()["train"] >= 8 and cfg.data.image_size == 64 and cfg.training.epochs <= 50
        ind = _aggregate(run_dir, "test_ind")
        ood = _aggregate(run_dir, "test_ood")
        print(f"InD {ind}\nOOD {ood}")
        assert ind[("cfm", "psnr")] > ind[("interpolation", "psnr")]
        assert ind[("cfm", "ssim")] > ind[("interpolation", "ssim")]
        assert all(math.isfinite(v) for v in ood.values())
        assert ind[("cfm", "psnr")] > ood[("cfm", "psnr")]
        assert seconds < 30 * 60


def _tree(run_dir):
    out = {}
    for sub in ("manifest", "checkpoints", "curves", "recon", "reports", "panels"):
        for p in sorted((run_dir / sub).rglob("*")):
            if p.is_file():
                out[str(p.relative_to(run_dir))] = p.read_bytes()
    return out


def test_c09_determinism(desk_runs):
    with criterion(9, "two desk runs are bit-identical"):
        a, b, _ = desk_runs
        assert a.name == b.name
        ta, tb = _tree(a), _tree(b)
        for sub in ("manifest/manifest.jsonl", "checkpoints/best.ckpt", "checkpoints/last.ckpt", "reports/test_ind_report.txt"):
            assert sub in ta
        assert any(k.startswith("recon/") for k in ta)
        assert ta.keys() == tb.keys()
        diff = [k for k in ta if ta[k] != tb[k]]
        assert diff == []


def test_c10_reporting_parity(tmp_path):
    with criterion(10, "report layout and exact parameter count"):
        argv = ["--config", "tiny", "--runs-dir", str(tmp_path)]
        for cmd in ("train", "evaluate"):
            assert main([cmd, *argv]) == 0
        run = tiny_config()
        run.paths.runs_dir = str(tmp_path)
        rd = run_dir_for(run)
        store, cfg, _ = load_checkpoint(rd / "checkpoints" / "best.ckpt")
        assert count_params(cfg) == store.total_count == hand_count(cfg)
        assert sum(p.numel() for p in torch.nn.Conv2d(1, 8, 3).parameters()) == 80
        for split in ("test_ind", "test_ood"):
            lines = (rd / "reports" / f"{split}_report.txt").read_text().splitlines()
            assert lines[1].split() == ["Metric", METHOD_TITLES["interpolation"], METHOD_TITLES["cfm"]]
            assert [ln.split()[0] for ln in lines[3:7]] == ["PSNR↑", "SSIM↑", "LPIPS↓", "Params↓"]
            assert lines[6].split()[-1] == f"{store.total_count:,}"
