"""Acceptance criteria, one test each, at the pinned tolerances.

Every test records a PASS/FAIL line that is printed in the terminal summary.
Criteria that depend on the COMPAS file look for it under
``MMDBFAIR_DATA_DIR`` and fail with an explanation when it is absent.
"""

import math
import time

import numpy as np
import pytest

from mmdbfair import diffcore as dc
from mmdbfair.cli import load_dataset, load_run_config, main
from mmdbfair.data import chi2_independence, make_orthogonal, synthetic_splits
from mmdbfair.estimators import PowerConfig, block_power_hat, block_test, mmd_u_sq, two_sample_test, variance_hat
from mmdbfair.fairlearn import (
    BatchSampler, FairModel, FairnessWeights, TrainConfig, fair_kernel_objective, objective_terms, run_one, sweep,
)
from mmdbfair.kernels import ConstantKernel, GaussianKernel, h_matrix


def finish(record, number, ok, detail):
    record(number, ok, detail)
    assert ok, detail


def compas_dataset(**overrides):
    kv = {"schema": "compas", **{k: str(v) for k, v in overrides.items()}}
    cfg = load_run_config(None, kv)
    try:
        return cfg, load_dataset(cfg)
    except FileNotFoundError as exc:
        return cfg, exc


# 1 ----------------------------------------------------------------------


def test_c01_unbiasedness(criterion):
    t0 = time.time()
    rng = np.random.default_rng(2024)
    k = GaussianKernel(1.0)
    draws = np.empty(10_000)
    for i in range(draws.size):
        x, y = rng.normal(size=(50, 1)), rng.normal(1.0, 1.0, size=(50, 1))
        draws[i] = mmd_u_sq(h_matrix(x, y, k)).item()
    truth = 2 / math.sqrt(3) * (1 - math.exp(-1 / 6))
    se = draws.std(ddof=1) / math.sqrt(draws.size)
    z = (draws.mean() - truth) / se
    elapsed = time.time() - t0
    finish(criterion, 1, abs(z) <= 3 and elapsed < 60,
           f"mean {draws.mean():.5f} vs {truth:.5f}, {z:+.2f} SE, {elapsed:.1f}s")


# 2 ----------------------------------------------------------------------


def test_c02_type_one_calibration(criterion):
    t0 = time.time()
    k = GaussianKernel(1.0)
    cfg = PowerConfig(alpha=0.05, m=50, n_permutations=200)
    rejections = 0
    for trial in range(2000):
        rng = np.random.default_rng([7, trial])
        x, y = rng.normal(size=(50, 1)), rng.normal(size=(50, 1))
        rejections += two_sample_test(x, y, k, cfg, seed=[8, trial]).reject
    rate = rejections / 2000
    elapsed = time.time() - t0
    finish(criterion, 2, 0.038 <= rate <= 0.062 and elapsed < 300,
           f"false-rejection rate {rate:.4f} over 2000 trials, {elapsed:.1f}s")


# 3 ----------------------------------------------------------------------


def test_c03_block_power_fidelity(criterion):
    # lam = 0: the default n**(2/3) regulariser swamps the variance at this size
    m, b, shift = 1024, 32, 0.25
    k = GaussianKernel(1.0)
    cfg = PowerConfig(alpha=0.05, m=m, b=b, B=b, lam=0.0)
    rng = np.random.default_rng(33)
    estimates = []
    for _ in range(100):
        x, y = rng.normal(size=(m, 1)), rng.normal(shift, 1.0, size=(m, 1))
        estimates.append(block_power_hat(h_matrix(x, y, k), cfg).item())
    rejections = 0
    trials = 1000
    for trial in range(trials):
        x, y = rng.normal(size=(m, 1)), rng.normal(shift, 1.0, size=(m, 1))
        rejections += block_test(x, y, k, b, b, alpha=0.05, seed=trial).reject
    rate, est = rejections / trials, float(np.mean(estimates))
    finish(criterion, 3, abs(rate - est) <= 0.10, f"block-test rejection rate {rate:.3f}, estimate {est:.3f}")


# 4 ----------------------------------------------------------------------


def test_c04_rescaling_identity(criterion):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(4, 20))
        A = rng.normal(size=(n, n))
        H = A + A.T
        m, ell = int(rng.integers(2, 5000)), int(rng.integers(1, 5000))
        lam = float(rng.uniform(0.01, 10.0))
        left = variance_hat(H, ell, lam * ell / m).item()
        right = (m / ell) * variance_hat(H, m, lam).item()
        worst = max(worst, abs(left - right) / abs(right))
    finish(criterion, 4, worst <= 1e-12, f"max relative error {worst:.3e} (regularised term scales differently)")


# 5 ----------------------------------------------------------------------


def test_c05_constant_kernel_power(criterion):
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(20, 3)), rng.normal(2.0, 1.0, size=(20, 3))
    H = h_matrix(x, y, ConstantKernel())
    errs = [abs(block_power_hat(H, PowerConfig(alpha=a, m=400, lam=lam)).item() - a)
            for a in (0.01, 0.05, 0.1) for lam in (None, 0.5)]
    finish(criterion, 5, max(errs) <= 1e-9, f"max |rho - alpha| = {max(errs):.1e}")


# 6 ----------------------------------------------------------------------


def test_c06_gradients(criterion):
    data = synthetic_splits(300, 100, 100, seed=6)
    cfg = PowerConfig(m=64)
    errs = {}
    for kind in ("kernel", "dp", "eo"):
        model = FairModel.create(2, (6, 4), 4, rng=np.random.default_rng(1), init_x=data[0].features)
        mode = "eo" if kind == "eo" else "dp"
        batch = BatchSampler(data[0], mode, 8, np.random.default_rng(2)).draw()
        if kind == "kernel":
            fn = lambda: fair_kernel_objective(batch, model, cfg)
        else:
            w = FairnessWeights(lambda_s=1.0, lambda_t=1.0, lambda_cls=1.0, mode=mode)
            fn = lambda: objective_terms(batch, model, cfg, w)["total"]
        errs[kind] = dc.grad_check(fn, model.parameters())
    finish(criterion, 6, max(errs.values()) <= 1e-4,
           "relative errors " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))


# 7 ----------------------------------------------------------------------


def test_c07_synthetic_end_to_end(criterion):
    t0 = time.time()
    data = synthetic_splits(2000, 500, 1000, seed=0)
    cfg = TrainConfig(encoder=(8, 8, 8), classifier_hidden=8, optimizer="adam", lr=1e-2, max_epochs=30)
    fair, _ = run_one(data, FairnessWeights(lambda_s=100.0, mode="eo"), cfg, seed=0)
    plain, _ = run_one(data, FairnessWeights(lambda_s=0.0, mode="eo"), cfg, seed=0)
    elapsed = time.time() - t0
    ok = (fair["mmd_audit_power"] <= 0.15 and fair["accuracy"] >= 0.95 and plain["mmd_audit_power"] >= 0.9
          and elapsed < 600)
    finish(criterion, 7, ok, f"lambda_s=100: power {fair['mmd_audit_power']:.2f}, accuracy {fair['accuracy']:.3f}; "
                             f"lambda_s=0: power {plain['mmd_audit_power']:.2f}; {elapsed:.0f}s")


# 8 ----------------------------------------------------------------------


def test_c08_chi2_synthetic(criterion):
    below = sum(chi2_independence(*make_orthogonal(1000, seed=100 + i)[1:])[0] < 3.85 for i in range(100))
    finish(criterion, 8.1, below >= 94, f"synthetic independent labels: {below}/100 with chi2 < 3.85")


def test_c08_chi2_compas(criterion):
    _, data = compas_dataset()
    if isinstance(data, Exception):
        finish(criterion, 8.2, False, f"COMPAS data unavailable ({data})")
    stats = {split.tag: chi2_independence(split.t, split.s)[0] for split in data[:2]}
    ok = abs(stats["train"] - 26.032) <= 0.5 and abs(stats["val"] - 5.263) <= 0.3
    finish(criterion, 8.2, ok, f"COMPAS chi2 train {stats['train']:.3f}, val {stats['val']:.3f}")


# 9 ----------------------------------------------------------------------


def test_c09_compas_audit_anchor(criterion):
    cfg, data = compas_dataset(mode="eo")
    if isinstance(data, Exception):
        finish(criterion, 9, False, f"COMPAS data unavailable ({data})")
    _, agg = sweep(data, (0.0, 1e3, 1e4), (0, 1, 2), cfg.train_config(), cfg.weights())
    acc = {r["lambda_s"]: r["sensitive_audit_acc_mean"] for r in agg}
    ok = all(abs(acc[ls] - 0.66) <= 0.03 for ls in (1e3, 1e4)) and acc[0.0] >= 0.70
    finish(criterion, 9, ok, "sensitive-audit accuracy " + ", ".join(f"{k:g}: {v:.3f}" for k, v in acc.items()))


# 10 ---------------------------------------------------------------------


def test_c10_classifier_ablation(criterion):
    cfg, data = compas_dataset(mode="eo")
    if isinstance(data, Exception):
        finish(criterion, 10, False, f"COMPAS data unavailable ({data})")
    acc = {}
    for lam_cls in (0.0, 1.0):
        w = FairnessWeights(lambda_s=cfg.lambda_s, lambda_t=cfg.lambda_t, lambda_cls=lam_cls, mode="eo")
        rows = [run_one(data, w, cfg.train_config(), seed, audits=False)[0] for seed in (0, 1, 2)]
        acc[lam_cls] = float(np.mean([r["accuracy"] for r in rows]))
    finish(criterion, 10, acc[1.0] - acc[0.0] >= 0.05,
           f"accuracy lambda_cls=1 {acc[1.0]:.3f}, lambda_cls=0 {acc[0.0]:.3f}")


# 11 ---------------------------------------------------------------------


def test_c11_determinism(criterion, tmp_path):
    args = ["--synthetic_n", "800", "--max_epochs", "3", "--mode", "eo", "--seed", "5"]
    for d in ("a", "b"):
        assert main(["train", "--out-dir", str(tmp_path / d), *args]) == 0
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
               for f in ("history.csv", "report.csv"))
    finish(criterion, 11, same, "history.csv and report.csv byte-identical across reruns" if same else "outputs differ")
