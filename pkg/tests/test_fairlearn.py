import numpy as np
import pytest

from mmdbfair import diffcore as dc
from mmdbfair.data import MISSING, DataError, DatasetSplit, synthetic_splits
from mmdbfair.estimators import PowerConfig, block_power_hat
from mmdbfair.fairlearn import (
    BatchSampler, Batches, FairModel, FairnessWeights, TrainConfig, aggregate, eo_objective,
    fair_kernel_objective, minimax_objective, objective_terms, run_one, sweep, train,
)
from mmdbfair.kernels import GaussianKernel, h_matrix

CFG = PowerConfig(m=64)


@pytest.fixture(scope="module")
def splits():
    return synthetic_splits(300, 120, 200, seed=1)


def make_model(seed=0, grid=(0.5, 1.0, 2.0)):
    m = FairModel.create(2, (6, 4), 4, rng=np.random.default_rng(seed))
    m.sensitive_grid = list(grid)
    m.target_grid = list(grid)
    return m


def draw(split, mode, per_group=8, seed=0):
    return BatchSampler(split, mode, per_group, np.random.default_rng(seed)).draw()


def power_on_features(model, p, q, sigma):
    fp, fq = model.represent(p), model.represent(q)
    return block_power_hat(h_matrix(fp, fq, GaussianKernel(sigma)), CFG).item()


def test_weights_validation():
    with pytest.raises(ValueError):
        FairnessWeights(mode="xx")
    with pytest.raises(ValueError):
        FairnessWeights(lambda_s=-1)


def test_fair_kernel_objective_is_power_difference(splits):
    model = make_model()
    b = draw(splits[0], "dp")
    val = fair_kernel_objective(b, model, CFG).item()
    sigma = float(np.exp(model.log_sigma.item()))
    ref = power_on_features(model, *b.sensitive[0], sigma) - power_on_features(model, *b.target, sigma)
    assert val == pytest.approx(ref, rel=1e-12, abs=1e-15)


def test_fair_kernel_objective_zero_when_pairs_coincide(splits):
    model = make_model()
    b = draw(splits[0], "dp")
    same = Batches([b.target], b.target, b.cls_x, b.cls_t)
    assert fair_kernel_objective(same, model, CFG).item() == 0.0


def test_minimax_grid_term_is_max_over_sigmas(splits):
    model = make_model()
    b = draw(splits[0], "dp")
    w = FairnessWeights(lambda_s=1.0, lambda_t=0.0, lambda_cls=0.0)
    val = minimax_objective(b, model, CFG, w).item()
    ref = max(power_on_features(model, *b.sensitive[0], s) for s in model.sensitive_grid)
    assert val == pytest.approx(ref, rel=1e-12)


def test_singleton_grid_reduces_to_weighted_kernel_objective(splits):
    model = make_model()
    sigma = float(np.exp(model.log_sigma.item()))
    model.sensitive_grid = [sigma]
    model.target_grid = [sigma]
    b = draw(splits[0], "dp")
    w = FairnessWeights(lambda_s=3.0, lambda_t=0.5, lambda_cls=0.0)
    assert minimax_objective(b, model, CFG, w).item() == pytest.approx(
        fair_kernel_objective(b, model, CFG, w).item(), rel=1e-12)


def test_zero_fairness_weights_leave_cross_entropy(splits):
    model = make_model()
    b = draw(splits[0], "dp")
    w = FairnessWeights(lambda_s=0.0, lambda_t=0.0, lambda_cls=1.0)
    ce = dc.cross_entropy(model.logits(b.cls_x), b.cls_t).item()
    assert minimax_objective(b, model, CFG, w).item() == pytest.approx(ce, rel=1e-12)


def test_eo_objective_sums_two_conditional_terms(splits):
    model = make_model()
    b = draw(splits[0], "eo")
    assert len(b.sensitive) == 2
    w = FairnessWeights(lambda_s=1.0, lambda_t=0.0, lambda_cls=0.0, mode="eo")
    val = eo_objective(b, model, CFG, w).item()
    ref = sum(max(power_on_features(model, p, q, s) for s in model.sensitive_grid) for p, q in b.sensitive)
    assert val == pytest.approx(ref, rel=1e-12)


def test_objective_monotonicity(splits):
    model = make_model()
    b = draw(splits[0], "dp")
    terms = objective_terms(b, model, CFG, FairnessWeights())
    base = terms["total"].item()
    up = objective_terms(b, model, CFG, FairnessWeights(lambda_s=2.0))["total"].item()
    down = objective_terms(b, model, CFG, FairnessWeights(lambda_t=2.0))["total"].item()
    assert up - base == pytest.approx(terms["rho_s"].item(), rel=1e-10)
    assert base - down == pytest.approx(terms["rho_t"].item(), rel=1e-10)


def test_mode_mismatch(splits):
    model = make_model()
    with pytest.raises(ValueError):
        minimax_objective(draw(splits[0], "eo"), model, CFG, FairnessWeights(mode="eo"))
    with pytest.raises(ValueError):
        eo_objective(draw(splits[0], "dp"), model, CFG, FairnessWeights())


def test_empty_grid_rejected(splits):
    model = make_model()
    model.sensitive_grid = []
    with pytest.raises(ValueError):
        minimax_objective(draw(splits[0], "dp"), model, CFG, FairnessWeights())


@pytest.mark.parametrize("kind", ["kernel", "dp", "eo"])
def test_objective_gradients(splits, kind):
    model = make_model(seed=3)
    mode = "eo" if kind == "eo" else "dp"
    b = draw(splits[0], mode, per_group=8, seed=4)
    if kind == "kernel":
        fn = lambda: fair_kernel_objective(b, model, CFG)
    else:
        w = FairnessWeights(lambda_s=1.0, lambda_t=1.0, lambda_cls=1.0, mode=mode)
        fn = lambda: objective_terms(b, model, CFG, w)["total"]
    assert dc.grad_check(fn, model.parameters()) <= 1e-4


def test_max_over_grid_gradient_uses_argmax_only(splits):
    model = make_model()
    b = draw(splits[0], "dp")
    w = FairnessWeights(lambda_s=1.0, lambda_t=0.0, lambda_cls=0.0)
    vals = [power_on_features(model, *b.sensitive[0], s) for s in model.sensitive_grid]
    best = model.sensitive_grid[int(np.argmax(vals))]
    for p in model.parameters():
        p.grad = None
    minimax_objective(b, model, CFG, w).backward()
    full = np.concatenate([p.grad.ravel() for p in model.featurizer.parameters()])
    single = make_model()
    single.sensitive_grid = [best]
    for p in single.parameters():
        p.grad = None
    minimax_objective(b, single, CFG, w).backward()
    ref = np.concatenate([p.grad.ravel() for p in single.featurizer.parameters()])
    np.testing.assert_allclose(full, ref, rtol=1e-12, atol=1e-15)


def test_dp_sampler_never_reads_joint_labels():
    # target-labelled and sensitive-labelled rows are disjoint
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 2))
    t = np.where(np.arange(200) < 100, rng.integers(0, 2, 200), MISSING)
    s = np.where(np.arange(200) >= 100, rng.integers(0, 2, 200), MISSING)
    split = DatasetSplit(x, t, s)
    b = draw(split, "dp")
    sens_rows = {tuple(r) for pair in b.sensitive for part in pair for r in part}
    targ_rows = {tuple(r) for part in b.target for r in part}
    assert all(tuple(r) in {tuple(v) for v in x[100:]} for r in sens_rows)
    assert all(tuple(r) in {tuple(v) for v in x[:100]} for r in targ_rows)
    assert {tuple(r) for r in b.cls_x} <= {tuple(v) for v in x[:100]}
    with pytest.raises(DataError):
        draw(split, "eo")


def test_small_cells_sampled_with_replacement():
    x = np.arange(20.0).reshape(10, 2)
    split = DatasetSplit(x, [0, 1] * 5, [0] * 9 + [1])
    b = draw(split, "dp", per_group=4)
    assert b.sensitive[0][1].shape == (4, 2)
    assert (b.sensitive[0][1] == x[9]).all()


def test_zero_epochs_returns_initial_model(splits):
    cfg = TrainConfig(max_epochs=0)
    m1, hist = train(splits, FairnessWeights(), cfg, seed=5)
    m2, _ = train(splits, FairnessWeights(), cfg, seed=5)
    assert hist == []
    for a, b in zip(m1.parameters(), m2.parameters()):
        assert np.array_equal(a.data, b.data)


def test_training_is_deterministic_and_records_history(splits):
    cfg = TrainConfig(max_epochs=3, optimizer="adam", lr=1e-2)
    m1, h1 = train(splits, FairnessWeights(lambda_s=10.0), cfg, seed=2)
    m2, h2 = train(splits, FairnessWeights(lambda_s=10.0), cfg, seed=2)
    assert h1 == h2
    assert set(h1[0]) == {"epoch", "cls_loss", "rho_s", "rho_t", "train_objective", "val_objective"}
    for a, b in zip(m1.parameters(), m2.parameters()):
        assert np.array_equal(a.data, b.data)


def test_early_stopping_restores_best(splits):
    cfg = TrainConfig(max_epochs=12, patience=2, optimizer="adam", lr=0.3)
    model, hist = train(splits, FairnessWeights(), cfg, seed=0)
    assert len(hist) <= 12
    best = min(h["val_objective"] for h in hist)
    if len(hist) < 12:
        assert hist[-1]["val_objective"] >= best
        assert sum(h["val_objective"] > best for h in hist[-2:]) == 2


def test_separable_data_reaches_high_accuracy():
    data = synthetic_splits(1000, 250, 500, seed=3, target_shift=3.0)
    cfg = TrainConfig(max_epochs=10, optimizer="adam", lr=1e-2)
    model, _ = train(data, FairnessWeights(lambda_s=0.0), cfg, seed=0)
    assert np.mean(model.predict(data[2].features) == data[2].t) >= 0.99


def test_model_save_load_round_trip(tmp_path, splits):
    model = make_model(seed=9)
    path = tmp_path / "m.mbfm"
    model.save(path)
    assert path.read_bytes()[:4] == b"MBFM"
    back = FairModel.load(path)
    assert back.featurizer.widths == model.featurizer.widths
    assert back.sensitive_grid == model.sensitive_grid
    x = splits[2].features
    np.testing.assert_array_equal(back.represent(x), model.represent(x))
    np.testing.assert_array_equal(back.logits(x), model.logits(x))


def test_model_load_rejects_other_files(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"XXXX1234")
    with pytest.raises(ValueError):
        FairModel.load(p)


def test_sweep_bookkeeping_and_aggregate(splits):
    cfg = TrainConfig(max_epochs=1)
    rows, agg = sweep(splits, [0.0, 10.0], seeds=[0, 1], cfg=cfg, audits=False)
    assert len(rows) == 4 and len(agg) == 2
    assert [r["lambda_s"] for r in rows] == [0.0, 0.0, 10.0, 10.0]
    acc0 = [r["accuracy"] for r in rows[:2]]
    assert agg[0]["accuracy_mean"] == pytest.approx(np.mean(acc0))
    assert agg[0]["accuracy_std"] == pytest.approx(np.std(acc0))


def test_single_sweep_row_equals_train_then_evaluate(splits):
    from mmdbfair.evaluation import fairness_report
    cfg = TrainConfig(max_epochs=1)
    rows, _ = sweep(splits, [1.0], seeds=[3], cfg=cfg, audits=False)
    model, _ = train(splits, FairnessWeights(lambda_s=1.0), cfg, seed=3)
    rep = fairness_report(model.predict(splits[2].features), splits[2].t, splits[2].s)
    assert rows[0]["accuracy"] == rep.accuracy and rows[0]["dp"] == rep.dp and rows[0]["eo"] == rep.eo


def test_parallel_sweep_matches_serial(splits):
    cfg = TrainConfig(max_epochs=1)
    serial, _ = sweep(splits, [0.0, 1.0], seeds=[0], cfg=cfg, audits=False)
    parallel, _ = sweep(splits, [0.0, 1.0], seeds=[0], cfg=cfg, audits=False, workers=2)
    assert repr(serial) == repr(parallel)  # NaN audit columns compare unequal otherwise


def test_lambda_zero_matches_plain_classifier(splits):
    # with both power weights at zero the run is ordinary cross-entropy training
    cfg = TrainConfig(max_epochs=2)
    row, _ = run_one(splits, FairnessWeights(lambda_s=0.0, lambda_t=0.0), cfg, 0, audits=False)
    model, hist = train(splits, FairnessWeights(lambda_s=0.0, lambda_t=0.0), cfg, seed=0)
    assert all(h["train_objective"] == pytest.approx(h["cls_loss"]) for h in hist)
    assert row["accuracy"] == np.mean(model.predict(splits[2].features) == splits[2].t)


def test_sweep_rejects_empty_lists(splits):
    with pytest.raises(ValueError):
        sweep(splits, [], seeds=[0])
    with pytest.raises(ValueError):
        sweep(splits, [1.0], seeds=[])
    assert aggregate([]) == []
