"""Fairness metrics, adversarial audits of learned representations, transfer checks."""

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .data import MISSING, DataError
from .diffcore import Adam, Tensor, cross_entropy
from .estimators import PowerConfig, block_power_hat, permutation_statistics, quantile_index
from .kernels import MLP, DeepKernel, h_matrix, median_heuristic


def _binary(a, name):
    a = np.asarray(a).reshape(-1)
    if not np.isin(a, (0, 1)).all():
        raise DataError(f"{name} must be binary 0/1")
    return a.astype(np.int64)


def _rate(pred, mask, value):
    if not mask.any():
        raise DataError("empty group")
    return float(np.mean(pred[mask] == value))


def demographic_parity(pred, s):
    """1 - |P(pred=1 | s=0) - P(pred=1 | s=1)|."""
    pred, s = _binary(pred, "predictions"), _binary(s, "s")
    return 1.0 - abs(_rate(pred, s == 0, 1) - _rate(pred, s == 1, 1))


def equalized_odds_per_class(pred, t, s):
    """{t: 1 - |P(pred=t | T=t, s=0) - P(pred=t | T=t, s=1)|}; None where a cell is empty."""
    pred, t, s = _binary(pred, "predictions"), _binary(t, "t"), _binary(s, "s")
    out = {}
    for c in (0, 1):
        a, b = (t == c) & (s == 0), (t == c) & (s == 1)
        out[c] = None if not (a.any() and b.any()) else 1.0 - abs(_rate(pred, a, c) - _rate(pred, b, c))
    return out


def equalized_odds(pred, t, s):
    """Mean over target classes of the per-class equal-opportunity score."""
    per = equalized_odds_per_class(pred, t, s)
    if any(v is None for v in per.values()):
        raise DataError("a (target, sensitive) cell is empty")
    return float(np.mean(list(per.values())))


@dataclass
class FairnessReport:
    accuracy: float
    dp: float
    eo: float
    eo_per_class: Dict[int, Optional[float]] = field(default_factory=dict)


def fairness_report(pred, t, s):
    """Accuracy, DP and EO on rows carrying both labels; EO averages the classes present."""
    t, s = np.asarray(t), np.asarray(s)
    keep = (t != MISSING) & (s != MISSING)
    if not keep.any():
        raise DataError("no rows carry both labels")
    pred, t, s = np.asarray(pred)[keep], t[keep], s[keep]
    per = equalized_odds_per_class(pred, t, s)
    present = [v for v in per.values() if v is not None]
    eo = float(np.mean(present)) if present else float("nan")
    return FairnessReport(float(np.mean(pred == t)), demographic_parity(pred, s), eo, per)


# --------------------------------------------------------------------------
# audits


def _audit_partition(n, seed, train_frac=0.6):
    order = np.random.default_rng([seed, 11]).permutation(n)
    cut = int(round(train_frac * n))
    return order[:cut], order[cut:]


def fit_classifier(x, y, hidden=None, seed=0, epochs=50, lr=1e-3, batch_size=64):
    """One-hidden-layer leaky-ReLU classifier trained with Adam on cross-entropy."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng([seed, 12])
    hidden = x.shape[1] if hidden is None else hidden
    net = MLP([x.shape[1], max(int(hidden), 1), int(y.max()) + 1 if y.size else 2], rng=rng)
    opt = Adam(net.parameters(), lr=lr)
    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            cross_entropy(net(Tensor(x[idx])), y[idx]).backward()
            opt.step()
    return net


def sensitive_classifier_audit(reps, s, seed=0, epochs=50, lr=1e-3):
    """Held-out accuracy of an MLP predicting s from the representation, and the majority baseline."""
    reps = np.asarray(reps, dtype=np.float64)
    s = np.asarray(s)
    keep = s != MISSING
    reps, s = reps[keep], s[keep].astype(np.int64)
    if reps.shape[0] < 10:
        raise DataError("too few labelled rows for a sensitive audit")
    if np.unique(s).size < 2:
        raise DataError("s takes a single value; nothing to audit")
    tr, ev = _audit_partition(reps.shape[0], seed)
    net = fit_classifier(reps[tr], s[tr], hidden=reps.shape[1], seed=seed, epochs=epochs, lr=lr)
    pred = net.numpy_forward(reps[ev]).argmax(1)
    majority = max(np.mean(s[ev] == 0), np.mean(s[ev] == 1))
    return float(np.mean(pred == s[ev])), float(majority)


def _train_audit_kernel(reps, s, seed, epochs, lr, per_group, hidden):
    rng = np.random.default_rng([seed, 13])
    g0, g1 = np.flatnonzero(s == 0), np.flatnonzero(s == 1)
    feat = MLP([reps.shape[1], hidden, hidden], rng=rng)
    sigma = median_heuristic(feat.numpy_forward(reps[rng.permutation(reps.shape[0])[:500]]))
    kern = DeepKernel.create(feat, sigma)
    cfg = PowerConfig(m=max(min(g0.size, g1.size), 4))
    opt = Adam(kern.parameters(), lr=lr)
    steps = max(1, math.ceil(reps.shape[0] / (2 * per_group)))
    for _ in range(epochs):
        for _ in range(steps):
            p = g0[rng.choice(g0.size, per_group, replace=g0.size < per_group)]
            q = g1[rng.choice(g1.size, per_group, replace=g1.size < per_group)]
            opt.zero_grad()
            power = block_power_hat(h_matrix(reps[p], reps[q], kern), cfg)
            (power * -1.0).backward()
            opt.step()
    return kern


def mmd_power_audit(reps, s, seed=0, trials=100, per_group=32, n_permutations=200, alpha=0.05,
                    epochs=50, lr=1e-3, hidden=16, kernel=None):
    """Rejection rate of permutation tests between sensitive groups under a kernel trained to separate them.

    The kernel is fitted on 60% of the rows; each trial draws ``per_group``
    points per group (without replacement) from the other 40%. Passing
    ``kernel`` skips the fitting step. A statistic tied with the threshold
    rejects with the probability that makes the test exact.
    """
    reps = np.asarray(reps, dtype=np.float64)
    s = np.asarray(s)
    keep = s != MISSING
    reps, s = reps[keep], s[keep].astype(np.int64)
    tr, ev = _audit_partition(reps.shape[0], seed)
    e0, e1 = ev[s[ev] == 0], ev[s[ev] == 1]
    if min(e0.size, e1.size) < 2 * per_group:
        raise DataError(f"need at least {2 * per_group} rows per sensitive group in the audit portion")
    if kernel is None:
        if min(np.sum(s[tr] == 0), np.sum(s[tr] == 1)) < 2:
            raise DataError("too few rows per sensitive group to fit the audit kernel")
        kernel = _train_audit_kernel(reps[tr], s[tr], seed, epochs, lr, per_group, hidden)
    rejections = 0
    for trial in range(trials):
        rng = np.random.default_rng([seed, 14, trial])
        p = e0[rng.choice(e0.size, per_group, replace=False)]
        q = e1[rng.choice(e1.size, per_group, replace=False)]
        stat, null = permutation_statistics(reps[p], reps[q], kernel, n_permutations, [seed, 15, trial])
        thr = np.sort(null)[quantile_index(null.size, alpha)]
        if stat > thr:
            rejections += 1
        elif stat == thr:
            # randomized tie-break keeps the size at alpha when the statistic is degenerate
            gamma = (alpha * null.size - np.sum(null > thr)) / np.sum(null == thr)
            rejections += bool(rng.random() < gamma)
    return rejections / trials


@dataclass
class AuditReport:
    sensitive_accuracy: float
    majority_baseline: float
    mmd_power: float
    trials: int


def audit_representations(reps, s, seed=0, trials=100, epochs=50, classifier_epochs=50):
    acc, base = sensitive_classifier_audit(reps, s, seed=seed, epochs=classifier_epochs)
    power = mmd_power_audit(reps, s, seed=seed, trials=trials, epochs=epochs)
    return AuditReport(acc, base, power, trials)


def transfer_eval(reps, labels, s, seed=0, epochs=50, lr=1e-3):
    """Train an unconstrained classifier on frozen representations for a new label; report on held-out rows."""
    reps = np.asarray(reps, dtype=np.float64)
    labels, s = np.asarray(labels), np.asarray(s)
    keep = (labels != MISSING) & (s != MISSING)
    reps, labels, s = reps[keep], labels[keep].astype(np.int64), s[keep].astype(np.int64)
    if np.unique(labels).size < 2:
        raise DataError("transfer label has a single class")
    tr, ev = _audit_partition(reps.shape[0], seed)
    net = fit_classifier(reps[tr], labels[tr], hidden=reps.shape[1], seed=seed, epochs=epochs, lr=lr)
    pred = net.numpy_forward(reps[ev]).argmax(1)
    return fairness_report(pred, labels[ev], s[ev])


def export_embeddings(model, split, path):
    """CSV of row id, t, s and the representation coordinates (17 significant digits)."""
    reps = model.represent(split.features)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "t", "s"] + [f"z{j}" for j in range(reps.shape[1])])
        for i, row in enumerate(reps):
            w.writerow([i, int(split.t[i]), int(split.s[i])] + [format(v, ".17g") for v in row])
    return path
