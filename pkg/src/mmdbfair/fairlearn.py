"""Fair representation objectives and the training loop.

The sensitive term drives the estimated power of a block MMD test between
sensitive groups down, the target term drives the power between target
classes up, and a cross-entropy head keeps the representation predictive.
"""

import logging
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import DataError, group_indices
from .diffcore import (
    Tensor, concat_rows, cross_entropy, make_optimizer, max_of, pairwise_sqdist, parameter, submatrix,
)
from .estimators import (
    PowerConfig, block_power_hat, permutation_power_hat, random_relabelings,
)
from .kernels import MLP, DeepKernel, default_grid, h_from_sqdist, median_heuristic

log = logging.getLogger(__name__)

MODEL_MAGIC = b"MBFM"
MODEL_VERSION = 1
DEFAULT_LAMBDA_S = (0.0, 0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0)


@dataclass
class FairnessWeights:
    lambda_s: float = 1.0
    lambda_t: float = 1.0
    lambda_cls: float = 1.0
    mode: str = "dp"

    def __post_init__(self):
        self.mode = self.mode.lower()
        if self.mode not in ("dp", "eo"):
            raise ValueError(f"mode must be 'dp' or 'eo', got {self.mode!r}")
        if min(self.lambda_s, self.lambda_t, self.lambda_cls) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    encoder: Sequence[int] = (8, 8, 8)
    classifier_hidden: int = 8
    optimizer: str = "adadelta"
    lr: float = 2.0
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 20
    alpha: float = 0.05
    lam: Optional[float] = None
    m: Optional[int] = None
    grid_size: int = 6
    objective: str = "grid"
    val_batches: int = 10
    steps_per_epoch: Optional[int] = None
    n_permutations: int = 100

    def __post_init__(self):
        if self.objective not in ("grid", "kernel", "perm"):
            raise ValueError("objective must be 'grid', 'kernel' or 'perm'")
        if self.batch_size < 8 or self.batch_size % 2:
            raise ValueError("batch_size must be an even number >= 8")


# --------------------------------------------------------------------------
# model


class FairModel:
    """Shared featurizer, classifier head, a trainable deep-kernel length-scale
    and the fixed Gaussian grids used for the sensitive and target tests."""

    def __init__(self, featurizer, classifier, log_sigma, sensitive_grid, target_grid):
        if classifier.in_dim != featurizer.out_dim:
            raise ValueError("classifier input must match the representation size")
        self.featurizer = featurizer
        self.classifier = classifier
        self.log_sigma = log_sigma
        self.sensitive_grid = [float(s) for s in sensitive_grid]
        self.target_grid = [float(s) for s in target_grid]

    @classmethod
    def create(cls, input_dim, encoder=(8, 8, 8), classifier_hidden=8, rng=None, init_x=None, grid_size=6):
        rng = np.random.default_rng(0) if rng is None else rng
        featurizer = MLP([input_dim, *encoder], rng=rng)
        classifier = MLP([encoder[-1], classifier_hidden, 2], rng=rng)
        sigma = 1.0
        if init_x is not None and len(init_x) >= 2:
            sigma = median_heuristic(featurizer.numpy_forward(init_x))
        grid = default_grid(sigma, grid_size)
        return cls(featurizer, classifier, parameter(np.log(sigma)), grid, list(grid))

    @property
    def rep_dim(self):
        return self.featurizer.out_dim

    def parameters(self) -> List[Tensor]:
        return self.featurizer.parameters() + self.classifier.parameters() + [self.log_sigma]

    def deep_kernel(self):
        return DeepKernel(self.featurizer, self.log_sigma)

    def represent(self, x):
        return self.featurizer.numpy_forward(x)

    def logits(self, x):
        return self.classifier.numpy_forward(self.represent(x))

    def predict(self, x):
        return self.logits(x).argmax(1)

    def snapshot(self):
        return [p.data.copy() for p in self.parameters()]

    def restore(self, arrays):
        for p, a in zip(self.parameters(), arrays):
            p.data = a.copy()

    # serialization ----------------------------------------------------------

    def save(self, path):
        widths = self.featurizer.widths
        head = struct.pack("<4sII", MODEL_MAGIC, MODEL_VERSION, len(widths))
        head += struct.pack(f"<{len(widths)}I", *widths)
        head += struct.pack("<III", self.classifier.widths[1], len(self.sensitive_grid), len(self.target_grid))
        body = np.concatenate([
            np.array(self.sensitive_grid), np.array(self.target_grid),
            *[p.data.ravel() for p in self.parameters()],
        ]).astype("<f8")
        with open(path, "wb") as fh:
            fh.write(head)
            fh.write(body.tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < 12 or raw[:4] != MODEL_MAGIC:
            raise ValueError(f"{path}: not a model file")
        version, nw = struct.unpack_from("<II", raw, 4)
        if version != MODEL_VERSION:
            raise ValueError(f"{path}: unsupported model version {version}")
        off = 12
        widths = list(struct.unpack_from(f"<{nw}I", raw, off))
        off += 4 * nw
        hidden, ns, nt = struct.unpack_from("<III", raw, off)
        off += 12
        vals = np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64)
        model = cls.create(widths[0], widths[1:], hidden)
        expected = ns + nt + sum(p.data.size for p in model.parameters())
        if vals.size != expected:
            raise ValueError(f"{path}: parameter block has {vals.size} values, expected {expected}")
        model.sensitive_grid = vals[:ns].tolist()
        model.target_grid = vals[ns:ns + nt].tolist()
        pos = ns + nt
        for p in model.parameters():
            p.data = vals[pos:pos + p.data.size].reshape(p.data.shape).copy()
            pos += p.data.size
        return model


# --------------------------------------------------------------------------
# batches


@dataclass
class Batches:
    """Paired samples for one optimisation step.

    ``sensitive`` holds one (P, Q) pair in DP mode and one per target class
    in EO mode; ``cls_x``/``cls_t`` are the points the classifier loss uses.
    """

    sensitive: List[Tuple[np.ndarray, np.ndarray]]
    target: Tuple[np.ndarray, np.ndarray]
    cls_x: np.ndarray
    cls_t: np.ndarray


def _draw(rng, idx, k):
    if idx.size >= k:
        return idx[rng.choice(idx.size, size=k, replace=False)]
    return idx[rng.integers(0, idx.size, size=k)]


class BatchSampler:
    def __init__(self, split, mode, per_group=32, rng=None):
        self.split = split
        self.mode = mode
        self.per_group = per_group
        self.rng = np.random.default_rng(0) if rng is None else rng
        split.require_labels(mode)
        self.target_groups = group_indices(split, "t")
        if mode == "eo":
            self.sensitive_groups = group_indices(split, "s", conditional_on_t=True)
        else:
            self.sensitive_groups = group_indices(split, "s")

    def min_group_size(self):
        sizes = [g.size for g in self.sensitive_groups.values()] + [g.size for g in self.target_groups.values()]
        return int(min(sizes))

    def draw(self):
        x, k, rng = self.split.features, self.per_group, self.rng
        if self.mode == "eo":
            sens_idx = [(_draw(rng, self.sensitive_groups[(0, t)], k), _draw(rng, self.sensitive_groups[(1, t)], k))
                        for t in (0, 1)]
        else:
            sens_idx = [(_draw(rng, self.sensitive_groups[0], k), _draw(rng, self.sensitive_groups[1], k))]
        tp, tq = _draw(rng, self.target_groups[0], k), _draw(rng, self.target_groups[1], k)
        if self.mode == "eo":
            cls_idx = np.concatenate([np.concatenate(p) for p in sens_idx] + [tp, tq])
            cls_t = self.split.t[cls_idx]
        else:
            # DP: only target-labelled points, and only their group membership
            cls_idx = np.concatenate([tp, tq])
            cls_t = np.repeat([0, 1], k)
        return Batches([(x[p], x[q]) for p, q in sens_idx], (x[tp], x[tq]), x[cls_idx], cls_t)


# --------------------------------------------------------------------------
# objectives


def _pair_features(model, batches):
    """One featurizer pass over every point; returns per-pair feature tensors."""
    blocks = []
    for p, q in batches.sensitive:
        blocks += [p, q]
    blocks += [batches.target[0], batches.target[1], batches.cls_x]
    sizes = [b.shape[0] for b in blocks]
    f = model.featurizer(Tensor(np.vstack(blocks)))
    cuts = np.concatenate([[0], np.cumsum(sizes)])
    dim = f.shape[1]
    parts = [submatrix(f, int(a), int(b), 0, dim) for a, b in zip(cuts[:-1], cuts[1:])]
    sens = [(parts[2 * i], parts[2 * i + 1]) for i in range(len(batches.sensitive))]
    return sens, (parts[-3], parts[-2]), parts[-1]


def _grid_power(fp, fq, sigmas, cfg):
    n = fp.shape[0]
    if fq.shape[0] != n:
        raise ValueError("paired groups must have equal size")
    z = concat_rows([fp, fq])
    d = pairwise_sqdist(z, z)
    powers = [block_power_hat(h_from_sqdist(d, n, s), cfg) for s in sigmas]
    return max_of(powers), powers


def _check_batches(batches):
    for p, q in list(batches.sensitive) + [batches.target]:
        if len(p) == 0 or len(q) == 0:
            raise DataError("empty group batch")


def objective_terms(batches, model, cfg, weights):
    """All loss components as tensors: rho_s, rho_t, cls and the weighted total."""
    _check_batches(batches)
    sens, (tp, tq), cls_f = _pair_features(model, batches)
    if weights.mode == "dp" and len(sens) != 1:
        raise ValueError("DP mode expects a single sensitive pair")
    if weights.mode == "eo" and len(sens) != 2:
        raise ValueError("EO mode expects one sensitive pair per target class")
    rho_s = None
    for fp, fq in sens:
        term, _ = _grid_power(fp, fq, model.sensitive_grid, cfg)
        rho_s = term if rho_s is None else rho_s + term
    rho_t, _ = _grid_power(tp, tq, model.target_grid, cfg)
    cls = cross_entropy(model.classifier(cls_f), batches.cls_t)
    total = rho_s * weights.lambda_s - rho_t * weights.lambda_t + cls * weights.lambda_cls
    return {"rho_s": rho_s, "rho_t": rho_t, "cls": cls, "total": total}


def minimax_objective(batches, model, cfg, weights):
    """lambda_s * max_grid rho_s - lambda_t * max_grid rho_t + lambda_cls * L_cls (DP)."""
    if weights.mode != "dp":
        raise ValueError("minimax_objective is the DP objective; use eo_objective")
    if not model.sensitive_grid or not model.target_grid:
        raise ValueError("kernel grids must be non-empty")
    return objective_terms(batches, model, cfg, weights)["total"]


def eo_objective(batches, model, cfg, weights):
    """Sensitive powers summed over the target classes, each maximised over the grid."""
    if weights.mode != "eo":
        raise ValueError("eo_objective needs mode='eo'")
    return objective_terms(batches, model, cfg, weights)["total"]


def fair_kernel_objective(batches, model, cfg, weights=None):
    """rho_s - rho_t under the single trainable deep kernel (weighted by lambda_s, lambda_t)."""
    weights = FairnessWeights() if weights is None else weights
    if weights.mode != "dp":
        raise ValueError("fair_kernel_objective is defined for DP mode")
    _check_batches(batches)
    sens, (tp, tq), _ = _pair_features(model, batches)
    sigma = model.log_sigma.exp()

    def power(fp, fq):
        z = concat_rows([fp, fq])
        return block_power_hat(h_from_sqdist(pairwise_sqdist(z, z), fp.shape[0], sigma), cfg)

    rho_s = power(*sens[0])
    rho_t = power(tp, tq)
    return rho_s * weights.lambda_s - rho_t * weights.lambda_t


def permutation_objective(batches, model, cfg, weights, perms):
    """Permutation-threshold power difference under the deep kernel (ablation only)."""
    kern = model.deep_kernel()
    rho_s = permutation_power_hat(batches.sensitive[0][0], batches.sensitive[0][1], kern, cfg, perms)
    rho_t = permutation_power_hat(batches.target[0], batches.target[1], kern, cfg, perms)
    out = rho_s * weights.lambda_s - rho_t * weights.lambda_t
    if weights.lambda_cls:
        cls = cross_entropy(model.classifier(model.featurizer(batches.cls_x)), batches.cls_t)
        out = out + cls * weights.lambda_cls
    return out


# --------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    epoch: int = 0
    best_val: float = math.inf
    since_improvement: int = 0
    seed: int = 0


HISTORY_FIELDS = ("epoch", "cls_loss", "rho_s", "rho_t", "train_objective", "val_objective")


def _power_config(cfg, sampler):
    m = cfg.m if cfg.m is not None else sampler.min_group_size()
    return PowerConfig(alpha=cfg.alpha, m=max(int(m), 4), lam=cfg.lam, n_permutations=cfg.n_permutations)


def _step_terms(batches, model, pcfg, weights, cfg, perms=None):
    if cfg.objective == "grid":
        return objective_terms(batches, model, pcfg, weights)
    if cfg.objective == "kernel":
        total = fair_kernel_objective(batches, model, pcfg, weights)
        if weights.lambda_cls:
            cls = cross_entropy(model.classifier(model.featurizer(batches.cls_x)), batches.cls_t)
            total = total + cls * weights.lambda_cls
        return {"total": total}
    return {"total": permutation_objective(batches, model, pcfg, weights, perms)}


def train(dataset, weights, cfg=None, seed=0, callback=None):
    """Fit a FairModel on ``dataset = (train, val, test)``.

    Returns ``(model, history)``; history is a list of per-epoch dicts keyed
    by HISTORY_FIELDS. Early stopping restores the best-validation weights.
    """
    cfg = TrainConfig() if cfg is None else cfg
    train_split, val_split = dataset[0], dataset[1]
    rng = np.random.default_rng(seed)
    per_group = cfg.batch_size // 2
    sampler = BatchSampler(train_split, weights.mode, per_group, np.random.default_rng([seed, 1]))
    val_sampler = BatchSampler(val_split, weights.mode, per_group, np.random.default_rng([seed, 2]))
    pcfg = _power_config(cfg, sampler)
    init_rows = train_split.features[rng.permutation(len(train_split))[:500]]
    model = FairModel.create(train_split.dim, cfg.encoder, cfg.classifier_hidden, rng=rng,
                             init_x=init_rows, grid_size=cfg.grid_size)
    history = []
    if cfg.max_epochs <= 0:
        return model, history

    opt = make_optimizer(cfg.optimizer, model.parameters(), cfg.lr)
    val_batches = [val_sampler.draw() for _ in range(cfg.val_batches)]
    perm_rng = np.random.default_rng([seed, 3])
    steps = cfg.steps_per_epoch or max(1, math.ceil(len(train_split) / cfg.batch_size))
    state = TrainState(seed=seed)
    best = model.snapshot()

    def perms_for(n):
        return random_relabelings(n, cfg.n_permutations, perm_rng) if cfg.objective == "perm" else None

    for epoch in range(1, cfg.max_epochs + 1):
        state.epoch = epoch
        sums = {"cls": 0.0, "rho_s": 0.0, "rho_t": 0.0, "total": 0.0}
        for _ in range(steps):
            batches = sampler.draw()
            opt.zero_grad()
            terms = _step_terms(batches, model, pcfg, weights, cfg, perms_for(per_group))
            terms["total"].backward()
            opt.step()
            for key in sums:
                if key in terms:
                    sums[key] += terms[key].item()
        val = float(np.mean([
            _step_terms(b, model, pcfg, weights, cfg, perms_for(per_group))["total"].item() for b in val_batches
        ]))
        row = {
            "epoch": epoch,
            "cls_loss": sums["cls"] / steps,
            "rho_s": sums["rho_s"] / steps,
            "rho_t": sums["rho_t"] / steps,
            "train_objective": sums["total"] / steps,
            "val_objective": val,
        }
        history.append(row)
        if callback is not None:
            callback(row)
        if val < state.best_val:
            state.best_val = val
            state.since_improvement = 0
            best = model.snapshot()
        else:
            state.since_improvement += 1
            if state.since_improvement >= cfg.patience:
                log.info("early stop at epoch %d (best val %.6g)", epoch, state.best_val)
                break
    model.restore(best)
    return model, history


# --------------------------------------------------------------------------
# sweeps


SWEEP_FIELDS = ("lambda_s", "seed", "accuracy", "dp", "eo", "sensitive_audit_acc", "mmd_audit_power")


def run_one(dataset, weights, cfg, seed, audits=True, audit_cfg=None):
    """Train, then evaluate on the test split. Returns ``(sweep_row, history)``."""
    from . import evaluation

    model, history = train(dataset, weights, cfg, seed)
    test = dataset[2]
    pred = model.predict(test.features)
    rep = evaluation.fairness_report(pred, test.t, test.s)
    row = {"lambda_s": weights.lambda_s, "seed": seed, "accuracy": rep.accuracy, "dp": rep.dp, "eo": rep.eo,
           "sensitive_audit_acc": float("nan"), "mmd_audit_power": float("nan")}
    if audits:
        reps = model.represent(test.features)
        audit = evaluation.audit_representations(reps, test.s, seed=seed, **(audit_cfg or {}))
        row["sensitive_audit_acc"] = audit.sensitive_accuracy
        row["mmd_audit_power"] = audit.mmd_power
    return row, history


def _run_job(args):
    return run_one(*args)[0]


def sweep(dataset, lambda_s_values=DEFAULT_LAMBDA_S, seeds=(0,), cfg=None, base_weights=None, audits=True,
          workers=1, audit_cfg=None):
    """Train every (lambda_s, seed) combination; returns (detail_rows, aggregate_rows)."""
    if not len(lambda_s_values):
        raise ValueError("need at least one lambda_s value")
    if not len(seeds):
        raise ValueError("need at least one seed")
    cfg = TrainConfig() if cfg is None else cfg
    base = FairnessWeights() if base_weights is None else base_weights
    jobs = [(dataset, replace(base, lambda_s=float(ls)), cfg, int(sd), audits, audit_cfg)
            for ls in lambda_s_values for sd in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_job, jobs))
    else:
        rows = [_run_job(j) for j in jobs]
    return rows, aggregate(rows)


def aggregate(rows):
    """Mean and population std of every metric per lambda_s, in first-seen order."""
    order = []
    groups: Dict[float, List[dict]] = {}
    for r in rows:
        key = r["lambda_s"]
        if key not in groups:
            order.append(key)
            groups[key] = []
        groups[key].append(r)
    out = []
    for key in order:
        g = groups[key]
        agg = {"lambda_s": key, "runs": len(g)}
        for f in SWEEP_FIELDS[2:]:
            vals = np.array([r[f] for r in g], dtype=np.float64)
            agg[f"{f}_mean"] = float(vals.mean())
            agg[f"{f}_std"] = float(vals.std())
        out.append(agg)
    return out
