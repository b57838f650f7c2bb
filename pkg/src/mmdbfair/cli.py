"""Command-line entry point: train, sweep, audit, chi2, test, export-embeddings."""

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from . import evaluation
from ._kv import ConfigError, read_kv, split_list
from .data import DataError, builtin_schema_path, chi2_independence, load_schema, load_tabular, synthetic_splits
from .estimators import PowerConfig, two_sample_test
from .fairlearn import (
    DEFAULT_LAMBDA_S, HISTORY_FIELDS, SWEEP_FIELDS, FairModel, FairnessWeights, TrainConfig, aggregate, run_one,
    train,
)
from .kernels import GaussianKernel, LinearKernel, median_heuristic

log = logging.getLogger("mmdbfair")

# architecture and optimiser defaults per built-in dataset
PRESETS = {
    "compas": {"encoder": "8,8,8", "classifier_hidden": "8", "optimizer": "adadelta", "lr": "2.0"},
    "adult": {"encoder": "256,128,64,32,16", "classifier_hidden": "16", "optimizer": "adam", "lr": "1e-4"},
    "health": {"encoder": "256,128,64,32,16", "classifier_hidden": "16", "optimizer": "adam", "lr": "1e-4"},
}


def fmt(v):
    """17 significant digits for floats, so every value round-trips exactly."""
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(r[h]) for h in header])
    return path


@dataclass
class RunConfig:
    schema: str = "synthetic"
    data_dir: Optional[str] = None
    mode: str = "dp"
    lambda_s: float = 1.0
    lambda_t: float = 1.0
    lambda_cls: float = 1.0
    lambda_s_values: List[float] = field(default_factory=lambda: list(DEFAULT_LAMBDA_S))
    alpha: float = 0.05
    lam: Optional[float] = None
    m: Optional[int] = None
    optimizer: str = "adadelta"
    lr: float = 2.0
    max_epochs: int = 100
    patience: int = 20
    batch_size: int = 64
    encoder: List[int] = field(default_factory=lambda: [8, 8, 8])
    classifier_hidden: int = 8
    grid_size: int = 6
    objective: str = "grid"
    seed: int = 0
    seeds: List[int] = field(default_factory=lambda: list(range(10)))
    workers: int = 1
    out_dir: str = "out"
    audits: bool = True
    audit_trials: int = 100
    audit_epochs: int = 50
    synthetic_n: int = 2000

    def weights(self, lambda_s=None):
        return FairnessWeights(self.lambda_s if lambda_s is None else lambda_s, self.lambda_t, self.lambda_cls,
                               self.mode)

    def train_config(self):
        return TrainConfig(encoder=tuple(self.encoder), classifier_hidden=self.classifier_hidden,
                           optimizer=self.optimizer, lr=self.lr, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, patience=self.patience, alpha=self.alpha, lam=self.lam,
                           m=self.m, grid_size=self.grid_size, objective=self.objective)

    def audit_kwargs(self):
        return {"trials": self.audit_trials, "epochs": self.audit_epochs}


def _convert(name, raw, typ):
    text = str(raw).strip()
    try:
        if name in ("lam", "m", "data_dir"):
            if text.lower() in ("", "none", "default"):
                return None
            return float(text) if name == "lam" else int(text) if name == "m" else text
        if name in ("encoder", "seeds"):
            return [int(v) for v in split_list(text)]
        if name == "lambda_s_values":
            return [float(v) for v in split_list(text)]
        if name == "audits":
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if typ in ("int", int):
            return int(text)
        if typ in ("float", float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {name!r}: {text!r}") from None
    return text


def build_config(kv, source="<args>"):
    known = {f.name: f for f in fields(RunConfig)}
    values = {}
    for key, raw in kv.items():
        name = key.replace("-", "_")
        if name not in known:
            raise ConfigError(f"{source}: unknown config key {key!r}")
        values[name] = _convert(name, raw, known[name].type)
    cfg = RunConfig(**values)
    if cfg.mode not in ("dp", "eo"):
        raise ConfigError(f"mode must be dp or eo, got {cfg.mode!r}")
    return cfg


def load_run_config(path, overrides):
    kv = {}
    schema_name = None
    if path:
        kv.update(read_kv(path))
    merged = dict(kv)
    merged.update(overrides)
    schema_name = Path(str(merged.get("schema", "synthetic"))).stem
    base = dict(PRESETS.get(schema_name, {}))
    base.update(merged)
    if path and "schema" in kv and not _is_builtin(kv["schema"]):
        # schema paths in a config file are relative to that file
        p = Path(kv["schema"])
        if not p.is_absolute() and "schema" not in overrides:
            base["schema"] = str(Path(path).parent / p)
    return build_config(base, str(path or "<args>"))


def _is_builtin(name):
    return name in ("synthetic", "compas", "adult", "health")


def load_dataset(cfg):
    if cfg.schema == "synthetic":
        n = cfg.synthetic_n
        return synthetic_splits(n, n // 4, n // 2, seed=0)
    if _is_builtin(cfg.schema):
        schema = load_schema(builtin_schema_path(cfg.schema))
    else:
        schema = load_schema(cfg.schema)
    data_dir = cfg.data_dir or os.environ.get("MMDBFAIR_DATA_DIR")
    return load_tabular(schema, data_dir)


# --------------------------------------------------------------------------
# commands


REPORT_FIELDS = ("split", "accuracy", "dp", "eo", "eo_t0", "eo_t1")


def _report_row(split, model):
    rep = evaluation.fairness_report(model.predict(split.features), split.t, split.s)
    absent = float("nan")
    return {"split": split.tag, "accuracy": rep.accuracy, "dp": rep.dp, "eo": rep.eo,
            "eo_t0": absent if rep.eo_per_class[0] is None else rep.eo_per_class[0],
            "eo_t1": absent if rep.eo_per_class[1] is None else rep.eo_per_class[1]}


def cmd_train(cfg):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(cfg)
    model, history = train(dataset, cfg.weights(), cfg.train_config(), cfg.seed)
    model.save(out / "model.mbfm")
    write_csv(out / "history.csv", HISTORY_FIELDS, history)
    write_csv(out / "report.csv", REPORT_FIELDS, [_report_row(dataset[2], model)])
    print(f"wrote {out / 'model.mbfm'}, {out / 'history.csv'}, {out / 'report.csv'}")
    return 0


def _sweep_job(args):
    cfg, dataset, lambda_s, seed = args
    row, history = run_one(dataset, cfg.weights(lambda_s), cfg.train_config(), seed, cfg.audits,
                           cfg.audit_kwargs())
    run_dir = Path(cfg.out_dir) / "runs" / f"lambda_{fmt(float(lambda_s))}_seed_{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    write_csv(run_dir / "history.csv", HISTORY_FIELDS, history)
    write_csv(run_dir / "row.csv", SWEEP_FIELDS, [row])
    return row


def cmd_sweep(cfg):
    if not cfg.lambda_s_values:
        raise ConfigError("lambda_s_values is empty")
    if not cfg.seeds:
        raise ConfigError("seeds is empty")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(cfg)
    jobs = [(cfg, dataset, ls, sd) for ls in cfg.lambda_s_values for sd in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    agg = aggregate(rows)
    write_csv(out / "sweep.csv", SWEEP_FIELDS, rows)
    write_csv(out / "sweep_aggregate.csv", list(agg[0].keys()), agg)
    print(f"wrote {out / 'sweep.csv'} ({len(rows)} runs) and {out / 'sweep_aggregate.csv'}")
    return 0


def _load_model_for(cfg, model_path, dataset):
    model = FairModel.load(model_path)
    if model.featurizer.in_dim != dataset[0].dim:
        raise DataError(f"model expects {model.featurizer.in_dim} features, dataset has {dataset[0].dim}")
    return model


def cmd_audit(cfg, model_path):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(cfg)
    model = _load_model_for(cfg, model_path, dataset)
    test = dataset[2]
    rep = evaluation.audit_representations(model.represent(test.features), test.s, seed=cfg.seed,
                                           **cfg.audit_kwargs())
    row = {"sensitive_accuracy": rep.sensitive_accuracy, "majority_baseline": rep.majority_baseline,
           "mmd_power": rep.mmd_power, "trials": rep.trials}
    write_csv(out / "audit.csv", list(row), [row])
    print(", ".join(f"{k}={fmt(v)}" for k, v in row.items()))
    return 0


def cmd_chi2(cfg):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for split in load_dataset(cfg):
        keep = (split.t >= 0) & (split.s >= 0)
        stat, p = chi2_independence(split.t[keep], split.s[keep])
        rows.append({"split": split.tag, "n": int(keep.sum()), "statistic": stat, "p_value": p})
        print(f"{split.tag}: chi2={fmt(stat)} p={fmt(p)} n={int(keep.sum())}")
    write_csv(out / "chi2.csv", ["split", "n", "statistic", "p_value"], rows)
    return 0


def read_numeric_csv(path):
    """Numeric matrix from a CSV; a non-numeric first line is taken as a header."""
    try:
        df = pd.read_csv(path, header=None, dtype=str, skipinitialspace=True)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"{path}: {exc}") from None
    try:
        float(df.iloc[0, 0])
    except (ValueError, IndexError):
        df = df.iloc[1:]
    try:
        x = df.to_numpy(dtype=np.float64)
    except ValueError:
        raise DataError(f"{path}: non-numeric entries") from None
    if x.size == 0 or not np.isfinite(x).all():
        raise DataError(f"{path}: empty or non-finite data")
    return x


def cmd_test(csv_a, csv_b, kernel, sigma, alpha, permutations, seed, lam=None):
    x, y = read_numeric_csv(csv_a), read_numeric_csv(csv_b)
    if x.shape[1] != y.shape[1]:
        raise DataError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    n = min(x.shape[0], y.shape[0])
    if n < 4:
        raise DataError("need at least 4 rows per sample")
    x, y = x[:n], y[:n]
    if kernel == "linear":
        k = LinearKernel()
    else:
        k = GaussianKernel(sigma if sigma is not None else median_heuristic(np.vstack([x, y])))
    cfg = PowerConfig(alpha=alpha, m=n, lam=lam, n_permutations=permutations)
    res = two_sample_test(x, y, k, cfg, seed)
    print(f"statistic={fmt(res.statistic)}")
    print(f"threshold={fmt(res.threshold)}")
    print(f"decision={'reject' if res.reject else 'fail-to-reject'}")
    print(f"estimated_power={fmt(res.estimated_power)}")
    return 1 if res.reject else 0


def cmd_export(cfg, model_path, split_name):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(cfg)
    model = _load_model_for(cfg, model_path, dataset)
    split = {"train": dataset[0], "val": dataset[1], "test": dataset[2]}[split_name]
    path = evaluation.export_embeddings(model, split, out / f"embeddings_{split_name}.csv")
    print(f"wrote {path}")
    return 0


# --------------------------------------------------------------------------
# argument handling


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir")
    common.add_argument("--mode", choices=("dp", "eo"))

    p = argparse.ArgumentParser(prog="mmdbfair", description="Fair representations via MMD test power.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train one model")
    sub.add_parser("sweep", parents=[common], help="train over lambda_s values and seeds")
    a = sub.add_parser("audit", parents=[common], help="audit a trained model's representations")
    a.add_argument("--model", required=True)
    sub.add_parser("chi2", parents=[common], help="chi-square independence of t and s per split")
    t = sub.add_parser("test", parents=[common], help="two-sample MMD permutation test of two CSV files")
    t.add_argument("csv_a")
    t.add_argument("csv_b")
    t.add_argument("--kernel", choices=("gaussian", "linear"), default="gaussian")
    t.add_argument("--sigma", type=float)
    t.add_argument("--alpha", type=float, default=0.05)
    t.add_argument("--permutations", type=int, default=200)
    t.add_argument("--lam", type=float)
    e = sub.add_parser("export-embeddings", parents=[common], help="write representations as CSV")
    e.add_argument("--model", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    return p


def _overrides(extra):
    """Turn leftover ``--key value`` pairs into config overrides."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"option {tok!r} needs a value")
            key, value = tok[2:], extra[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


def main(argv=None):
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "test":
            if extra:
                raise ConfigError(f"unexpected arguments: {' '.join(extra)}")
            return cmd_test(args.csv_a, args.csv_b, args.kernel, args.sigma, args.alpha, args.permutations,
                            args.seed or 0, args.lam)
        over = _overrides(extra)
        for key in ("seed", "out_dir", "mode"):
            if getattr(args, key) is not None:
                over[key] = str(getattr(args, key))
        cfg = load_run_config(args.config, over)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "audit":
            return cmd_audit(cfg, args.model)
        if args.command == "chi2":
            return cmd_chi2(cfg)
        return cmd_export(cfg, args.model, args.split)
    except (ConfigError, DataError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
