"""Tabular loading, encoding, group sampling and the chi-square label diagnostic."""

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from scipy.special import gammaincc

from ._kv import ConfigError, read_kv, split_list

log = logging.getLogger(__name__)

CACHE_MAGIC = b"MBFD"
CACHE_VERSION = 1
MISSING = -1


class DataError(ValueError):
    pass


@dataclass
class DatasetSplit:
    """Encoded features plus binary labels; -1 marks an absent label."""

    features: np.ndarray
    t: np.ndarray
    s: np.ndarray
    tag: str = "train"
    feature_names: List[str] = field(default_factory=list)
    extra_labels: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError("features must be a 2-D matrix")
        n = self.features.shape[0]
        self.t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        self.s = np.asarray(self.s, dtype=np.int64).reshape(-1)
        if self.t.size != n or self.s.size != n:
            raise DataError("label vectors must have one entry per row")
        for name, lab in (("t", self.t), ("s", self.s)):
            bad = ~np.isin(lab, (MISSING, 0, 1))
            if bad.any():
                raise DataError(f"{name} labels must be 0, 1 or -1 (absent)")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, idx, tag=None):
        idx = np.asarray(idx)
        return DatasetSplit(self.features[idx], self.t[idx], self.s[idx], tag or self.tag,
                            list(self.feature_names), {k: v[idx] for k, v in self.extra_labels.items()})

    def require_labels(self, mode):
        mode = mode.lower()
        if mode == "eo":
            if (self.t == MISSING).any() or (self.s == MISSING).any():
                raise DataError(f"EO mode needs both labels on every row ({self.tag} split)")
        elif mode == "dp":
            if ((self.t == MISSING) & (self.s == MISSING)).any():
                raise DataError(f"DP mode needs at least one label per row ({self.tag} split)")
        else:
            raise ValueError(f"unknown mode {mode!r}")


# --------------------------------------------------------------------------
# schema


@dataclass
class LabelRule:
    column: str
    positive: List[str] = field(default_factory=list)
    threshold: Optional[float] = None

    def apply(self, values):
        """Map raw strings to 1/0; empty strings become -1."""
        out = np.full(len(values), MISSING, dtype=np.int64)
        present = values != ""
        if self.threshold is not None:
            num = pd.to_numeric(values[present], errors="coerce")
            if np.isnan(num).any():
                raise DataError(f"non-numeric values in label column {self.column!r}")
            out[present] = (num > self.threshold).astype(np.int64)
        else:
            out[present] = np.isin(values[present], self.positive).astype(np.int64)
        return out


@dataclass
class Schema:
    name: str
    target: LabelRule
    sensitive: LabelRule
    continuous: List[str] = field(default_factory=list)
    categorical: List[str] = field(default_factory=list)
    columns: Optional[List[str]] = None
    split: str = "fractions"
    paths: Dict[str, str] = field(default_factory=dict)
    fractions: tuple = (0.7, 0.1, 0.2)
    split_seed: int = 0
    val_fraction: float = 0.1
    filters: List[str] = field(default_factory=list)
    missing: List[str] = field(default_factory=lambda: ["", "?", "NA", "NaN"])
    delimiter: str = ","
    skip_rows: Dict[str, int] = field(default_factory=dict)
    exclude: List[str] = field(default_factory=list)
    expected_dim: Optional[int] = None
    transfer: List[LabelRule] = field(default_factory=list)
    base_dir: str = "."

    def __post_init__(self):
        used = {self.target.column, self.sensitive.column}
        leak = used & (set(self.continuous) | set(self.categorical))
        if leak:
            raise ConfigError(f"label columns cannot be features: {sorted(leak)}")

    def resolve(self, key, data_dir=None):
        p = Path(self.paths[key])
        if p.is_absolute():
            return p
        return Path(data_dir or self.base_dir) / p


def _rule(kv, prefix):
    if prefix not in kv:
        raise ConfigError(f"schema is missing required key {prefix!r}")
    thr = kv.get(f"{prefix}_threshold")
    pos = split_list(kv.get(f"{prefix}_positive", ""))
    if thr is None and not pos:
        raise ConfigError(f"schema needs {prefix}_positive or {prefix}_threshold")
    return LabelRule(kv[prefix], pos, None if thr is None else float(thr))


def schema_from_kv(kv, base_dir="."):
    known = {
        "name", "target", "target_positive", "target_threshold", "sensitive", "sensitive_positive",
        "sensitive_threshold", "continuous", "categorical", "columns", "split", "path", "train_path",
        "test_path", "fractions", "split_seed", "val_fraction", "filters", "missing", "delimiter",
        "skip_rows_test", "skip_rows_train", "exclude", "expected_dim", "transfer",
        "transfer_threshold",
    }
    unknown = set(kv) - known
    if unknown:
        raise ConfigError(f"unknown schema keys: {sorted(unknown)}")
    split = kv.get("split", "fractions")
    if split not in ("fractions", "files"):
        raise ConfigError("split must be 'fractions' or 'files'")
    paths = {k: kv[k] for k in ("path", "train_path", "test_path") if k in kv}
    need = ["path"] if split == "fractions" else ["train_path", "test_path"]
    for k in need:
        if k not in paths:
            raise ConfigError(f"split={split} requires {k!r}")
    fr = tuple(float(v) for v in split_list(kv.get("fractions", "0.7, 0.1, 0.2")))
    if len(fr) != 3 or abs(sum(fr) - 1.0) > 1e-9 or min(fr) < 0:
        raise ConfigError("fractions must be three non-negative numbers summing to 1")
    tthr = kv.get("transfer_threshold")
    transfer = [LabelRule(c, threshold=float(tthr) if tthr is not None else 0.0)
                for c in split_list(kv.get("transfer", ""))]
    missing = kv.get("missing")
    return Schema(
        name=kv.get("name", "dataset"),
        target=_rule(kv, "target"),
        sensitive=_rule(kv, "sensitive"),
        continuous=split_list(kv.get("continuous", "")),
        categorical=split_list(kv.get("categorical", "")),
        columns=split_list(kv["columns"]) if "columns" in kv else None,
        split=split,
        paths=paths,
        fractions=fr,
        split_seed=int(kv.get("split_seed", 0)),
        val_fraction=float(kv.get("val_fraction", 0.1)),
        filters=split_list(kv.get("filters", ""), sep=";"),
        missing=[""] + split_list(missing) if missing is not None else ["", "?", "NA", "NaN"],
        delimiter={"comma": ",", "tab": "\t", "semicolon": ";"}.get(kv.get("delimiter", "comma"),
                                                                       kv.get("delimiter", ",")),
        skip_rows={"test": int(kv.get("skip_rows_test", 0)), "train": int(kv.get("skip_rows_train", 0))},
        exclude=split_list(kv.get("exclude", "")),
        expected_dim=int(kv["expected_dim"]) if "expected_dim" in kv else None,
        transfer=transfer,
        base_dir=str(base_dir),
    )


def load_schema(path):
    path = Path(path)
    return schema_from_kv(read_kv(path), base_dir=path.parent)


def builtin_schema_path(name):
    """Path of a schema shipped with the package (adult, compas, health)."""
    p = Path(__file__).parent / "schemas" / f"{name}.schema"
    if not p.exists():
        raise FileNotFoundError(f"no built-in schema named {name!r}")
    return p


# --------------------------------------------------------------------------
# reading and encoding


_OPS = ("<=", ">=", "!=", "==", "<", ">")


def _apply_filter(df, expr):
    for op in _OPS:
        if op in expr:
            col, val = (p.strip() for p in expr.split(op, 1))
            break
    else:
        raise ConfigError(f"cannot parse filter {expr!r}")
    if col not in df.columns:
        raise DataError(f"filter refers to unknown column {col!r}")
    raw = df[col]
    try:
        target = float(val)
        lhs = pd.to_numeric(raw, errors="coerce")
    except ValueError:
        target, lhs = val, raw
    mask = {
        "<=": lambda a: a <= target, ">=": lambda a: a >= target, "<": lambda a: a < target,
        ">": lambda a: a > target, "==": lambda a: a == target, "!=": lambda a: a != target,
    }[op](lhs)
    return df[mask.fillna(False) if hasattr(mask, "fillna") else mask]


def read_table(path, schema, which="path"):
    if not os.path.exists(path):
        raise FileNotFoundError(f"data file not found: {path}")
    header = None if schema.columns else 0
    try:
        df = pd.read_csv(path, sep=schema.delimiter, header=header, names=schema.columns, dtype=str,
                         keep_default_na=False, skipinitialspace=True,
                         skiprows=schema.skip_rows.get(which, 0), on_bad_lines="error", engine="python")
    except pd.errors.ParserError as exc:
        raise DataError(f"malformed rows in {path}: {exc}") from exc
    df = df.apply(lambda c: c.str.strip())
    if schema.continuous == ["*"]:
        taken = {schema.target.column, schema.sensitive.column, *schema.exclude, *schema.categorical}
        taken |= {r.column for r in schema.transfer}
        schema.continuous = [c for c in df.columns if c not in taken]
    needed = schema.continuous + schema.categorical + [schema.target.column, schema.sensitive.column]
    needed += [r.column for r in schema.transfer]
    missing_cols = [c for c in needed if c not in df.columns]
    if missing_cols:
        raise DataError(f"{path}: missing columns {missing_cols}")
    for expr in schema.filters:
        df = _apply_filter(df, expr)
    feats = schema.continuous + schema.categorical
    bad = df[feats].isin(schema.missing).any(axis=1)
    labels_absent = df[schema.target.column].isin(schema.missing) & df[schema.sensitive.column].isin(schema.missing)
    drop = bad | labels_absent
    if drop.any():
        log.info("%s: dropped %d rows with missing values", path, int(drop.sum()))
    df = df[~drop].reset_index(drop=True)
    for col in (schema.target.column, schema.sensitive.column):
        df.loc[df[col].isin(schema.missing), col] = ""
    return df


class Encoder:
    """One-hot categoricals and z-scored continuous columns, fitted on one split."""

    def __init__(self, schema):
        self.schema = schema
        self.categories = {}
        self.mean = {}
        self.std = {}

    def fit(self, df):
        for c in self.schema.continuous:
            v = pd.to_numeric(df[c], errors="coerce").to_numpy(dtype=np.float64)
            if np.isnan(v).any():
                raise DataError(f"non-numeric value in continuous column {c!r}")
            self.mean[c] = float(v.mean())
            sd = float(v.std())
            self.std[c] = sd if sd > 1e-12 else 0.0
        for c in self.schema.categorical:
            self.categories[c] = sorted(df[c].unique().tolist())
        return self

    @property
    def feature_names(self):
        names = list(self.schema.continuous)
        for c in self.schema.categorical:
            names += [f"{c}={v}" for v in self.categories[c]]
        return names

    def transform(self, df):
        cols = []
        for c in self.schema.continuous:
            v = pd.to_numeric(df[c], errors="coerce").to_numpy(dtype=np.float64)
            if np.isnan(v).any():
                raise DataError(f"non-numeric value in continuous column {c!r}")
            sd = self.std[c]
            cols.append(np.zeros_like(v) if sd == 0.0 else (v - self.mean[c]) / sd)
        for c in self.schema.categorical:
            cats = self.categories[c]
            vals = df[c].to_numpy()
            lookup = {v: i for i, v in enumerate(cats)}
            block = np.zeros((len(vals), len(cats)))
            unknown = 0
            for r, v in enumerate(vals):
                j = lookup.get(v)
                if j is None:
                    unknown += 1
                else:
                    block[r, j] = 1.0
            if unknown:
                log.warning("column %r: %d values unseen in training encoded as all-zero", c, unknown)
            cols.extend(block.T)
        if not cols:
            return np.zeros((len(df), 0))
        return np.column_stack(cols)


def _labels(df, schema):
    t = schema.target.apply(df[schema.target.column].to_numpy())
    s = schema.sensitive.apply(df[schema.sensitive.column].to_numpy())
    extra = {r.column: r.apply(df[r.column].to_numpy()) for r in schema.transfer}
    return t, s, extra


def stratified_split(t, s, fractions, seed):
    """Seeded split stratified on the (t, s) cell of each row."""
    rng = np.random.default_rng(seed)
    parts = [[], [], []]
    cells = t * 3 + s  # absent labels (-1) form their own cells
    for cell in np.unique(cells):
        idx = np.flatnonzero(cells == cell)
        idx = idx[rng.permutation(idx.size)]
        n1 = int(round(fractions[0] * idx.size))
        n2 = int(round((fractions[0] + fractions[1]) * idx.size))
        parts[0].append(idx[:n1])
        parts[1].append(idx[n1:n2])
        parts[2].append(idx[n2:])
    return [np.sort(np.concatenate(p)) for p in parts]


def load_tabular(schema, data_dir=None):
    """Read, split and encode a dataset. Returns (train, val, test) splits."""
    if isinstance(schema, (str, Path)):
        schema = load_schema(schema)
    if schema.split == "files":
        train_df = read_table(schema.resolve("train_path", data_dir), schema, "train")
        test_df = read_table(schema.resolve("test_path", data_dir), schema, "test")
        t, s, _ = _labels(train_df, schema)
        f = schema.val_fraction
        tr_idx, va_idx, _ = stratified_split(t, s, (1.0 - f, f, 0.0), schema.split_seed)
        frames = [train_df.iloc[tr_idx], train_df.iloc[va_idx], test_df]
    else:
        df = read_table(schema.resolve("path", data_dir), schema)
        t, s, _ = _labels(df, schema)
        idx = stratified_split(t, s, schema.fractions, schema.split_seed)
        frames = [df.iloc[i] for i in idx]
    enc = Encoder(schema).fit(frames[0])
    out = []
    for tag, frame in zip(("train", "val", "test"), frames):
        x = enc.transform(frame)
        t, s, extra = _labels(frame, schema)
        out.append(DatasetSplit(x, t, s, tag, enc.feature_names, extra))
    d = out[0].dim
    if schema.expected_dim is not None and d != schema.expected_dim:
        raise DataError(f"{schema.name}: encoded dimension {d} != expected {schema.expected_dim}")
    return tuple(out)


# --------------------------------------------------------------------------
# groups


def group_indices(split, attribute="s", conditional_on_t=False):
    """Index sets of the two groups of ``attribute``, optionally within each target class.

    Returns ``{0: idx, 1: idx}`` or, conditionally, ``{(a, t): idx}`` for the
    four combinations. Raises if any required set is empty.
    """
    if attribute not in ("s", "t"):
        raise ValueError("attribute must be 's' or 't'")
    lab = split.s if attribute == "s" else split.t
    if conditional_on_t:
        out = {}
        for tv in (0, 1):
            for av in (0, 1):
                idx = np.flatnonzero((lab == av) & (split.t == tv))
                if idx.size == 0:
                    raise DataError(f"{split.tag}: no rows with {attribute}={av}, t={tv}")
                out[(av, tv)] = idx
        return out
    out = {}
    for av in (0, 1):
        idx = np.flatnonzero(lab == av)
        if idx.size == 0:
            raise DataError(f"{split.tag}: no rows with {attribute}={av}")
        out[av] = idx
    return out


# --------------------------------------------------------------------------
# chi-square diagnostic


def contingency_2x2(t, s):
    t = np.asarray(t).ravel()
    s = np.asarray(s).ravel()
    keep = (t != MISSING) & (s != MISSING)
    t, s = t[keep], s[keep]
    table = np.zeros((2, 2))
    for a in (0, 1):
        for b in (0, 1):
            table[a, b] = np.count_nonzero((t == a) & (s == b))
    return table


def chi2_independence(t, s):
    """Pearson chi-square (no continuity correction) on the 2x2 table, df = 1."""
    table = contingency_2x2(t, s)
    rows = table.sum(1)
    cols = table.sum(0)
    total = table.sum()
    if (rows == 0).any() or (cols == 0).any():
        raise DataError("chi-square undefined: a label value never occurs")
    expected = np.outer(rows, cols) / total
    stat = float(((table - expected) ** 2 / expected).sum())
    return stat, float(gammaincc(0.5, stat / 2.0))


# --------------------------------------------------------------------------
# binary cache


def save_split_cache(split, path):
    """Write features with t and s appended as the last two columns (NaN = absent)."""
    labels = np.column_stack([split.t, split.s]).astype(np.float64)
    labels[labels == MISSING] = np.nan
    mat = np.ascontiguousarray(np.column_stack([split.features, labels]), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<III", CACHE_VERSION, mat.shape[0], mat.shape[1]))
        fh.write(mat.tobytes(order="C"))


def load_split_cache(path, tag="train"):
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != CACHE_MAGIC:
            raise DataError(f"{path}: not a split cache file")
        version, rows, cols = struct.unpack("<III", head[4:])
        if version != CACHE_VERSION:
            raise DataError(f"{path}: unsupported cache version {version}")
        body = fh.read()
    if len(body) != rows * cols * 8:
        raise DataError(f"{path}: truncated cache file")
    mat = np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)
    lab = np.where(np.isnan(mat[:, -2:]), MISSING, mat[:, -2:]).astype(np.int64)
    return DatasetSplit(mat[:, :-2], lab[:, 0], lab[:, 1], tag)


# --------------------------------------------------------------------------
# synthetic data


def make_orthogonal(n, seed=0, target_shift=2.5, sensitive_shift=2.0, noise=1.0, p_t=0.5, p_s=0.5,
                    extra_dims=0):
    """2-D data whose target and sensitive attributes live on orthogonal axes.

    t and s are independent; x = (shift_t * (2t - 1), shift_s * (2s - 1)) + noise.
    A representation keeping only the first axis is both accurate and fair.
    """
    rng = np.random.default_rng(seed)
    t = (rng.random(n) < p_t).astype(np.int64)
    s = (rng.random(n) < p_s).astype(np.int64)
    x = rng.normal(scale=noise, size=(n, 2 + extra_dims))
    x[:, 0] += target_shift * (2 * t - 1)
    x[:, 1] += sensitive_shift * (2 * s - 1)
    return x, t, s


def synthetic_splits(n_train=2000, n_val=500, n_test=1000, seed=0, **kw):
    out = []
    for i, (n, tag) in enumerate(((n_train, "train"), (n_val, "val"), (n_test, "test"))):
        x, t, s = make_orthogonal(n, seed=seed * 7919 + i, **kw)
        out.append(DatasetSplit(x, t, s, tag, [f"x{j}" for j in range(x.shape[1])]))
    return tuple(out)


def write_synthetic_csv(path, n=2000, seed=0, **kw):
    x, t, s = make_orthogonal(n, seed=seed, **kw)
    df = pd.DataFrame(x, columns=[f"x{j}" for j in range(x.shape[1])])
    df["t"] = t
    df["s"] = s
    df.to_csv(path, index=False, float_format="%.17g")
    return path
