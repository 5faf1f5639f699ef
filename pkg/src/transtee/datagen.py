"""Synthetic and semi-synthetic generators with known dose-response oracles.

Noise terms written N(0, v) use v as the variance.

Covariates for the IHDP-, News- and TCGA-style generators are synthesized
surrogates; ``load_csv`` reads real data when it is available (without an
oracle).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import DATA, RngStream
from .tensor import ContractError

# t-tilde is clipped so the sigmoid never rounds to exactly 0 or 1
LOGIT_CLIP = 30.0


class SchemaError(ValueError):
    pass


class ParseError(ValueError):
    pass


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -LOGIT_CLIP, LOGIT_CLIP)))


# ---------------------------------------------------------------- oracles
# Oracles are small parameterized classes (not closures) so datasets pickle.


@dataclass(frozen=True)
class SyntheticResponse:
    def __call__(self, x, t, s=None):
        x, t = np.asarray(x), np.asarray(t, dtype=np.float64)
        x1, x3, x6 = x[:, 0], x[:, 2], x[:, 5]
        return np.cos(2 * np.pi * (t - 0.5)) * (t**2 + 4 * np.maximum(x1, x6) ** 3 / (1 + 2 * x3**2))


@dataclass(frozen=True)
class IhdpResponse:
    h: float
    c1: float
    s_dis1: tuple[int, ...]

    def modifier(self, x):
        x = np.asarray(x)
        x1, x2, x3, x5, x6 = (x[:, i] for i in (0, 1, 2, 4, 5))
        noisy = np.mean(x[:, list(self.s_dis1)] - self.c1, axis=1)
        return np.tanh(5 * noisy) + np.exp(0.2 * (x1 - x6)) / (0.5 + 5 * np.minimum(np.minimum(x2, x3), x5))

    def __call__(self, x, t, s=None):
        r = np.asarray(t, dtype=np.float64) / self.h
        return np.sin(3 * np.pi * r) / (1.2 - r) * self.modifier(x)


@dataclass(frozen=True)
class BinaryIhdpResponse:
    """Arm a in {0, 1} is evaluated at the midpoint dose of its half of [0, h]."""

    base: IhdpResponse

    def __call__(self, x, t, s=None):
        arm = np.asarray(t, dtype=np.float64)
        return self.base(x, (0.25 + 0.5 * arm) * self.base.h)


@dataclass(frozen=True)
class NewsResponse:
    v1: tuple[float, ...]
    v2: tuple[float, ...]
    v3: tuple[float, ...]

    def clamped_base(self, x):
        x = np.asarray(x)
        a, b = x @ np.asarray(self.v2), x @ np.asarray(self.v3)
        ratio = np.divide(a, b, out=np.zeros_like(a), where=b != 0)
        # exp(1) > 2, so capping the exponent at 1 leaves the clamp unchanged
        y_prime = np.exp(np.minimum(ratio - 0.3, 1.0))
        return np.clip(y_prime, -2.0, 2.0)

    def __call__(self, x, t, s=None):
        t = np.asarray(t, dtype=np.float64)
        scale = 2 * (self.clamped_base(x) + 20 * (np.asarray(x) @ np.asarray(self.v1)))
        return scale * (4 * (t - 0.5) ** 2 + np.sin(np.pi / 2 * t))


@dataclass(frozen=True)
class TcgaDoseResponse:
    """Table-of-curves response f_t(x, s) for treatments t in {0, 1, 2}."""

    v: tuple  # v[t][i] is the unit vector v_{i+1}^{t+1}
    C: float = 10.0

    def projections(self, x, t):
        x = np.asarray(x)
        v = np.asarray(self.v)[t]  # [3, p]
        return x @ v[0], x @ v[1], x @ v[2]

    def curve(self, x, t: int, s):
        s = np.asarray(s, dtype=np.float64)
        a1, a2, a3 = self.projections(x, t)
        if t == 0:
            return self.C * (a1 + 12 * a2 * s - 12 * a3 * s**2)
        ratio = np.divide(a2, a3, out=np.zeros_like(a2), where=a3 != 0)
        if t == 1:
            return self.C * (a1 + np.sin(np.pi * ratio * s))
        b = 0.75 * ratio
        return self.C * (a1 + 12 * s * (s - b) ** 2)

    def optimal_dosage(self, x, t: int):
        a1, a2, a3 = self.projections(x, t)
        with np.errstate(divide="ignore", invalid="ignore"):
            if t == 0:
                return a2 / (2 * a3)
            if t == 1:
                return a3 / (2 * a2)
            b = 0.75 * a2 / a3
            return np.where(b >= 0.75, b / 3, 1.0)

    def __call__(self, x, t, s=None):
        if s is None:
            raise ContractError("TCGA dosage response needs a dosage")
        x = np.asarray(x)
        t = np.asarray(t).astype(int).reshape(-1)
        s = np.asarray(s, dtype=np.float64).reshape(-1)
        out = np.empty(len(t))
        for k in np.unique(t):
            idx = t == k
            out[idx] = self.curve(x[idx], int(k), s[idx])
        return out


# ---------------------------------------------------------------- dataset

# meta entries holding one row per unit
PER_UNIT_META = ("dosages", "assign_prob")


@dataclass
class Dataset:
    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    s: np.ndarray | None = None
    oracle: object | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def t_interval(self) -> tuple[float, float]:
        return tuple(self.meta.get("t_eval", (0.0, self.meta.get("h", 1.0))))

    def subset(self, idx) -> "Dataset":
        meta = dict(self.meta)
        for key in PER_UNIT_META:
            if key in meta:
                meta[key] = meta[key][idx]
        return replace(
            self,
            x=self.x[idx],
            t=self.t[idx],
            y=self.y[idx],
            s=None if self.s is None else self.s[idx],
            meta=meta,
        )

    def split(self, n_train: int | None = None) -> tuple["Dataset", "Dataset"]:
        """First ``n_train`` units for training, the rest for testing."""
        n_train = self.meta.get("n_train") if n_train is None else n_train
        if n_train is None:
            raise ContractError("split: n_train not given and not recorded in meta")
        train = self.subset(np.arange(n_train))
        test = self.subset(np.arange(n_train, len(self)))
        if "t_train" in self.meta:
            train.meta["t_eval"] = tuple(self.meta["t_train"])
        return train, test

    def true_response(self, x, t, s=None):
        return true_response(self, x, t, s)


def true_response(dataset: Dataset, x, t, s=None):
    """Noiseless structural response mu(x, t[, s])."""
    if dataset.oracle is None:
        raise ContractError(f"dataset {dataset.meta.get('generator', '?')!r} has no oracle")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    if s is not None:
        s = np.broadcast_to(np.asarray(s, dtype=np.float64), (x.shape[0],))
    return dataset.oracle(x, t, s)


# ---------------------------------------------------------------- generators


def _synthetic_treatment(x, rng):
    x1, x2, x3, x4, x5 = (x[:, i] for i in range(5))
    num = 10 * np.sin(np.maximum(np.maximum(x1, x2), x3)) + np.maximum(np.maximum(x3, x4), x5) ** 3
    return (
        num / (1 + (x1 + x5) ** 2)
        + np.sin(0.5 * x3) * (1 + np.exp(x4 - 0.5 * x3))
        + x3**2
        + 2 * np.sin(x4)
        + 2 * x5
        - 6.5
        + rng.normal(0.0, 0.5, size=len(x1))
    )


def _outside(t, low: float, high: float | None) -> np.ndarray:
    out = t < low
    if high is not None:
        out |= t > high
    return out


def _rejection(draw, n: int, low: float, high: float | None, rng, max_rounds: int = 1000):
    """Draw units until ``n`` have t in [low, high]; ``draw(m, rng) -> (x, t)``."""
    xs, ts = [], []
    have = 0
    for _ in range(max_rounds):
        x, t = draw(max(2 * (n - have), 16), rng)
        keep = ~_outside(t, low, high)
        xs.append(x[keep])
        ts.append(t[keep])
        have += int(keep.sum())
        if have >= n:
            break
    else:
        raise RuntimeError(f"rejection sampling for t in [{low}, {high}] did not finish")
    return np.concatenate(xs)[:n], np.concatenate(ts)[:n]


def gen_synthetic(n_train: int = 500, n_test: int = 200, h: float = 1.0, seed: int = 0,
                  train_low: float = 0.0, noise: bool = True, train_high: float | None = None) -> Dataset:
    """Six uniform covariates; t = sigmoid(t~) * h; y uses t as printed (raw, not t/h).

    Training units are drawn with t in [``train_low``, ``train_high``] by
    rejection, test units cover the whole (0, h). ``meta['n_train']`` marks
    the split point.
    """
    if h <= 0:
        raise ContractError("h must be positive")
    rng = RngStream(seed, DATA).generator()

    def draw(m, rng):
        x = rng.uniform(0.0, 1.0, size=(m, 6))
        return x, sigmoid(_synthetic_treatment(x, rng)) * h

    restricted = train_low > 0 or (train_high is not None and train_high < h)
    x_tr, t_tr = _rejection(draw, n_train, train_low, train_high, rng) if restricted else draw(n_train, rng)
    x_te, t_te = draw(n_test, rng)
    x, t = np.concatenate([x_tr, x_te]), np.concatenate([t_tr, t_te])
    oracle = SyntheticResponse()
    y = oracle(x, t)
    if noise:
        y = y + rng.normal(0.0, 0.5, size=len(y))
    meta = {
        "generator": "synthetic",
        "h": h,
        "seed": seed,
        "n_train": n_train,
        "t_eval": (0.0, h),
        "t_train": (train_low, h if train_high is None else min(train_high, h)),
        "noise_var": 0.25 if noise else 0.0,
        "raw_t_outcome_with_h": h != 1.0,
    }
    return Dataset(x, t, y, oracle=oracle, meta=meta)


IHDP_S_CON = (1, 2, 3, 5, 6)
IHDP_S_DIS1 = (4, 7, 8, 9, 10, 11, 12, 13, 14, 15)
IHDP_S_DIS2 = (16, 17, 18, 19, 20, 21, 22, 23, 24, 25)


def ihdp_groups(s_con=IHDP_S_CON, s_dis1=IHDP_S_DIS1, s_dis2=IHDP_S_DIS2) -> dict[str, list[int]]:
    """Group labels as 0-based index lists."""
    return {
        "w_con": [i - 1 for i in s_con],
        "w_1": [i - 1 for i in s_dis1],
        "w_2": [i - 1 for i in s_dis2],
    }


def gen_ihdp_style(n: int = 747, h: float = 1.0, seed: int = 0, n_train: int | None = None,
                   train_low: float = 0.0, binary: bool = False, noise: bool = True,
                   n_noisy: int = 10, n_instruments: int = 10, train_high: float | None = None) -> Dataset:
    """25-covariate IHDP-style data (groups configurable for noisy-covariate sweeps).

    Continuous covariates (the confounder set) are N(0,1); the others are
    Bernoulli(0.5); every column is then standardized. With ``binary=True``
    the treatment is thresholded at h/2.
    """
    if h <= 0:
        raise ContractError("h must be positive")
    s_con = IHDP_S_CON
    p = len(s_con) + n_noisy + n_instruments
    others = [i for i in range(1, p + 1) if i not in s_con]
    s_dis1, s_dis2 = tuple(others[:n_noisy]), tuple(others[n_noisy:])
    if n_noisy < 1 or n_instruments < 1:
        raise ContractError("need at least one noisy covariate and one instrument")
    rng = RngStream(seed, DATA).generator()

    def covariates(m):
        x = rng.binomial(1, 0.5, size=(m, p)).astype(np.float64)
        for j in s_con:
            x[:, j - 1] = rng.normal(size=m)
        return x

    x = covariates(n)
    sd = x.std(axis=0)
    x = (x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    d1, d2 = [i - 1 for i in s_dis1], [i - 1 for i in s_dis2]
    c1 = float(x[:, d1].mean(axis=1).mean())
    c2 = float(x[:, d2].mean(axis=1).mean())

    def tilde(xx):
        x1, x2, x3, x5, x6 = (xx[:, i] for i in (0, 1, 2, 4, 5))
        inner = 5 * np.mean(xx[:, d2] - c2, axis=1) - 4 + rng.normal(0.0, 0.5, size=len(xx))
        mx = np.maximum(np.maximum(x3, x5), x6)
        mn = np.minimum(np.minimum(x3, x5), x6)
        return 2 * x1 / (1 + x2) + 2 * mx / (0.2 + mn) + 2 * np.tanh(inner)

    with np.errstate(divide="ignore", invalid="ignore"):
        t = sigmoid(np.nan_to_num(tilde(x), nan=0.0)) * h
    if train_low > 0 or (train_high is not None and train_high < h):
        # redraw treatments below the training interval for the training units
        n_tr = n if n_train is None else n_train
        for _ in range(10000):
            low = np.flatnonzero(_outside(t[:n_tr], train_low, train_high))
            if low.size == 0:
                break
            with np.errstate(divide="ignore", invalid="ignore"):
                t[low] = sigmoid(np.nan_to_num(tilde(x[low]), nan=0.0)) * h
        else:
            raise RuntimeError("could not draw training treatments inside the interval")
    base = IhdpResponse(h=h, c1=c1, s_dis1=tuple(d1))
    if binary:
        t = (t > h / 2).astype(np.float64)
        oracle = BinaryIhdpResponse(base)
    else:
        oracle = base
    y = oracle(x, t)
    if noise:
        y = y + rng.normal(0.0, 0.5, size=n)
    meta = {
        "generator": "ihdp_binary" if binary else "ihdp",
        "h": h,
        "seed": seed,
        "t_eval": (0.0, h),
        "t_train": (train_low, h if train_high is None else min(train_high, h)),
        "c1": c1,
        "c2": c2,
        "groups": ihdp_groups(s_con, s_dis1, s_dis2),
        "noise_var": 0.25 if noise else 0.0,
        "binary": binary,
    }
    if n_train is not None:
        meta["n_train"] = n_train
    return Dataset(x, t, y, oracle=oracle, meta=meta)


def _unit_vectors(rng, k: int, p: int) -> np.ndarray:
    u = rng.normal(size=(k, p))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def gen_news_style(n: int = 3000, h: float = 1.0, seed: int = 0, p: int = 50,
                   n_train: int | None = None, train_low: float = 0.0, noise: bool = True,
                   train_high: float | None = None) -> Dataset:
    """Sparse nonnegative covariates; t ~ Beta(2, |v3'x / (2 v2'x)|) * h."""
    if h <= 0:
        raise ContractError("h must be positive")
    rng = RngStream(seed, DATA).generator()
    x = rng.exponential(1.0, size=(n, p)) * (rng.uniform(size=(n, p)) < 0.2)
    empty = x.sum(axis=1) == 0
    x[empty, rng.integers(0, p, size=int(empty.sum()))] = 1.0
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    v = _unit_vectors(rng, 3, p)

    def beta_b(xx):
        a, b = xx @ v[1], xx @ v[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            shape = np.abs(b / (2 * a))
        return np.maximum(np.nan_to_num(shape, nan=1e-2, posinf=1e3), 1e-2)

    t = rng.beta(2.0, beta_b(x)) * h
    if train_low > 0 or (train_high is not None and train_high < h):
        n_tr = n if n_train is None else n_train
        for _ in range(10000):
            low = np.flatnonzero(_outside(t[:n_tr], train_low, train_high))
            if low.size == 0:
                break
            t[low] = rng.beta(2.0, beta_b(x[low])) * h
        else:
            raise RuntimeError("could not draw training treatments inside the interval")
    oracle = NewsResponse(tuple(v[0]), tuple(v[1]), tuple(v[2]))
    y = oracle(x, t)
    if noise:
        y = y + rng.normal(0.0, math.sqrt(0.5), size=n)
    meta = {
        "generator": "news",
        "h": h,
        "seed": seed,
        "t_eval": (0.0, h),
        "t_train": (train_low, h if train_high is None else min(train_high, h)),
        "noise_var": 0.5 if noise else 0.0,
    }
    if n_train is not None:
        meta["n_train"] = n_train
    return Dataset(x, t, y, oracle=oracle, meta=meta)


@dataclass(frozen=True)
class TcgaDoseConfig:
    n_treatments: int = 3
    kappa: float = 2.0
    alpha: float = 2.0
    C: float = 10.0
    p: int = 100

    def __post_init__(self):
        if self.n_treatments not in (1, 2, 3):
            raise ContractError("n_treatments must be 1, 2 or 3")
        if self.alpha < 1:
            raise ContractError("alpha must be >= 1")


def sample_dosage(rng, s_star, alpha: float):
    """Beta(alpha, beta_t) with mode s*; s* <= 0 uses the mirrored s* = 1 draw."""
    s_star = np.asarray(s_star, dtype=np.float64)
    mirrored = ~(s_star > 0)
    s_clip = np.clip(np.nan_to_num(s_star, nan=1.0), 1e-3, 1.0)
    s_clip = np.where(mirrored, 1.0, s_clip)
    beta = (alpha - 1) / s_clip + 2 - alpha
    draw = rng.beta(alpha, beta)
    return np.where(mirrored, 1.0 - draw, draw)


def gen_tcga_dosage(n: int = 2000, config: TcgaDoseConfig = TcgaDoseConfig(), seed: int = 0,
                    n_train: int | None = None, noise: bool = True) -> Dataset:
    """Treatment index t in {0..T-1} with a dosage s in [0, 1] per unit."""
    rng = RngStream(seed, DATA).generator()
    x = np.abs(rng.normal(size=(n, config.p)))
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    v = np.stack([_unit_vectors(rng, 3, config.p) for _ in range(config.n_treatments)])
    oracle = TcgaDoseResponse(tuple(tuple(map(tuple, vt)) for vt in v), config.C)

    dosages = np.empty((n, config.n_treatments))
    effects = np.empty((n, config.n_treatments))
    for k in range(config.n_treatments):
        dosages[:, k] = sample_dosage(rng, oracle.optimal_dosage(x, k), config.alpha)
        effects[:, k] = oracle.curve(x, k, dosages[:, k])
    logits = config.kappa * effects
    logits -= logits.max(axis=1, keepdims=True)
    prob = np.exp(logits)
    prob /= prob.sum(axis=1, keepdims=True)
    u = rng.uniform(size=(n, 1))
    t = np.minimum((u > np.cumsum(prob, axis=1)).sum(axis=1), config.n_treatments - 1).astype(np.float64)
    s = dosages[np.arange(n), t.astype(int)]
    y = oracle(x, t, s)
    if noise:
        y = y + rng.normal(0.0, math.sqrt(0.2), size=n)
    meta = {
        "generator": "tcga_dosage",
        "h": 1.0,
        "seed": seed,
        "t_eval": (0.0, 1.0),
        "n_treatment_values": config.n_treatments,
        "kappa": config.kappa,
        "alpha": config.alpha,
        "dosages": dosages,
        "assign_prob": prob,
        "noise_var": 0.2 if noise else 0.0,
    }
    if n_train is not None:
        meta["n_train"] = n_train
    return Dataset(x, t, y, s=s, oracle=oracle, meta=meta)


# ---------------------------------------------------------------- CSV


def save_csv(dataset: Dataset, path) -> None:
    """Write x1..xp, t, [s], y with round-trip float formatting."""
    p = dataset.p
    header = [f"x{j + 1}" for j in range(p)] + ["t"] + (["s"] if dataset.s is not None else []) + ["y"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(dataset)):
            row = [repr(float(v)) for v in dataset.x[i]] + [repr(float(dataset.t[i]))]
            if dataset.s is not None:
                row.append(repr(float(dataset.s[i])))
            row.append(repr(float(dataset.y[i])))
            w.writerow(row)


def load_csv(path) -> Dataset:
    """Strict reader: header must be x1..xp, t, optional s, y and nothing else."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    xcols = [h for h in header if h.startswith("x") and h[1:].isdigit()]
    expected_x = [f"x{j + 1}" for j in range(len(xcols))]
    for name in header:
        if name not in expected_x and name not in ("t", "s", "y"):
            raise SchemaError(f"{path}: unknown column {name!r}")
    if xcols != expected_x or not xcols:
        raise SchemaError(f"{path}: covariate columns must be x1..xp in order")
    for required in ("t", "y"):
        if required not in header:
            raise SchemaError(f"{path}: missing required column {required!r}")
    if len(set(header)) != len(header):
        raise SchemaError(f"{path}: duplicate columns")
    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            values.append([float(v) for v in row])
        except ValueError as err:
            raise ParseError(f"{path}:{lineno}: {err}") from None
    data = np.array(values, dtype=np.float64).reshape(-1, len(header))
    col = {name: data[:, i] for i, name in enumerate(header)}
    x = np.column_stack([col[c] for c in xcols]) if len(data) else np.zeros((0, len(xcols)))
    return Dataset(
        x=x,
        t=col["t"],
        y=col["y"],
        s=col.get("s"),
        oracle=None,
        meta={"generator": "csv", "source": str(path), "oracle": False},
    )
