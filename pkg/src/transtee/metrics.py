"""Evaluation metrics against a dataset's noiseless response oracle.

A "model" here is anything with ``predict(x, t, s=None) -> ndarray``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .tensor import ContractError

RESULT_COLUMNS = (
    "metric",
    "value",
    "std",
    "n_repeats",
    "generator",
    "h_train_low",
    "h_train_high",
    "h_test_high",
    "seed",
    "config_hash",
)


class OracleModel:
    """Wraps a dataset oracle (plus an optional constant offset) as a model."""

    def __init__(self, dataset, offset: float = 0.0):
        self.dataset, self.offset = dataset, offset

    def predict(self, x, t, s=None):
        return self.dataset.oracle(np.asarray(x), np.asarray(t, dtype=np.float64), s) + self.offset


def _require_oracle(dataset):
    if dataset.oracle is None:
        raise ContractError("metric needs a dataset with a response oracle")


def trapezoid_weights(grid_size: int) -> np.ndarray:
    """Normalized trapezoid weights on a uniform grid (they sum to 1)."""
    w = np.full(grid_size, 1.0 / (grid_size - 1))
    w[[0, -1]] *= 0.5
    return w


def _trapezoid_mean(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Average of ``values`` (last axis on the uniform ``grid``) under the uniform density."""
    return values @ trapezoid_weights(len(grid))


def amse(model, dataset, grid_size: int = 65, interval: tuple[float, float] | None = None) -> float:
    """Mean over units of the integrated squared error over the treatment interval."""
    _require_oracle(dataset)
    if grid_size < 2:
        raise ContractError("grid_size must be at least 2")
    lo, hi = dataset.t_interval if interval is None else interval
    grid = np.linspace(lo, hi, grid_size)
    n = len(dataset)
    xr = np.repeat(dataset.x, grid_size, axis=0)
    tr = np.tile(grid, n)
    sq = (model.predict(xr, tr) - dataset.oracle(xr, tr)) ** 2
    return float(_trapezoid_mean(sq.reshape(n, grid_size), grid).mean())


def adrf_curves(model, dataset, grid: np.ndarray, x_sample: np.ndarray | None = None):
    """(estimated, true) average dose-response on ``grid``, averaged over units."""
    x = dataset.x if x_sample is None else x_sample
    n, g = len(x), len(grid)
    xr = np.repeat(x, g, axis=0)
    tr = np.tile(grid, n)
    est = model.predict(xr, tr).reshape(n, g).mean(axis=0)
    true = dataset.oracle(xr, tr).reshape(n, g).mean(axis=0) if dataset.oracle is not None else None
    return est, true


def ate_error(model, dataset) -> float:
    """|estimated ATE - true ATE| for a binary-treatment dataset."""
    _require_oracle(dataset)
    if not np.all(np.isin(dataset.t, (0.0, 1.0))):
        raise ContractError("ate_error needs a binary-treatment dataset")
    n = len(dataset)
    ones, zeros = np.ones(n), np.zeros(n)
    est = np.mean(model.predict(dataset.x, ones) - model.predict(dataset.x, zeros))
    true = np.mean(dataset.oracle(dataset.x, ones) - dataset.oracle(dataset.x, zeros))
    return float(abs(est - true))


def pehe_at_k(model, dataset, propensities: np.ndarray, K: int, weighted: bool = False,
              dosages: np.ndarray | None = None) -> float:
    """UPEHE@K / WPEHE@K over the top-K treatments ranked by propensity per unit.

    Treatment j of unit i is evaluated at dosage ``dosages[i, j]`` when given
    (falling back to ``dataset.meta['dosages']``), else without a dosage.
    """
    _require_oracle(dataset)
    prop = np.asarray(propensities, dtype=np.float64)
    n, n_t = prop.shape
    if K < 2:
        raise ContractError("pehe_at_k needs K >= 2")
    if K > n_t:
        raise ContractError(f"K={K} exceeds the {n_t} available treatments")
    if dosages is None:
        dosages = dataset.meta.get("dosages")

    est = np.empty((n, n_t))
    true = np.empty((n, n_t))
    for j in range(n_t):
        tj = np.full(n, float(j))
        sj = None if dosages is None else dosages[:, j]
        est[:, j] = model.predict(dataset.x, tj, sj)
        true[:, j] = dataset.oracle(dataset.x, tj, sj)

    # stable sort keeps ties in index order
    top = np.argsort(-prop, axis=1, kind="stable")[:, :K]
    rows = np.arange(n)[:, None]
    e, f, w = est[rows, top], true[rows, top], prop[rows, top]
    total = np.zeros(n)
    for a, b in combinations(range(K), 2):
        term = ((e[:, a] - e[:, b]) - (f[:, a] - f[:, b])) ** 2
        if weighted:
            term = term * w[:, a] * w[:, b]
        total += term
    return float((total / math.comb(K, 2)).mean())


def amse_dosage(model, dataset, grid_size: int = 65) -> float:
    """AMSE over dosages in [0, 1], averaged over units and treatments."""
    _require_oracle(dataset)
    if dataset.s is None:
        raise ContractError("amse_dosage needs a dataset with dosages")
    if grid_size < 2:
        raise ContractError("grid_size must be at least 2")
    n_t = int(dataset.meta.get("n_treatment_values", int(np.max(dataset.t)) + 1))
    grid = np.linspace(0.0, 1.0, grid_size)
    n = len(dataset)
    xr = np.repeat(dataset.x, grid_size, axis=0)
    sr = np.tile(grid, n)
    per_t = []
    for j in range(n_t):
        tr = np.full(n * grid_size, float(j))
        sq = (model.predict(xr, tr, sr) - dataset.oracle(xr, tr, sr)) ** 2
        per_t.append(_trapezoid_mean(sq.reshape(n, grid_size), grid).mean())
    return float(np.mean(per_t))


# ---------------------------------------------------------------- reports


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MetricReport:
    metric: str
    value: float
    std: float | None
    n_repeats: int
    generator: str
    h_train_low: float
    h_train_high: float
    h_test_high: float
    seed: int
    config_hash: str
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_repeats < 1:
            raise ContractError("n_repeats must be >= 1")
        if (self.std is not None) != (self.n_repeats > 1):
            raise ContractError("std must be present exactly when n_repeats > 1")

    @classmethod
    def aggregate(cls, metric: str, values, **meta) -> "MetricReport":
        values = np.asarray(values, dtype=np.float64)
        std = float(values.std(ddof=1)) if len(values) > 1 else None
        return cls(metric, float(values.mean()), std, len(values), **meta)

    def row(self) -> list[str]:
        fmt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
        return [
            self.metric,
            fmt(self.value),
            fmt(self.std),
            str(self.n_repeats),
            self.generator,
            fmt(self.h_train_low),
            fmt(self.h_train_high),
            fmt(self.h_test_high),
            str(self.seed),
            self.config_hash,
        ]


def write_results(reports, path, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(RESULT_COLUMNS)
        for r in reports:
            w.writerow(r.row())
