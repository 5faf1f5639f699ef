"""Reference estimators: an MLP S-learner and a branch-per-grid-point model.

Both plug into :func:`transtee.training.train` (they expose ``parameters``
and ``forward_outcome``) and into the metrics (``predict``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import MlpParams, uniform_init
from .tensor import ContractError, DimensionError, Tensor


@dataclass
class _Prediction:
    prediction: Tensor


class _PredictMixin:
    def predict(self, x, t, s=None, chunk: int = 65536) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        out = np.empty(x.shape[0])
        for lo in range(0, x.shape[0], chunk):
            sl = slice(lo, lo + chunk)
            sv = None if s is None else np.asarray(s)[sl]
            out[sl] = self.forward_outcome(x[sl], t[sl], sv, mode="eval").prediction.data
        return out

    def count_params(self) -> int:
        return sum(p.data.size for p in self.parameters())


@dataclass(frozen=True)
class MlpConfig:
    p: int
    n_treatments: int = 1
    has_dosage: bool = False
    hidden: tuple[int, ...] = (50, 50)

    def __post_init__(self):
        if any(w < 1 for w in self.hidden):
            raise ContractError("MLP widths must be positive")

    @property
    def n_inputs(self) -> int:
        return self.p + self.n_treatments * (2 if self.has_dosage else 1)


class MlpBaseline(_PredictMixin):
    """Concatenates (x, t[, s]) and regresses the outcome with one MLP."""

    def __init__(self, config: MlpConfig, rng: np.random.Generator):
        self.config = config
        self.mlp = MlpParams.init((config.n_inputs, *config.hidden, 1), rng)

    def parameters(self) -> list[Tensor]:
        return list(self.mlp.tensors().values())

    def forward_outcome(self, x, t, s=None, mode: str = "train") -> _Prediction:
        x = np.asarray(x, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64).reshape(len(x), -1)
        parts = [x, t]
        if (s is not None) != self.config.has_dosage:
            raise ContractError("dosage must be given exactly when the model has dosages")
        if s is not None:
            parts.append(np.asarray(s, dtype=np.float64).reshape(len(x), -1))
        inputs = np.concatenate(parts, axis=1)
        if inputs.shape[1] != self.config.n_inputs:
            raise DimensionError(f"expected {self.config.n_inputs} inputs, got {inputs.shape[1]}")
        out = self.mlp(Tensor(inputs))
        return _Prediction(T.reshape(out, (len(x),)))


@dataclass(frozen=True)
class DiscretizedConfig:
    p: int
    delta: int = 5
    low: float = 0.0
    high: float = 1.0
    hidden: tuple[int, ...] = (50, 50)

    def __post_init__(self):
        if self.delta < 1:
            raise ContractError("delta must be >= 1")
        if not self.low < self.high:
            raise ContractError("need low < high")

    @property
    def grid(self) -> np.ndarray:
        return self.low + (self.high - self.low) * np.arange(self.delta + 1) / self.delta


def nearest_branch(t, low: float, high: float, delta: int) -> np.ndarray:
    """Index of the nearest grid point; values outside [low, high] go to an endpoint."""
    u = (np.asarray(t, dtype=np.float64) - low) / (high - low) * delta
    return np.clip(np.floor(u + 0.5), 0, delta).astype(int)


class DiscretizedBaseline(_PredictMixin):
    """delta + 1 covariate-only MLP branches, one per grid point of [low, high].

    A treatment value is routed to the branch of its nearest grid point, so the
    estimate is piecewise constant in t.
    """

    def __init__(self, config: DiscretizedConfig, rng: np.random.Generator):
        self.config = config
        widths = (config.p, *config.hidden, 1)
        k = config.delta + 1
        self.weights = [
            T.parameter(np.stack([uniform_init(rng, (a, b), a).data for _ in range(k)]))
            for a, b in zip(widths[:-1], widths[1:])
        ]
        self.biases = [
            T.parameter(np.stack([uniform_init(rng, (1, b), a).data for _ in range(k)]))
            for a, b in zip(widths[:-1], widths[1:])
        ]

    def parameters(self) -> list[Tensor]:
        return [*self.weights, *self.biases]

    def branch_outputs(self, x) -> Tensor:
        """All branches on all units: ``[delta + 1, batch]``."""
        a = Tensor(np.asarray(x, dtype=np.float64)[None])
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = T.matmul(a, w) + b
            if i < last:
                a = T.relu(a)
        return T.reshape(a, a.shape[:2])

    def forward_outcome(self, x, t, s=None, mode: str = "train") -> _Prediction:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.config.p:
            raise DimensionError(f"expected {self.config.p} covariates, got {x.shape[-1]}")
        c = self.config
        branch = nearest_branch(np.asarray(t).reshape(-1), c.low, c.high, c.delta)
        onehot = np.zeros((c.delta + 1, len(x)))
        onehot[branch, np.arange(len(x))] = 1.0
        return _Prediction(T.sum(self.branch_outputs(x) * onehot, axis=0))


def discretized_forward(model: DiscretizedBaseline, x, t) -> np.ndarray:
    return model.predict(np.atleast_2d(x), np.atleast_1d(t))


def prop1_bound_check(mu, L: float, low: float, high: float, delta: int, n_probes: int = 100_000):
    """Max error of the ideal nearest-grid approximation of ``mu`` versus L(h-l)/delta.

    ``mu`` maps an array of treatments to responses and must be L-Lipschitz.
    Returns ``(max_observed_error, bound)`` and raises if the bound is violated.
    """
    grid = low + (high - low) * np.arange(delta + 1) / delta
    probes = np.linspace(low, high, n_probes)
    approx = np.asarray(mu(grid[nearest_branch(probes, low, high, delta)]), dtype=np.float64)
    observed = float(np.max(np.abs(approx - np.asarray(mu(probes), dtype=np.float64))))
    bound = L * (high - low) / delta
    if observed > bound:
        raise AssertionError(f"discretization error {observed} exceeds bound {bound}")
    return observed, bound
