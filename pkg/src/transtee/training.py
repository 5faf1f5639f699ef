"""Outcome and propensity losses, Adam, cosine schedule, and the training loop.

With a propensity regularizer the loop alternates: the propensity head takes
``inner_steps`` steps minimizing its loss on detached covariate features, then
the outcome model takes one step on ``L_outcome - lam * L_propensity`` with the
head frozen. The adversarial term can only reach the covariate embedding and
encoder, since that is all the propensity head reads.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .rng import BATCHES, INIT, RngStream
from .tensor import ComputationRecord, ContractError, NumericError, Tensor

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------- losses


def _pair(a, b, name):
    a, b = T._as_tensor(a), T._as_tensor(b)
    if a.data.size == 0 or b.data.size == 0:
        raise ContractError(f"{name}: empty batch")
    if a.shape != b.shape:
        raise ContractError(f"{name}: shapes {a.shape} and {b.shape} differ")
    return a, b


def loss_outcome(y_hat, y) -> Tensor:
    """Mean squared outcome error."""
    y_hat, y = _pair(y_hat, y, "loss_outcome")
    return T.mean(T.square(y - y_hat))


def loss_tr(t, t_hat) -> Tensor:
    """Mean squared treatment-prediction error."""
    t, t_hat = _pair(t, t_hat, "loss_tr")
    return T.mean(T.square(t - t_hat))


def loss_ptr(t, mean, variance) -> Tensor:
    """Gaussian negative log-likelihood without the 0.5*log(2*pi) constant."""
    t, mean = _pair(t, mean, "loss_ptr")
    variance = T._as_tensor(variance)
    if variance.shape != t.shape:
        raise ContractError("loss_ptr: variance shape differs from treatment shape")
    if not np.all(variance.data > 0):
        raise NumericError("loss_ptr: variance must be positive")
    nll = T.square(t - mean) / (variance * 2.0) + T.log(variance) * 0.5
    return T.mean(nll)


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    """Adam moments for a fixed list of parameters."""

    params: list[Tensor]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def optimizer_step(state: OptimizerState, lr: float, grads: list[np.ndarray] | None = None) -> None:
    """Bias-corrected Adam update, in place."""
    if grads is None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in state.params]
    if len(grads) != len(state.params):
        raise ContractError("optimizer_step: gradient count differs from parameter count")
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step_count
    c2 = 1 - b2**state.step_count
    for p, g, m, v in zip(state.params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ContractError(f"optimizer_step: gradient shape {g.shape} vs parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("optimizer_step: non-finite gradient")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def cosine_schedule(step: int, total: int, base_lr: float) -> float:
    if not 0 <= step <= total:
        raise ContractError(f"cosine_schedule: step {step} outside [0, {total}]")
    return base_lr * 0.5 * (1 + math.cos(math.pi * step / total))


# ---------------------------------------------------------------- config / history


REGULARIZERS = ("none", "tr", "ptr")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 500
    d_model: int = 10
    n_layers: int = 1
    n_heads: int = 2
    learning_rate: float = 0.01
    schedule: str = "cos"
    regularizer: str = "none"
    lam: float = 0.5
    total_iterations: int = 1500
    inner_steps: int = 1
    propensity_lr: float | None = None
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.regularizer not in REGULARIZERS:
            raise ContractError(f"regularizer must be one of {REGULARIZERS}")
        if self.schedule not in ("cos", "none"):
            raise ContractError("schedule must be 'cos' or 'none'")
        if self.lam < 0:
            raise ContractError("lam must be nonnegative")
        if self.total_iterations < 1 or self.batch_size < 1 or self.inner_steps < 0:
            raise ContractError("iterations and batch size must be positive")

    def lr_at(self, step: int) -> float:
        if self.schedule == "cos":
            return cosine_schedule(step, self.total_iterations, self.learning_rate)
        return self.learning_rate

    def metadata(self) -> dict:
        out = asdict(self)
        out["optimizer"] = "adam(beta1=0.9, beta2=0.999, eps=1e-8)"
        out["batch_norm"] = "eps=1e-5, momentum=0.1"
        return out


@dataclass
class TrainHistory:
    step: list[int] = field(default_factory=list)
    loss_outcome: list[float] = field(default_factory=list)
    loss_propensity: list[float] = field(default_factory=list)
    test_amse: list[float] = field(default_factory=list)

    def append(self, step, lo, lp, amse) -> None:
        if self.step and step <= self.step[-1]:
            raise ContractError("history steps must increase")
        self.step.append(step)
        self.loss_outcome.append(lo)
        self.loss_propensity.append(lp)
        self.test_amse.append(amse)

    def rows(self):
        return zip(self.step, self.loss_outcome, self.loss_propensity, self.test_amse)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss_outcome", "loss_propensity", "test_amse"])
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


# ---------------------------------------------------------------- batching


class BatchSampler:
    """Epoch-wise shuffled minibatches drawn from a dedicated stream."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, min(batch_size, n), rng
        self._order = np.empty(0, dtype=int)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self._order.size:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


# ---------------------------------------------------------------- steps


def _propensity_loss(model, regularizer: str, t: np.ndarray, covariate_repr) -> Tensor:
    out = model.forward_propensity(covariate_repr)
    t = t.reshape(t.shape[0], -1)
    if regularizer == "tr":
        return loss_tr(t, out)
    mean, var = out
    return loss_ptr(t, mean, var)


def _check(value: float, what: str) -> None:
    if not math.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
        raise DivergenceError(f"{what} diverged ({value})")


def plain_step(model, opt: OptimizerState, x, t, s, y, lr: float) -> float:
    opt.zero_grad()
    with ComputationRecord() as rec:
        trace = model.forward_outcome(x, t, s, mode="train")
        loss = loss_outcome(trace.prediction, y)
    _check(loss.item(), "outcome loss")
    rec.backward(loss)
    optimizer_step(opt, lr)
    return loss.item()


def adversarial_step(model, opt: OptimizerState, prop_opt: OptimizerState, x, t, s, y,
                     config: TrainConfig, lr: float, prop_lr: float) -> tuple[float, float]:
    """One alternating update; returns (outcome loss, propensity loss)."""
    if config.regularizer == "none":
        raise ContractError("adversarial_step needs a regularizer")
    opt.zero_grad()
    prop_opt.zero_grad()
    with ComputationRecord() as rec:
        m_x = model.encode_covariates(x, mode="train")
    features = Tensor(T.mean_pool(m_x).data)

    for _ in range(config.inner_steps):
        prop_opt.zero_grad()
        with ComputationRecord() as prec:
            lp = _propensity_loss(model, config.regularizer, t, features)
        _check(lp.item(), "propensity loss")
        prec.backward(lp)
        optimizer_step(prop_opt, prop_lr)

    with rec:
        trace = model.forward_outcome(x, t, s, mode="train", encoded_x=m_x)
        lo = loss_outcome(trace.prediction, y)
        lp = _propensity_loss(model, config.regularizer, t, trace.covariate_repr)
        total = lo - lp * config.lam
    _check(lo.item(), "outcome loss")
    _check(lp.item(), "propensity loss")
    rec.backward(total)
    optimizer_step(opt, lr)
    prop_opt.zero_grad()
    return lo.item(), lp.item()


def fit_propensity(model, x, t, regularizer: str, steps: int, lr: float) -> list[float]:
    """Train only the propensity head, full batch, on the frozen covariate features."""
    if regularizer not in ("tr", "ptr"):
        raise ContractError("fit_propensity needs regularizer 'tr' or 'ptr'")
    features = Tensor(model.propensity_features(x))
    t = np.asarray(t, dtype=np.float64)
    opt = OptimizerState(model.propensity_parameters())
    losses = []
    for _ in range(steps):
        opt.zero_grad()
        with ComputationRecord() as rec:
            lp = _propensity_loss(model, regularizer, t, features)
        rec.backward(lp)
        optimizer_step(opt, lr)
        losses.append(lp.item())
    return losses


# ---------------------------------------------------------------- loop


def build_transtee(config: TrainConfig, dataset):
    from .model import TransTEE, TransTEEConfig

    t = np.asarray(dataset.t)
    model_cfg = TransTEEConfig(
        p=dataset.p,
        n_treatments=1 if t.ndim == 1 else t.shape[1],
        has_dosage=dataset.s is not None,
        d_model=config.d_model,
        n_heads=config.n_heads,
        n_layers=config.n_layers,
    )
    mode = "gaussian" if config.regularizer == "ptr" else "point"
    return TransTEE(model_cfg, RngStream(config.seed, INIT).generator(), propensity_mode=mode)


def train(config: TrainConfig, dataset, model=None, test=None, eval_fn=None):
    """Minibatch training for ``config.total_iterations`` steps.

    ``model`` defaults to a fresh TransTEE; baselines pass themselves in and
    must expose ``parameters()`` and ``forward_outcome``. History is logged every
    ``config.log_every`` steps; ``eval_fn(model, test)`` fills the test AMSE
    column when given.
    """
    if len(dataset) == 0:
        raise ContractError("train: empty dataset")
    if model is None:
        model = build_transtee(config, dataset)
    opt = OptimizerState(model.parameters())
    adversarial = config.regularizer != "none"
    if adversarial:
        prop_opt = OptimizerState(model.propensity_parameters())
        prop_base = config.propensity_lr or config.learning_rate
    sampler = BatchSampler(len(dataset), config.batch_size, RngStream(config.seed, BATCHES).generator())
    history = TrainHistory()
    x, t, s, y = dataset.x, dataset.t, dataset.s, dataset.y

    for step in range(1, config.total_iterations + 1):
        idx = sampler.next()
        lr = config.lr_at(step - 1)
        sb = None if s is None else s[idx]
        if adversarial:
            prop_lr = prop_base * lr / config.learning_rate if config.learning_rate else prop_base
            lo, lp = adversarial_step(model, opt, prop_opt, x[idx], t[idx], sb, y[idx], config, lr, prop_lr)
        else:
            lo, lp = plain_step(model, opt, x[idx], t[idx], sb, y[idx], lr), float("nan")
        if step % config.log_every == 0 or step == config.total_iterations:
            amse = float(eval_fn(model, test)) if eval_fn is not None and test is not None else float("nan")
            history.append(step, lo, lp, amse)
            log.debug("step %d loss %.5f prop %.5f amse %.5f", step, lo, lp, amse)
    return model, history
