"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is repeated in the pytest terminal
summary. Thresholds are the stated ones; none are relaxed here.
"""

import numpy as np
import pytest

from transtee import tensor as T
from transtee.attention import AttentionConfig, MultiHeadParams, multi_head, scaled_attention
from transtee.baselines import DiscretizedBaseline, DiscretizedConfig, prop1_bound_check
from transtee.cli import main
from transtee.datagen import Dataset, TcgaDoseConfig, gen_tcga_dosage
from transtee.experiments import (
    adrf_max_slope,
    count_flat_segments,
    max_adjacent_jump,
    parse_config,
    plot_adrf,
    run_experiment,
    run_repeat,
)
from transtee.metrics import OracleModel, amse, amse_dosage, pehe_at_k
from transtee.model import TransTEE, TransTEEConfig, attention_summary
from transtee.tensor import ComputationRecord, finite_diff_check
from transtee.training import OptimizerState, fit_propensity, loss_outcome, loss_ptr, optimizer_step

GRAD_TOL = 1e-5


# ---------------------------------------------------------------- 1: gradients


def _op_cases(rng):
    a = T.parameter(rng.normal(size=(3, 4)))
    b = T.parameter(rng.normal(size=(3, 4)))
    pos = T.parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
    m = T.parameter(rng.normal(size=(4, 2)))
    bias = T.parameter(rng.normal(size=(2,)))
    tok = T.parameter(rng.normal(size=(2, 3, 4)))
    w = T.parameter(rng.normal(size=(3, 4)))
    state = T.NormState.create(4)
    mha = MultiHeadParams.init(AttentionConfig(4, 2, 1), rng)
    q, k, v = (T.parameter(rng.normal(size=(2, 3, 2))) for _ in range(3))

    def weighted(out):
        return T.sum(out * w) if out.shape == w.shape else T.sum(T.square(out))

    return {
        "add": (lambda: weighted(a + b), [a, b]),
        "sub": (lambda: weighted(a - b), [a, b]),
        "mul": (lambda: weighted(a * b), [a, b]),
        "div": (lambda: weighted(a / pos), [a, pos]),
        "relu": (lambda: weighted(T.relu(a + 0.05)), [a]),
        "exp": (lambda: weighted(T.exp(a)), [a]),
        "log": (lambda: weighted(T.log(pos)), [pos]),
        "square": (lambda: weighted(T.square(a)), [a]),
        "matmul": (lambda: T.sum(T.square(T.matmul(a, m))), [a, m]),
        "linear": (lambda: T.sum(T.square(T.linear(a, m, bias))), [a, m, bias]),
        "softmax_rows": (lambda: weighted(T.softmax_rows(a)), [a]),
        "reshape": (lambda: T.sum(T.square(T.reshape(a, (4, 3))) * np.arange(12.0).reshape(4, 3)), [a]),
        "swapaxes": (lambda: T.sum(T.square(T.swapaxes(a, 0, 1)) * np.arange(12.0).reshape(4, 3)), [a]),
        "concat": (lambda: T.sum(T.square(T.concat([a, b], axis=0)) * np.arange(24.0).reshape(6, 4)), [a, b]),
        "take": (lambda: T.sum(T.square(T.take(a, ([0, 0, 2], [1, 1, 3])))), [a]),
        "sum": (lambda: T.sum(T.square(T.sum(a, axis=0))), [a]),
        "mean": (lambda: T.sum(T.square(T.mean(a, axis=1))), [a]),
        "mean_pool": (lambda: T.sum(T.square(T.mean_pool(tok))), [tok]),
        "batch_norm": (lambda: weighted(T.batch_norm(a, state, "train", update_stats=False)),
                       [a, state.scale, state.shift]),
        "scaled_attention": (lambda: T.sum(T.square(scaled_attention(q, k, v)[0])), [q, k, v]),
        "multi_head": (lambda: T.sum(T.square(multi_head(mha, tok, tok, tok)[0])),
                       [tok, *mha.tensors().values()]),
    }


def test_criterion_01_gradient_integrity(acceptance_record):
    rng = np.random.default_rng(0)
    worst = {name: finite_diff_check(f, params) for name, (f, params) in _op_cases(rng).items()}

    for has_dosage in (False, True):
        model = TransTEE(TransTEEConfig(p=3, n_treatments=2, has_dosage=has_dosage), rng)
        x = rng.uniform(-2, 2, size=(4, 3))
        t = rng.uniform(size=(4, 2))
        s = rng.uniform(size=(4, 2)) if has_dosage else None
        y = rng.normal(size=4)
        norms = [p for st in model.norm_states().values() for p in (st.scale, st.shift)]
        worst[f"transtee(dosage={has_dosage})"] = finite_diff_check(
            lambda: loss_outcome(model.forward_outcome(x, t, s).prediction, y), model.parameters() + norms)

    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < GRAD_TOL
    acceptance_record(1, ok, f"{len(worst)} checks, worst relative error {err:.2e} ({name}), tol {GRAD_TOL:g}")
    assert ok, worst


# ---------------------------------------------------------------- 2: discretization bound


def test_criterion_02_discretization_bound(acceptance_record):
    mus = {1.0: lambda t: t, 2 * np.pi: lambda t: np.sin(2 * np.pi * t)}
    worst_ratio, n = 0.0, 0
    for L, mu in mus.items():
        for high in (1.0, 5.0):
            for delta in (2, 4, 8, 16):
                observed, bound = prop1_bound_check(mu, L, 0.0, high, delta, n_probes=100_000)
                worst_ratio = max(worst_ratio, observed / bound)
                n += 1
    ok = worst_ratio <= 1.0
    acceptance_record(2, ok, f"{n} settings, max observed/bound = {worst_ratio:.4f}")
    assert ok


# ---------------------------------------------------------------- 3: propensity optima


def _toy():
    rng = np.random.default_rng(0)
    n = 4000
    x = rng.integers(0, 2, size=(n, 1)).astype(float)
    t = (0.2 + 0.5 * x[:, 0] + rng.normal(size=n) * (0.1 + 0.2 * x[:, 0]))[:, None]
    groups = [t[x[:, 0] == v, 0] for v in (0.0, 1.0)]
    return x, t, np.array([g.mean() for g in groups]), np.array([g.var() for g in groups])


def test_criterion_03_propensity_optima(acceptance_record):
    x, t, cond_mean, cond_var = _toy()
    probe = np.array([[0.0], [1.0]])

    tr = TransTEE(TransTEEConfig(p=1), np.random.default_rng(1), propensity_mode="point")
    fit_propensity(tr, x, t, "tr", steps=3000, lr=0.01)
    tr_mean = tr.forward_propensity(T.Tensor(tr.propensity_features(probe))).data.ravel()

    ptr = TransTEE(TransTEEConfig(p=1), np.random.default_rng(1), propensity_mode="gaussian")
    fit_propensity(ptr, x, t, "ptr", steps=3000, lr=0.01)
    mu, var = ptr.forward_propensity(T.Tensor(ptr.propensity_features(probe)))
    ptr_mean, ptr_var = mu.data.ravel(), var.data.ravel()

    # free-parameter variant: one (mean, log-variance) pair fit to a sample
    sample = np.random.default_rng(2).normal(0.4, 0.7, size=500)
    m, r = T.parameter([0.0]), T.parameter([0.0])
    opt = OptimizerState([m, r])
    for _ in range(4000):
        opt.zero_grad()
        with ComputationRecord() as rec:
            loss = loss_ptr(sample, m * np.ones(500), T.exp(r * np.ones(500)))
        rec.backward(loss)
        optimizer_step(opt, 0.01)
    achieved = loss_ptr(sample, m.data * np.ones(500), np.exp(r.data) * np.ones(500)).item()
    free_gap = abs(achieved - (0.5 + 0.5 * np.log(sample.var())))

    errs = (np.max(np.abs(tr_mean - cond_mean)), np.max(np.abs(ptr_mean - cond_mean)),
            np.max(np.abs(ptr_var - cond_var)))
    ok = errs[0] <= 1e-2 and errs[1] <= 1e-2 and errs[2] <= 5e-2 and free_gap <= 1e-3
    acceptance_record(3, ok, f"TR mean err {errs[0]:.1e}; PTR mean err {errs[1]:.1e}, var err {errs[2]:.1e}; "
                             f"free-parameter loss gap {free_gap:.1e}")
    assert ok


# ---------------------------------------------------------------- 4-6: synthetic runs


def test_criterion_04_synthetic_amse(tmp_path, acceptance_record):
    cfg = parse_config({
        "experiment": {"n_repeats": 10, "seed": 0, "plots": False, "attention": False},
        "generator": {"name": "synthetic", "n_train": 500, "n_test": 200},
        "models": {"transtee": {"kind": "transtee"}},
    })
    outcome = run_experiment(cfg, tmp_path)
    values = outcome.values("transtee", "amse")
    mean = float(np.mean(values)) if values else np.inf
    ok = len(values) == 10 and mean <= 0.05
    acceptance_record(4, ok, f"mean test AMSE {mean:.4f} over {len(values)} repeats, threshold 0.05")
    assert ok


@pytest.fixture(scope="module")
def extrapolation(tmp_path_factory):
    cfg = parse_config({
        "experiment": {"n_repeats": 10, "seed": 0, "plots": False, "attention": False},
        "generator": {"name": "synthetic", "h_train": [0.1, 2.0], "h_test": [0.0, 2.0]},
        "models": {"transtee": {"kind": "transtee"}, "disc": {"kind": "discretized", "delta": 5}},
    })
    return cfg, run_experiment(cfg, tmp_path_factory.mktemp("extrapolation"))


def test_criterion_05_extrapolation(extrapolation, acceptance_record):
    _, outcome = extrapolation
    ours = outcome.values("transtee", "amse")
    disc = outcome.values("disc", "amse")
    ratio = np.mean(ours) / np.mean(disc)
    ok = len(ours) == len(disc) == 10 and ratio < 0.5
    acceptance_record(5, ok, f"TransTEE {np.mean(ours):.4f} vs discretized {np.mean(disc):.4f}, ratio {ratio:.3f} < 0.5")
    assert ok


def test_criterion_06_adrf_continuity(extrapolation, tmp_path, acceptance_record):
    cfg, outcome = extrapolation
    first = {r.model: r for r in reversed(outcome.repeats) if r.status == "ok"}
    grid = np.linspace(0.0, 2.0, 101)
    spacing = grid[1] - grid[0]

    disc_est, _ = plot_adrf(first["disc"].trained, first["disc"].test, cfg.x_sample_count, grid,
                            tmp_path / "disc.svg")
    segments = count_flat_segments(disc_est)

    model, test = first["transtee"].trained, first["transtee"].test
    est, _ = plot_adrf(model, test, cfg.x_sample_count, grid, tmp_path / "transtee.svg")
    jump = max_adjacent_jump(est)
    slope = adrf_max_slope(model, test.x[: cfg.x_sample_count], grid)
    limit = 10 * spacing * slope

    ok = segments >= 5 and jump <= limit
    acceptance_record(6, ok, f"discretized flat segments {segments} (need >= 5); TransTEE max jump {jump:.2e} "
                             f"<= {limit:.2e}")
    assert ok


# ---------------------------------------------------------------- 7: covariate adjustment


def test_criterion_07_covariate_adjustment(acceptance_record):
    cfg = parse_config({
        "experiment": {"n_repeats": 10, "seed": 0},
        "generator": {"name": "ihdp"},
        "train": {"batch_size": 128, "learning_rate": 0.0005, "regularizer": "tr"},
        "models": {"plain": {"lam": 0.0}, "tr": {"lam": 0.5}},
    })
    plain_spec, tr_spec = cfg.models
    wins, pairs = 0, []
    for r in range(cfg.n_repeats):
        w = []
        for spec in (plain_spec, tr_spec):
            res = run_repeat(cfg, spec, r)
            assert res.status == "ok", res.status
            weights = res.trained.cross_attention(res.test.x, res.test.t).mean(axis=0)
            w.append(attention_summary(weights, res.test.meta["groups"])["w_con"])
        pairs.append(tuple(w))
        wins += w[1] > w[0]
    ok = wins >= 8
    mean_plain, mean_tr = np.mean(pairs, axis=0)
    acceptance_record(7, ok, f"w_con larger under TR in {wins}/10 seeds (mean {mean_tr:.3f} vs {mean_plain:.3f})")
    assert ok


# ---------------------------------------------------------------- 8: parameter counts


def test_criterion_08_parameter_counts(acceptance_record):
    rng = np.random.default_rng(0)
    counts = {
        dosage: [TransTEE(TransTEEConfig(p=10, n_treatments=k, has_dosage=dosage), rng).count_params()
                 for k in (1, 2, 3)]
        for dosage in (False, True)
    }
    disc = [DiscretizedBaseline(DiscretizedConfig(p=10, delta=d), rng).count_params() for d in (2, 4, 8, 16)]
    ok = all(len(set(c)) == 1 for c in counts.values()) and all(a < b for a, b in zip(disc, disc[1:]))
    acceptance_record(8, ok, f"TransTEE {counts[False]} / with dosage {counts[True]}; discretized {disc}")
    assert ok


# ---------------------------------------------------------------- 9: metrics


class _Dyadic:
    """Oracle whose values are exactly representable, so c^2 can be checked with ==."""

    def __call__(self, x, t, s=None):
        base = np.floor(8 * np.asarray(t, dtype=float)) / 8 + np.floor(4 * x[:, 0]) / 4
        return base if s is None else base + np.floor(4 * np.asarray(s)) / 16


def test_criterion_09_metric_exactness(acceptance_record):
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(30, 2))
    cont = Dataset(x, rng.uniform(size=30), np.zeros(30), oracle=_Dyadic(), meta={"t_eval": (0.0, 1.0)})
    dose = Dataset(x, rng.integers(0, 3, 30).astype(float), np.zeros(30), s=rng.uniform(size=30),
                   oracle=_Dyadic(), meta={"n_treatment_values": 3})
    c = 0.375
    checks = {
        "amse oracle": amse(OracleModel(cont), cont) == 0.0,
        "amse offset": amse(OracleModel(cont, c), cont) == c * c,
        "amse_dosage oracle": amse_dosage(OracleModel(dose), dose) == 0.0,
        "amse_dosage offset": amse_dosage(OracleModel(dose, c), dose) == c * c,
    }
    tcga = gen_tcga_dosage(n=60, config=TcgaDoseConfig(p=10), seed=0)
    checks["tcga oracle"] = amse_dosage(OracleModel(tcga), tcga) == 0.0

    # brute-force pairwise enumeration on a 3-treatment toy
    n, n_t, K = 8, 3, 3
    xt = rng.normal(size=(n, 2))
    prop = rng.dirichlet(np.ones(n_t), size=n)
    oracle = lambda x, t, s=None: x[:, 0] * (np.asarray(t) + 1) + np.asarray(t) ** 2  # noqa: E731
    toy = Dataset(xt, rng.integers(0, n_t, n).astype(float), np.zeros(n), oracle=oracle)

    class Model:
        def predict(self, x, t, s=None):
            return np.sin(x[:, 1] + np.asarray(t)) + np.asarray(t)

    worst = 0.0
    for weighted in (False, True):
        total = 0.0
        for i in range(n):
            xi = xt[i : i + 1]
            acc = 0.0
            for a in range(n_t):
                for b in range(a + 1, n_t):
                    e = Model().predict(xi, [a])[0] - Model().predict(xi, [b])[0]
                    f = oracle(xi, [a])[0] - oracle(xi, [b])[0]
                    acc += (e - f) ** 2 * (prop[i, a] * prop[i, b] if weighted else 1.0)
            total += acc / 3
        worst = max(worst, abs(pehe_at_k(Model(), toy, prop, K, weighted=weighted) - total / n))
    checks["pehe brute force"] = worst <= 1e-12

    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    acceptance_record(9, ok, f"{len(checks)} exact checks, pehe gap {worst:.1e}" + (f", failed {failed}" if failed else ""))
    assert ok


# ---------------------------------------------------------------- 10: determinism


DETERMINISM_CONFIG = """
[experiment]
n_repeats = 2
seed = 7

[generator]
name = "synthetic"
n_train = 200
n_test = 100

[train]
batch_size = 100
total_iterations = 200

[models.transtee]
kind = "transtee"
regularizer = "tr"

[models.disc]
kind = "discretized"
"""


def test_criterion_10_determinism(tmp_path, acceptance_record):
    cfg = tmp_path / "det.toml"
    cfg.write_text(DETERMINISM_CONFIG)
    codes = [main(["experiment", "--config", str(cfg), "--out", str(tmp_path / run)]) for run in ("a", "b")]
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("results.csv", "repeats.csv")}
    ok = codes == [0, 0] and all(same.values())
    acceptance_record(10, ok, f"exit codes {codes}; byte-identical {same}")
    assert ok
