import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transtee import tensor as T
from transtee.baselines import (
    DiscretizedBaseline,
    DiscretizedConfig,
    MlpBaseline,
    MlpConfig,
    discretized_forward,
    nearest_branch,
    prop1_bound_check,
)
from transtee.tensor import ContractError, DimensionError, finite_diff_check
from transtee.training import loss_outcome


def test_mlp_zero_weights_returns_bias():
    model = MlpBaseline(MlpConfig(p=3, hidden=(4,)), np.random.default_rng(0))
    for w in model.mlp.weights:
        w.data[...] = 0.0
    model.mlp.biases[-1].data[...] = 1.75
    np.testing.assert_array_equal(model.predict(np.ones((5, 3)), np.linspace(0, 1, 5)), 1.75)


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    model = MlpBaseline(MlpConfig(p=3, hidden=(5, 4)), rng)
    x, t, y = rng.normal(size=(4, 3)), rng.uniform(size=4), rng.normal(size=4)
    err = finite_diff_check(lambda: loss_outcome(model.forward_outcome(x, t).prediction, y), model.parameters())
    assert err < 1e-5


def test_mlp_dimension_and_dosage_checks():
    model = MlpBaseline(MlpConfig(p=3, n_treatments=1, has_dosage=True), np.random.default_rng(0))
    assert model.forward_outcome(np.zeros((2, 3)), np.zeros(2), np.zeros(2)).prediction.shape == (2,)
    with pytest.raises(ContractError):
        model.forward_outcome(np.zeros((2, 3)), np.zeros(2))
    with pytest.raises(DimensionError):
        model.forward_outcome(np.zeros((2, 4)), np.zeros(2), np.zeros(2))
    with pytest.raises(ContractError):
        MlpConfig(p=3, hidden=(0,))


def test_mlp_is_continuous_in_t():
    model = MlpBaseline(MlpConfig(p=2), np.random.default_rng(2))
    x = np.ones((2, 2))
    a = model.predict(x, np.array([0.5, 0.5 + 1e-9]))
    assert abs(a[0] - a[1]) < 1e-6


def test_mlp_count_params():
    assert MlpBaseline(MlpConfig(p=6, hidden=(50, 50)), np.random.default_rng(0)).count_params() == 3001


# ---------------------------------------------------------------- discretized


def test_nearest_branch_examples():
    assert nearest_branch(0.3, 0.0, 1.0, 1) == 0
    assert nearest_branch(0.7, 0.0, 1.0, 1) == 1
    np.testing.assert_array_equal(nearest_branch([-5.0, 0.0, 0.24, 0.26, 1.0, 9.0], 0.0, 1.0, 4), [0, 0, 1, 1, 4, 4])


def test_discretized_config_validation():
    with pytest.raises(ContractError):
        DiscretizedConfig(p=2, delta=0)
    with pytest.raises(ContractError):
        DiscretizedConfig(p=2, low=1.0, high=1.0)
    np.testing.assert_allclose(DiscretizedConfig(p=2, delta=4, low=0.0, high=2.0).grid, [0, 0.5, 1, 1.5, 2])


def test_discretized_clamps_outside_interval():
    model = DiscretizedBaseline(DiscretizedConfig(p=2, delta=4, low=0.1, high=2.0), np.random.default_rng(0))
    x = np.ones((3, 2))
    out = model.predict(x, np.array([-1.0, 0.0, 0.1]))
    assert out[0] == out[1] == out[2]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.data())
def test_discretized_same_cell_same_output(delta, data):
    model = DiscretizedBaseline(DiscretizedConfig(p=2, delta=delta, hidden=(4,)), np.random.default_rng(delta))
    cell = data.draw(st.integers(0, delta))
    half = 0.5 / delta
    lo, hi = max(0.0, cell / delta - half), min(1.0, cell / delta + half)
    a = data.draw(st.floats(lo, hi, exclude_max=True))
    b = data.draw(st.floats(lo, hi, exclude_max=True))
    if nearest_branch(a, 0, 1, delta) != nearest_branch(b, 0, 1, delta):
        return  # boundary rounding put them in different cells
    x = np.full((1, 2), 0.3)
    assert discretized_forward(model, x, a)[0] == discretized_forward(model, x, b)[0]


def test_discretized_branch_matches_per_branch_mlp():
    rng = np.random.default_rng(3)
    model = DiscretizedBaseline(DiscretizedConfig(p=3, delta=2, hidden=(5,)), rng)
    x = rng.normal(size=(4, 3))
    out = model.predict(x, np.full(4, 0.5))  # branch 1
    h = np.maximum(x @ model.weights[0].data[1] + model.biases[0].data[1], 0)
    ref = (h @ model.weights[1].data[1] + model.biases[1].data[1])[:, 0]
    np.testing.assert_allclose(out, ref, rtol=1e-14)


def test_discretized_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    model = DiscretizedBaseline(DiscretizedConfig(p=3, delta=3, hidden=(4,)), rng)
    x, t, y = rng.normal(size=(4, 3)), rng.uniform(size=4), rng.normal(size=4)
    err = finite_diff_check(lambda: loss_outcome(model.forward_outcome(x, t).prediction, y), model.parameters())
    assert err < 1e-5


def test_discretized_count_affine_in_delta():
    counts = [DiscretizedBaseline(DiscretizedConfig(p=6, delta=d), np.random.default_rng(0)).count_params()
              for d in (2, 4, 8)]
    assert counts[1] - counts[0] > 0
    assert (counts[2] - counts[1]) == 2 * (counts[1] - counts[0])
    per_branch = MlpBaseline(MlpConfig(p=5, hidden=(50, 50)), np.random.default_rng(0)).count_params()
    assert counts[0] == 3 * per_branch


# ---------------------------------------------------------------- bound check


def test_prop1_linear_example():
    observed, bound = prop1_bound_check(lambda t: t, 1.0, 0.0, 1.0, 4)
    assert bound == 0.25
    assert observed == pytest.approx(0.125, abs=1e-4)


def test_prop1_constant_is_exact():
    for delta in (1, 3, 16):
        assert prop1_bound_check(lambda t: np.full_like(t, 2.0), 0.0, 0.0, 1.0, delta)[0] == 0.0


def test_prop1_sine_sweep_decays():
    errors = [prop1_bound_check(lambda t: np.sin(2 * np.pi * t), 2 * np.pi, 0.0, 1.0, d)[0] for d in (2, 4, 8, 16)]
    assert errors == sorted(errors, reverse=True) and errors[-1] < errors[0]


def test_prop1_raises_when_lipschitz_understated():
    with pytest.raises(AssertionError):
        prop1_bound_check(lambda t: 10 * t, 1.0, 0.0, 1.0, 2)


def test_discretized_model_is_differentiable_through_tensor_ops():
    # the one-hot selection keeps gradients away from unused branches
    rng = np.random.default_rng(5)
    model = DiscretizedBaseline(DiscretizedConfig(p=2, delta=2, hidden=(3,)), rng)
    with T.ComputationRecord() as rec:
        loss = loss_outcome(model.forward_outcome(rng.normal(size=(2, 2)), np.zeros(2)).prediction, np.zeros(2))
    rec.backward(loss)
    assert np.all(model.weights[-1].grad[1:] == 0) and np.any(model.weights[-1].grad[0] != 0)
