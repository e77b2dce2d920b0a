import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from illumopt.labels import MAX_ITERATIONS, QuantizationModel, fit_kmeans, quantize, round_to_depth

unit_floats = st.floats(0.0, 1.0, allow_nan=False)


def test_two_cluster_fit():
    values = np.r_[np.full(500, 0.1), np.full(500, 0.9)]
    model = fit_kmeans(values, 1)
    np.testing.assert_allclose(model.means, [0.1, 0.9], atol=1e-12)
    assert model.converged


def test_initial_means_for_seven_bits():
    # a population sitting exactly on the initial means is a fixed point
    k = 128
    init = np.arange(1, k + 1) / k
    model = fit_kmeans(np.repeat(init, 3), 7)
    assert model.k == 128
    np.testing.assert_allclose(model.means, init, atol=1e-15)
    assert model.iterations_used == 1 and model.converged


def test_constant_data_keeps_k_means():
    model = fit_kmeans(np.full(100, 0.3), 2)
    assert model.means.size == 4
    assert np.all(np.diff(model.means) > 0)
    q = quantize(np.full((4, 4), 0.3), model)
    np.testing.assert_allclose(q, 0.3)


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        fit_kmeans([], 1)
    with pytest.raises(ValueError):
        fit_kmeans([0.5], 8)
    with pytest.raises(ValueError):
        fit_kmeans([1.5], 1)


def test_iteration_cap():
    rng = np.random.default_rng(0)
    model = fit_kmeans(rng.beta(0.5, 2.0, 20000), 7)
    assert model.iterations_used <= MAX_ITERATIONS
    assert model.converged or model.iterations_used == MAX_ITERATIONS


def test_quantize_matches_brute_force():
    rng = np.random.default_rng(5)
    image = rng.random((8, 8))
    model = fit_kmeans(rng.random(1000), 2)
    dist = np.abs(image[..., None] - model.means)
    expected = model.means[np.argmin(dist, axis=-1)]  # argmin picks the lower index on ties
    np.testing.assert_array_equal(quantize(image, model), expected)


def test_quantize_ties_go_low():
    model = QuantizationModel(1, np.array([0.25, 0.75]), True, 1)
    np.testing.assert_array_equal(quantize(np.array([0.5, 0.25, 0.75]), model), [0.25, 0.25, 0.75])


def test_round_to_depth_examples():
    np.testing.assert_array_equal(round_to_depth(np.array([0.49, 0.5, 0.51]), 1), [0, 1, 1])
    assert round_to_depth(np.array(0.5), 7) == pytest.approx(64 / 127, abs=1e-15)
    grid = np.arange(128) / 127
    np.testing.assert_array_equal(round_to_depth(grid, 7), grid)


def test_serialization_round_trip():
    model = fit_kmeans(np.random.default_rng(1).random(500), 3)
    again = QuantizationModel.from_json(model.to_json())
    np.testing.assert_array_equal(again.means, model.means)
    assert again.bits == 3 and again.converged == model.converged


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 300), elements=unit_floats), st.integers(1, 7))
def test_kmeans_invariants(values, bits):
    model = fit_kmeans(values, bits)
    assert np.all(np.diff(model.means) > 0)
    obj = np.array(model.objective)
    assert np.all(np.diff(obj) <= 1e-12 * max(1.0, obj[0]))
    q = quantize(values, model)
    assert np.all(np.isin(q, model.means))
    np.testing.assert_array_equal(quantize(q, model), q)
    order = np.argsort(values, kind="stable")
    assert np.all(np.diff(q[order]) >= 0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 4), elements=unit_floats), st.integers(1, 7))
def test_round_to_depth_on_grid_and_idempotent(x, bits):
    r = round_to_depth(x, bits)
    levels = 2**bits - 1
    np.testing.assert_allclose(r * levels, np.rint(r * levels), atol=1e-9)
    np.testing.assert_array_equal(round_to_depth(r, bits), r)
    assert np.all(np.abs(r - x) <= 0.5 / levels + 1e-12)
