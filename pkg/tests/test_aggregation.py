import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsoda.fedcore.aggregation import (
    cross_assess,
    dynamic_aggregate,
    fedavg_aggregate,
    normalize_similarity,
    pairwise_aggregate,
)
from fedsoda.model import build_model
from fedsoda.tensor import ParamBlock, ShapeError
from oracles import from_blocks, layerwise_aggregate_scalar, max_abs_diff, normalize_scalar, random_instance, to_blocks


def scalar_clients(values):
    return [[ParamBlock(0, np.array([v], dtype=np.float64), np.array([0.0]))] for v in values]


def test_oracle_hand_example():
    # m=2, lam=0.4, off-diagonals 1: both brackets mix to the plain mean
    p = [[[2.0]], [[6.0]]]
    s = [[[0.0], [1.0]], [[1.0], [0.0]]]
    assert layerwise_aggregate_scalar(p, s, 0.4) == [[pytest.approx(4.0)]]


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_dynamic_aggregate_matches_scalar_oracle(seed):
    params, s_hat, lam = random_instance(seed)
    got = dynamic_aggregate(to_blocks(params), np.array(s_hat), lam)
    assert max_abs_diff(from_blocks(got), layerwise_aggregate_scalar(params, s_hat, lam)) < 1e-6


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(2, 6))
def test_lambda_one_is_uniform_fedavg(seed, m):
    params, s_hat, _ = random_instance(seed, m=m)
    blocks = to_blocks(params)
    a = from_blocks(dynamic_aggregate(blocks, np.array(s_hat), 1.0))
    b = from_blocks(fedavg_aggregate(blocks))
    assert max_abs_diff(a, b) < 1e-6


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lam=st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]))
def test_uniform_similarity_is_mean_for_any_lambda(seed, lam):
    params, _, _ = random_instance(seed)
    m, n_layers = len(params), len(params[0])
    s = np.full((m, m, n_layers), 1.0 / (m - 1))
    s[np.arange(m), np.arange(m)] = 0.0
    blocks = to_blocks(params)
    assert max_abs_diff(from_blocks(dynamic_aggregate(blocks, s, lam)), from_blocks(fedavg_aggregate(blocks))) < 1e-6


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_dynamic_aggregate_is_convex_per_coordinate(seed):
    params, s_hat, lam = random_instance(seed)
    got = from_blocks(dynamic_aggregate(to_blocks(params), np.array(s_hat), lam))
    for l, layer in enumerate(got):
        for i, w in enumerate(layer):
            vals = [p[l][i] for p in params]
            assert min(vals) - 1e-9 <= w <= max(vals) + 1e-9


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_permutation_equivariance(seed):
    params, s_hat, lam = random_instance(seed)
    m = len(params)
    perm = np.random.default_rng(seed % 2**32).permutation(m)
    s = np.array(s_hat)
    s_perm = s[perm][:, perm]
    a = from_blocks(dynamic_aggregate(to_blocks(params), s, lam))
    b = from_blocks(dynamic_aggregate(to_blocks([params[i] for i in perm]), s_perm, lam))
    assert max_abs_diff(a, b) < 1e-9
    a = from_blocks(fedavg_aggregate(to_blocks(params)))
    b = from_blocks(fedavg_aggregate(to_blocks([params[i] for i in perm])))
    assert max_abs_diff(a, b) < 1e-9


def test_dynamic_aggregate_single_client(caplog):
    blocks = scalar_clients([3.0])
    with caplog.at_level("WARNING"):
        out = dynamic_aggregate(blocks, np.zeros((1, 1, 1)), 0.4)
    assert out[0].weights[0] == 3.0
    assert "single client" in caplog.text


def test_dynamic_aggregate_errors():
    with pytest.raises(ValueError, match="lambda"):
        dynamic_aggregate(scalar_clients([1.0, 2.0]), np.zeros((2, 2, 1)), 1.5)
    with pytest.raises(ShapeError):
        dynamic_aggregate(scalar_clients([1.0, 2.0]), np.zeros((2, 2, 3)), 0.4)
    bad = scalar_clients([1.0, 2.0])
    bad[1].append(bad[1][0].copy())
    with pytest.raises(ShapeError):
        dynamic_aggregate(bad, np.zeros((2, 2, 1)), 0.4)


def test_fedavg_examples():
    assert fedavg_aggregate(scalar_clients([0.0, 4.0]), [1, 3])[0].weights[0] == pytest.approx(3.0)
    assert fedavg_aggregate(scalar_clients([1.0, 5.0]), [2, 2])[0].weights[0] == pytest.approx(3.0)
    assert fedavg_aggregate(scalar_clients([7.0]), [5])[0].weights[0] == 7.0
    with pytest.raises(ValueError):
        fedavg_aggregate(scalar_clients([1.0, 2.0]), [0, 0])


def test_fedavg_averages_norm_buffers():
    a = ParamBlock(0, np.ones(2), np.zeros(2), buffers={"running_mean": np.zeros(2), "running_var": np.ones(2)}, is_norm=True)
    b = ParamBlock(0, np.ones(2), np.zeros(2), buffers={"running_mean": np.full(2, 2.0), "running_var": np.full(2, 3.0)}, is_norm=True)
    out = fedavg_aggregate([[a], [b]])[0]
    np.testing.assert_allclose(out.buffers["running_mean"], 1.0)
    np.testing.assert_allclose(out.buffers["running_var"], 2.0)
    assert out.is_norm


def test_pairwise_aggregate_uniform_similarity_is_fedavg():
    blocks = scalar_clients([1.0, 2.0, 6.0])
    s = np.full((3, 3, 1), 0.5)
    s[np.arange(3), np.arange(3)] = 0
    counts = [1, 2, 3]
    got = pairwise_aggregate(blocks, s, 0.4, counts)[0].weights[0]
    assert got == pytest.approx(fedavg_aggregate(blocks, counts)[0].weights[0])


def test_pairwise_aggregate_favours_similar_client():
    blocks = scalar_clients([0.0, 0.0, 1.0])
    # every assessor finds client 2 most similar
    s = np.array([[[0], [0.2], [0.8]], [[0.2], [0], [0.8]], [[0.5], [0.5], [0]]], dtype=float)
    w = pairwise_aggregate(blocks, s, 0.4)[0].weights[0]
    assert w > 1 / 3


# --- normalization ----------------------------------------------------------


def test_normalize_examples():
    raw = np.array([[[1.0], [0.9], [0.3]], [[0.5], [1.0], [0.5]], [[-0.2], [-0.1], [1.0]]])
    s = normalize_similarity(raw)
    np.testing.assert_allclose(s[0, 1:, 0], [0.75, 0.25])
    np.testing.assert_allclose(s[1, [0, 2], 0], [0.5, 0.5])
    np.testing.assert_allclose(s[2, :2, 0], [0.5, 0.5])  # fallback
    assert np.all(np.diagonal(s, axis1=0, axis2=1) == 0)


@st.composite
def raw_cubes(draw):
    m = draw(st.integers(2, 6))
    n_layers = draw(st.integers(1, 4))
    vals = draw(st.lists(st.floats(-1.0, 1.0), min_size=m * m * n_layers, max_size=m * m * n_layers))
    raw = np.array(vals).reshape(m, m, n_layers)
    zero_rows = draw(st.lists(st.tuples(st.integers(0, m - 1), st.integers(0, n_layers - 1)), max_size=3))
    for k, l in zero_rows:
        raw[k, :, l] = draw(st.sampled_from([0.0, -0.5]))
    return raw


@settings(max_examples=100, deadline=None)
@given(raw=raw_cubes())
def test_normalize_rows_sum_to_one(raw):
    s = normalize_similarity(raw)
    m = raw.shape[0]
    off = ~np.eye(m, dtype=bool)
    assert np.all(s >= 0)
    sums = np.where(off[:, :, None], s, 0).sum(axis=1)
    assert np.all(np.abs(sums - 1) <= 1e-12)
    np.testing.assert_allclose(s, np.array(normalize_scalar(raw.tolist())), atol=1e-15)


def test_normalize_rejects_bad_input():
    with pytest.raises(ShapeError):
        normalize_similarity(np.zeros((2, 3, 1)))
    with pytest.raises(ValueError):
        normalize_similarity(np.full((2, 2, 1), np.nan))


# --- cross assessment -------------------------------------------------------


def test_cross_assess_identical_models_are_fully_similar():
    model = build_model(seed=1)
    rng = np.random.default_rng(0)
    probes = [rng.random((2, 1, 8, 8)).astype(np.float32) for _ in range(3)]
    raw = cross_assess([model, model.copy(), model.copy()], probes)
    assert raw.shape == (3, 3, model.num_layers)
    np.testing.assert_allclose(raw, 1.0, atol=1e-6)


def test_cross_assess_diagonal_and_range():
    models = [build_model(seed=s) for s in range(3)]
    rng = np.random.default_rng(1)
    probes = [rng.random((2, 1, 8, 8)).astype(np.float32) for _ in range(3)]
    raw = cross_assess(models, probes)
    assert np.all(raw[np.arange(3), np.arange(3)] == 1.0)
    assert np.all(np.abs(raw) <= 1 + 1e-9)
    assert raw[0, 1, 0] != 1.0


def test_cross_assess_zero_features_give_zero():
    a = build_model(seed=0)
    b = build_model(seed=0)
    for blk in b.blocks:
        blk.weights[...] = 0
        blk.bias[...] = 0
    raw = cross_assess([a, b], [np.ones((1, 1, 4, 4), np.float32)] * 2)
    assert raw[0, 1, 0] == 0.0


def test_cross_assess_mismatch():
    with pytest.raises(ValueError):
        cross_assess([build_model(seed=0)], [])
