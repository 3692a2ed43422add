import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from selfcompat import tensor as T
from selfcompat.aggregate import (
    AggregationConfig,
    GradientSet,
    aggregate,
    capture_gradients,
    flatten_gradients,
    project_pair,
    split_flat,
    unflatten,
)
from selfcompat.errors import ConfigError, ShapeError
from selfcompat.model import ModelConfig, build_model
from selfcompat.tensor import Tensor

PROJECT = AggregationConfig("project", 0)
SUM = AggregationConfig("summation", 0)

# magnitudes in [1e-6, 1e3] (or exactly 0) keep every product clear of subnormal range
finite = st.one_of(st.just(0.0), st.floats(min_value=1e-6, max_value=1e3),
                   st.floats(min_value=-1e3, max_value=-1e-6))


def vec_pair(max_dim=50):
    return st.integers(2, max_dim).flatmap(
        lambda n: st.tuples(arrays(np.float64, n, elements=finite), arrays(np.float64, n, elements=finite)))


def test_worked_projections():
    np.testing.assert_allclose(project_pair([1, 0], [-1, 1]), [0.5, 0.5])
    assert np.dot(project_pair([1, 0], [-1, 1]), [-1, 1]) == 0
    np.testing.assert_array_equal(project_pair([1, 0], [0, 1]), [1, 0])
    np.testing.assert_array_equal(project_pair([1, 1], [-2, 0]), [0, 1])


def test_two_vector_aggregate_hand_trace():
    # each copy is projected once against the other raw vector:
    # (1,0) off (-1,1) -> (0.5,0.5); (-1,1) off (1,0) -> (0,1)
    for seed in range(5):
        gset = GradientSet(["a", "b"], [np.array([1.0, 0.0]), np.array([-1.0, 1.0])], rng_seed=seed)
        out = aggregate(gset, PROJECT)
        np.testing.assert_allclose(gset.projected[0], [0.5, 0.5], atol=1e-15)
        np.testing.assert_allclose(gset.projected[1], [0.0, 1.0], atol=1e-15)
        np.testing.assert_allclose(out, [0.5, 1.5], atol=1e-15)


def test_tiny_conflicting_gradient_does_not_underflow():
    out = project_pair(np.array([1.0, 1.0]), np.array([-1e-200, -1e-200]))
    np.testing.assert_allclose(out, [0.0, 0.0], atol=1e-15)


def test_length_mismatch_rejected():
    with pytest.raises(ShapeError):
        project_pair([1, 0], [1, 0, 0])
    with pytest.raises(ShapeError):
        GradientSet(["a", "b"], [np.zeros(2), np.zeros(3)])
    with pytest.raises(ShapeError):
        aggregate(GradientSet([], []), PROJECT)


def test_mode_validation():
    with pytest.raises(ConfigError):
        AggregationConfig("mean")


@settings(max_examples=300, deadline=None)
@given(vec_pair())
def test_projection_orthogonal_and_shrinking(pair):
    g_a, g_b = pair
    assume(np.dot(g_a, g_b) < 0)
    out = project_pair(g_a, g_b)
    na, nb = np.linalg.norm(g_a), np.linalg.norm(g_b)
    assert abs(np.dot(out, g_b)) <= 1e-9 * na * nb
    assert np.linalg.norm(out) <= na * (1 + 1e-12)


@settings(max_examples=300, deadline=None)
@given(vec_pair())
def test_two_vector_descent_sanity(pair):
    g_a, g_b = pair
    gset = GradientSet(["a", "b"], [g_a, g_b], rng_seed=1)
    out = aggregate(gset, PROJECT)
    scale = max(np.linalg.norm(g_a), np.linalg.norm(g_b), 1.0) ** 2
    assert np.dot(out, g_a) >= -1e-9 * scale
    assert np.dot(out, g_b) >= -1e-9 * scale


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(1, 30), st.integers(0, 2 ** 31 - 1))
def test_conflict_free_sets_aggregate_to_plain_sum(k, n, seed):
    rng = np.random.default_rng(seed)
    raw = [np.abs(rng.normal(size=n)) for _ in range(k)]  # non-negative vectors never conflict
    a = aggregate(GradientSet([str(i) for i in range(k)], raw, rng_seed=seed), PROJECT)
    b = aggregate(GradientSet([str(i) for i in range(k)], raw, rng_seed=seed), SUM)
    assert a.tobytes() == b.tobytes()


def test_raw_gradients_never_mutated():
    rng = np.random.default_rng(0)
    raw = [rng.normal(size=20) for _ in range(4)]
    copies = [g.copy() for g in raw]
    aggregate(GradientSet(list("abcd"), raw, rng_seed=3), PROJECT)
    for g, c in zip(raw, copies):
        assert g.tobytes() == c.tobytes()


def test_same_seed_bitwise_identical():
    rng = np.random.default_rng(1)
    raw = [rng.normal(size=100) for _ in range(4)]
    outs = [aggregate(GradientSet(list("abcd"), [g.copy() for g in raw], rng_seed=9), PROJECT).tobytes()
            for _ in range(3)]
    assert len(set(outs)) == 1


def test_conflict_rate():
    gset = GradientSet(list("abc"), [np.array([1.0, 0]), np.array([-1.0, 0]), np.array([0, 1.0])])
    assert gset.conflict_rate() == pytest.approx(1 / 3)
    assert GradientSet(["a"], [np.ones(2)]).conflict_rate() == 0.0


def _model():
    return build_model(ModelConfig(5, [8, 8], 4, 3, [0.25, 0.5]))


def test_zero_update_leaves_parameters_unchanged():
    m = _model()
    before = [p.data.tobytes() for p in m.parameters()]
    total = sum(p.size for p in m.parameters())
    unflatten(np.zeros(total), m, 0.05)
    assert [p.data.tobytes() for p in m.parameters()] == before


def test_flatten_split_roundtrip():
    m = _model()
    rng = np.random.default_rng(0)
    buf = {n: rng.normal(size=p.shape) for n, p in m.named_parameters()}
    gset = flatten_gradients(m, {"ori": buf})
    back = split_flat(gset.raw[0], m)
    for n in buf:
        np.testing.assert_array_equal(back[n], buf[n])


def test_bn_only_gradient_is_zero_elsewhere():
    m = _model()
    bank = m.norms[0].banks[0.25]
    x = Tensor(np.random.default_rng(0).normal(size=(4, 8 * 0 + 2)))
    T.backward(T.sum(T.batch_norm(x, bank.scale, bank.shift)[0] * Tensor(np.arange(8.0).reshape(4, 2))))
    gset = flatten_gradients(m, {"g": capture_gradients(m)})
    parts = split_flat(gset.raw[0], m)
    for name, g in parts.items():
        if name.startswith("bn0@0.25"):
            continue
        assert not g.any(), name
    assert parts["bn0@0.25.scale"].any()


def test_manifest_order_mismatch_rejected():
    m = _model()
    buf = capture_gradients(m)
    shuffled = dict(reversed(list(buf.items())))
    with pytest.raises(ShapeError, match="order"):
        flatten_gradients(m, {"ori": shuffled})


class OneParam:
    def __init__(self, value):
        self.p = Tensor(np.array([value]), requires_grad=True)

    def named_parameters(self):
        yield "theta", self.p


def test_one_parameter_descent_step():
    m = OneParam(1.0)
    direction = aggregate(GradientSet(["ori"], [np.array([2.0])]), PROJECT)
    unflatten(direction, m, 0.1)
    assert m.p.data[0] == pytest.approx(0.8, abs=1e-15)
