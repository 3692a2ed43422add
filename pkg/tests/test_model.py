import math

import numpy as np
import pytest

from selfcompat import tensor as T
from selfcompat.errors import ConfigError, ShapeError
from selfcompat.model import ModelConfig, build_model, normalize_ratios, sliced_width
from selfcompat.tensor import Tensor


def tiny(ratios=(0.5,), seed=0, input_dim=5):
    return build_model(ModelConfig(input_dim, [8, 8], 4, 3, list(ratios), seed=seed))


def default_model():
    return build_model(ModelConfig(64, [128, 128, 128], 64, 50, [0.25, 0.5, 0.75]))


def numpy_forward(weights, biases, bn, x, eps=1e-5):
    """Plain numpy network in eval mode. ``bn`` is a list of (scale, shift, mean, var)."""
    h = x
    for (w, b), (g, s, mu, var) in zip(zip(weights[:-1], biases[:-1]), bn):
        z = h @ w.T + b
        h = np.maximum((z - mu) / np.sqrt(var + eps) * g + s, 0.0)
    return h @ weights[-1].T + biases[-1]


def _numpy_params(model, ratio):
    ws, bs, bn = [], [], []
    for lin, norm in zip(model.hidden, model.norms):
        o, i = lin.shapes_at(ratio)
        ws.append(lin.weight.data[:o, :i].copy())
        bs.append(lin.bias.data[:o].copy())
        bank = norm.banks[ratio]
        bn.append((bank.scale.data.copy(), bank.shift.data.copy(), bank.running_mean.copy(), bank.running_var.copy()))
    o, i = model.embed.shapes_at(ratio)
    ws.append(model.embed.weight.data[:o, :i].copy())
    bs.append(model.embed.bias.data[:o].copy())
    return ws, bs, bn


def _randomize_state(model, seed=7):
    rng = np.random.default_rng(seed)
    for norm in model.norms:
        for bank in norm.banks.values():
            bank.scale.data[:] = rng.uniform(0.5, 1.5, bank.scale.shape)
            bank.shift.data[:] = rng.normal(0, 0.2, bank.shift.shape)
            bank.running_mean[:] = rng.normal(0, 0.3, bank.running_mean.shape)
            bank.running_var[:] = rng.uniform(0.5, 2.0, bank.running_var.shape)
    for lin in (*model.hidden, model.embed):
        lin.bias.data[:] = rng.normal(0, 0.1, lin.bias.shape)


def test_layer_shapes_full_and_half():
    m = tiny()
    assert m.layer_shapes(1.0) == [(8, 5), (8, 8), (4, 8)]
    assert m.layer_shapes(0.5) == [(4, 5), (4, 4), (4, 4)]


def test_initialization_contract():
    m = tiny()
    for lin in (*m.hidden, m.embed):
        bound = math.sqrt(6.0 / lin.weight.shape[1])
        assert np.abs(lin.weight.data).max() <= bound
        assert np.all(lin.bias.data == 0)
    for norm in m.norms:
        for bank in norm.banks.values():
            assert np.all(bank.scale.data == 1) and np.all(bank.shift.data == 0)
            assert np.all(bank.running_mean == 0) and np.all(bank.running_var == 1)


def test_same_seed_same_weights():
    a, b = tiny(seed=3), tiny(seed=3)
    for (_, p), (_, q) in zip(a.state_arrays(), b.state_arrays()):
        assert p.tobytes() == q.tobytes()


def test_full_slice_is_the_full_tensor():
    m = tiny()
    for lin in (*m.hidden, m.embed):
        w = T.leading_slice(lin.weight, lin.shapes_at(1.0))
        assert w.shape == lin.weight.shape
        np.testing.assert_array_equal(w.data, lin.weight.data)


@pytest.mark.parametrize("ratio", [1.0, 0.5])
def test_forward_matches_numpy_oracle(ratio):
    m = tiny()
    _randomize_state(m)
    x = np.random.default_rng(1).normal(size=(6, 5))
    expected = numpy_forward(*_numpy_params(m, ratio), x)
    got = m.forward(x, ratio, train=False).data
    assert np.max(np.abs(got - expected)) <= 1e-12


def test_train_mode_uses_batch_statistics():
    m = tiny()
    x = np.random.default_rng(2).normal(size=(16, 5))
    m.forward(x, 1.0, train=True)
    lin = m.hidden[0]
    z = x @ lin.weight.data.T + lin.bias.data
    bank = m.norms[0].banks[1.0]
    np.testing.assert_allclose(bank.running_mean, 0.1 * z.mean(axis=0), atol=1e-14)
    np.testing.assert_allclose(bank.running_var, 0.9 + 0.1 * z.var(axis=0, ddof=1), atol=1e-14)
    # other banks untouched
    half = m.norms[0].banks[0.5]
    assert np.all(half.running_mean == 0) and np.all(half.running_var == 1)


def test_output_width_is_feature_dim_for_every_ratio():
    m = default_model()
    x = np.random.default_rng(0).normal(size=(3, 64))
    for r in m.all_ratios:
        assert m.forward(x, r).shape == (3, 64)


def test_unknown_ratio_lists_known_ratios():
    with pytest.raises(ConfigError, match="0.5.*1"):
        tiny().forward(np.zeros((2, 5)), 0.3)


def test_input_width_mismatch():
    with pytest.raises(ShapeError):
        tiny().forward(np.zeros((2, 6)), 1.0)


def test_width_smaller_than_ratio_count_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(5, [2, 8], 4, 3, [0.25, 0.5, 0.75])


def test_ratio_validation():
    assert normalize_ratios([0.75, 0.25, 1.0, 0.25]) == (0.25, 0.75)
    for bad in (0.0, -0.5, 1.5, float("nan")):
        with pytest.raises(ConfigError):
            normalize_ratios([bad])


def test_weight_sharing_by_mutation():
    m = tiny()
    x = np.random.default_rng(0).normal(size=(4, 5))
    before = m.forward(x, 0.5).data.copy()
    m.hidden[0].weight.data[0, 0] += 0.5
    assert not np.array_equal(before, m.forward(x, 0.5).data)


def test_slice_gradient_lands_in_full_parameter():
    m = tiny()
    x = Tensor(np.random.default_rng(0).normal(size=(4, 5)))
    T.backward(T.sum(m.forward(x, 0.5, train=True)))
    g = m.hidden[1].weight.grad
    assert np.any(g[:4, :4] != 0)
    assert np.all(g[4:, :] == 0) and np.all(g[:, 4:] == 0)


def test_bn_bank_independence_bitwise():
    m = build_model(ModelConfig(5, [8, 8], 4, 3, [0.25, 0.5]))
    x = np.random.default_rng(0).normal(size=(4, 5))
    before = m.forward(x, 0.5).data.copy()
    for norm in m.norms:
        bank = norm.banks[0.25]
        bank.scale.data += 3.0
        bank.shift.data -= 1.0
        bank.running_mean += 2.0
    assert m.forward(x, 0.5).data.tobytes() == before.tobytes()


def test_banks_share_no_storage():
    m = default_model()
    for norm in m.norms:
        arrays = []
        for bank in norm.banks.values():
            arrays += [bank.scale.data, bank.shift.data, bank.running_mean, bank.running_var]
        for i in range(len(arrays)):
            for j in range(i + 1, len(arrays)):
                assert not np.shares_memory(arrays[i], arrays[j])


def test_one_step_on_half_slice_changes_only_its_slice():
    m = tiny(ratios=(0.25, 0.5))
    _randomize_state(m)
    snapshot = {n: a.copy() for n, a in m.state_arrays()}
    x = Tensor(np.random.default_rng(4).normal(size=(4, 5)))
    m.zero_grad()
    T.backward(T.sum(T.relu(m.forward(x, 0.5, train=True, update_stats=False))))
    for _, p in m.named_parameters():
        if p.grad is not None:
            p.data -= 0.1 * p.grad
    changed = {n for n, a in m.state_arrays() if not np.array_equal(a, snapshot[n])}
    assert changed, "the step changed nothing"
    for name in changed:
        assert name.startswith(("hidden", "embed", "bn0@0.5", "bn1@0.5")), name
    for name, arr in m.state_arrays():
        if name.startswith("hidden") and name.endswith("weight"):
            diff = arr != snapshot[name]
            o, i = m.hidden[int(name[6])].shapes_at(0.5)
            assert not diff[o:, :].any() and not diff[:, i:].any()
        if name == "embed.weight":
            assert not (arr != snapshot[name])[:, 4:].any()


def _by_hand_count(input_dim, widths, feature_dim, ratio):
    count, prev, first = 0, input_dim, True
    for w in widths:
        out = sliced_width(w, ratio)
        inp = prev if first else sliced_width(prev, ratio)
        count += out * inp + out
        prev, first = w, False
    return count + feature_dim * sliced_width(prev, ratio) + feature_dim


def test_parameter_count_matches_hand_count():
    m = default_model()
    for r in m.all_ratios:
        assert m.parameter_count(r) == _by_hand_count(64, [128] * 3, 64, r)
    assert m.parameter_count(1.0) == 64 * 128 + 128 + 2 * (128 * 128 + 128) + 128 * 64 + 64


def test_dual_sliced_layers_scale_quadratically():
    m = build_model(ModelConfig(64, [64, 64, 64], 64, 10, [0.5]))
    full = sum(o * i for o, i in m.layer_shapes(1.0)[1:-1])
    half = sum(o * i for o, i in m.layer_shapes(0.5)[1:-1])
    assert half / full == 0.25


def test_bn_parameters_are_a_small_fraction():
    m = default_model()
    total = sum(p.size for _, p in m.named_parameters())
    bn = sum(p.size for n, p in m.named_parameters() if n.startswith("bn"))
    assert bn / total < 0.02
