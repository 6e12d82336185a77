import struct

import numpy as np
import pytest

from anchor_policy.errors import CorruptWeights, EmptyBatch, NonFiniteTensor, ShapeMismatch
from anchor_policy.nn import (
    WEIGHTS_MAGIC,
    Adam,
    AvgPool2,
    Conv1D,
    FiLM,
    GroupNorm,
    Linear,
    MaxPoolPoints,
    ReLU,
    Sequential,
    Sigmoid,
    SinusoidalTimeEmbed,
    Upsample2,
    adam_step,
    AdamState,
    bce_with_logits,
    check_finite,
    decode_weights,
    encode_weights,
    gradcheck_module,
    load_weights,
    masked_mse,
    numeric_grad,
    relative_error,
    save_weights,
    softmax_cross_entropy,
)

TOL = 1e-5


def _rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def test_linear_gradcheck() -> None:
    rng = _rng()
    layer = Linear(5, 3, rng)
    assert gradcheck_module(layer, [rng.standard_normal((4, 5))], rng) < TOL


def test_mlp_gradcheck() -> None:
    rng = _rng(1)
    net = Sequential(Linear(6, 8, rng), ReLU(), Linear(8, 4, rng), Sigmoid())
    assert gradcheck_module(net, [rng.standard_normal((5, 6))], rng) < TOL


def test_conv1d_gradcheck() -> None:
    rng = _rng(2)
    conv = Conv1D(3, 4, rng)
    assert gradcheck_module(conv, [rng.standard_normal((2, 3, 8))], rng) < TOL


def test_conv1d_is_same_length_with_zero_padding() -> None:
    rng = _rng()
    conv = Conv1D(1, 1, rng)
    conv.weight.value[...] = np.array([[[1.0, 0.0, 0.0]]])
    x = np.arange(1.0, 5.0).reshape(1, 1, 4)
    # Tap 0 reads the previous step; the first step sees the zero pad.
    assert np.allclose(conv(x)[0, 0], [0.0, 1.0, 2.0, 3.0])


def test_groupnorm_gradcheck() -> None:
    rng = _rng(3)
    gn = GroupNorm(2, 4)
    gn.weight.value = rng.uniform(0.5, 1.5, 4)
    gn.bias.value = rng.standard_normal(4)
    assert gradcheck_module(gn, [rng.standard_normal((3, 4, 6))], rng) < TOL


def test_groupnorm_normalizes_each_group() -> None:
    gn = GroupNorm(2, 4)
    y = gn(_rng(4).standard_normal((2, 4, 5)) * 3.0 + 7.0)
    groups = y.reshape(2, 2, -1)
    assert np.allclose(groups.mean(axis=2), 0.0, atol=1e-9)
    assert np.allclose(groups.std(axis=2), 1.0, atol=1e-4)


def test_film_starts_as_identity() -> None:
    film = FiLM(4, 6)
    h = _rng(5).standard_normal((2, 4, 3))
    assert np.array_equal(film(h, _rng(6).standard_normal((2, 6))), h)


def test_film_gradcheck_with_random_projection() -> None:
    rng = _rng(7)
    film = FiLM(4, 6)
    film.weight.value = 0.3 * rng.standard_normal(film.weight.value.shape)
    film.bias.value = 0.3 * rng.standard_normal(film.bias.value.shape)
    inputs = [rng.standard_normal((2, 4, 3)), rng.standard_normal((2, 6))]
    assert gradcheck_module(film, inputs, rng) < TOL


def test_film_rejects_bad_condition() -> None:
    film = FiLM(4, 6)
    with pytest.raises(ShapeMismatch):
        film(np.zeros((2, 4, 3)), np.zeros((2, 5)))


@pytest.mark.parametrize("layer", [MaxPoolPoints(), AvgPool2(), Upsample2()])
def test_pooling_gradcheck(layer) -> None:
    rng = _rng(8)
    assert gradcheck_module(layer, [rng.standard_normal((2, 6, 4))], rng) < TOL


def test_time_embedding_is_bounded_and_distinct() -> None:
    emb = SinusoidalTimeEmbed(16)(np.array([1, 2, 50]))
    assert emb.shape == (3, 16)
    assert np.all(np.abs(emb) <= 1.0)
    assert not np.allclose(emb[0], emb[1])
    with pytest.raises(ValueError):
        SinusoidalTimeEmbed(15)


def test_losses_match_numeric_gradients() -> None:
    rng = _rng(9)
    logits = rng.standard_normal((5, 4))
    targets = np.array([0, 3, 1, 1, 2])
    _, g = softmax_cross_entropy(logits, targets)
    num = numeric_grad(lambda: softmax_cross_entropy(logits, targets)[0], logits, 1e-6)
    assert relative_error(g, num) < TOL

    z = rng.standard_normal(7)
    y = rng.integers(0, 2, 7).astype(np.float64)
    _, g = bce_with_logits(z, y)
    num = numeric_grad(lambda: bce_with_logits(z, y)[0], z, 1e-6)
    assert relative_error(g, num) < TOL

    pred = rng.standard_normal((2, 3, 4))
    target = rng.standard_normal((2, 3, 4))
    mask = np.zeros((3, 4))
    mask[0, :2] = 1.0
    loss, g = masked_mse(pred, target, mask)
    assert loss == pytest.approx(np.mean((pred[:, 0, :2] - target[:, 0, :2]) ** 2))
    assert np.all(g[:, 1:, :] == 0.0)
    num = numeric_grad(lambda: masked_mse(pred, target, mask)[0], pred, 1e-6)
    assert relative_error(g, num) < TOL


def test_losses_reject_empty_batches() -> None:
    with pytest.raises(EmptyBatch):
        softmax_cross_entropy(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    with pytest.raises(EmptyBatch):
        masked_mse(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)))


def test_first_adam_step_moves_by_lr_along_the_gradient_sign() -> None:
    state = AdamState(lr=0.1)
    (p,) = adam_step([np.array([1.0, 1.0])], [np.array([2.0, -0.5])], state)
    assert np.allclose(p, [0.9, 1.1], atol=1e-6)
    assert state.t[0] == 1


def test_adam_minimizes_a_parabola() -> None:
    state = AdamState(lr=0.05)
    x = np.array([1.0])
    for _ in range(500):
        (x,) = adam_step([x], [2.0 * x], state)
    assert abs(float(x[0])) < 1e-2


def test_max_pool_ignores_point_order() -> None:
    x = _rng(12).standard_normal((3, 50, 7))
    perm = _rng(13).permutation(50)
    pool = MaxPoolPoints()
    assert np.array_equal(pool(x), pool(x[:, perm, :]))


def test_adam_leaves_untouched_parameters_alone() -> None:
    rng = _rng(10)
    a, b = Linear(3, 2, rng), Linear(3, 2, rng)
    opt = Adam(a.parameters() + b.parameters(), lr=0.01)
    before = b.state_dict()

    opt.zero_grad()
    a(rng.standard_normal((4, 3)))
    a.backward(np.ones((4, 2)))
    opt.step()

    after = b.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert set(opt.state.t) == {0, 1}

    restored = Adam(a.parameters() + b.parameters(), lr=0.01)
    restored.load_state_arrays(opt.state_arrays())
    assert restored.state.t == opt.state.t


def test_check_finite_flags_nan() -> None:
    layer = Linear(2, 2, _rng())
    x = np.array([[np.nan, 0.0]])
    layer(x)
    with check_finite():
        with pytest.raises(NonFiniteTensor):
            layer(x)


def test_weight_file_round_trip(tmp_path) -> None:
    rng = _rng(11)
    net = Sequential(Linear(4, 3, rng), ReLU(), Linear(3, 1, rng))
    path = tmp_path / "net.adpw"
    save_weights(net, path)
    loaded = load_weights(path)
    assert list(loaded) == list(net.state_dict())
    for name, value in net.state_dict().items():
        assert np.array_equal(loaded[name], value.astype(np.float32).astype(np.float64))

    other = Sequential(Linear(4, 3, _rng(12)), ReLU(), Linear(3, 1, _rng(12)))
    other.load_state_dict(loaded)
    assert np.allclose(other(np.ones((1, 4))), net(np.ones((1, 4))), atol=1e-5)


def test_weight_file_corruption_is_detected() -> None:
    data = encode_weights({"w": np.ones((2, 3)), "scalar": np.array(1.5)})
    assert data[:4] == WEIGHTS_MAGIC
    assert decode_weights(data)["scalar"].shape == ()

    for cut in (2, 10, len(data) - 1):
        with pytest.raises(CorruptWeights):
            decode_weights(data[:cut])
    with pytest.raises(CorruptWeights):
        decode_weights(b"XXXX" + data[4:])
    with pytest.raises(CorruptWeights):
        decode_weights(data[:4] + struct.pack("<I", 99) + data[8:])
    with pytest.raises(CorruptWeights):
        decode_weights(data + b"\x00")


def test_load_state_dict_checks_names_and_shapes() -> None:
    layer = Linear(2, 2, _rng())
    state = layer.state_dict()
    with pytest.raises(CorruptWeights):
        layer.load_state_dict({"weight": state["weight"]})
    with pytest.raises(CorruptWeights):
        layer.load_state_dict({"weight": np.zeros((3, 2)), "bias": state["bias"]})
