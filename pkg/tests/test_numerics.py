import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from gradcases import CASES, run_case
from stylepad.numerics import (
    Adam,
    AdamState,
    BatchNorm1d,
    Conv1d,
    ContainerFormatError,
    Linear,
    NonFiniteError,
    RngStream,
    ShapeError,
    Tensor,
    adam_step,
    check_finite,
    load_tensors,
    no_grad,
    parameter,
    reverse_gradient,
    save_tensors,
    step_decay,
    zero_grads,
)
from stylepad.numerics import functional as F
from stylepad.numerics.rng import _id_words
from stylepad.numerics import tensor as T


# --- conv1d -----------------------------------------------------------------


def test_conv1d_zero_input_gives_bias():
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(3, 2, 5)))
    b = Tensor([0.5, -1.0, 2.0])
    out = F.conv1d(Tensor(np.zeros((2, 2, 11))), w, b, padding=2)
    assert out.shape == (2, 3, 11)
    np.testing.assert_array_equal(out.data, np.broadcast_to(b.data[None, :, None], out.shape))


def test_conv1d_identity_kernel():
    x = np.random.default_rng(1).normal(size=(2, 4, 7))
    w = Tensor(np.eye(4)[:, :, None])
    np.testing.assert_array_equal(F.conv1d(Tensor(x), w).data, x)


def test_conv1d_weight_gradient_matches_finite_differences():
    rng = RngStream("conv-fd", 0)
    x = Tensor(rng.normal(size=(2, 3, 8)))
    w = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
    from stylepad.numerics.gradcheck import check_gradients

    assert check_gradients(lambda: F.conv1d(x, w).sum(), [w]) < 1e-4


def _naive_conv(x, w, b, stride, pad):
    B, cin, L = x.shape
    cout, _, k = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    lout = (L + 2 * pad - k) // stride + 1
    out = np.zeros((B, cout, lout))
    for n, o, i in itertools.product(range(B), range(cout), range(lout)):
        out[n, o, i] = np.sum(xp[n, :, i * stride : i * stride + k] * w[o]) + b[o]
    return out


def test_conv1d_length_formula_exhaustive_grid():
    rng = np.random.default_rng(2)
    for L, k, stride, pad in itertools.product(range(1, 9), range(1, 6), range(1, 4), range(0, 3)):
        if k > L + 2 * pad:
            with pytest.raises(ShapeError):
                F.conv1d(Tensor(np.zeros((1, 1, L))), Tensor(np.zeros((1, 1, k))), padding=pad, stride=stride)
            continue
        x, w, b = rng.normal(size=(1, 2, L)), rng.normal(size=(3, 2, k)), rng.normal(size=3)
        out = F.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
        assert out.shape[2] == (L + 2 * pad - k) // stride + 1
        np.testing.assert_allclose(out.data, _naive_conv(x, w, b, stride, pad), atol=1e-12)


def test_conv1d_shape_errors_name_axes():
    with pytest.raises(ShapeError, match="axis 1"):
        F.conv1d(Tensor(np.zeros((1, 3, 8))), Tensor(np.zeros((2, 4, 3))))
    with pytest.raises(ShapeError):
        F.conv1d(Tensor(np.zeros((3, 8))), Tensor(np.zeros((2, 3, 3))))
    with pytest.raises(ShapeError):
        F.conv1d(Tensor(np.zeros((1, 3, 8))), Tensor(np.zeros((2, 3, 3))), stride=0)


def test_conv_transpose_is_adjoint_of_conv():
    # <conv(x), y> == <x, conv_t(y)> for shared weights
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(2, 3, 9)), rng.normal(size=(2, 4, 5))
    w = rng.normal(size=(4, 3, 3))
    lhs = np.sum(F.conv1d(Tensor(x), Tensor(w), stride=2, padding=1).data * y)
    back = F.conv_transpose1d(Tensor(y), Tensor(w), stride=2, padding=1).data
    assert back.shape == x.shape
    assert lhs == pytest.approx(np.sum(x * back), rel=1e-12)


# --- reverse_gradient ---------------------------------------------------------


def test_grad_of_sum_is_ones():
    p = parameter(np.arange(6.0).reshape(2, 3))
    reverse_gradient(p.sum())
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))


def test_grad_of_square_sum():
    p = parameter(np.array([1.0, -2.0, 3.5]))
    reverse_gradient((p * p).sum())
    np.testing.assert_array_equal(p.grad, 2 * p.data)


def test_gradients_accumulate_until_zeroed():
    p = parameter(np.ones(3))
    reverse_gradient(p.sum())
    reverse_gradient(p.sum())
    np.testing.assert_array_equal(p.grad, 2 * np.ones(3))
    zero_grads([p])
    np.testing.assert_array_equal(p.grad, np.zeros(3))


def test_non_scalar_loss_rejected():
    with pytest.raises(ShapeError):
        reverse_gradient(parameter(np.ones(3)) * 2.0)


def test_disconnected_parameter_gets_zero_grad():
    a, b = parameter(np.ones(2)), parameter(np.ones(2))
    reverse_gradient(a.sum(), [a, b])
    np.testing.assert_array_equal(b.grad, 0.0)


def test_two_layer_network_gradcheck():
    from stylepad.numerics.gradcheck import check_gradients

    rng = RngStream("mlp", 1)
    l1, l2 = Linear(5, 7, rng), Linear(7, 3, rng)
    x = Tensor(rng.normal(size=(4, 5)))
    y = rng.integers(0, 3, size=4)
    loss = lambda: F.softmax_cross_entropy(l2(T.tanh(l1(x))), y)
    assert check_gradients(loss, l1.parameters() + l2.parameters()) < 1e-4


def test_shared_subexpression_gradients_sum():
    # x used twice: d/dx (x*x + 3x) = 2x + 3
    x = parameter(np.array([0.5, -1.5]))
    reverse_gradient((x * x + x * 3.0).sum())
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_no_grad_records_nothing():
    p = parameter(np.ones(2))
    with no_grad():
        y = (p * 2.0).sum()
    assert not y.requires_grad


@pytest.mark.parametrize("name,build", CASES, ids=[c[0] for c in CASES])
def test_gradcheck_case(name, build):
    assert run_case(build) < 1e-4


# --- Adam -----------------------------------------------------------------------


def test_adam_zero_grad_leaves_params():
    p = parameter(np.array([1.0, 2.0]))
    p.grad[:] = 0.0
    adam_step({"p": p}, AdamState(lr=0.1))
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_first_step_hand_computed():
    p = parameter(np.array([0.0]))
    p.grad[:] = 1.0
    st_ = AdamState(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    adam_step({"p": p}, st_)
    # m_hat = 1, v_hat = 1 -> update = -lr / (1 + eps)
    assert p.data[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    assert st_.step == 1


def test_adam_second_step_hand_computed():
    p = parameter(np.array([0.0]))
    st_ = AdamState(lr=0.01)
    for g in (1.0, -2.0):
        p.grad[:] = g
        adam_step({"p": p}, st_)
    m = 0.9 * 0.1 * 1.0 + 0.1 * -2.0
    v = 0.999 * 0.001 * 1.0 + 0.001 * 4.0
    step2 = 0.01 * (m / (1 - 0.9**2)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert p.data[0] == pytest.approx(-0.01 / (1 + 1e-8) - step2, rel=1e-12)


def test_adam_symmetric_params_update_identically():
    a, b = parameter(np.array([1.0, 2.0])), parameter(np.array([1.0, 2.0]))
    a.grad[:] = b.grad[:] = [0.3, -0.7]
    adam_step({"a": a, "b": b}, AdamState(lr=0.05))
    np.testing.assert_array_equal(a.data, b.data)


def test_adam_missing_grad_names_parameter():
    t = Tensor(np.ones(2))
    with pytest.raises(ValueError, match="frozen"):
        adam_step({"frozen": t}, AdamState())


def test_adam_wrapper_minimizes_quadratic():
    p = parameter(np.array([3.0, -2.0]))
    opt = Adam({"p": p}, lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        reverse_gradient((p * p).sum())
        opt.step()
    assert np.all(np.abs(p.data) < 1e-2)


def test_step_decay():
    assert step_decay(1e-3, 0, 10) == 1e-3
    assert step_decay(1e-3, 10, 10) == pytest.approx(5e-4)
    assert step_decay(1e-3, 25, 10, gamma=0.1) == pytest.approx(1e-5)


# --- timestep embedding ---------------------------------------------------------


def test_embedding_t0_alternates():
    np.testing.assert_array_equal(F.sinusoidal_timestep_embedding(0, 6).data, [0, 1, 0, 1, 0, 1])


def test_embedding_t5_dim4():
    f = 10000.0 ** -0.5
    expect = [math.sin(5), math.cos(5), math.sin(5 * f), math.cos(5 * f)]
    np.testing.assert_allclose(F.sinusoidal_timestep_embedding(5, 4).data, expect, atol=1e-15)


@given(st.integers(0, 10_000), st.sampled_from([2, 4, 8, 64, 256]))
@settings(max_examples=50, deadline=None)
def test_embedding_range(t, dim):
    e = F.sinusoidal_timestep_embedding(t, dim).data
    assert e.shape == (dim,) and np.all(np.abs(e) <= 1.0)


def test_embedding_odd_dim_rejected():
    with pytest.raises(ValueError):
        F.sinusoidal_timestep_embedding(3, 5)


def test_embedding_batch_matches_scalar():
    batch = F.sinusoidal_timestep_embedding(np.array([1, 7, 50]), 8).data
    for row, t in zip(batch, (1, 7, 50)):
        np.testing.assert_array_equal(row, F.sinusoidal_timestep_embedding(t, 8).data)


# --- cross entropy --------------------------------------------------------------


def test_ce_uniform_is_log_m():
    assert F.softmax_cross_entropy(Tensor(np.zeros((3, 7))), [0, 3, 6]).item() == pytest.approx(math.log(7), abs=1e-15)


def test_ce_reference_value():
    assert F.softmax_cross_entropy(Tensor([[1.0, 2.0, 3.0]]), [2]).item() == pytest.approx(0.40760596, abs=1e-8)


def test_ce_confident_limit():
    assert F.softmax_cross_entropy(Tensor([[0.0, 1e3, 0.0]]), [1]).item() < 1e-300 + 1e-12


def test_ce_label_out_of_range_names_index():
    with pytest.raises(IndexError, match="index 1"):
        F.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


@given(st.lists(st.floats(-50, 50), min_size=6, max_size=6), st.floats(-1e3, 1e3), st.integers(0, 2))
@settings(max_examples=100, deadline=None)
def test_ce_shift_invariance(vals, shift, label):
    z = np.array(vals).reshape(2, 3)
    a = F.softmax_cross_entropy(Tensor(z), [label, 0]).item()
    b = F.softmax_cross_entropy(Tensor(z + shift), [label, 0]).item()
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


def test_softmax_rows_sum_to_one():
    z = np.random.default_rng(4).normal(scale=30, size=(5, 9))
    np.testing.assert_allclose(F.softmax(Tensor(z)).data.sum(axis=1), 1.0, atol=1e-12)


# --- RNG --------------------------------------------------------------------------


def test_rng_reproducible():
    a, b = RngStream("x", 7), RngStream("x", 7)
    np.testing.assert_array_equal(a.normal(size=100), b.normal(size=100))
    np.testing.assert_array_equal(a.integers(0, 10, size=50), b.integers(0, 10, size=50))


def test_rng_distinct_ids_and_seeds_differ():
    assert not np.array_equal(RngStream("x", 7).random(20), RngStream("y", 7).random(20))
    assert not np.array_equal(RngStream("x", 7).random(20), RngStream("x", 8).random(20))


def test_rng_pinned_first_draw():
    # guards cross-platform stability: the sha256-keyed SeedSequence fixes this value
    a = RngStream("pinned", 0).random()
    b = np.random.Generator(np.random.PCG64(np.random.SeedSequence(0, spawn_key=_id_words("pinned")))).random()
    assert a == b


def test_rng_streams_chi_square_independent():
    # joint 10x10 histogram of paired draws from two streams is uniform
    n = 20_000
    a = (RngStream("chi/a", 3).random(n) * 10).astype(int)
    b = (RngStream("chi/b", 3).random(n) * 10).astype(int)
    table = np.zeros((10, 10))
    np.add.at(table, (a, b), 1)
    chi2 = ((table - n / 100) ** 2 / (n / 100)).sum()
    assert stats.chi2.sf(chi2, 99) > 1e-3
    marg = np.bincount(a, minlength=10)
    assert stats.chisquare(marg).pvalue > 1e-3


def test_rng_child_is_independent_of_parent_state():
    p = RngStream("root", 1)
    c1 = p.child("k").random(5)
    p.random(100)
    np.testing.assert_array_equal(c1, p.child("k").random(5))


# --- layers / modules --------------------------------------------------------------


def test_parameter_order_stable():
    names = [list(Linear(3, 4, RngStream("l", s)).named_parameters()) for s in (0, 1)]
    assert names[0] == names[1] == ["weight", "bias"]


def test_state_dict_round_trip():
    rng = RngStream("sd", 0)
    a, b = Conv1d(2, 3, 3, rng), Conv1d(2, 3, 3, rng)
    b.load_state_dict(a.state_dict())
    np.testing.assert_array_equal(a.weight.data, b.weight.data)


def test_batchnorm_eval_uses_running_stats():
    bn = BatchNorm1d(2)
    x = Tensor(np.random.default_rng(5).normal(3.0, 2.0, size=(64, 2, 8)))
    for _ in range(200):
        bn(x)
    bn.eval()
    y = bn(x).data
    assert abs(y.mean()) < 0.05 and abs(y.std() - 1) < 0.05


def test_check_finite():
    check_finite(Tensor([1.0, 2.0]))
    with pytest.raises(NonFiniteError, match="1 non-finite"):
        check_finite(np.array([1.0, np.nan]), "x")


# --- container ------------------------------------------------------------------------


def test_container_round_trip(tmp_path):
    tensors = {"w": np.random.default_rng(0).normal(size=(2, 3, 4)), "i": np.arange(5), "s": np.float64(2.5)}
    save_tensors(tmp_path / "c.bin", tensors, {"kind": "test"})
    back, meta = load_tensors(tmp_path / "c.bin")
    assert list(back) == ["w", "i", "s"] and meta == {"kind": "test"}
    np.testing.assert_array_equal(back["w"], tensors["w"])
    assert back["i"].dtype == np.int64


def test_container_header_bytes(tmp_path):
    save_tensors(tmp_path / "c.bin", {"a": np.zeros(2)})
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:4] == b"DI2S" and int.from_bytes(raw[4:8], "little") == 1


def test_container_rejects_bad_magic_and_version(tmp_path):
    p = tmp_path / "c.bin"
    save_tensors(p, {"a": np.zeros(2)})
    raw = bytearray(p.read_bytes())
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ContainerFormatError):
        load_tensors(p)
    raw[4:8] = (99).to_bytes(4, "little")
    p.write_bytes(bytes(raw))
    with pytest.raises(ContainerFormatError, match="version"):
        load_tensors(p)
