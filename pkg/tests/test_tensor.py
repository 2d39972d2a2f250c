import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fginet.core import Tensor, finite_diff_grad, max_relative_error, no_grad
from fginet.core import functional as F
from fginet.core.nn import Conv2d, Dropout, Linear
from fginet.errors import ConfigError, UsageError
from fginet.model import count_params

from oracles import naive_conv2d


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# ------------------------------------------------------------------- autodiff

def test_linear_case_grad_is_x():
    x = np.array([1.5, -2.0, 3.0])
    w = t64(np.zeros(3))
    (w * Tensor(x, dtype=np.float64)).sum().backward()
    np.testing.assert_array_equal(w.grad, x)


def test_sigmoid_grad_at_zero():
    w = t64(0.0)
    F.sigmoid(w).backward()
    assert w.grad == pytest.approx(0.25, abs=1e-15)


def test_backward_accumulates_until_cleared():
    w = t64([1.0, 2.0])
    (w * w).sum().backward()
    (w * w).sum().backward()
    np.testing.assert_allclose(w.grad, 2 * 2 * np.array([1.0, 2.0]))
    w.zero_grad()
    assert w.grad is None


def test_non_scalar_loss_is_usage_error():
    w = t64([1.0, 2.0])
    with pytest.raises(UsageError):
        (w * 2).backward()


def test_detached_graph_gives_no_gradient():
    w = t64([1.0, 2.0])
    loss = (w.detach() * 3).sum()
    loss.backward()
    assert w.grad is None


def test_no_grad_builds_no_graph():
    w = t64([1.0])
    with no_grad():
        y = w * 2
    assert not y.requires_grad


def test_shared_subexpression_gradient():
    # y = a*a + a reuses the node; dy/da = 2a + 1
    a = t64([3.0])
    (a * a + a).sum().backward()
    assert a.grad[0] == pytest.approx(7.0)


def test_deep_chain_does_not_recurse():
    x = t64([1.0])
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.sum().backward()
    assert x.grad[0] == 1.0


# --------------------------------------------------------- finite differences

def test_fd_square_at_three():
    x = t64([3.0])
    g = finite_diff_grad(lambda t: (t * t).sum(), x)
    assert abs(g[0] - 6.0) < 1e-8


def test_fd_constant_is_zero():
    x = t64([1.0, 2.0])
    g = finite_diff_grad(lambda t: Tensor(np.array(4.0)), x)
    np.testing.assert_array_equal(g, 0.0)


def test_fd_l1_signs_off_kinks():
    x = t64([0.7, -1.3, 2.0])
    target = Tensor(np.array([0.0, 0.0, 3.0]), dtype=np.float64)
    g = finite_diff_grad(lambda t: F.absolute(t - target).sum(), x)
    np.testing.assert_allclose(g, [1.0, -1.0, -1.0], atol=1e-9)


def test_max_relative_error_floor():
    assert max_relative_error(np.array([1e-9]), np.array([2e-9])) < 2e-3
    assert max_relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


@pytest.mark.parametrize("fn,shapes", [
    (lambda x, w: F.conv2d(x, w, stride=2, padding=1), [(2, 3, 5, 5), (4, 3, 3, 3)]),
    (lambda x: F.pool2d(x, "max", 2), [(1, 2, 4, 4)]),
    (lambda x: F.softmax(x, 0), [(4, 3)]),
    (lambda x, g, b: F.layer_norm(x, g, b), [(3, 4), (4,), (4,)]),
    (lambda x: F.roll(F.pad(x, ((0, 0), (1, 2))), (1, -2), (0, 1)), [(3, 4)]),
    (lambda x: F.concat([x, x * 2], 1)[:, ::2], [(2, 3)]),
])
def test_analytic_matches_finite_difference(fn, shapes, rng):
    xs = [t64(rng.normal(size=s)) for s in shapes]
    w = Tensor(rng.normal(size=fn(*xs).shape), dtype=np.float64)
    (fn(*xs) * w).sum().backward()
    for x in xs:
        num = finite_diff_grad(lambda _: (fn(*xs) * w).sum(), x)
        assert max_relative_error(x.grad, num) < 1e-4


# ------------------------------------------------------------------------ conv

def test_conv_stem_output_shape():
    x = Tensor(np.zeros((1, 3, 224, 224), dtype=np.float32))
    w = Tensor(np.zeros((32, 3, 3, 3), dtype=np.float32))
    assert F.conv2d(x, w, stride=2, padding=1).shape == (1, 32, 112, 112)


def test_conv_3_to_16_param_count():
    conv = Conv2d(3, 16, 3, np.random.default_rng(0), bias=True)
    assert count_params(conv).total == 448


def test_depthwise_equals_per_channel_naive(rng):
    x = rng.normal(size=(2, 4, 8, 8))
    w = rng.normal(size=(4, 1, 3, 3))
    got = F.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), padding=1, groups=4).data
    for c in range(4):
        ref = naive_conv2d(x[:, c:c + 1], w[c:c + 1], padding=(1, 1))
        np.testing.assert_allclose(got[:, c:c + 1], ref, rtol=1e-10, atol=1e-12)


@given(st.data())
def test_conv_matches_naive_oracle(data):
    seed = data.draw(st.integers(0, 2**31 - 1))
    r = np.random.default_rng(seed)
    groups = data.draw(st.sampled_from([1, 2, 4]))
    cin = groups * data.draw(st.integers(1, 2))
    cout = groups * data.draw(st.integers(1, 2))
    k = data.draw(st.sampled_from([1, 2, 3, 5]))
    stride = data.draw(st.integers(1, 2))
    pad = data.draw(st.integers(0, k // 2))
    H = data.draw(st.integers(k, 9))
    W = data.draw(st.integers(k, 9))
    x = r.normal(size=(data.draw(st.integers(1, 2)), cin, H, W)).astype(np.float32)
    w = r.normal(size=(cout, cin // groups, k, k)).astype(np.float32)
    b = r.normal(size=cout).astype(np.float32)
    got = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, groups).data
    ref = naive_conv2d(x.astype(np.float64), w, b, (stride, stride), (pad, pad), groups)
    scale = np.abs(ref).max() + 1e-12
    assert np.abs(got - ref).max() / scale <= 1e-5


def test_conv_model_shapes_against_oracle(rng):
    # depthwise 5x5 stride 2 and the 7x7 spatial-attention conv at the largest oracle size
    for (shape, wshape, stride, pad, groups) in [((2, 8, 16, 16), (8, 1, 5, 5), 2, 2, 8),
                                                 ((2, 2, 16, 16), (1, 2, 7, 7), 1, 3, 1)]:
        x = rng.normal(size=shape)
        w = rng.normal(size=wshape)
        got = F.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                       stride=stride, padding=pad, groups=groups).data
        ref = naive_conv2d(x, w, None, (stride, stride), (pad, pad), groups)
        np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-10)


def test_conv_errors():
    x = Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32))
    with pytest.raises(ConfigError, match="groups"):
        F.conv2d(x, Tensor(np.zeros((4, 1, 3, 3), dtype=np.float32)), groups=2)
    with pytest.raises(ConfigError):
        F.conv2d(x, Tensor(np.zeros((4, 2, 3, 3), dtype=np.float32)))
    with pytest.raises(ConfigError):
        F.conv2d(x, Tensor(np.zeros((4, 3, 7, 7), dtype=np.float32)))


# --------------------------------------------------------------------- pooling

def test_global_avg_pool_example():
    x = np.stack([np.ones((2, 2)), 3 * np.ones((2, 2))])[None]
    out = F.pool2d(Tensor(x), "avg", "global").data
    assert out.shape == (1, 2, 1, 1)
    np.testing.assert_array_equal(out.ravel(), [1, 3])


def test_pool_constant_input():
    x = Tensor(np.full((2, 3, 4, 4), 2.5, dtype=np.float32))
    for window in ("global", 2):
        avg = F.pool2d(x, "avg", window).data
        mx = F.pool2d(x, "max", window).data
        np.testing.assert_array_equal(avg, mx)
        np.testing.assert_array_equal(mx, 2.5)


def test_pool_window_too_large():
    with pytest.raises(ConfigError):
        F.pool2d(Tensor(np.zeros((1, 1, 3, 3), dtype=np.float32)), "max", 4)


@given(st.integers(0, 10_000))
def test_maxpool_gradient_is_routing(seed):
    r = np.random.default_rng(seed)
    x = t64(r.normal(size=(1, 2, 4, 6)))
    F.pool2d(x, "max", 2).sum().backward()
    g = x.grad
    assert set(np.unique(g)) <= {0.0, 1.0}
    win = x.data.reshape(1, 2, 2, 2, 3, 2).transpose(0, 1, 2, 4, 3, 5).reshape(1, 2, 2, 3, 4)
    gw = g.reshape(1, 2, 2, 2, 3, 2).transpose(0, 1, 2, 4, 3, 5).reshape(1, 2, 2, 3, 4)
    np.testing.assert_array_equal(gw.argmax(-1), win.argmax(-1))
    np.testing.assert_array_equal(gw.sum(-1), 1.0)


def test_maxpool_tie_goes_to_first_index():
    x = t64(np.ones((1, 1, 2, 2)))
    F.pool2d(x, "max", "global").sum().backward()
    np.testing.assert_array_equal(x.grad.ravel(), [1, 0, 0, 0])


def test_channel_pool_examples():
    x = np.stack([np.full((2, 2), v) for v in (0.0, 1.0, 2.0)])[None]
    out = F.channel_pool(Tensor(x)).data
    np.testing.assert_array_equal(out[0, 0], 1.0)
    np.testing.assert_array_equal(out[0, 1], 2.0)
    one = np.random.default_rng(0).normal(size=(1, 1, 3, 3))
    out1 = F.channel_pool(Tensor(one, dtype=np.float64)).data
    np.testing.assert_array_equal(out1[0, 0], one[0, 0])
    np.testing.assert_array_equal(out1[0, 1], one[0, 0])


@given(st.integers(0, 10_000))
def test_channel_pool_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(1, 5, 3, 3))
    perm = r.permutation(5)
    a = F.channel_pool(Tensor(x, dtype=np.float64)).data
    b = F.channel_pool(Tensor(x[:, perm], dtype=np.float64)).data
    np.testing.assert_allclose(a, b, rtol=1e-12)


# ---------------------------------------------------------------------- linear

def test_linear_identity_and_shapes():
    x = np.random.default_rng(0).normal(size=(4, 96))
    out = F.linear(Tensor(x, dtype=np.float64), Tensor(np.eye(96), dtype=np.float64),
                   Tensor(np.zeros(96), dtype=np.float64))
    np.testing.assert_array_equal(out.data, x)
    lin = Linear(96, 32, np.random.default_rng(0))
    assert lin(Tensor(x.astype(np.float32))).shape == (4, 32)
    with pytest.raises(ConfigError):
        lin(Tensor(np.zeros((4, 95), dtype=np.float32)))


def test_head_param_count():
    r = np.random.default_rng(0)
    assert count_params(Linear(96, 32, r)).total + count_params(Linear(32, 3, r)).total == 3203


# ---------------------------------------------------------- activations/norms

def test_sigmoid_zero_and_extremes():
    out = F.sigmoid(Tensor(np.array([0.0, -1e4, 1e4], dtype=np.float32))).data
    assert out[0] == 0.5 and out[1] == 0.0 and out[2] == 1.0


@given(st.integers(1, 12), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(k, seed):
    x = np.random.default_rng(seed).normal(scale=5, size=(3, k))
    out = F.softmax(Tensor(x, dtype=np.float64), -1).data
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)
    assert (out > 0).all()


def test_softmax_constant_vector():
    out = F.softmax(Tensor(np.full(7, 3.0)), -1).data
    np.testing.assert_allclose(out, 1 / 7)


def test_batchnorm_standardized_batch_passthrough():
    # per channel the 4 values have mean 0 and (biased) variance 1
    vals = np.array([-1.0, 1.0, -1.0, 1.0])
    x = vals.reshape(4, 1, 1, 1)
    out = F.batch_norm2d(Tensor(x, dtype=np.float64), Tensor(np.ones(1), dtype=np.float64),
                         Tensor(np.zeros(1), dtype=np.float64), np.zeros(1), np.ones(1), True).data
    np.testing.assert_allclose(out.ravel(), vals / np.sqrt(1 + 1e-5), rtol=1e-12)


def test_batchnorm_eval_uses_running_stats_only():
    x = np.random.default_rng(0).normal(size=(3, 2, 2, 2))
    rm, rv = np.array([0.5, -1.0]), np.array([4.0, 0.25])
    out = F.batch_norm2d(Tensor(x, dtype=np.float64), Tensor(np.ones(2), dtype=np.float64),
                         Tensor(np.zeros(2), dtype=np.float64), rm.copy(), rv.copy(), False).data
    ref = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_layernorm_zero_variance_is_finite():
    out = F.layer_norm(Tensor(np.full((2, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    assert np.isfinite(out).all()
    np.testing.assert_array_equal(out, 0.0)


def test_norm_shape_mismatch():
    with pytest.raises(ConfigError):
        F.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


# --------------------------------------------------------------------- dropout

def test_dropout_identity_cases(rng):
    x = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
    assert F.dropout(x, 0.0, True, rng) is x or np.array_equal(F.dropout(x, 0.0, True, rng).data, x.data)
    np.testing.assert_array_equal(F.dropout(x, 0.0, False).data, x.data)
    np.testing.assert_array_equal(F.dropout(x, 0.5, False).data, x.data)


def test_dropout_expectation_monte_carlo():
    x = Tensor(np.ones(10**6, dtype=np.float32))
    out = F.dropout(x, 0.09, True, np.random.default_rng(0)).data
    assert abs(out.mean() - 1.0) < 0.01
    kept = out[out != 0]
    np.testing.assert_allclose(kept, 1 / 0.91, rtol=1e-6)


def test_dropout_bad_rate():
    x = Tensor(np.ones(3, dtype=np.float32))
    with pytest.raises(ConfigError):
        F.dropout(x, 1.0, True, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        F.dropout(x, -0.1, False)


def test_dropout_module_eval_bit_identical(rng):
    d = Dropout(0.3, rng).eval()
    x = Tensor(rng.normal(size=(5, 5)).astype(np.float32))
    np.testing.assert_array_equal(d(x).data, x.data)
