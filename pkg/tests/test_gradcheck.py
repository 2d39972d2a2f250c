import numpy as np
import pytest

from fginet import gradcheck
from fginet.core import Tensor, finite_diff_grad
from fginet.core import functional as F


def _leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True, dtype=np.float64)


def test_five_point_stencil_is_more_accurate():
    # f = x^5: truncation is h^2 f'''/6 for three points, h^4 f^(5)/30 for five
    x = _leaf([0.7])
    exact = 5 * 0.7 ** 4
    f = lambda t: (t * t * t * t * t).sum()  # noqa: E731
    two = finite_diff_grad(f, x, 1e-3)
    four = finite_diff_grad(f, x, 1e-3, order=4)
    assert abs(two[0] - exact) == pytest.approx(1e-6 * 60 * 0.49 / 6, rel=1e-3)
    assert abs(four[0] - exact) < 1e-10


def test_stencil_order_validation():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda t: t.sum(), _leaf([1.0]), order=3)


def test_numeric_grad_falls_back_near_kink():
    # relu kink 2e-4 away: the wide stencil straddles it, the narrow does not
    x = _leaf([2e-4, 0.5])
    loss = lambda: F.relu(x).sum()  # noqa: E731
    np.testing.assert_allclose(gradcheck.numeric_grad(loss, x), [1.0, 1.0], rtol=1e-9)
    wide = finite_diff_grad(lambda _: loss(), x, gradcheck.WIDE_STEP, order=4)
    assert abs(wide[0] - 1.0) > 1e-3


def test_suite_detects_wrong_gradient():
    x = _leaf(np.linspace(0.5, 1.5, 5))
    # the detached factor hides half of d(x^2)/dx from backprop
    worst, checked = gradcheck._check(lambda: (x.detach() * x).sum(), [x],
                                      np.random.default_rng(0), None)
    assert checked == 5 and worst == pytest.approx(0.5, rel=1e-6)
    assert not gradcheck.GradResult("bad", 0, worst, checked).passed


def test_case_list_covers_every_layer_family():
    names = gradcheck.CASE_NAMES
    for prefix in ("conv2d/", "pool/", "linear", "norm/batch", "norm/layer", "act/",
                   "squeeze_excite", "mbconv/", "w_msa", "sw_msa", "spatial_attention",
                   "channel_attention", "res_cbam", "model/l1"):
        assert any(n.startswith(prefix) for n in names), prefix
    assert {"conv2d/grouped", "conv2d/pointwise"} <= set(names)
    assert any("depthwise" in n for n in names)


def test_run_suite_subset_and_report():
    seen = []
    res = gradcheck.run_suite((4,), ["conv2d/depthwise_k5_s2", "pool/max_2x2"], seen.append)
    assert [r.case for r in res] == ["conv2d/depthwise_k5_s2", "pool/max_2x2"]
    assert seen == res and all(r.passed and r.checked > 0 for r in res)


def test_run_suite_unknown_case():
    with pytest.raises(KeyError):
        gradcheck.run_suite((0,), ["conv9d"])
