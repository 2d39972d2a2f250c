import numpy as np
import pytest
from scipy.special import expit

from fginet.blocks import (ChannelAttention, DepthwiseSeparable, MBConv, MBConvSpec, ResCBAM,
                           SpatialAttention, SqueezeExcite)
from fginet.core import Tensor
from fginet.errors import ConfigError
from fginet.model import count_params

from oracles import naive_conv2d


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def _dwsep(m, x):
    d, p = m.depthwise, m.pointwise
    h = naive_conv2d(x, d.weight.data, d.bias.data, (1, 1), (1, 1), groups=x.shape[1])
    return naive_conv2d(h, p.weight.data, p.bias.data)


def _mlp(ca, v):
    h = np.maximum(v @ ca.fc1.weight.data.T + ca.fc1.bias.data, 0)
    return h @ ca.fc2.weight.data.T + ca.fc2.bias.data


def res_cbam_oracle(m, x, residual=True):
    f1 = _dwsep(m.branch, x)
    mc = expit(_mlp(m.channel_attention, f1.mean(axis=(2, 3)))
               + _mlp(m.channel_attention, f1.max(axis=(2, 3))))[:, :, None, None]
    f2 = mc * f1
    pooled = np.concatenate([f2.mean(axis=1, keepdims=True), f2.max(axis=1, keepdims=True)], 1)
    conv = m.spatial_attention.conv
    ms = expit(naive_conv2d(pooled, conv.weight.data, conv.bias.data, (1, 1), (3, 3)))
    f3 = ms * f2
    return _dwsep(m.res_branch, x) + f3 if residual else f3


def _randomize(module, rng):
    for p in module.parameters():
        p.data[...] = rng.normal(scale=0.5, size=p.shape)
    return module


@pytest.mark.parametrize("shape", [(1, 1, 2, 2), (2, 3, 4, 4), (1, 16, 5, 3)])
@pytest.mark.parametrize("residual", [True, False])
def test_res_cbam_matches_numpy_reference(shape, residual, rng):
    m = _randomize(ResCBAM(shape[1], rng, residual=residual).to(np.float64), rng)
    x = rng.normal(size=shape)
    got = m(T(x)).data
    np.testing.assert_allclose(got, res_cbam_oracle(m, x, residual), rtol=1e-10, atol=1e-12)


def test_res_cbam_hand_computed_tiny():
    # 1x1x2x2 input, every weight set by hand: depthwise kernels pick the
    # centre tap, pointwise convs are identity, MLPs and the 7x7 conv are zero
    # so both attention maps are sigmoid(0) = 0.5 everywhere
    m = ResCBAM(1, np.random.default_rng(0)).to(np.float64)
    for p in m.parameters():
        p.data[...] = 0.0
    for ds in (m.branch, m.res_branch):
        ds.depthwise.weight.data[0, 0, 1, 1] = 1.0
        ds.pointwise.weight.data[0, 0, 0, 0] = 1.0
    m.res_branch.pointwise.bias.data[0] = 0.5
    x = np.array([[[[1.0, -2.0], [3.0, 4.0]]]])
    out = m(T(x)).data
    # F' = x, F'' = 0.5 x, F''' = 0.25 x, residual branch = x + 0.5
    np.testing.assert_allclose(out, x + 0.5 + 0.25 * x, rtol=1e-15)


def test_res_cbam_disabled_is_identity_without_params(rng):
    m = ResCBAM(96, rng, enabled=False)
    assert count_params(m).total == 0
    x = Tensor(rng.normal(size=(1, 96, 2, 2)).astype(np.float32))
    assert m(x) is x


def test_res_cbam_residual_off_drops_only_res_branch(rng):
    full = {n for n, _ in ResCBAM(96, rng).named_parameters()}
    part = {n for n, _ in ResCBAM(96, rng, residual=False).named_parameters()}
    assert part < full
    assert {n.split(".")[0] for n in full - part} == {"res_branch"}


def test_dwsep_param_count(rng):
    # depthwise 96*9 + 96, pointwise 96*96 + 96
    assert count_params(DepthwiseSeparable(96, rng)).total == 96 * 9 + 96 + 96 * 96 + 96


def test_channel_attention_hidden_floor(rng):
    assert ChannelAttention(96, rng).fc1.weight.shape == (8, 96)
    assert ChannelAttention(256, rng).fc1.weight.shape == (16, 256)


def test_spatial_attention_range_and_shape(rng):
    sa = SpatialAttention(rng)
    out = sa(Tensor(rng.normal(size=(2, 5, 6, 6)).astype(np.float32))).data
    assert out.shape == (2, 1, 6, 6)
    assert (out > 0).all() and (out < 1).all()


def test_squeeze_excite_matches_formula(rng):
    se = _randomize(SqueezeExcite(6, 2, rng).to(np.float64), rng)
    x = rng.normal(size=(2, 6, 3, 3))
    s = x.mean(axis=(2, 3))
    h = s @ se.reduce.weight.data.T + se.reduce.bias.data
    h = h * expit(h)
    gate = expit(h @ se.expand.weight.data.T + se.expand.bias.data)
    np.testing.assert_allclose(se(T(x)).data, x * gate[:, :, None, None], rtol=1e-12)


def _mbconv_params(cin, cout, e, k):
    mid = cin * e
    se = max(1, round(cin * 0.25))
    expand = 0 if e == 1 else cin * mid + 2 * mid
    return expand + mid * k * k + 2 * mid + (mid * se + se + se * mid + mid) + mid * cout + 2 * cout


@pytest.mark.parametrize("spec", [MBConvSpec(32, 16, 1, 3, 1), MBConvSpec(16, 24, 6, 3, 2),
                                  MBConvSpec(24, 40, 6, 5, 2), MBConvSpec(80, 112, 6, 5, 1)])
def test_mbconv_param_count(spec, rng):
    assert count_params(MBConv(spec, rng)).total == _mbconv_params(
        spec.in_ch, spec.out_ch, spec.expansion, spec.kernel)


def test_mbconv_shapes_and_skip(rng):
    x = Tensor(rng.normal(size=(2, 16, 8, 8)).astype(np.float32))
    assert MBConv(MBConvSpec(16, 24, 6, 3, 2), rng)(x).shape == (2, 24, 4, 4)
    assert MBConv(MBConvSpec(16, 16, 6, 5, 1), rng).spec.has_skip
    assert not MBConv(MBConvSpec(16, 16, 6, 3, 2), rng).spec.has_skip


def test_mbconv_skip_adds_input(rng):
    m = MBConv(MBConvSpec(4, 4, 6, 3, 1), rng).to(np.float64).eval()
    # zero projection weights leave only the BN bias plus the skip
    m.project_conv.weight.data[...] = 0.0
    m.project_bn.bias.data[...] = 0.25
    x = rng.normal(size=(1, 4, 5, 5))
    np.testing.assert_allclose(m(T(x)).data, x + 0.25, rtol=1e-12)


def test_mbconv_spec_validation():
    for bad in (MBConvSpec(0, 4), MBConvSpec(4, 4, kernel=4), MBConvSpec(4, 4, stride=3),
                MBConvSpec(4, 4, expansion=0), MBConvSpec(4, 4, se_ratio=0)):
        with pytest.raises(ConfigError):
            bad.validate()


def test_mbconv_rejects_wrong_channels(rng):
    with pytest.raises(ConfigError):
        MBConv(MBConvSpec(8, 8), rng)(Tensor(np.zeros((1, 4, 4, 4), dtype=np.float32)))
