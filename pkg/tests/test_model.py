import dataclasses

import numpy as np
import pytest

from fginet import config_io
from fginet.core import Tensor
from fginet.errors import ConfigError, DataError, FormatError, NumericError, UsageError
from fginet.model import (ModelConfig, apply_ablation, build, count_flops, count_params,
                          load_checkpoint, pick_window, reference_config, save_checkpoint)


@pytest.fixture(scope="module")
def net64():
    return build(reference_config(64), 0)


@pytest.fixture(scope="module")
def net224():
    return build(reference_config(224), 0)


def test_reference_taps_at_224(net224):
    taps = {}
    x = np.random.default_rng(0).normal(size=(2, 3, 224, 224)).astype(np.float32)
    out = net224.eval()(Tensor(x), taps)
    assert taps["stem"].shape == (2, 32, 112, 112)
    assert taps["stage1"].shape == (2, 24, 56, 56)
    assert taps["stage2"].shape == (2, 40, 28, 28)
    assert taps["stage3"].shape == (2, 112, 14, 14)
    assert taps["reduce"].shape == (2, 96, 7, 7)
    assert out.shape == (2, 3)
    head = net224.head
    assert [n for n, _ in head.named_children()] == ["fc1", "fc2"]
    assert head.fc1.weight.shape == (32, 96) and head.fc2.weight.shape == (3, 32)


def test_reference_windows():
    cfg = reference_config(224)
    assert [s.attn.window for s in cfg.stages] == [7, 7, 7]
    assert cfg.final_attn.window == 7
    assert pick_window(56, 56) == 7 and pick_window(16, 16) == 4 and pick_window(2, 2) == 2


def test_budget_at_224(net224):
    params = count_params(net224)
    flops = count_flops(net224)
    assert 1.21e6 <= params.total <= 1.81e6
    assert 0.285e9 <= flops.total <= 0.475e9


def test_per_layer_hand_counts(net224):
    params = count_params(net224).table
    macs = count_flops(net224).table
    assert params["stem"] == 3 * 3 * 3 * 32
    assert macs["stem"] == 32 * 112 * 112 * 3 * 9 == 10_838_016
    assert params["head"] == 96 * 32 + 32 + 32 * 3 + 3 == 3203
    assert macs["head.fc1"] == 96 * 32 == 3072
    assert params["reduce"] == 112 * 96 * 4 + 96 + 2 * 96


def test_param_counter_is_additive(net64):
    rep = count_params(net64)
    top = [v for k, v in rep.table.items() if k and "." not in k]
    assert sum(top) == rep.total
    assert rep.total == sum(p.size for p in net64.parameters())


def test_flop_counter_is_additive(net64):
    rep = count_flops(net64)
    top = [v for k, v in rep.table.items() if k and "." not in k]
    assert sum(top) == rep.total


def test_count_flops_leaves_state_untouched(net64):
    before = [b.copy() for _, b in net64.named_buffers()]
    net64.train()
    count_flops(net64)
    assert net64.training
    for (_, b), old in zip(net64.named_buffers(), before):
        np.testing.assert_array_equal(b, old)


@pytest.mark.parametrize("size", [32, 64, 96, 100])
@pytest.mark.parametrize("batch", [1, 3])
def test_forward_shape_contract(size, batch):
    net = build(reference_config(size), 1).eval()
    x = np.random.default_rng(0).uniform(-3, 3, size=(batch, 3, size, size)).astype(np.float32)
    out = net(Tensor(x)).data
    assert out.shape == (batch, 3) and np.isfinite(out).all()


def test_eval_forward_is_deterministic(net64):
    x = Tensor(np.random.default_rng(2).normal(size=(2, 3, 64, 64)).astype(np.float32))
    net64.eval()
    np.testing.assert_array_equal(net64(x).data, net64(x).data)


def test_zero_dropout_train_mode_equals_eval(net64):
    # dropout is the only train/eval switch tested here: batch norm stays in
    # eval mode while every stage dropout runs in training mode at p = 0
    x = Tensor(np.random.default_rng(3).normal(size=(2, 3, 64, 64)).astype(np.float32))
    net64.eval()
    net64.set_dropout_rates((0.0, 0.0, 0.0))
    ref = net64(x).data
    for st in net64.stages():
        st.dropout.train()
    try:
        np.testing.assert_array_equal(net64(x).data, ref)
        net64.set_dropout_rates((0.5, 0.5, 0.5))
        assert not np.array_equal(net64(x).data, ref)
    finally:
        net64.set_dropout_rates((0.0, 0.0, 0.0))
        net64.eval()


def test_non_finite_is_attributed():
    net = build(reference_config(32), 0)
    net.stem.weight.data[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError, match="stem"):
        net(Tensor(np.ones((1, 3, 32, 32), dtype=np.float32)))


def test_bad_input_shape(net64):
    with pytest.raises(ConfigError):
        net64(Tensor(np.zeros((1, 1, 64, 64), dtype=np.float32)))


def test_config_validation():
    cfg = reference_config(64)
    with pytest.raises(ConfigError):
        dataclasses.replace(cfg, input_size=(16, 16)).validate()
    with pytest.raises(ConfigError):
        dataclasses.replace(cfg, dropout_rates=(0.1, 0.1)).validate()
    with pytest.raises(ConfigError):
        dataclasses.replace(cfg, stem_channels=24).validate()


def test_config_flat_roundtrip():
    cfg = reference_config(96, dropout_rates=(0.09, 0.06, 0.03))
    text = config_io.dumps(cfg.to_flat())
    assert ModelConfig.from_flat(config_io.loads(text)) == cfg
    over = ModelConfig.from_flat({"model.head_hidden": 16}, cfg)
    assert over.head_hidden == 16 and over.stages == cfg.stages


def test_config_loads_errors():
    with pytest.raises(ConfigError):
        config_io.loads("model.head_hidden 32\n")
    with pytest.raises(ConfigError):
        config_io.loads("model.head_hidden = [1,\n")


# ------------------------------------------------------------------ ablations

def test_ablation_configs():
    base = reference_config(64)
    assert apply_ablation(base, "residual").residual_off
    assert apply_ablation(base, "res_cbam").res_cbam_off
    assert not base.residual_off and not base.res_cbam_off
    with pytest.raises(UsageError):
        apply_ablation(base, "stage2")


def test_ablation_parameter_differencing(net64):
    base_names = dict(net64.named_parameters())
    table = count_params(net64).table
    res = build(apply_ablation(net64.config, "residual"), 0)
    cbam = build(apply_ablation(net64.config, "res_cbam"), 0)
    res_names = {n for n, _ in res.named_parameters()}
    cbam_names = {n for n, _ in cbam.named_parameters()}
    assert res_names <= set(base_names) and cbam_names <= set(base_names)
    assert {n for n in base_names if n not in res_names} == {
        n for n in base_names if n.startswith("res_cbam.res_branch.")}
    assert {n for n in base_names if n not in cbam_names} == {
        n for n in base_names if n.startswith("res_cbam.")}
    assert count_params(res).total == count_params(net64).total - table["res_cbam.res_branch"]
    assert count_params(cbam).total == count_params(net64).total - table["res_cbam"]


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip_bit_exact(tmp_path, net64):
    net64.eval()
    path = tmp_path / "m.fgi"
    save_checkpoint(net64, path)
    other = load_checkpoint(path).eval()
    assert other.config == net64.config
    for (n1, a), (n2, b) in zip(net64.state_dict().items(), other.state_dict().items()):
        assert n1 == n2
        np.testing.assert_array_equal(a, b)
    x = Tensor(np.random.default_rng(4).normal(size=(2, 3, 64, 64)).astype(np.float32))
    np.testing.assert_array_equal(net64(x).data, other(x).data)


def test_checkpoint_size_is_four_bytes_per_value(tmp_path, net224):
    path = tmp_path / "m.fgi"
    save_checkpoint(net224, path)
    values = sum(a.size for a in net224.state_dict().values())
    size = path.stat().st_size
    assert 4 * values < size < 4 * values + 64_000
    assert 5e6 < size < 7e6


def test_truncated_checkpoint_is_format_error(tmp_path, net64):
    path = tmp_path / "m.fgi"
    save_checkpoint(net64, path)
    data = path.read_bytes()
    for cut in (4, 20, len(data) // 2, len(data) - 1):
        (tmp_path / "cut.fgi").write_bytes(data[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "cut.fgi")
    (tmp_path / "long.fgi").write_bytes(data + b"\0")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "long.fgi")
    (tmp_path / "magic.fgi").write_bytes(b"X" + data[1:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "magic.fgi")


def test_missing_checkpoint_is_io_error(tmp_path):
    with pytest.raises(DataError) as exc:
        load_checkpoint(tmp_path / "nope.fgi")
    assert isinstance(exc.value, OSError)


def test_checkpoint_config_mismatch(tmp_path, net64):
    path = tmp_path / "m.fgi"
    save_checkpoint(net64, path)
    data = path.read_bytes()
    # rewrite the embedded head width so the stored tensors no longer fit
    patched = data.replace(b"model.head_hidden = 32", b"model.head_hidden = 31")
    assert patched != data
    (tmp_path / "p.fgi").write_bytes(patched)
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "p.fgi")
