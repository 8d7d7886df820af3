import numpy as np
import pytest
from numpy.testing import assert_array_equal

from msdpn import ConfigError, ShapeError
from msdpn import autodiff as ad
from msdpn.encoding import DepthImage, assemble_input
from msdpn.nn import (BasicBlock, Conv2d, CrossStageAggregation, NetworkConfig, build_msdpn, csfa_aggregate,
                      flop_count, mac_count, msdpn_forward, param_count)
from msdpn.train import loss_proj


def _inputs(config: NetworkConfig, batch: int = 1, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(batch, config.input_channels, config.height, config.width))
    if config.input_channels == 4:
        x[:, 3] = np.where(rng.random((batch, config.height, config.width)) < 0.3,
                           rng.uniform(0.5, 8.0, (batch, config.height, config.width)), 0.0)
    return x.astype(np.float32)


def _tiny(**overrides) -> NetworkConfig:
    fields = dict(stages=2, width_mult=0.125, csfa_mode="full", input_mode="proj-d", height=32, width=32)
    fields.update(overrides)
    return NetworkConfig(**fields)


def test_network_config_validation():
    with pytest.raises(ConfigError):
        _tiny(height=48)
    with pytest.raises(ConfigError):
        _tiny(width_mult=0.3)
    with pytest.raises(ConfigError):
        _tiny(csfa_mode="bogus")
    with pytest.raises(ConfigError):
        _tiny(stages=0)
    with pytest.raises(ConfigError):
        _tiny(input_mode="rgb-only", input_channels=4)
    assert _tiny(input_mode="rgb-only").input_channels == 3
    assert _tiny().widths == (8, 16, 32, 64)


def test_single_stage_has_no_aggregation_modules():
    model = build_msdpn(_tiny(stages=1))
    assert len(model.csfa) == 0
    assert not any(name.startswith("csfa") for name, _ in model.named_parameters())


def test_two_stage_full_has_six_one_by_one_convs():
    model = build_msdpn(_tiny())
    convs = [m for m in model.csfa.modules() if isinstance(m, Conv2d)]
    assert len(convs) == 6
    assert all(conv.weight.shape[2:] == (1, 1) for conv in convs)
    assert all(np.all(conv.weight.data == 0) for conv in convs)
    assert param_count(build_msdpn(_tiny(csfa_mode="connect")).csfa) == 0


def test_parameter_names_are_full_paths():
    names = [name for name, _ in build_msdpn(_tiny()).named_parameters()]
    assert "stages.0.encoder.conv1.weight" in names
    assert "stages.1.decoder.head.bias" in names
    assert "csfa.0.k4.psi.weight" in names
    assert len(names) == len(set(names))
    stats = [name for name, _ in build_msdpn(_tiny()).named_running_stats()]
    assert "stages.0.encoder.bn1.running" in stats


def test_build_is_seeded():
    a, b, c = build_msdpn(_tiny(), seed=3), build_msdpn(_tiny(), seed=3), build_msdpn(_tiny(), seed=4)
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert_array_equal(pa.data, pb.data)
    assert not np.array_equal(a.stages[0].encoder.conv1.weight.data, c.stages[0].encoder.conv1.weight.data)


def test_forward_output_shape_quarter_width():
    config = NetworkConfig(stages=2, width_mult=0.25, csfa_mode="full", input_mode="proj-d", height=64, width=64)
    model = build_msdpn(config)
    with ad.no_grad():
        result = msdpn_forward(model, _inputs(config)[0])
    assert result.depth.shape == (1, 1, 64, 64)
    assert len(result.stages) == 2


def test_basic_block_zero_weights_pass_input_through_relu():
    rng = np.random.default_rng(0)
    block = BasicBlock(4, 4, 1, rng)
    block.conv1.weight.data[...] = 0.0
    block.conv2.weight.data[...] = 0.0
    x = ad.constant(rng.normal(size=(2, 4, 5, 5)))
    assert_array_equal(block(x).data, np.maximum(x.data, 0.0))


def test_basic_block_stride_two_halves_resolution():
    block = BasicBlock(4, 8, 2, np.random.default_rng(1))
    assert block(ad.constant(np.ones((1, 4, 8, 8)))).shape == (1, 8, 4, 4)
    with pytest.raises(ConfigError):
        BasicBlock(4, 4, 3, np.random.default_rng(1))


def test_basic_block_matches_composed_reference():
    rng = np.random.default_rng(2)
    block = BasicBlock(3, 6, 2, rng)
    x = ad.constant(rng.normal(size=(2, 3, 8, 8)))

    def bn(layer, t):
        return ad.batchnorm2d(t, layer.gamma, layer.beta, layer.running, True)

    main = ad.conv2d(x, block.conv1.weight, stride=2, pad=1, floor_mode=True)
    main = bn(block.bn2, ad.conv2d(ad.relu(bn(block.bn1, main)), block.conv2.weight, pad=1))
    skip = bn(block.proj_bn, ad.conv2d(x, block.proj.weight, stride=2, floor_mode=True))
    expected = ad.relu(ad.add(main, skip))
    assert_array_equal(block(x).data, expected.data)


def test_csfa_zero_init_and_connect_identities():
    rng = np.random.default_rng(3)
    x_cur, x_prev, y_prev = (ad.constant(rng.normal(size=(1, 4, 6, 6))) for _ in range(3))
    full = CrossStageAggregation(4, "full", rng)
    assert_array_equal(full(x_cur, x_prev, y_prev).data, x_cur.data)

    zeros = ad.constant(np.zeros((1, 4, 6, 6)))
    assert_array_equal(csfa_aggregate(x_cur, zeros, zeros, "connect").data, x_cur.data)
    assert csfa_aggregate(x_cur, x_prev, y_prev, "none") is x_cur


def test_csfa_full_matches_composed_reference():
    rng = np.random.default_rng(4)
    x_cur, x_prev, y_prev = (ad.constant(0.1 * rng.normal(size=(2, 3, 4, 4))) for _ in range(3))
    module = CrossStageAggregation(3, "full", rng)
    for conv in (module.phi, module.psi):
        conv.weight.data = rng.normal(size=conv.weight.shape).astype(np.float32)
        conv.bias.data = rng.normal(size=conv.bias.shape).astype(np.float32)
    expected = ad.add(x_cur, ad.add(ad.conv2d(x_prev, module.phi.weight, module.phi.bias),
                                    ad.conv2d(y_prev, module.psi.weight, module.psi.bias)))
    assert_array_equal(module(x_cur, x_prev, y_prev).data, expected.data)


def test_csfa_errors():
    x = ad.constant(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ConfigError):
        csfa_aggregate(x, x, x, "full")
    with pytest.raises(ConfigError):
        csfa_aggregate(x, x, x, "stack")
    with pytest.raises(ShapeError):
        csfa_aggregate(x, ad.constant(np.zeros((1, 2, 2, 2))), x, "connect")


def test_single_stage_equals_plain_encoder_decoder():
    config = _tiny(stages=1)
    model = build_msdpn(config)
    x = _inputs(config, batch=2)
    plain = model.stages[0](ad.constant(x)).depth
    assert_array_equal(msdpn_forward(model, x).depth.data, plain.data)


def test_shared_stage_weights_give_identical_features():
    config = _tiny()
    model = build_msdpn(config)
    for (_, first), (_, second) in zip(model.stages[0].named_parameters(), model.stages[1].named_parameters()):
        second.data = first.data.copy()
    result = msdpn_forward(model, _inputs(config, batch=2))
    first, second = result.stages
    for k in (2, 3, 4):
        assert_array_equal(first.x[k].data, second.x[k].data)
        assert_array_equal(first.y[k].data, second.y[k].data)
    assert_array_equal(first.depth.data, second.depth.data)


def test_zero_aggregation_equals_standalone_last_stage():
    config = _tiny()
    model = build_msdpn(config, seed=5)
    x = _inputs(config, batch=2)
    standalone = model.stages[1](ad.constant(x)).depth
    assert_array_equal(msdpn_forward(model, x).depth.data, standalone.data)


def test_ref_d_with_zero_head_returns_ref_d():
    config = _tiny(input_mode="ref-d")
    model = build_msdpn(config)
    head = model.stages[-1].decoder.head
    head.weight.data[...] = 0.0
    head.bias.data[...] = 0.0
    x = _inputs(config)
    ref = DepthImage(x[0, 3])
    result = msdpn_forward(model, x, ref)
    assert_array_equal(result.depth.data[0, 0], ref.data)
    assert_array_equal(result.pre_clamp[0, 0], ref.data)


def test_ref_d_residual_identity_before_clamp():
    config = _tiny(input_mode="ref-d")
    model = build_msdpn(config, seed=1)
    x = _inputs(config, batch=2)
    ref = x[:, 3].astype(np.float32)
    result = msdpn_forward(model, x, ref)
    head = result.residual.data.astype(np.float64)[:, 0]
    covered = ref > 0
    assert np.any(covered)
    assert_array_equal((result.pre_clamp[:, 0] - ref)[covered], head[covered])
    assert np.all(result.depth.data >= 0)


def test_forward_errors():
    config = _tiny(input_mode="ref-d")
    model = build_msdpn(config)
    x = _inputs(config)
    with pytest.raises(ValueError):
        msdpn_forward(model, x)
    with pytest.raises(ShapeError):
        msdpn_forward(model, x[:, :, :16], x[0, 3])
    rgb = np.clip(x[0, :3], 0.0, 1.0)
    proj = assemble_input(rgb, DepthImage(x[0, 3]), "proj-d")
    with pytest.raises(ValueError):
        msdpn_forward(model, proj, x[0, 3])


@pytest.mark.parametrize("csfa_mode", ["none", "connect", "full"])
@pytest.mark.parametrize("size", [(32, 32), (64, 32)])
@pytest.mark.parametrize("width_mult", [0.125, 0.25])
def test_pairing_contract(csfa_mode, size, width_mult):
    config = _tiny(csfa_mode=csfa_mode, height=size[0], width=size[1], width_mult=width_mult)
    model = build_msdpn(config)
    with ad.no_grad():
        result = msdpn_forward(model, _inputs(config))
    assert result.depth.shape == (1, 1) + size
    for features in result.stages:
        for k in (2, 3, 4):
            assert features.y[k].shape == features.x[k].shape


def test_parameter_growth():
    single = param_count(build_msdpn(_tiny(stages=1)))
    stacked = param_count(build_msdpn(_tiny(csfa_mode="none")))
    full = param_count(build_msdpn(_tiny(csfa_mode="full")))
    assert single < stacked < full < 2.1 * single

    conv = Conv2d(2, 3, 1, np.random.default_rng(0), bias=True)
    assert param_count(conv) == 9


def test_half_width_has_about_a_quarter_of_conv_weights():
    def conv_weights(width_mult):
        config = NetworkConfig(stages=1, width_mult=width_mult, csfa_mode="none", input_mode="proj-d")
        model = build_msdpn(config)
        return sum(p.size for name, p in model.named_parameters() if p.data.ndim == 4)

    ratio = conv_weights(0.5) / conv_weights(0.25)
    assert 3.9 < ratio <= 4.0



@pytest.mark.parametrize("csfa_mode", ["none", "connect", "full"])
def test_mac_count_matches_executed_convolutions(monkeypatch, csfa_mode):
    executed = []
    conv2d = ad.conv2d

    def counting_conv2d(x, weight, bias=None, **kwargs):
        out = conv2d(x, weight, bias, **kwargs)
        _, ch_in, k, _ = weight.shape
        executed.append(ch_in * k * k * int(np.prod(out.shape[1:])))
        return out

    monkeypatch.setattr(ad, "conv2d", counting_conv2d)
    config = _tiny(csfa_mode=csfa_mode, width=64)
    model = build_msdpn(config).eval()
    with ad.no_grad():
        msdpn_forward(model, _inputs(config))
    assert mac_count(model) == sum(executed)
    assert flop_count(model) == 2 * sum(executed)


def test_mac_count_growth():
    single = mac_count(build_msdpn(_tiny(stages=1)))
    assert mac_count(build_msdpn(_tiny(csfa_mode="none"))) == 2 * single
    assert mac_count(build_msdpn(_tiny(csfa_mode="connect"))) == 2 * single
    assert mac_count(build_msdpn(_tiny(csfa_mode="full"))) > 2 * single
    assert mac_count(build_msdpn(_tiny(stages=1, height=64, width=64))) == 4 * single

def test_train_and_eval_modes_propagate():
    model = build_msdpn(_tiny())
    model.eval()
    assert all(not m.training for m in model.modules())
    model.train()
    assert all(m.training for m in model.modules())


def test_full_model_gradcheck():
    with ad.precision(np.float64):
        config = _tiny()
        model = build_msdpn(config, seed=0)
        rng = np.random.default_rng(0)
        for stage_aggregation in model.csfa:
            for conv in (m for m in stage_aggregation.modules() if isinstance(m, Conv2d)):
                conv.weight.data = 0.1 * rng.normal(size=conv.weight.shape)
        x = _inputs(config, batch=2)
        gt = np.where(rng.random((2, 1, 32, 32)) < 0.5, rng.uniform(1.0, 5.0, (2, 1, 32, 32)), 0.0)
        params = dict(model.named_parameters())

        def loss_fn():
            return loss_proj(msdpn_forward(model, x).depth, gt)

        for name in ["stages.0.encoder.layer2.1.conv2.weight",
                     "stages.1.encoder.conv1.weight",
                     "stages.1.encoder.bn1.gamma",
                     "stages.1.encoder.layer1.0.conv1.weight",
                     "stages.1.encoder.layer2.0.proj.weight",
                     "stages.1.encoder.layer3.1.bn2.beta",
                     "stages.1.decoder.block4.upper_conv1.weight",
                     "stages.1.decoder.block3.lower_bn.gamma",
                     "stages.1.decoder.block1.upper_conv2.weight",
                     "stages.1.decoder.head.weight",
                     "stages.1.decoder.head.bias",
                     "csfa.0.k2.phi.weight",
                     "csfa.0.k3.psi.bias"]:
            assert ad.gradcheck(loss_fn, params[name], eps=1e-6, max_samples=3) <= 1e-2, name
