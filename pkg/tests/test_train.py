import numpy as np
import pytest
from numpy.testing import assert_array_equal

from msdpn import ConfigError, FormatError, ShapeError
from msdpn import autodiff as ad
from msdpn.autodiff import Parameter
from msdpn.datagen import generate_dataset
from msdpn.metrics import evaluate
from msdpn.nn import NetworkConfig, build_msdpn, msdpn_forward
from msdpn.train import (CHECKPOINT_MAGIC, OptimState, TrainConfig, adam_step, load_checkpoint, loss_proj, loss_ref,
                         lr_schedule, prepare_example, prepare_examples, save_checkpoint, train)


def _image(values):
    return np.asarray(values, dtype=float)[None, None]


def test_loss_proj_example():
    pred = ad.constant(_image([[1.0, 2.0], [3.0, 4.0]]))
    gt = _image([[1.0, 0.0], [5.0, 4.0]])
    assert loss_proj(pred, gt).item() == pytest.approx(2.0 / 3.0)


def test_loss_ref_example():
    pred_res = ad.constant(np.zeros((1, 1, 2, 2)))
    ref = _image([[1.0, 1.0], [1.0, 1.0]])
    gt = _image([[2.0, 0.0], [1.0, 3.0]])
    assert loss_ref(pred_res, ref, gt).item() == pytest.approx(1.0)


def test_loss_oracle():
    rng = np.random.default_rng(0)
    pred = rng.uniform(0.0, 5.0, (2, 1, 6, 6))
    gt = np.where(rng.random((2, 1, 6, 6)) < 0.6, rng.uniform(0.5, 5.0, (2, 1, 6, 6)), 0.0)
    valid = gt > 0
    expected = np.abs(gt - pred.astype(np.float32))[valid].mean()
    assert loss_proj(ad.constant(pred), gt).item() == pytest.approx(expected, rel=1e-6)


def test_loss_gradient_vanishes_where_gt_is_missing():
    rng = np.random.default_rng(1)
    pred = Parameter(rng.uniform(0.0, 5.0, (1, 1, 8, 8)), name="pred")
    gt = np.where(rng.random((1, 1, 8, 8)) < 0.5, rng.uniform(0.5, 5.0, (1, 1, 8, 8)), 0.0)
    ad.backward(loss_proj(pred, gt))
    assert np.all(pred.grad[gt == 0] == 0)
    assert np.any(pred.grad[gt > 0] != 0)


def test_loss_ref_equals_loss_proj_on_summed_prediction():
    rng = np.random.default_rng(2)
    with ad.precision(np.float64):
        res = ad.constant(rng.normal(size=(2, 1, 5, 5)))
        ref = rng.uniform(0.0, 4.0, (2, 1, 5, 5))
        gt = np.where(rng.random((2, 1, 5, 5)) < 0.7, rng.uniform(0.5, 5.0, (2, 1, 5, 5)), 0.0)
        summed = ad.add(res, ad.constant(ref))
        assert loss_ref(res, ref, gt).item() == pytest.approx(loss_proj(summed, gt).item(), rel=1e-12)


def test_loss_errors():
    pred = ad.constant(np.ones((1, 1, 2, 2)))
    with pytest.raises(ValueError):
        loss_proj(pred, np.zeros((1, 1, 2, 2)))
    with pytest.raises(ShapeError):
        loss_ref(pred, np.ones((3, 3)), np.ones((1, 1, 2, 2)))


def test_adam_leaves_parameters_alone_without_gradient():
    p = Parameter(np.array([1.0, -2.0]), name="p")
    state = adam_step([p], [None], OptimState.initial([p]), lr_t=0.1)
    assert_array_equal(p.data, np.float32([1.0, -2.0]))
    assert state.step == 1


def test_adam_first_steps_move_by_learning_rate():
    with ad.precision(np.float64):
        p = Parameter(np.array([1.0, -2.0]), name="p")
        state = OptimState.initial([p])
        g = np.array([0.5, -0.1])
        adam_step([p], [g], state, lr_t=0.1)
        np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)
        adam_step([p], [g], state, lr_t=0.1)
        np.testing.assert_allclose(p.data, [0.8, -1.8], atol=1e-6)
    assert state.step == 2
    assert state.m["p"].dtype == np.float32 and state.v["p"].dtype == np.float32


def test_adam_weight_decay_applies_before_update():
    with ad.precision(np.float64):
        p = Parameter(np.array([1.0, -2.0]), name="p")
        adam_step([p], [None], OptimState.initial([p]), lr_t=0.1, weight_decay=0.5)
        np.testing.assert_allclose(p.data, [0.95, -1.9], rtol=1e-12)


def test_adam_shape_error():
    p = Parameter(np.zeros(3), name="p")
    with pytest.raises(ShapeError):
        adam_step([p], [np.zeros(2)], OptimState.initial([p]), lr_t=0.1)


def test_lr_schedule():
    assert lr_schedule(1e-4, 0) == 1e-4
    assert lr_schedule(1e-4, 10) == pytest.approx(1e-4 * 0.98 ** 10)
    assert lr_schedule(1e-3, 5, decay=1.0) == 1e-3
    with pytest.raises(ValueError):
        lr_schedule(1e-4, -1)


@pytest.mark.parametrize("fields", [
    {"lr": -1.0}, {"beta1": 1.0}, {"eps_adam": 0.0}, {"lr_decay_per_epoch": 0.0},
    {"batch_size": 0}, {"epochs": -1}, {"input_mode": "depth-only"},
])
def test_train_config_validation(fields):
    with pytest.raises(ConfigError):
        TrainConfig(**fields)


def test_prepare_examples_per_mode(tiny_samples):
    ref = prepare_examples(tiny_samples, "ref-d", workers=1)
    assert [e.sample_id for e in ref] == [s.sample_id for s in tiny_samples]
    assert all(e.ref_d is not None and e.input.tensor.shape == (4, 32, 32) for e in ref)
    assert_array_equal(ref[0].input.tensor[3], ref[0].ref_d.data)

    proj = prepare_example(tiny_samples[0], "proj-d")
    assert proj.ref_d is None
    assert np.count_nonzero(proj.input.tensor[3]) <= np.count_nonzero(ref[0].input.tensor[3])

    dropped = prepare_example(tiny_samples[0], "proj-d", keep_fraction=0.0)
    assert np.count_nonzero(dropped.input.tensor[3]) == 0
    assert prepare_example(tiny_samples[0], "rgb-only").input.tensor.shape == (3, 32, 32)
    with pytest.raises(ConfigError):
        prepare_examples(tiny_samples, "stereo")


def test_zero_learning_rate_gives_flat_trace(tiny_samples, tiny_network):
    model = build_msdpn(tiny_network)
    before = [p.data.copy() for p in model.parameters()]
    _, trace = train(model, tiny_samples, TrainConfig(lr=0.0, epochs=3, batch_size=4))
    assert len(trace) == 3
    assert trace == pytest.approx([trace[0]] * 3, rel=1e-5)
    for p, original in zip(model.parameters(), before):
        assert_array_equal(p.data, original)


def test_training_is_deterministic(tiny_samples, tiny_network):
    config = TrainConfig(lr=1e-3, epochs=2, batch_size=2, seed=7)
    model_a, trace_a = train(build_msdpn(tiny_network), tiny_samples, config)
    model_b, trace_b = train(build_msdpn(tiny_network), tiny_samples, config)
    assert trace_a == trace_b
    for (_, a), (_, b) in zip(model_a.named_parameters(), model_b.named_parameters()):
        assert_array_equal(a.data, b.data)


def test_training_reduces_loss_on_tiny_set(tiny_samples, tiny_network):
    config = TrainConfig(lr=1e-3, epochs=20, batch_size=4, lr_decay_per_epoch=1.0, weight_decay=0.0)
    _, trace = train(build_msdpn(tiny_network), tiny_samples, config)
    assert trace[-1] < trace[0]


def test_stage_losses_average_over_stages(tiny_samples):
    config = NetworkConfig(stages=2, width_mult=0.125, csfa_mode="full", input_mode="proj-d", height=32, width=32)
    _, trace = train(build_msdpn(config), tiny_samples, TrainConfig(epochs=1, batch_size=2, stage_losses=True))
    assert len(trace) == 1 and np.isfinite(trace[0])


def test_train_errors(tiny_samples, tiny_network):
    model = build_msdpn(tiny_network)
    with pytest.raises(ValueError):
        train(model, [], TrainConfig(epochs=1))
    with pytest.raises(ConfigError):
        train(model, tiny_samples, TrainConfig(epochs=1, batch_size=8))
    with pytest.raises(ConfigError):
        train(model, tiny_samples, TrainConfig(epochs=1, batch_size=2, input_mode="proj-d"))
    with pytest.raises(ConfigError):
        train(model, prepare_examples(tiny_samples, "proj-d", workers=1), TrainConfig(epochs=1, batch_size=2))
    with pytest.raises(ValueError):
        train(None, tiny_samples, TrainConfig(epochs=1))


# --- checkpoints ---

def _trained_state(config: NetworkConfig, samples):
    model = build_msdpn(config, seed=1)
    state = OptimState.initial(model.parameters())
    examples = prepare_examples(samples[:2], config.input_mode, workers=1)
    x = np.stack([e.input.tensor for e in examples])
    ref = np.stack([e.ref_d.data for e in examples])[:, None]
    gt = np.stack([e.gt.data for e in examples])[:, None]
    params = model.parameters()
    loss = loss_ref(msdpn_forward(model, x, ref).residual, ref, gt)
    ad.backward(loss)
    adam_step(params, [p.grad for p in params], state, lr_t=1e-3)
    return model, state, examples


def test_checkpoint_round_trip(tmp_path, tiny_samples, tiny_network):
    model, state, _ = _trained_state(tiny_network, tiny_samples)
    config = TrainConfig(epochs=4)
    path = save_checkpoint(model, state, tmp_path / "ckpt" / "model.msdc", epoch=3,
                           loss_trace=[0.5, 0.25, 0.125], train_config=config)
    assert path.read_bytes()[:4] == CHECKPOINT_MAGIC

    loaded = load_checkpoint(path)
    assert loaded.epoch == 3
    assert loaded.loss_trace == [0.5, 0.25, 0.125]
    assert loaded.train_config == config
    assert loaded.model.config == tiny_network
    assert loaded.state.step == 1
    for (name, a), (_, b) in zip(model.named_parameters(), loaded.model.named_parameters()):
        assert_array_equal(a.data, b.data)
        assert_array_equal(state.m[name], loaded.state.m[name])
        assert_array_equal(state.v[name], loaded.state.v[name])
    for (_, a), (_, b) in zip(model.named_running_stats(), loaded.model.named_running_stats()):
        assert_array_equal(a.mean, b.mean)
        assert_array_equal(a.var, b.var)


def test_checkpoint_counters_beyond_float32_precision(tmp_path, tiny_samples, tiny_network):
    model, state, _ = _trained_state(tiny_network, tiny_samples)
    state.step = 2 ** 24 + 3
    loaded = load_checkpoint(save_checkpoint(model, state, tmp_path / "model.msdc", epoch=2 ** 30 + 1))
    assert loaded.state.step == 2 ** 24 + 3
    assert loaded.epoch == 2 ** 30 + 1

    state.step = 2 ** 32
    with pytest.raises(ValueError):
        save_checkpoint(model, state, tmp_path / "overflow.msdc")


def test_checkpoint_preserves_forward_outputs(tmp_path, tiny_samples, tiny_network):
    model, state, examples = _trained_state(tiny_network, tiny_samples)
    path = save_checkpoint(model, state, tmp_path / "model.msdc")
    loaded = load_checkpoint(path).model
    for net in (model, loaded):
        net.eval()
    with ad.no_grad():
        for example in examples:
            a = msdpn_forward(model, example.input, example.ref_d).depth.data
            b = msdpn_forward(loaded, example.input, example.ref_d).depth.data
            assert_array_equal(a, b)


def test_checkpoint_format_errors(tmp_path, tiny_samples, tiny_network):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.msdc")

    model, state, _ = _trained_state(tiny_network, tiny_samples)
    payload = save_checkpoint(model, state, tmp_path / "model.msdc").read_bytes()

    bad_magic = tmp_path / "bad_magic.msdc"
    bad_magic.write_bytes(b"XXXX" + payload[4:])
    with pytest.raises(FormatError) as excinfo:
        load_checkpoint(bad_magic)
    assert excinfo.value.offset == 0

    truncated = tmp_path / "truncated.msdc"
    truncated.write_bytes(payload[:-10])
    with pytest.raises(FormatError):
        load_checkpoint(truncated)

    trailing = tmp_path / "trailing.msdc"
    trailing.write_bytes(payload + b"\x00")
    with pytest.raises(FormatError):
        load_checkpoint(trailing)


def test_resume_reproduces_uninterrupted_run(tmp_path, tiny_samples, tiny_network):
    config = TrainConfig(lr=1e-3, epochs=2, batch_size=2, checkpoint_every=1)
    train(build_msdpn(tiny_network), tiny_samples, config, out_dir=tmp_path / "full")
    checkpoint = tmp_path / "full" / "checkpoints" / "epoch_0001.msdc"
    assert checkpoint.exists()

    train(None, tiny_samples, config, out_dir=tmp_path / "resumed", resume_from=checkpoint)
    for name in ("model.msdc", "loss.csv"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "resumed" / name).read_bytes()


@pytest.mark.slow
def test_overfit_eight_samples():
    samples = generate_dataset(8, seed=100, height=64, width=64, workers=1)
    config = NetworkConfig(stages=2, width_mult=0.25, csfa_mode="full", input_mode="ref-d", height=64, width=64)
    model, trace = train(build_msdpn(config), samples,
                         TrainConfig(lr=1e-4, epochs=300, batch_size=8, lr_decay_per_epoch=1.0))
    assert trace[-1] <= 0.25 * trace[0]
    report, _ = evaluate(model, samples, workers=1)
    assert report.rmse_m <= 0.30


@pytest.mark.slow
def test_full_aggregation_not_worse_than_none():
    train_set = generate_dataset(64, seed=1000, height=64, width=64, workers=1)
    test_set = generate_dataset(16, seed=2000, height=64, width=64, workers=1)
    config = TrainConfig(lr=1e-4, epochs=20, batch_size=8, seed=0)
    rmse = {}
    for mode in ("full", "none"):
        network = NetworkConfig(stages=2, width_mult=0.25, csfa_mode=mode, input_mode="ref-d", height=64, width=64)
        model, _ = train(build_msdpn(network, seed=0), train_set, config)
        rmse[mode] = evaluate(model, test_set, workers=1)[0].rmse_m
    assert rmse["full"] <= rmse["none"]
