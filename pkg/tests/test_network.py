import math

import numpy as np
import pytest

from gradcheck import SMALL, LayerProbe, network_check
from logradial.datasets import LabeledImageSet
from logradial.filterbank import BasisSpec
from logradial.network import (
    NetworkConfig,
    SSCNN,
    TrainingError,
    _spatial_pool,
    _spatial_pool_backward,
    evaluate,
    geometric_scales,
    load_checkpoint,
    parse_config_text,
    save_checkpoint,
    softmax_cross_entropy,
    train,
    write_metrics_csv,
)


def small_config(**kw):
    return NetworkConfig(**{**SMALL, **kw})


# the 10-sample overfit harness: slightly wider so that few units start dead
HARNESS = dict(channel_widths=[4, 6, 8], dense_widths=[16, 3])


def toy_data(n=10, seed=0, classes=3):
    rng = np.random.default_rng(seed)
    images = np.zeros((n, 12, 12))
    labels = np.arange(n) % classes
    for i, c in enumerate(labels):
        # class = position of a bright bar, plus noise
        images[i, 2 + 3 * c:4 + 3 * c, 2:10] = 1.0
        images[i] += 0.1 * rng.random((12, 12))
    return LabeledImageSet(images, labels)


def test_geometric_scales():
    s = geometric_scales()
    assert len(s) == 5 and s[0] == 1.0 and s[-1] == pytest.approx(2.4)
    np.testing.assert_allclose(s, [1.0, 1.2447, 1.5492, 1.9282, 2.4], atol=1e-4)
    assert geometric_scales(n=1) == (1.0,)


def test_config_validation():
    for bad in (dict(channel_widths=[2, 3]), dict(scales=[2.0, 1.0]), dict(base_kernel_size=4),
                dict(layer_type="dense"), dict(precision="half"), dict(upsample_factor=0),
                dict(dense_widths=[3]), dict(optimizer="rmsprop")):
        with pytest.raises(ValueError):
            small_config(**bad)


def test_config_text_round_trip():
    text = """
    # desk run
    channel_widths = 4, 8, 12
    n_scales = 3
    upsample_factor = 1
    learning_rate = 0.05   # trailing comment
    layer_type = plain
    scale_normalize = yes
    sigma_phi = 0.3
    n_train = 100
    split_seed = 4
    """
    cfg, data = parse_config_text(text)
    assert cfg.channel_widths == [4, 8, 12]
    assert cfg.scales == pytest.approx(list(geometric_scales(n=3)))
    assert cfg.learning_rate == 0.05 and cfg.layer_type == "plain" and cfg.scale_normalize
    assert cfg.basis.sigma_phi == 0.3
    assert data == {"n_train": 100, "split_seed": 4}
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="line 1"):
        parse_config_text("bogus = 1")
    with pytest.raises(ValueError):
        parse_config_text("no equals sign")


def test_parameter_count():
    cfg = small_config()
    state = SSCNN(cfg).init_state()
    widths = [1, *cfg.channel_widths]
    for li in range(3):
        assert state.conv_theta[li].size == widths[li] * widths[li + 1] * 48
        assert state.conv_bias[li].size == widths[li + 1]
    assert state.coefficients(0).shape == (2, 1, 24)
    default = NetworkConfig()
    assert SSCNN(default).init_state().conv_theta[1].size == 30 * 60 * 48


def test_spatial_pool_ceil_and_backward():
    a = np.arange(25.0).reshape(1, 1, 5, 5)
    out, idx = _spatial_pool(a, 2)
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_array_equal(out[0, 0], [[6, 8, 9], [16, 18, 19], [21, 23, 24]])
    d = np.ones_like(out)
    back = _spatial_pool_backward(d, idx, a.shape, 2)
    assert back.sum() == 9 and back[0, 0, 1, 1] == 1 and back[0, 0, 4, 4] == 1


def test_softmax_cross_entropy():
    scores = np.array([[0.0, 0.0], [1000.0, 0.0]])
    loss, d = softmax_cross_entropy(scores, np.array([0, 0]))
    assert loss == pytest.approx(math.log(2) / 2)
    np.testing.assert_allclose(d, [[-0.25, 0.25], [0.0, 0.0]], atol=1e-12)


def test_single_layer_gradients():
    probe = LayerProbe(seed=1)
    worst, _ = probe.check(20, np.random.default_rng(0))
    assert worst < 1e-4


@pytest.mark.parametrize("layer_type", ["steerable", "plain"])
def test_network_gradients(layer_type):
    worst, _ = network_check(15, np.random.default_rng(1), layer_type)
    assert worst < 1e-3


def test_zero_loss_gradient_gives_zero_grads():
    cfg = small_config()
    net = SSCNN(cfg)
    state = net.init_state()
    scores, cache = net.forward(state, toy_data(4).images)
    grads = net.backward(state, cache, np.zeros_like(scores))
    assert all(np.all(g == 0) for g in grads.arrays())


def test_zero_image_gives_equal_scores():
    net = SSCNN(small_config())
    scores, _ = net.forward(net.init_state(), np.zeros((3, 12, 12)))
    assert np.all(scores == scores[0])


def test_stale_cache_rejected():
    net = SSCNN(small_config())
    state = net.init_state()
    scores, cache = net.forward(state, toy_data(2).images)
    net.backward(state, cache, scores)
    with pytest.raises(RuntimeError):
        net.backward(state, cache, scores)
    _, cache = net.forward(state, toy_data(2).images)
    with pytest.raises(RuntimeError):
        net.backward(state.copy(), cache, scores)


def test_input_shape_checked():
    net = SSCNN(small_config())
    with pytest.raises(ValueError):
        net.forward(net.init_state(), np.zeros((1, 10, 10)))


def test_training_deterministic():
    cfg = small_config(epochs=2, batch_size=4, learning_rate=0.05, momentum=0.9)
    data = toy_data(10)
    net = SSCNN(cfg)
    a, ha = train(net.init_state(), cfg, data)
    b, hb = train(net.init_state(), cfg, data)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    assert repr(ha) == repr(hb)  # val_acc is nan without a validation set


def test_zero_learning_rate_keeps_parameters():
    cfg = small_config(epochs=1, batch_size=5, learning_rate=0.0)
    state = SSCNN(cfg).init_state()
    out, hist = train(state, cfg, toy_data(10))
    assert all(np.array_equal(x, y) for x, y in zip(state.arrays(), out.arrays()))
    assert len(hist) == 1 and hist[0].step == 2


def test_overfit_ten_samples():
    cfg = small_config(**HARNESS, epochs=60, batch_size=10, learning_rate=0.05, momentum=0.9)
    data = toy_data(10)
    state, hist = train(SSCNN(cfg).init_state(), cfg, data)
    assert evaluate(state, cfg, data) == 0.0
    assert hist[-1].loss < hist[0].loss


def test_first_adam_step_moves_each_parameter_by_the_rate():
    # bias-corrected moments after one step are g and g**2, so the update is lr * g / (|g| + eps)
    cfg = small_config(epochs=1, batch_size=10, learning_rate=1e-3, optimizer="adam")
    data = toy_data(10)
    net = SSCNN(cfg)
    state = net.init_state()
    _, _, grads = net.loss_and_grad(state, data.images, data.labels)
    out, _ = train(state, cfg, data)
    for p0, p1, g in zip(state.arrays(), out.arrays(), grads.arrays()):
        np.testing.assert_allclose(p0 - p1, 1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-6, atol=1e-15)


def test_adam_overfits_ten_samples():
    cfg = small_config(**HARNESS, epochs=40, batch_size=10, learning_rate=0.01, optimizer="adam")
    data = toy_data(10)
    state, _ = train(SSCNN(cfg).init_state(), cfg, data)
    assert evaluate(state, cfg, data) == 0.0


def test_loss_decreases_over_first_epoch_for_most_seeds():
    data = toy_data(10)
    decreased = 0
    seeds = range(20)
    for seed in seeds:
        cfg = small_config(**HARNESS, epochs=1, batch_size=5, learning_rate=0.02, seed=seed)
        net = SSCNN(cfg)
        state = net.init_state()
        before, _, _ = net.loss_and_grad(state, data.images, data.labels)
        after_state, _ = train(state, cfg, data)
        after, _, _ = net.loss_and_grad(after_state, data.images, data.labels)
        decreased += after < before
    assert decreased >= 0.95 * len(seeds)


def test_untrained_error_near_chance():
    cfg = small_config(dense_widths=[6, 10])
    rng = np.random.default_rng(3)
    data = LabeledImageSet(rng.random((200, 12, 12)), np.arange(200) % 10)
    err = evaluate(SSCNN(cfg).init_state(), cfg, data)
    assert 0.75 <= err <= 1.0


def test_nan_loss_raises():
    cfg = small_config(epochs=1, batch_size=5, learning_rate=0.1)
    state = SSCNN(cfg).init_state()
    state.dense_w[1][:] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train(state, cfg, toy_data(10))


def test_train_rejects_bad_labels():
    cfg = small_config(epochs=1)
    data = toy_data(6)
    data.labels[0] = 7
    with pytest.raises(ValueError):
        train(SSCNN(cfg).init_state(), cfg, data)


def test_single_precision_close_to_double():
    data = toy_data(4)
    double = SSCNN(small_config())
    single = SSCNN(small_config(precision="single"))
    state = double.init_state()
    a, _ = double.forward(state, data.images)
    b, _ = single.forward(state, data.images)
    np.testing.assert_allclose(a, b, rtol=1e-3, atol=1e-4)


def test_checkpoint_round_trip(tmp_path):
    cfg = small_config(basis=BasisSpec(sigma_phi=0.25), epochs=1, batch_size=5)
    data = toy_data(10)
    state, _ = train(SSCNN(cfg).init_state(), cfg, data)
    path = tmp_path / "model.npz"
    save_checkpoint(path, cfg, state, {"note": "x"})
    cfg2, state2, extra = load_checkpoint(path)
    assert cfg2 == cfg and extra == {"note": "x"}
    assert all(np.array_equal(x, y) for x, y in zip(state.arrays(), state2.arrays()))
    net = SSCNN(cfg2)
    np.testing.assert_array_equal(net.forward(state2, data.images)[0], SSCNN(cfg).forward(state, data.images)[0])


def test_checkpoint_rejects_mismatch(tmp_path):
    cfg = small_config()
    state = SSCNN(cfg).init_state()
    state.conv_theta[0] = state.conv_theta[0][:1]
    save_checkpoint(tmp_path / "bad.npz", cfg, state)
    with pytest.raises(ValueError, match="shape"):
        load_checkpoint(tmp_path / "bad.npz")


def test_metrics_csv(tmp_path):
    cfg = small_config(epochs=2, batch_size=5)
    _, hist = train(SSCNN(cfg).init_state(), cfg, toy_data(10), val_set=toy_data(6, seed=1))
    write_metrics_csv(tmp_path / "m.csv", hist)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,loss,train_acc,val_acc"
    assert len(lines) == 3 and lines[2].startswith("2,4,")


def test_layer_responses():
    net = SSCNN(small_config())
    state = net.init_state()
    per_scale, pooled, arg = net.layer_responses(state, toy_data(1).images[0], 1)
    assert per_scale.shape == (2, 3, 6, 6) and pooled.shape == (3, 6, 6)
    assert np.all(pooled >= per_scale.max(0) - 1e-12)
    with pytest.raises(IndexError):
        net.layer_responses(state, toy_data(1).images[0], 3)
