import numpy as np
import pytest

from specemo import nncore as nn
from specemo.backbone import Backbone, BackboneConfig, count_params, layer_plan

import oracles

TINY = BackboneConfig.mini(block_channels=(2, 3, 4, 4, 4), convs_per_block=(1, 1, 1, 1, 1),
                           input_hw=(32, 32), fc_dim=6)


def test_mini_param_count():
    cfg = BackboneConfig.mini()
    expected = oracles.vgg_param_count([8, 16, 32, 64, 64], [1, 1, 2, 2, 2], 128, (64, 64))
    assert count_params(cfg) == expected
    assert Backbone.build(cfg).num_params == expected


def test_full_is_vgg16_trunk():
    plan = layer_plan(BackboneConfig.full())
    convs = [s for s in plan if s.kind == "conv3x3"]
    pools = [s for s in plan if s.kind == "maxpool2x2"]
    assert len(convs) == 13 and len(pools) == 5
    assert [c.out_dim for c in convs] == [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512]
    seq = [s.kind for s in plan if s.kind in ("conv3x3", "maxpool2x2")]
    assert seq == ["conv3x3"] * 2 + ["maxpool2x2"] + ["conv3x3"] * 2 + ["maxpool2x2"] + (
        ["conv3x3"] * 3 + ["maxpool2x2"]) * 3
    # conv trunk of VGG-16: 14,714,688 parameters
    conv_params = sum(c.out_dim * c.in_dim * 9 + c.out_dim for c in convs)
    assert conv_params == 14_714_688


def test_seeded_init():
    a, b = Backbone.build(seed=3), Backbone.build(seed=3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert not np.array_equal(a.params["fc1.weight"], Backbone.build(seed=4).params["fc1.weight"])


def test_tap_shapes():
    taps = Backbone.build().forward(np.zeros((2, 64, 64, 3)))
    assert taps.block4.shape == (2, 64, 8, 8)
    assert taps.block5.shape == (2, 64, 4, 4)
    assert taps.fc1.shape == (2, 128)


def test_zero_input_bias_chain(rng):
    net = Backbone.build(TINY, dtype=np.float64)
    for k in net.params:
        if k.endswith(".bias"):
            net.params[k] = rng.normal(size=net.params[k].shape)
    taps = net.forward(np.full((1, 32, 32, 3), 0.5))  # 0.5 - mean 0.5 = zero input
    # with a spatially constant input every conv is constant except at the zero-padded border
    x = np.zeros((1, 3, 32, 32))
    for b in range(1, 6):
        w, bias = net.params[f"block{b}.conv1.weight"], net.params[f"block{b}.conv1.bias"]
        x = np.maximum(oracles.conv3x3_loops(x, w, bias), 0)
        if b == 4:
            np.testing.assert_allclose(taps.block4, x)
        if b == 5:
            np.testing.assert_allclose(taps.block5, x)
        h = x.shape[2] // 2
        x = x.reshape(1, x.shape[1], h, 2, h, 2).max(axis=(3, 5))
    fc = np.maximum(x.reshape(1, -1) @ net.params["fc1.weight"] + net.params["fc1.bias"], 0)
    np.testing.assert_allclose(taps.fc1, fc)


def test_purity(rng):
    net = Backbone.build()
    img = rng.uniform(size=(64, 64, 3))
    a, b = net.forward(img[None]), net.forward(img.copy()[None])
    np.testing.assert_array_equal(a.fc1, b.fc1)
    np.testing.assert_array_equal(a.block4, b.block4)


def test_preprocess_shape_check():
    with pytest.raises(nn.ShapeMismatch):
        Backbone.build().forward(np.zeros((1, 32, 32, 3)))


def test_channel_order():
    img = np.zeros((1, 32, 32, 3))
    img[..., 0] = 1.0
    rgb = Backbone.build(TINY).preprocess(img)
    bgr = Backbone.build(BackboneConfig.from_dict({**TINY.to_dict(), "channel_order": "bgr"})).preprocess(img)
    np.testing.assert_array_equal(rgb[:, 0], bgr[:, 2])


def test_trunk_gradients(rng):
    net = Backbone.build(TINY, seed=2, dtype=np.float64)
    for k in net.params:
        if k.endswith(".bias"):
            net.params[k] = rng.normal(scale=0.1, size=net.params[k].shape)
    img = rng.uniform(size=(2, 32, 32, 3))
    taps0 = net.forward(img)
    p4, p5, pf = (rng.normal(size=t.shape) for t in (taps0.block4, taps0.block5, taps0.fc1))

    def loss():
        t = net.forward(img)
        return float(np.sum(t.block4 * p4) + np.sum(t.block5 * p5) + np.sum(t.fc1 * pf))

    def signature():
        return net.signature(net.forward(img, keep_cache=True)[1])

    _, cache = net.forward(img, keep_cache=True)
    grads = net.backward(cache, p4, p5, pf)
    assert set(grads) == set(net.params)
    assert nn.grad_check(loss, net.params, grads, eps=1e-6, n_coords=200, signature=signature) < 1e-4


def test_save_load_bit_identical(tmp_path, rng):
    net = Backbone.build(TINY, seed=5)
    net.save_weights(tmp_path / "w.bin")
    other = Backbone.build(TINY, seed=6)
    other.load_weights(tmp_path / "w.bin")
    img = rng.uniform(size=(2, 32, 32, 3))
    np.testing.assert_array_equal(net.forward(img).fc1, other.forward(img).fc1)


def test_load_validation():
    net = Backbone.build(TINY)
    t = net.state_dict()
    missing = {k: v for k, v in t.items() if k != "block3.conv1.weight"}
    with pytest.raises(nn.MissingTensor, match="block3.conv1.weight"):
        net.load_state_dict(missing)
    bad = dict(t, **{"fc1.weight": t["fc1.weight"].T})
    with pytest.raises(nn.ShapeMismatch):
        net.load_state_dict(bad)
