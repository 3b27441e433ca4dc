import numpy as np
import pytest

from specemo import attention, nncore as nn, spectro
from specemo.backbone import BackboneConfig, FeatureTaps
from specemo.heads import DSNet

TINY = BackboneConfig.mini(block_channels=(2, 3, 4, 4, 5), convs_per_block=(1, 1, 1, 1, 1),
                           input_hw=(32, 32), fc_dim=6)


def _gate_params(rng, c, f, d, prefix="g"):
    return {k: v.astype(np.float64) for k, v in attention.init_gate(prefix, c, f, d, rng).items()} | {
        f"{prefix}.proj_local.bias": rng.normal(size=d), f"{prefix}.proj_global.bias": rng.normal(size=d)}


def test_equal_scores_give_mean(rng):
    p = _gate_params(rng, 4, 5, 3)
    p["g.score.weight"][:] = 0
    local = rng.normal(size=(2, 4, 3, 3))
    att, amap, _ = attention.gate(local, rng.normal(size=(2, 5)), p, "g")
    np.testing.assert_allclose(amap, 1 / 9)
    np.testing.assert_allclose(att, local.mean(axis=(2, 3)))


def test_dominant_site_one_hot(rng):
    d = 2
    p = {"g.proj_local.weight": np.zeros((4, d)), "g.proj_local.bias": np.zeros(d),
         "g.proj_global.weight": np.zeros((5, d)), "g.proj_global.bias": np.zeros(d),
         "g.score.weight": np.array([1000.0, 0.0])}
    p["g.proj_local.weight"][0, 0] = 10.0
    local = np.zeros((1, 4, 3, 3))
    local[0, :, 1, 2] = [1.0, 2.0, 3.0, 4.0]  # only this site lights the first channel
    att, amap, _ = attention.gate(local, np.zeros((1, 5)), p, "g")
    assert amap[0, 1, 2] == pytest.approx(1.0)
    np.testing.assert_allclose(att[0], [1, 2, 3, 4], atol=1e-9)


def test_attended_brute_force(rng):
    c, f, d = 4, 5, 3
    p = _gate_params(rng, c, f, d)
    local = rng.normal(size=(c, 3, 3))
    glob = rng.normal(size=f)
    att, amap, _ = attention.gate(local, glob, p, "g")
    scores = np.zeros((3, 3))
    for y in range(3):
        for x in range(3):
            u = local[:, y, x] @ p["g.proj_local.weight"] + p["g.proj_local.bias"]
            u = u + glob @ p["g.proj_global.weight"] + p["g.proj_global.bias"]
            scores[y, x] = sum(p["g.score.weight"][j] * np.tanh(u[j]) for j in range(d))
    a = np.exp(scores - scores.max())
    a /= a.sum()
    ref = np.zeros(c)
    for y in range(3):
        for x in range(3):
            ref += a[y, x] * local[:, y, x]
    np.testing.assert_allclose(amap, a, atol=1e-12)
    np.testing.assert_allclose(att, ref, atol=1e-6)
    assert amap.min() >= 0 and amap.sum() == pytest.approx(1.0)


def test_gate_shape_mismatch(rng):
    p = _gate_params(rng, 4, 5, 3)
    with pytest.raises(nn.ShapeMismatch):
        attention.gate(rng.normal(size=(1, 3, 2, 2)), rng.normal(size=(1, 5)), p, "g")


def _taps(rng, n=2):
    return FeatureTaps(rng.normal(size=(n, 4, 4, 4)), rng.normal(size=(n, 5, 2, 2)), rng.normal(size=(n, 6)))


def _am_params(rng):
    return {k: v.astype(np.float64) for k, v in attention.init_am_params(TINY, 3, d=4, seed=1).items()}


def test_uniform_ablation_is_mean_pool(rng):
    taps, p = _taps(rng), _am_params(rng)
    out, _ = attention.am_forward(taps, p, ablate=True)
    desc = np.concatenate([taps.block4.mean(axis=(2, 3)), taps.block5.mean(axis=(2, 3))], axis=1)
    assert np.array_equal(out.logits, desc @ p["am.head.weight"] + p["am.head.bias"])


def test_permutation_equivariance(rng):
    taps, p = _taps(rng), _am_params(rng)
    out, _ = attention.am_forward(taps, p)
    perm = rng.permutation(4)
    b5 = taps.block5.reshape(2, 5, 4)[:, :, perm].reshape(2, 5, 2, 2)
    out2, _ = attention.am_forward(FeatureTaps(taps.block4, b5, taps.fc1), p)
    np.testing.assert_allclose(out2.logits, out.logits, atol=1e-12)
    inv = np.argsort(perm)
    np.testing.assert_allclose(out2.map5.reshape(2, 4)[:, inv], out.map5.reshape(2, 4), atol=1e-12)


def test_am_backward_finite_differences(rng):
    taps, p = _taps(rng), _am_params(rng)
    y = np.array([0, 2])
    out, cache = attention.am_forward(taps, p)
    _, d_logits = nn.softmax_xent(out.logits, y)
    d4, d5, dfc, grads = attention.am_backward(d_logits, cache, p)

    def loss():
        return nn.softmax_xent(attention.am_forward(taps, p)[0].logits, y)[0]

    assert nn.grad_check(loss, p, grads, n_coords=200) < 1e-4
    inputs = {"b4": taps.block4, "b5": taps.block5, "fc": taps.fc1}
    assert nn.grad_check(loss, inputs, {"b4": d4, "b5": d5, "fc": dfc}, n_coords=200) < 1e-4


def test_full_am_graph_gate_gradients(rng):
    net = DSNet.build("am", TINY, 3, seed=0, att_dim=4).astype(np.float64)
    x = rng.uniform(size=(2, 32, 32, 3))
    y = np.array([1, 2])
    _, grads, _ = net.loss_and_grads(x, y)
    gate = {k: net.params[k] for k in net.params if k.startswith("am.gate")}

    def loss():
        return nn.softmax_xent(net.forward(x)[0], y)[0]

    err = nn.grad_check(loss, gate, grads, eps=1e-5, n_coords=200, signature=lambda: net.signature(x))
    assert err < 1e-4


def test_map_export():
    hw = (32, 32)
    flat = attention.export_map(np.full((4, 4), 1 / 16), hw)
    img = spectro.from_ppm(flat)
    assert img.shape == hw and np.all(img == 0)
    one_hot = np.zeros((4, 4))
    one_hot[1, 2] = 1.0
    img = spectro.from_ppm(attention.export_map(one_hot, hw))
    assert img.shape == hw
    ys, xs = np.nonzero(img > 128)
    # the bright region sits inside the cell that was hot: rows 8..15, cols 16..23
    assert ys.min() >= 4 and ys.max() <= 19 and xs.min() >= 12 and xs.max() <= 27
    assert img[11, 19] == 255


def test_export_writes_file(tmp_path):
    attention.export_map(np.eye(4), (8, 8), str(tmp_path / "m.pgm"))
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n8 8\n255\n")
