"""Dual attention-gate head over the block-4 and block-5 feature maps.

Each gate scores every spatial site of a local feature map against the
global descriptor (the fc1 tap) with an additive compatibility function,

    c_i = w_s . tanh(W_l l_i + b_l + W_g g + b_g),    a = softmax_i(c),

and returns the attention-weighted sum of the local features. The two
attended vectors are concatenated and fed to a K-way dense layer.

Parameters live under ``am.gate4.*``, ``am.gate5.*`` and ``am.head.*``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nncore as nn
from .backbone import BackboneConfig, FeatureTaps
from .nncore import ShapeMismatch
from .spectro import resize_bilinear, to_ppm


def init_gate(prefix: str, channels: int, fc_dim: int, d: int, rng) -> dict:
    def uniform(fan_in, shape):
        lim = np.sqrt(6.0 / fan_in)
        return rng.uniform(-lim, lim, size=shape).astype(np.float32)

    return {
        f"{prefix}.proj_local.weight": uniform(channels, (channels, d)),
        f"{prefix}.proj_local.bias": np.zeros(d, dtype=np.float32),
        f"{prefix}.proj_global.weight": uniform(fc_dim, (fc_dim, d)),
        f"{prefix}.proj_global.bias": np.zeros(d, dtype=np.float32),
        f"{prefix}.score.weight": uniform(d, (d,)),
    }


def init_am_params(config: BackboneConfig, n_classes: int, d: int = 64, seed: int = 0) -> dict:
    """Fresh gate and head parameters; never taken from a pretrained trunk."""
    rng = np.random.default_rng([seed, 4])
    c4, c5 = config.block_channels[3], config.block_channels[4]
    params = {}
    params.update(init_gate("am.gate4", c4, config.fc_dim, d, rng))
    params.update(init_gate("am.gate5", c5, config.fc_dim, d, rng))
    lim = np.sqrt(6.0 / (c4 + c5))
    params["am.head.weight"] = rng.uniform(-lim, lim, size=(c4 + c5, n_classes)).astype(np.float32)
    params["am.head.bias"] = np.zeros(n_classes, dtype=np.float32)
    return params


def gate(local: np.ndarray, glob: np.ndarray, params: dict, prefix: str, uniform: bool = False):
    """Attend over ``local`` (N, C, H, W) given ``glob`` (N, F).

    Returns ``(attended (N, C), map (N, H, W), cache)``. With ``uniform`` the
    scores are bypassed and every site gets weight 1 / (H W).
    """
    if local.ndim == 3:
        attended, amap, cache = gate(local[None], np.atleast_2d(glob), params, prefix, uniform)
        return attended[0], amap[0], cache
    n, c, h, w = local.shape
    wl = params[f"{prefix}.proj_local.weight"]
    wg = params[f"{prefix}.proj_global.weight"]
    if wl.shape[0] != c or wg.shape[0] != glob.shape[1] or glob.shape[0] != n:
        raise ShapeMismatch(f"{prefix}: local {local.shape}, global {glob.shape}, "
                            f"proj_local {wl.shape}, proj_global {wg.shape}")
    flat = local.reshape(n, c, h * w)
    if uniform:
        a = np.full((n, h * w), 1.0 / (h * w), dtype=local.dtype)
        hid = None
    else:
        u = nn.conv1x1_forward(local, wl, params[f"{prefix}.proj_local.bias"])
        u = u + (nn.dense_forward(glob, wg, params[f"{prefix}.proj_global.bias"]))[:, None, :]
        hid = np.tanh(u)
        scores = hid @ params[f"{prefix}.score.weight"]
        a = nn.softmax(scores, axis=1)
    attended = (flat * a[:, None, :]).sum(axis=-1)
    cache = (local, glob, hid, a, uniform)
    return attended, a.reshape(n, h, w), cache


def gate_backward(d_attended: np.ndarray, cache, params: dict, prefix: str):
    """Returns ``(d_local, d_global, param_grads)``."""
    local, glob, hid, a, uniform = cache
    n, c, h, w = local.shape
    flat = local.reshape(n, c, h * w)
    d_flat = d_attended[:, :, None] * a[:, None, :]
    grads = {}
    d_glob = np.zeros_like(glob)
    if uniform:
        for k in ("proj_local.weight", "proj_local.bias", "proj_global.weight",
                  "proj_global.bias", "score.weight"):
            grads[f"{prefix}.{k}"] = np.zeros_like(params[f"{prefix}.{k}"])
        return d_flat.reshape(local.shape), d_glob, grads
    da = np.einsum("nc,nci->ni", d_attended, flat)
    dc = a * (da - (a * da).sum(axis=1, keepdims=True))
    ws = params[f"{prefix}.score.weight"]
    grads[f"{prefix}.score.weight"] = np.einsum("nid,ni->d", hid, dc)
    du = dc[:, :, None] * ws[None, None, :] * (1.0 - hid * hid)
    wl = params[f"{prefix}.proj_local.weight"]
    wg = params[f"{prefix}.proj_global.weight"]
    grads[f"{prefix}.proj_local.weight"] = np.einsum("nci,nid->cd", flat, du)
    grads[f"{prefix}.proj_local.bias"] = du.sum(axis=(0, 1))
    du_sum = du.sum(axis=1)
    grads[f"{prefix}.proj_global.weight"] = glob.T @ du_sum
    grads[f"{prefix}.proj_global.bias"] = du_sum.sum(axis=0)
    d_flat = d_flat + np.einsum("nid,cd->nci", du, wl)
    d_glob = du_sum @ wg.T
    return d_flat.reshape(local.shape), d_glob, grads


@dataclass
class AttentionOutput:
    map4: np.ndarray
    map5: np.ndarray
    descriptor: np.ndarray
    logits: np.ndarray


def am_forward(taps: FeatureTaps, params: dict, ablate: bool = False):
    """Both gates plus the classifier; returns (AttentionOutput, cache)."""
    att4, map4, c4 = gate(taps.block4, taps.fc1, params, "am.gate4", uniform=ablate)
    att5, map5, c5 = gate(taps.block5, taps.fc1, params, "am.gate5", uniform=ablate)
    desc = np.concatenate([att4, att5], axis=1)
    logits = nn.dense_forward(desc, params["am.head.weight"], params["am.head.bias"])
    return AttentionOutput(map4, map5, desc, logits), (c4, c5, desc, att4.shape[1])


def am_backward(d_logits: np.ndarray, cache, params: dict):
    """Returns ``(d_block4, d_block5, d_fc1, param_grads)``."""
    c4, c5, desc, split = cache
    d_desc, gw, gb = nn.dense_backward(d_logits, desc, params["am.head.weight"])
    grads = {"am.head.weight": gw, "am.head.bias": gb}
    d4, dg4, g4 = gate_backward(d_desc[:, :split], c4, params, "am.gate4")
    d5, dg5, g5 = gate_backward(d_desc[:, split:], c5, params, "am.gate5")
    grads.update(g4)
    grads.update(g5)
    return d4, d5, dg4 + dg5, grads


def map_to_gray(amap: np.ndarray, hw) -> np.ndarray:
    """Bilinear upsample then min-max stretch to uint8.

    A constant map has no range to stretch; it maps to all zeros.
    """
    up = resize_bilinear(np.asarray(amap, dtype=np.float64), hw)
    lo, hi = up.min(), up.max()
    if hi - lo <= 0:
        return np.zeros(up.shape, dtype=np.uint8)
    return np.round((up - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_map(amap: np.ndarray, hw, path: Optional[str] = None) -> bytes:
    """Grayscale (P5) image of an attention map at the network input size."""
    data = to_ppm(map_to_gray(amap, hw))
    if path is not None:
        with open(path, "wb") as f:
            f.write(data)
    return data
