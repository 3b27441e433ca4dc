"""Dense-tensor network kernels with explicit backward passes.

Tensors are plain numpy arrays in NCHW layout. Every ``*_forward`` has a
matching ``*_backward`` that takes whatever the forward call cached and
returns exact gradients. Training runs in float32; gradient checks cast
everything to float64.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np


class ShapeMismatch(ValueError):
    pass


class OddSpatialDim(ValueError):
    pass


class LabelOutOfRange(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class MissingTensor(KeyError):
    pass


class ChecksumMismatch(ValueError):
    pass


_DEBUG = os.environ.get("SPECEMO_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Turn the NaN/Inf tripwire on or off for every kernel."""
    global _DEBUG
    _DEBUG = bool(flag)


def _finite(x: np.ndarray, where: str) -> np.ndarray:
    if _DEBUG and not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values produced by {where}")
    return x


# -- convolution -------------------------------------------------------------

def _pad(x, padding):
    if padding == "same":
        return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    if padding == "valid":
        return x
    raise ValueError(f"unknown padding {padding!r}")


def _im2col(x, padding):
    xp = _pad(x, padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    n, c, h, w = win.shape[:4]
    # rows ordered (n, y, x); columns ordered (c, dy, dx) to match weight layout
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9), (n, h, w)


def conv_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, padding: str = "same") -> np.ndarray:
    """3x3 stride-1 cross-correlation. ``weights`` is (out, in, 3, 3)."""
    if x.ndim != 4 or weights.ndim != 4 or weights.shape[2:] != (3, 3):
        raise ShapeMismatch(f"conv input {x.shape} / weights {weights.shape}")
    if x.shape[1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ShapeMismatch(f"conv channels: input {x.shape}, weights {weights.shape}, bias {bias.shape}")
    cols, (n, h, w) = _im2col(x, padding)
    out = cols @ weights.reshape(weights.shape[0], -1).T + bias
    return _finite(out.reshape(n, h, w, -1).transpose(0, 3, 1, 2), "conv_forward")


def conv_backward(grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray, padding: str = "same"):
    """Gradients of ``conv_forward`` w.r.t. input, weights and bias."""
    o = weights.shape[0]
    cols, (n, h, w) = _im2col(x, padding)
    if grad_out.shape != (n, o, h, w):
        raise ShapeMismatch(f"grad_out {grad_out.shape} vs expected {(n, o, h, w)}")
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)
    grad_w = (g.T @ cols).reshape(weights.shape)
    grad_b = g.sum(axis=0)
    dcols = (g @ weights.reshape(o, -1)).reshape(n, h, w, x.shape[1], 3, 3)
    pad = 1 if padding == "same" else 0
    gx = np.zeros((n, x.shape[1], x.shape[2] + 2 * pad, x.shape[3] + 2 * pad), dtype=dcols.dtype)
    for dy in range(3):
        for dx in range(3):
            gx[:, :, dy:dy + h, dx:dx + w] += dcols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
    if pad:
        gx = gx[:, :, 1:-1, 1:-1]
    return _finite(gx, "conv_backward"), grad_w, grad_b


def conv1x1_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Pointwise projection of an NCHW map, ``weights`` is (in, out). Returns N x HW x out."""
    n, c, h, w = x.shape
    if weights.shape[0] != c:
        raise ShapeMismatch(f"1x1 conv input channels {c} vs weights {weights.shape}")
    return _finite(x.reshape(n, c, h * w).transpose(0, 2, 1) @ weights + bias, "conv1x1_forward")


# -- pooling, activations, dense ---------------------------------------------

def maxpool_forward(x: np.ndarray):
    """2x2 / stride 2 max pool. Returns (output, argmax) with ties to the first index."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise OddSpatialDim(f"maxpool needs even H, W; got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = grad_out.shape
    if argmax.shape != grad_out.shape:
        raise ShapeMismatch("maxpool grad/argmax shape mismatch")
    blocks = np.zeros((n, c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(blocks, argmax[..., None], grad_out[..., None], axis=-1)
    return blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    if grad_out.shape != x.shape:
        raise ShapeMismatch("relu grad/input shape mismatch")
    return grad_out * (x > 0)


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map, ``weights`` is (in_dim, out_dim)."""
    if x.ndim != 2 or x.shape[1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ShapeMismatch(f"dense input {x.shape}, weights {weights.shape}, bias {bias.shape}")
    return _finite(x @ weights + bias, "dense_forward")


def dense_backward(grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray):
    if grad_out.shape != (x.shape[0], weights.shape[1]):
        raise ShapeMismatch(f"dense grad {grad_out.shape} vs ({x.shape[0]}, {weights.shape[1]})")
    return grad_out @ weights.T, x.T @ grad_out, grad_out.sum(axis=0)


def flatten(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"labels {labels.shape} for logits {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logz - shifted[np.arange(n), labels]))
    grad = np.exp(shifted - logz[:, None])
    grad[np.arange(n), labels] -= 1.0
    return loss, _finite(grad / n, "softmax_xent")


# -- optimisers ---------------------------------------------------------------

@dataclass
class OptimState:
    """Optimiser hyper-parameters plus per-parameter slots.

    ``group_lr`` maps a parameter-name prefix to its learning rate; the
    longest matching prefix wins and ``lr`` is the fallback.
    """

    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    group_lr: Dict[str, float] = field(default_factory=dict)
    t: int = 0
    slots: Dict[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimiser {self.kind!r}")
        if self.lr < 0 or any(v < 0 for v in self.group_lr.values()):
            raise ValueError("learning rates must be non-negative")

    def lr_for(self, name: str) -> float:
        best, lr = -1, self.lr
        for prefix, value in self.group_lr.items():
            if name.startswith(prefix) and len(prefix) > best:
                best, lr = len(prefix), value
        return lr


def step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimState) -> None:
    """Update ``params`` in place; parameters whose group lr is 0 are skipped."""
    state.t += 1
    for name in sorted(grads):
        lr = state.lr_for(name)
        if lr == 0:
            continue
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ShapeMismatch(f"{name}: param {p.shape} vs grad {g.shape}")
        if state.kind == "sgd_momentum":
            (v,) = state.slots.get(name) or (np.zeros_like(p),)
            v *= state.momentum
            v += g
            state.slots[name] = (v,)
            p -= (lr * v).astype(p.dtype)
        else:
            m, v = state.slots.get(name) or (np.zeros_like(p), np.zeros_like(p))
            m *= state.beta1
            m += (1 - state.beta1) * g
            v *= state.beta2
            v += (1 - state.beta2) * g * g
            state.slots[name] = (m, v)
            m_hat = m / (1 - state.beta1 ** state.t)
            v_hat = v / (1 - state.beta2 ** state.t)
            p -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


# -- gradient checking ---------------------------------------------------------

def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    loss_fn: Callable[[], float],
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    eps: float = 1e-5,
    n_coords: int = 200,
    seed: int = 0,
    signature: Optional[Callable[[], object]] = None,
    floor: float = 1e-6,
    full_output: bool = False,
):
    """Max relative error between ``grads`` and central differences of ``loss_fn``.

    ``loss_fn`` re-evaluates the loss from the current contents of ``params``
    (which are perturbed in place and restored). Up to ``n_coords`` coordinates
    are sampled uniformly over all parameters. When ``signature`` is given it
    must return the network's piecewise-linear state (ReLU masks, pool argmaxes);
    coordinates whose perturbation changes it straddle a kink and are skipped.
    The relative error uses ``max(|a|, |n|, floor)`` as denominator.
    With ``full_output`` returns ``(worst, n_checked, n_skipped)``.
    """
    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    order = rng.permutation(total)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    base_sig = signature() if signature else None
    worst, checked, skipped = 0.0, 0, 0
    for flat in order:
        if checked >= n_coords:
            break
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, idx = names[k], int(flat - offsets[k])
        arr = params[name].reshape(-1)
        orig = arr[idx]
        arr[idx] = orig + eps
        plus = loss_fn()
        sig_plus = signature() if signature else None
        arr[idx] = orig - eps
        minus = loss_fn()
        sig_minus = signature() if signature else None
        arr[idx] = orig
        if signature and not (_same(sig_plus, base_sig) and _same(sig_minus, base_sig)):
            skipped += 1
            continue
        numeric = (plus - minus) / (2 * eps)
        analytic = float(grads[name].reshape(-1)[idx])
        worst = max(worst, relative_error(analytic, numeric, floor))
        checked += 1
    if checked == 0:
        raise RuntimeError("no coordinate could be checked")
    return (worst, checked, skipped) if full_output else worst


def _same(a, b) -> bool:
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray):
        return a.shape == b.shape and bool(np.array_equal(a, b))
    return a == b


# -- weight container ----------------------------------------------------------

_MAGIC = b"SPECEMOW"


def save_weights(path, tensors: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Write tensors as ``MAGIC | u64 header length | JSON header | float32 payloads``.

    The header lists names, shapes, dtypes and byte offsets (relative to the
    payload start) plus a SHA-256 of the payload. Names are stored sorted so
    the file is a pure function of its contents.
    """
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"format": "specemo-weights", "version": 1, "tensors": entries,
              "sha256": hashlib.sha256(payload).hexdigest(), "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload)


def load_weights(path, verify: bool = True):
    """Read a container written by ``save_weights``; returns (tensors, meta)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a weight container")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    payload = data[16 + hlen:]
    if verify and hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ChecksumMismatch(f"{path}: payload checksum mismatch")
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
    return tensors, header.get("meta", {})
