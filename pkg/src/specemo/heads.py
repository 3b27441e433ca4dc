"""Classifier heads and their training loops.

Three paths share one backbone:

* ``svc`` -- fc1 features, standardised, into a one-vs-rest linear SVM
  trained by dual coordinate descent.
* ``fc``  -- fc1 -> hidden (ReLU) -> K softmax, trained end to end.
* ``am``  -- the dual attention-gate head from :mod:`specemo.attention`.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import attention
from . import nncore as nn
from .backbone import Backbone, BackboneConfig

log = logging.getLogger(__name__)

TRUNK_PREFIXES = ("block", "fc1.")


class SingleClass(ValueError):
    pass


class EmptySplit(ValueError):
    pass


class DegenerateDim(UserWarning):
    pass


# -- standardisation -----------------------------------------------------------

STD_FLOOR = 1e-8


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


def standardize_fit(features: np.ndarray) -> Standardizer:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("standardize_fit needs an N x D matrix with N >= 2")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    flat = std < STD_FLOOR
    if flat.any():
        warnings.warn(f"{int(flat.sum())} constant feature dimension(s); std floored at {STD_FLOOR}",
                      DegenerateDim, stacklevel=2)
    return Standardizer(mean, np.maximum(std, STD_FLOOR))


def standardize_apply(standardizer: Standardizer, x: np.ndarray) -> np.ndarray:
    return standardizer.apply(x)


# -- linear SVM ------------------------------------------------------------------

@dataclass
class BinarySvmResult:
    w: np.ndarray
    b: float
    alpha: np.ndarray
    objective: List[float]
    gap: List[float]
    epochs: int


def _primal_dual(xa, y, alpha, w, C):
    margins = 1.0 - y * (xa @ w)
    ww = float(w @ w)
    primal = 0.5 * ww + C * float(np.maximum(margins, 0.0).sum())
    dual_min = 0.5 * ww - float(alpha.sum())
    return primal, dual_min


def dual_cd(x: np.ndarray, y: np.ndarray, C: float = 1.0, tol: float = 1e-4,
            max_epochs: int = 10000, seed: int = 0) -> BinarySvmResult:
    """L2-regularised hinge-loss SVM via dual coordinate descent.

    Minimises ``0.5 |w|^2 + C * sum_i max(0, 1 - y_i (w . x_i + b))`` where the
    bias is folded in as a constant feature (and therefore regularised). ``C``
    is per sample: duplicating every point is equivalent to doubling ``C``.

    Iterates epochs of single-coordinate exact minimisation in a seeded random
    order until the relative duality gap ``(primal - dual) / primal`` drops
    below ``tol``.
    ``objective`` holds the dual (minimisation form) after each epoch.
    """
    xa = np.hstack([np.asarray(x, dtype=np.float64), np.ones((len(x), 1))])
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    qii = np.einsum("ij,ij->i", xa, xa)
    alpha = np.zeros(n)
    w = np.zeros(xa.shape[1])
    rng = np.random.default_rng(seed)
    objective, gaps = [], []
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        for i in rng.permutation(n):
            g = y[i] * (xa[i] @ w) - 1.0
            a = alpha[i]
            if a == 0.0:
                pg = min(g, 0.0)
            elif a == C:
                pg = max(g, 0.0)
            else:
                pg = g
            if pg != 0.0:
                new = min(max(a - g / qii[i], 0.0), C)
                w += (new - a) * y[i] * xa[i]
                alpha[i] = new
        primal, dual_min = _primal_dual(xa, y, alpha, w, C)
        objective.append(dual_min)
        gaps.append(primal + dual_min)
        if primal + dual_min <= tol * max(abs(primal), 1e-300):
            break
    else:
        log.warning("dual_cd stopped at max_epochs=%d with relative gap %.2e", max_epochs,
                    gaps[-1] / max(abs(gaps[-1] - objective[-1]), 1e-300))
    return BinarySvmResult(w[:-1].copy(), float(w[-1]), alpha, objective, gaps, epoch)


@dataclass
class SvcModel:
    w: np.ndarray            # K x D
    b: np.ndarray            # K
    standardizer: Standardizer
    C: float = 1.0
    gaps: List[float] = field(default_factory=list)

    def decision_function(self, features: np.ndarray) -> np.ndarray:
        return self.standardizer.apply(features) @ self.w.T + self.b

    def tensors(self) -> dict:
        return {"svc.w": self.w, "svc.b": self.b, "svc.mean": self.standardizer.mean,
                "svc.std": self.standardizer.std}

    @classmethod
    def from_tensors(cls, t: dict, C: float = 1.0) -> "SvcModel":
        return cls(np.asarray(t["svc.w"], np.float64), np.asarray(t["svc.b"], np.float64),
                   Standardizer(np.asarray(t["svc.mean"], np.float64), np.asarray(t["svc.std"], np.float64)), C)


# score given to classes absent from the training split so they are never predicted
_ABSENT = -1e9


def svc_train(features: np.ndarray, labels, C: float = 1.0, seed: int = 0, n_classes: Optional[int] = None,
              tol: float = 1e-4, max_epochs: int = 10000) -> SvcModel:
    """One-vs-rest linear SVM on standardised features."""
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels)
    if len(present) < 2:
        raise SingleClass("svc_train needs at least two classes")
    k = int(n_classes if n_classes is not None else labels.max() + 1)
    std = standardize_fit(features)
    xs = std.apply(features)
    w = np.zeros((k, xs.shape[1]))
    b = np.full(k, _ABSENT)
    gaps = []
    for cls in range(k):
        if cls not in present:
            continue
        y = np.where(labels == cls, 1.0, -1.0)
        res = dual_cd(xs, y, C=C, tol=tol, max_epochs=max_epochs, seed=seed + cls)
        w[cls], b[cls] = res.w, res.b
        gaps.append(res.gap[-1])
    return SvcModel(w, b, std, C, gaps)


def svc_predict(model: SvcModel, features: np.ndarray) -> np.ndarray:
    """Argmax of the one-vs-rest scores; ties go to the lower class index."""
    return np.argmax(model.decision_function(features), axis=1)


# -- neural heads ----------------------------------------------------------------

@dataclass
class TrainConfig:
    mode: str = "fc"
    epochs: int = 50
    batch_size: int = 8
    optimizer: str = "adam"
    lr_trunk: float = 1e-3
    lr_head: float = 1e-3
    momentum: float = 0.9
    seed: int = 0
    early_stop_patience: int = 10
    freeze_trunk: bool = False
    C: float = 1.0
    hidden: int = 64
    att_dim: int = 64

    def __post_init__(self):
        if self.mode not in ("svc", "fc", "am"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.lr_head <= 0 or self.lr_trunk < 0:
            raise ValueError("need lr_head > 0 and lr_trunk >= 0")

    @classmethod
    def finetune(cls, **kw) -> "TrainConfig":
        """Low-rate fine-tuning of an imported pretrained trunk."""
        return cls(**{"lr_trunk": 1e-5, "lr_head": 1e-4, **kw})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def init_fc_params(fc_dim: int, n_classes: int, hidden: int = 64, seed: int = 0) -> dict:
    rng = np.random.default_rng([seed, 3])
    l1, l2 = np.sqrt(6.0 / fc_dim), np.sqrt(6.0 / hidden)
    return {
        "fc_head.hidden.weight": rng.uniform(-l1, l1, size=(fc_dim, hidden)).astype(np.float32),
        "fc_head.hidden.bias": np.zeros(hidden, dtype=np.float32),
        "fc_head.out.weight": rng.uniform(-l2, l2, size=(hidden, n_classes)).astype(np.float32),
        "fc_head.out.bias": np.zeros(n_classes, dtype=np.float32),
    }


class DSNet:
    """Backbone plus an ``fc`` or ``am`` head sharing one parameter dict."""

    def __init__(self, mode: str, config: BackboneConfig, params: Dict[str, np.ndarray], n_classes: int):
        if mode not in ("fc", "am"):
            raise ValueError(f"DSNet mode must be fc or am, got {mode!r}")
        self.mode = mode
        self.config = config
        self.params = params
        self.n_classes = n_classes
        self.ablate = False
        self.backbone = Backbone(config, {k: v for k, v in params.items() if k.startswith(TRUNK_PREFIXES)})

    @classmethod
    def build(cls, mode: str, config: BackboneConfig, n_classes: int, seed: int = 0,
              hidden: int = 64, att_dim: int = 64, backbone: Optional[Backbone] = None) -> "DSNet":
        trunk = backbone or Backbone.build(config, seed)
        params = {k: v.copy() for k, v in trunk.params.items()}
        if mode == "fc":
            params.update(init_fc_params(config.fc_dim, n_classes, hidden, seed))
        else:
            params.update(attention.init_am_params(config, n_classes, att_dim, seed))
        return cls(mode, config, params, n_classes)

    def astype(self, dtype) -> "DSNet":
        net = DSNet(self.mode, self.config, {k: v.astype(dtype) for k, v in self.params.items()}, self.n_classes)
        net.ablate = self.ablate
        return net

    def forward(self, images, keep_cache: bool = False):
        """Returns ``(logits, attention_output_or_None, cache)``."""
        res = self.backbone.forward(images, keep_cache=keep_cache)
        taps, tcache = res if keep_cache else (res, None)
        p = self.params
        if self.mode == "fc":
            pre = nn.dense_forward(taps.fc1, p["fc_head.hidden.weight"], p["fc_head.hidden.bias"])
            hid = nn.relu_forward(pre)
            logits = nn.dense_forward(hid, p["fc_head.out.weight"], p["fc_head.out.bias"])
            return logits, None, ((tcache, taps, pre, hid) if keep_cache else None)
        out, acache = attention.am_forward(taps, p, ablate=self.ablate)
        return out.logits, out, ((tcache, taps, acache) if keep_cache else None)

    def backward(self, d_logits: np.ndarray, cache, train_trunk: bool = True) -> dict:
        p = self.params
        if self.mode == "fc":
            tcache, taps, pre, hid = cache
            d_hid, gw2, gb2 = nn.dense_backward(d_logits, hid, p["fc_head.out.weight"])
            d_pre = nn.relu_backward(d_hid, pre)
            d_fc1, gw1, gb1 = nn.dense_backward(d_pre, taps.fc1, p["fc_head.hidden.weight"])
            grads = {"fc_head.out.weight": gw2, "fc_head.out.bias": gb2,
                     "fc_head.hidden.weight": gw1, "fc_head.hidden.bias": gb1}
            d4 = d5 = None
        else:
            tcache, taps, acache = cache
            d4, d5, d_fc1, grads = attention.am_backward(d_logits, acache, p)
        if train_trunk:
            grads.update(self.backbone.backward(tcache, d4, d5, d_fc1))
        return grads

    def loss_and_grads(self, images, labels, train_trunk: bool = True):
        logits, aux, cache = self.forward(images, keep_cache=True)
        loss, d_logits = nn.softmax_xent(logits, labels)
        return loss, self.backward(d_logits, cache, train_trunk), aux

    def signature(self, images) -> list:
        """ReLU masks and pool argmaxes for kink detection in gradient checks."""
        _, _, cache = self.forward(images, keep_cache=True)
        sig = Backbone.signature(cache[0])
        if self.mode == "fc":
            sig.append(cache[2] > 0)
        return sig

    def scores(self, images, batch_size: int = 32) -> np.ndarray:
        out = [nn.softmax(self.forward(images[i:i + batch_size])[0].astype(np.float64))
               for i in range(0, len(images), batch_size)]
        return np.concatenate(out, axis=0)

    def predict(self, images, batch_size: int = 32):
        s = self.scores(images, batch_size)
        return np.argmax(s, axis=1), s

    def attention_maps(self, images):
        if self.mode != "am":
            raise ValueError("attention maps exist only in am mode")
        _, out, _ = self.forward(images)
        return out.map4, out.map5

    def state_dict(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def load_state_dict(self, tensors: dict) -> None:
        for k, v in self.params.items():
            if k not in tensors:
                raise nn.MissingTensor(k)
            if tuple(tensors[k].shape) != v.shape:
                raise nn.ShapeMismatch(f"{k}: {tuple(tensors[k].shape)} vs {v.shape}")
            v[...] = tensors[k]


def _evaluate(net: DSNet, x, y, batch_size: int):
    if len(x) == 0:
        return float("nan"), float("nan")
    logits = np.concatenate([net.forward(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)])
    loss, _ = nn.softmax_xent(logits.astype(np.float64), y)
    return loss, float(np.mean(np.argmax(logits, axis=1) == y))


def train(net: DSNet, train_x: np.ndarray, train_y, val_x: np.ndarray, val_y, config: TrainConfig,
          callback: Optional[Callable] = None):
    """Mini-batch training with early stopping on validation accuracy.

    Returns ``(net, history)``; ``net`` holds the best-validation parameters
    (ties broken by lower validation loss). ``callback(step, loss, aux)`` is
    invoked after every optimiser step.
    """
    train_y = np.asarray(train_y, dtype=np.int64)
    val_y = np.asarray(val_y, dtype=np.int64)
    if len(train_x) == 0:
        raise EmptySplit("no training samples")
    train_trunk = not config.freeze_trunk and config.lr_trunk > 0
    group_lr = {prefix: (config.lr_trunk if train_trunk else 0.0) for prefix in TRUNK_PREFIXES}
    state = nn.OptimState(kind=config.optimizer, lr=config.lr_head, momentum=config.momentum, group_lr=group_lr)
    rng = np.random.default_rng([config.seed, 1])
    has_val = len(val_x) > 0
    history = []
    best_key, best_state, best_acc, stale = None, net.state_dict(), -1.0, 0
    step_no = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_x))
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            loss, grads, aux = net.loss_and_grads(train_x[idx], train_y[idx], train_trunk)
            nn.step(net.params, grads, state)
            step_no += 1
            if callback is not None:
                callback(step_no, loss, aux)
        tr_loss, tr_acc = _evaluate(net, train_x, train_y, config.batch_size)
        va_loss, va_acc = _evaluate(net, val_x, val_y, config.batch_size) if has_val else (tr_loss, tr_acc)
        history.append({"epoch": epoch, "train_loss": tr_loss, "train_acc": tr_acc,
                        "val_loss": va_loss if has_val else None, "val_acc": va_acc if has_val else None})
        key = (va_acc, -va_loss)
        if best_key is None or key > best_key:
            best_key, best_state = key, net.state_dict()
        if va_acc > best_acc:
            best_acc, stale = va_acc, 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                log.info("early stop at epoch %d (best val acc %.3f)", epoch, best_acc)
                break
    net.load_state_dict(best_state)
    return net, history


def predict(model, images):
    """Labels and per-class scores from any trained model."""
    return model.predict(images)


# -- unified entry point ----------------------------------------------------------

class SvcClassifier:
    """Backbone fc1 features into a linear SVM."""

    mode = "svc"

    def __init__(self, backbone: Backbone, svc: SvcModel):
        self.backbone = backbone
        self.svc = svc
        self.history: list = []

    def scores(self, images) -> np.ndarray:
        return self.svc.decision_function(self.backbone.features(images))

    def predict(self, images):
        s = self.scores(images)
        return np.argmax(s, axis=1), s

    def state_dict(self) -> dict:
        out = dict(self.backbone.params)
        out.update({k: np.asarray(v, np.float32) for k, v in self.svc.tensors().items()})
        return out


class NetClassifier:
    def __init__(self, net: DSNet, history: list):
        self.net = net
        self.mode = net.mode
        self.history = history

    def predict(self, images):
        return self.net.predict(images)

    def state_dict(self) -> dict:
        return self.net.state_dict()


def fit(train_x: np.ndarray, train_y, val_x: np.ndarray, val_y, n_classes: int, config: TrainConfig,
        backbone_config: BackboneConfig = BackboneConfig(), backbone: Optional[Backbone] = None,
        callback: Optional[Callable] = None):
    """Train the head named by ``config.mode`` and return a classifier."""
    if len(train_x) == 0:
        raise EmptySplit("no training samples")
    trunk = backbone or Backbone.build(backbone_config, config.seed)
    if config.mode == "svc":
        feats = trunk.features(train_x)
        model = SvcClassifier(trunk, svc_train(feats, train_y, config.C, config.seed, n_classes))
        acc = float(np.mean(model.predict(train_x)[0] == np.asarray(train_y)))
        model.history = [{"epoch": 0, "train_acc": acc}]
        return model
    net = DSNet.build(config.mode, trunk.config, n_classes, config.seed, config.hidden, config.att_dim, trunk)
    net, history = train(net, train_x, train_y, val_x, val_y, config, callback)
    return NetClassifier(net, history)
