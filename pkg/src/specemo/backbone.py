"""VGG-style feature extractor with taps at blocks 4, 5 and the first dense layer.

Tensor names follow ``block{i}.conv{j}.weight`` / ``.bias`` (1-based) and
``fc1.weight`` / ``fc1.bias``. Conv weights are stored (out, in, 3, 3); the
dense weight is (in, out) with the flattened block-5 output in (C, H, W)
order. Keras-format VGG-16 weights need their conv kernels transposed from
(3, 3, in, out) and the fc1 rows permuted from (H, W, C) order before import.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from . import nncore as nn
from .nncore import MissingTensor, ShapeMismatch


@dataclass(frozen=True)
class BackboneConfig:
    variant: str = "mini"
    block_channels: Tuple[int, ...] = (8, 16, 32, 64, 64)
    convs_per_block: Tuple[int, ...] = (1, 1, 2, 2, 2)
    input_hw: Tuple[int, int] = (64, 64)
    fc_dim: int = 128
    # pixels in [0, 1] become (pixel * input_scale - input_mean) per channel
    input_mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    input_scale: float = 1.0
    channel_order: str = "rgb"

    def __post_init__(self):
        for name in ("block_channels", "convs_per_block", "input_hw", "input_mean"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.block_channels) != 5 or len(self.convs_per_block) != 5:
            raise ValueError("a VGG trunk has exactly 5 blocks")
        if any(v % 32 for v in self.input_hw):
            raise ValueError(f"input_hw {self.input_hw} must be divisible by 32")
        if self.channel_order not in ("rgb", "bgr"):
            raise ValueError("channel_order must be rgb or bgr")

    @classmethod
    def mini(cls, **kw) -> "BackboneConfig":
        return cls(**kw)

    @classmethod
    def full(cls, **kw) -> "BackboneConfig":
        base = dict(variant="full", block_channels=(64, 128, 256, 512, 512),
                    convs_per_block=(2, 2, 3, 3, 3), input_hw=(224, 224), fc_dim=4096)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        variant = d.pop("variant", "mini")
        return cls.full(**d) if variant == "full" else cls.mini(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @property
    def flat_dim(self) -> int:
        h, w = self.input_hw
        return self.block_channels[-1] * (h // 32) * (w // 32)


class LayerSpec(NamedTuple):
    kind: str
    name: str
    in_dim: int = 0
    out_dim: int = 0
    padding: str = ""


def layer_plan(config: BackboneConfig) -> List[LayerSpec]:
    plan, cin = [], 3
    for b, (cout, nconv) in enumerate(zip(config.block_channels, config.convs_per_block), start=1):
        for j in range(1, nconv + 1):
            plan.append(LayerSpec("conv3x3", f"block{b}.conv{j}", cin, cout, "same"))
            plan.append(LayerSpec("relu", f"block{b}.relu{j}"))
            cin = cout
        plan.append(LayerSpec("maxpool2x2", f"block{b}.pool"))
    plan.append(LayerSpec("flatten", "flatten"))
    plan.append(LayerSpec("dense", "fc1", config.flat_dim, config.fc_dim))
    plan.append(LayerSpec("relu", "fc1.relu"))
    return plan


def param_shapes(config: BackboneConfig) -> dict:
    shapes = {}
    for spec in layer_plan(config):
        if spec.kind == "conv3x3":
            shapes[f"{spec.name}.weight"] = (spec.out_dim, spec.in_dim, 3, 3)
            shapes[f"{spec.name}.bias"] = (spec.out_dim,)
        elif spec.kind == "dense":
            shapes[f"{spec.name}.weight"] = (spec.in_dim, spec.out_dim)
            shapes[f"{spec.name}.bias"] = (spec.out_dim,)
    return shapes


@dataclass
class FeatureTaps:
    block4: np.ndarray
    block5: np.ndarray
    fc1: np.ndarray


@dataclass
class _Cache:
    convs: list = field(default_factory=list)   # (name, input, preactivation)
    pools: list = field(default_factory=list)   # (block, argmax)
    flat: Optional[np.ndarray] = None
    fc_pre: Optional[np.ndarray] = None
    pool5_shape: tuple = ()


class Backbone:
    def __init__(self, config: BackboneConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: BackboneConfig = BackboneConfig(), seed: int = 0, dtype=np.float32) -> "Backbone":
        """He-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(".bias"):
                params[name] = np.zeros(shape, dtype=dtype)
            else:
                fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
                limit = np.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
        return cls(config, params)

    @property
    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype) -> "Backbone":
        return Backbone(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def preprocess(self, images) -> np.ndarray:
        """(N, H, W, 3) pixels in [0, 1] -> scaled NCHW tensor."""
        if isinstance(images, np.ndarray):
            x = images
        else:
            x = np.stack([getattr(im, "pixels", im) for im in images])
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:3] != tuple(self.config.input_hw) or x.shape[3] != 3:
            raise ShapeMismatch(f"images {x.shape[1:]} vs input_hw {self.config.input_hw}")
        dtype = self.params["fc1.weight"].dtype
        if self.config.channel_order == "bgr":
            x = x[..., ::-1]
        x = x.astype(dtype) * dtype.type(self.config.input_scale) - np.asarray(self.config.input_mean, dtype=dtype)
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2))

    def forward(self, images, keep_cache: bool = False):
        """Run the trunk; returns FeatureTaps, plus the backward cache if requested."""
        p = self.params
        x = self.preprocess(images)
        cache = _Cache()
        taps = {}
        for b, nconv in enumerate(self.config.convs_per_block, start=1):
            for j in range(1, nconv + 1):
                name = f"block{b}.conv{j}"
                z = nn.conv_forward(x, p[f"{name}.weight"], p[f"{name}.bias"])
                if keep_cache:
                    cache.convs.append((name, x, z))
                x = nn.relu_forward(z)
            if b in (4, 5):
                taps[b] = x
            x, arg = nn.maxpool_forward(x)
            if keep_cache:
                cache.pools.append((b, arg))
        cache.pool5_shape = x.shape
        flat = nn.flatten(x)
        pre = nn.dense_forward(flat, p["fc1.weight"], p["fc1.bias"])
        if keep_cache:
            cache.flat, cache.fc_pre = flat, pre
        out = FeatureTaps(taps[4], taps[5], nn.relu_forward(pre))
        return (out, cache) if keep_cache else out

    def features(self, images, batch_size: int = 32) -> np.ndarray:
        """fc1 activations, batched."""
        if isinstance(images, np.ndarray) and images.ndim == 3:
            images = images[None]
        chunks = [self.forward(images[i:i + batch_size]).fc1 for i in range(0, len(images), batch_size)]
        return np.concatenate(chunks, axis=0)

    def backward(self, cache: _Cache, grad_block4=None, grad_block5=None, grad_fc1=None) -> dict:
        """Parameter gradients given upstream gradients at any of the three taps."""
        p = self.params
        grads = {}
        n = cache.flat.shape[0]
        if grad_fc1 is None:
            grad_fc1 = np.zeros_like(cache.fc_pre)
        g = nn.relu_backward(grad_fc1, cache.fc_pre)
        gflat, grads["fc1.weight"], grads["fc1.bias"] = nn.dense_backward(g, cache.flat, p["fc1.weight"])
        g = gflat.reshape(cache.pool5_shape)
        convs = list(cache.convs)
        tap_grads = {4: grad_block4, 5: grad_block5}
        for b, arg in reversed(cache.pools):
            g = nn.maxpool_backward(g, arg)
            if tap_grads.get(b) is not None:
                g = g + tap_grads[b]
            for _ in range(self.config.convs_per_block[b - 1]):
                name, x_in, z = convs.pop()
                g = nn.relu_backward(g, z)
                g, grads[f"{name}.weight"], grads[f"{name}.bias"] = nn.conv_backward(g, x_in, p[f"{name}.weight"])
        assert n == g.shape[0]
        return grads

    @staticmethod
    def signature(cache: _Cache) -> list:
        """Piecewise-linear state: ReLU masks and pool argmaxes."""
        sig = [z > 0 for _, _, z in cache.convs]
        sig += [arg for _, arg in cache.pools]
        sig.append(cache.fc_pre > 0)
        return sig

    # -- persistence ---------------------------------------------------------

    def state_dict(self) -> dict:
        return dict(self.params)

    def load_state_dict(self, tensors: dict, strict: bool = True) -> None:
        expected = param_shapes(self.config)
        for name, shape in expected.items():
            if name not in tensors:
                raise MissingTensor(name)
            if tuple(tensors[name].shape) != tuple(shape):
                raise ShapeMismatch(f"{name}: container {tuple(tensors[name].shape)} vs expected {shape}")
        if strict:
            extra = [k for k in tensors if k not in expected and not k.startswith(("am.", "fc_head.", "svc."))]
            if extra:
                raise ShapeMismatch(f"unexpected tensors: {extra}")
        dtype = self.params["fc1.weight"].dtype
        self.params = {k: np.array(tensors[k], dtype=dtype) for k in expected}

    def save_weights(self, path, meta: Optional[dict] = None) -> None:
        nn.save_weights(path, self.params, {"backbone": self.config.to_dict(), **(meta or {})})

    def load_weights(self, path) -> None:
        tensors, _ = nn.load_weights(path)
        self.load_state_dict(tensors, strict=False)


def count_params(config: BackboneConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(config).values()))
