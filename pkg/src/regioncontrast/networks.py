"""Tiny encoder-decoder networks built on the tape engine.

Three models share one conv vocabulary (3x3 convs, stride 1 or 2, relu):

* ``LocalUNet`` — encoder widths (8, 16, 32) with two stride-2 stages, a
  mirrored decoder with nearest-neighbor upsampling and skip concats, and
  a 1x1 projection head to a per-pixel feature space (default 64-d).
* ``GlobalEncoder`` — the same encoder stack, global average pool, then a
  linear projection to an embedding (default 128-d).  Callers normalize.
* ``FusionSegmenter`` — a global branch (GlobalEncoder features decoded by
  a fresh mirrored decoder) concatenated with a LocalUNet feature map,
  then a 1x1 classifier head and per-pixel softmax.

All weights initialize He-uniform from a seeded generator; biases start
at zero.  Spatial dims must be divisible by 4 (two stride-2 stages).
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .autodiff import (Tensor, add, concat_channels, conv2d, global_avg_pool,
                       linear, nearest_upsample_2x, relu)
from .images import Image
from .losses import softmax_channels

__all__ = ["LocalUNet", "GlobalEncoder", "FusionSegmenter",
           "forward_local", "forward_global"]


def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _conv_weight(rng, c_in, c_out) -> Tensor:
    return Tensor(_he_uniform(rng, (3, 3, c_in, c_out), 9 * c_in), requires_grad=True)


def _bias(c) -> Tensor:
    return Tensor(np.zeros(c, dtype=np.float64), requires_grad=True)


def _check_divisible(h: int, w: int, who: str) -> None:
    if h % 4 != 0 or w % 4 != 0:
        raise ValueError(
            f"{who}: spatial dims must be divisible by 4 (two stride-2 stages), got {h}x{w}"
        )


class _ParamModule:
    """Shared bookkeeping: an ordered name -> Tensor parameter dict."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"state dict mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != v.data.shape:
                raise ValueError(f"parameter '{k}': shape {arr.shape} != expected {v.data.shape}")
            v.data = arr.copy()


def _encode(p: dict, prefix: str, x: Tensor):
    """Three conv stages; stages 2 and 3 downsample by 2."""
    e1 = relu(add(conv2d(x, p[prefix + "enc1_w"]), p[prefix + "enc1_b"]))
    e2 = relu(add(conv2d(e1, p[prefix + "enc2_w"], stride=2), p[prefix + "enc2_b"]))
    e3 = relu(add(conv2d(e2, p[prefix + "enc3_w"], stride=2), p[prefix + "enc3_b"]))
    return e1, e2, e3


def _decode(p: dict, prefix: str, e1: Tensor, e2: Tensor, e3: Tensor) -> Tensor:
    """Mirror of _encode with skip concats, ending in a 1x1 feature head."""
    d2 = relu(add(conv2d(concat_channels(nearest_upsample_2x(e3), e2),
                         p[prefix + "dec2_w"]), p[prefix + "dec2_b"]))
    d1 = relu(add(conv2d(concat_channels(nearest_upsample_2x(d2), e1),
                         p[prefix + "dec1_w"]), p[prefix + "dec1_b"]))
    return linear(d1, p[prefix + "head_w"], p[prefix + "head_b"])


def _init_encoder(params: dict, rng, prefix: str, c_in: int, widths: tuple) -> None:
    w1, w2, w3 = widths
    params[prefix + "enc1_w"] = _conv_weight(rng, c_in, w1)
    params[prefix + "enc1_b"] = _bias(w1)
    params[prefix + "enc2_w"] = _conv_weight(rng, w1, w2)
    params[prefix + "enc2_b"] = _bias(w2)
    params[prefix + "enc3_w"] = _conv_weight(rng, w2, w3)
    params[prefix + "enc3_b"] = _bias(w3)


def _init_decoder(params: dict, rng, prefix: str, widths: tuple, head_dim: int) -> None:
    w1, w2, w3 = widths
    params[prefix + "dec2_w"] = _conv_weight(rng, w3 + w2, w2)
    params[prefix + "dec2_b"] = _bias(w2)
    params[prefix + "dec1_w"] = _conv_weight(rng, w2 + w1, w1)
    params[prefix + "dec1_b"] = _bias(w1)
    params[prefix + "head_w"] = Tensor(_he_uniform(rng, (w1, head_dim), w1), requires_grad=True)
    params[prefix + "head_b"] = _bias(head_dim)


class LocalUNet(_ParamModule):
    """Per-pixel feature extractor: (H, W, C) -> (H, W, feature_dim)."""

    def __init__(self, feature_dim: int = 64, widths: tuple = (8, 16, 32),
                 in_channels: int = 1, seed: int = 0):
        super().__init__()
        self.feature_dim = feature_dim
        self.widths = tuple(widths)
        self.in_channels = in_channels
        self.seed = seed
        rng = np.random.default_rng(seed)
        _init_encoder(self.params, rng, "", in_channels, self.widths)
        _init_decoder(self.params, rng, "", self.widths, feature_dim)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.data.shape[:2]
        _check_divisible(h, w, "LocalUNet.forward")
        e1, e2, e3 = _encode(self.params, "", x)
        return _decode(self.params, "", e1, e2, e3)

    def clone(self) -> "LocalUNet":
        dup = LocalUNet(self.feature_dim, self.widths, self.in_channels, self.seed)
        dup.load_state_dict(self.state_dict())
        return dup


class GlobalEncoder(_ParamModule):
    """Whole-image embedding: (H, W, C) -> (embed_dim,), not yet normalized."""

    def __init__(self, embed_dim: int = 128, widths: tuple = (8, 16, 32),
                 in_channels: int = 1, seed: int = 0):
        super().__init__()
        self.embed_dim = embed_dim
        self.widths = tuple(widths)
        self.in_channels = in_channels
        self.seed = seed
        rng = np.random.default_rng(seed)
        _init_encoder(self.params, rng, "", in_channels, self.widths)
        w3 = self.widths[2]
        self.params["proj_w"] = Tensor(_he_uniform(rng, (w3, embed_dim), w3), requires_grad=True)
        self.params["proj_b"] = _bias(embed_dim)

    def stage_features(self, x: Tensor):
        h, w = x.data.shape[:2]
        _check_divisible(h, w, "GlobalEncoder")
        return _encode(self.params, "", x)

    def forward(self, x: Tensor) -> Tensor:
        _, _, e3 = self.stage_features(x)
        return linear(global_avg_pool(e3), self.params["proj_w"], self.params["proj_b"])

    def clone(self) -> "GlobalEncoder":
        dup = GlobalEncoder(self.embed_dim, self.widths, self.in_channels, self.seed)
        dup.load_state_dict(self.state_dict())
        return dup


class FusionSegmenter(_ParamModule):
    """Two-branch segmenter: global decoder + local features -> class probs.

    The global branch reuses (and keeps training) the given GlobalEncoder
    and decodes its stage features with a freshly initialized mirrored
    decoder; the local branch is the given LocalUNet.  Both feature maps
    concatenate to (H, W, 2 * feature_dim) before a 1x1 classifier head.
    """

    def __init__(self, global_encoder: GlobalEncoder, local_net: LocalUNet,
                 n_classes: int, seed: int = 0):
        super().__init__()
        if n_classes < 2:
            raise ValueError(f"FusionSegmenter: n_classes must be >= 2, got {n_classes}")
        self.genc = global_encoder
        self.local = local_net
        self.n_classes = n_classes
        self.seed = seed
        rng = np.random.default_rng(seed)
        fd = local_net.feature_dim
        _init_decoder(self.params, rng, "gdec_", global_encoder.widths, fd)
        self.params["cls_w"] = Tensor(_he_uniform(rng, (2 * fd, n_classes), 2 * fd),
                                      requires_grad=True)
        self.params["cls_b"] = _bias(n_classes)
        # expose every trainable tensor (both branches included) by name
        self._all = {}
        self._all.update({f"genc.{k}": v for k, v in global_encoder.params.items()})
        self._all.update({f"local.{k}": v for k, v in local_net.params.items()})
        self._all.update({f"head.{k}": v for k, v in self.params.items()})

    def parameters(self) -> list[Tensor]:
        return list(self._all.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._all)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._all.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self._all) - set(state)
        extra = set(state) - set(self._all)
        if missing or extra:
            raise ValueError(f"state dict mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in self._all.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != v.data.shape:
                raise ValueError(f"parameter '{k}': shape {arr.shape} != expected {v.data.shape}")
            v.data = arr.copy()

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.data.shape[:2]
        _check_divisible(h, w, "FusionSegmenter.forward")
        e1, e2, e3 = self.genc.stage_features(x)
        g_feat = _decode(self.params, "gdec_", e1, e2, e3)
        l_feat = self.local.forward(x)
        fused = concat_channels(l_feat, g_feat)
        logits = linear(fused, self.params["cls_w"], self.params["cls_b"])
        return softmax_channels(logits)


def _image_tensor(image: Image) -> Tensor:
    return Tensor(image.data)


def forward_local(net: LocalUNet, image: Image) -> Tensor:
    """Feature map (H, W, feature_dim) for an Image."""
    if image.channels != net.in_channels:
        raise ValueError(
            f"forward_local: image has {image.channels} channels, net expects {net.in_channels}"
        )
    return net.forward(_image_tensor(image))


def forward_global(net: GlobalEncoder, image: Image) -> Tensor:
    """Raw (unnormalized) embedding (embed_dim,) for an Image."""
    if image.channels != net.in_channels:
        raise ValueError(
            f"forward_global: image has {image.channels} channels, net expects {net.in_channels}"
        )
    return net.forward(_image_tensor(image))
