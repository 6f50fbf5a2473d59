"""Parameter initialization and the small convolutional backbone shared by the agents."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConfigError
from .numerics import Tensor, conv2d, max_pool2d

Params = dict  # name -> Tensor, insertion ordered


def param(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def he_conv(rng: np.random.Generator, cout: int, cin: int, k: int, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / (cin * k * k))
    return (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)


def he_linear(rng: np.random.Generator, fan_in: int, fan_out: int, dtype, gain: float = 2.0) -> np.ndarray:
    std = np.sqrt(gain / fan_in)
    return (rng.standard_normal((fan_in, fan_out)) * std).astype(dtype)


def init_backbone(rng, channels: Sequence[int], in_channels: int, dtype, prefix: str) -> Params:
    p = {}
    cin = in_channels
    for i, cout in enumerate(channels):
        p[f"{prefix}.{i}.w"] = param(he_conv(rng, cout, cin, 3, dtype), f"{prefix}.{i}.w")
        p[f"{prefix}.{i}.b"] = param(np.zeros(cout, dtype), f"{prefix}.{i}.b")
        cin = cout
    return p


def backbone_forward(x: Tensor, params: Params, n_blocks: int, prefix: str) -> Tensor:
    """Block 0: 3x3 conv + relu + 2x2 max-pool; later blocks: stride-2 3x3 conv + relu.

    A 64x64 input leaves a 4x4 map after four blocks.
    """
    h = x
    for i in range(n_blocks):
        w, b = params[f"{prefix}.{i}.w"], params[f"{prefix}.{i}.b"]
        if h.shape[1] != w.shape[1]:
            raise ConfigError(f"{prefix}.{i}: input has {h.shape[1]} channels, kernel expects {w.shape[1]}")
        if i == 0:
            h = max_pool2d(conv2d(h, w, b, stride=1, pad=1).relu(), 2)
        else:
            h = conv2d(h, w, b, stride=2, pad=1).relu()
    return h


def backbone_output_size(image_size: int, n_blocks: int) -> int:
    s = image_size // 2
    for _ in range(n_blocks - 1):
        s = (s + 2 - 3) // 2 + 1
    return s


def to_tokens(fmap: Tensor) -> Tensor:
    """``[B, d, H, W] -> [B, H*W, d]``."""
    B, d, H, W = fmap.shape
    return fmap.reshape(B, d, H * W).transpose(0, 2, 1)


def orthonormal_projection(d_in: int, d_out: int, seed: int) -> np.ndarray:
    """Seeded ``[d_in, d_out]`` matrix with orthonormal rows or columns."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((max(d_in, d_out), min(d_in, d_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if d_in >= d_out else q.T
