"""Prior-knowledge agents: the multi-scale semantic classifier and the foreground-attention visual agent."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .layers import (Params, backbone_forward, backbone_output_size, he_conv, he_linear,
                     init_backbone, param, to_tokens)
from .numerics import Tensor, concat, conv2d, global_avg_pool, linear

PROB_CLAMP = 1e-7


@dataclass
class AgentConfig:
    num_classes: int = 5
    image_size: int = 64
    in_channels: int = 1
    channels: tuple = (16, 32, 64, 64)
    kernel_sizes: tuple = (3, 5, 7)
    branch_channels: int = 16
    d: int = 64
    se_reduction: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.kernel_sizes = tuple(self.kernel_sizes)
        if self.num_classes < 1 or self.d < 1:
            raise ConfigError("num_classes and d must be positive")
        if self.channels[-1] % self.se_reduction:
            raise ConfigError(f"se_reduction {self.se_reduction} does not divide {self.channels[-1]} channels")

    @property
    def spatial(self) -> int:
        return backbone_output_size(self.image_size, len(self.channels))

    @property
    def hw(self) -> int:
        return self.spatial ** 2


@dataclass
class SemanticOutput:
    per_class_features: Tensor  # B x C x d
    logits: Tensor  # B x C
    probs: Tensor  # B x C
    spatial_features: Tensor  # B x HW x d


@dataclass
class VisualOutput:
    attended_features: Tensor  # B x HW x d
    channel_weights: Tensor  # B x Ch
    position_map: Tensor  # B x H' x W'
    logits: Tensor
    probs: Tensor


def _check_shapes(params: Params, expected: dict) -> None:
    for name, shape in expected.items():
        if name not in params:
            raise ConfigError(f"missing parameter {name}")
        if params[name].shape != shape:
            raise ConfigError(f"parameter {name} has shape {params[name].shape}, config implies {shape}")


def prior_loss(probs: Tensor, labels) -> Tensor:
    """Mean per-class binary cross-entropy of sigmoid outputs against multi-hot labels."""
    t = np.asarray(labels, dtype=probs.dtype)
    p = probs.clip(PROB_CLAMP, 1 - PROB_CLAMP)
    return -(p.log() * t + (1.0 - p).log() * (1.0 - t)).mean()


# -- semantic agent -----------------------------------------------------------

class SemanticAgent:
    prefix = "semantic"

    def __init__(self, cfg: AgentConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dt = np.dtype(cfg.dtype)
        p = init_backbone(rng, cfg.channels, cfg.in_channels, dt, f"{self.prefix}.backbone")
        ch = cfg.channels[-1]
        for k in cfg.kernel_sizes:
            p[f"{self.prefix}.ms.k{k}.w"] = param(he_conv(rng, cfg.branch_channels, ch, k, dt), f"ms.k{k}.w")
            p[f"{self.prefix}.ms.k{k}.b"] = param(np.zeros(cfg.branch_channels, dt), f"ms.k{k}.b")
        cat = cfg.branch_channels * len(cfg.kernel_sizes)
        p[f"{self.prefix}.proj.w"] = param(he_conv(rng, cfg.d, cat, 1, dt), "proj.w")
        p[f"{self.prefix}.proj.b"] = param(np.zeros(cfg.d, dt), "proj.b")
        p[f"{self.prefix}.head.w"] = param(he_linear(rng, cfg.d, cfg.num_classes, dt, gain=1.0).T.copy(), "head.w")
        p[f"{self.prefix}.head.b"] = param(np.zeros(cfg.num_classes, dt), "head.b")
        for k, t in p.items():
            t.name = k
        self.params: Params = p
        self.check()

    def expected_shapes(self) -> dict:
        cfg, P = self.cfg, self.prefix
        out = {}
        cin = cfg.in_channels
        for i, c in enumerate(cfg.channels):
            out[f"{P}.backbone.{i}.w"] = (c, cin, 3, 3)
            out[f"{P}.backbone.{i}.b"] = (c,)
            cin = c
        for k in cfg.kernel_sizes:
            out[f"{P}.ms.k{k}.w"] = (cfg.branch_channels, cin, k, k)
            out[f"{P}.ms.k{k}.b"] = (cfg.branch_channels,)
        out[f"{P}.proj.w"] = (cfg.d, cfg.branch_channels * len(cfg.kernel_sizes), 1, 1)
        out[f"{P}.proj.b"] = (cfg.d,)
        out[f"{P}.head.w"] = (cfg.num_classes, cfg.d)
        out[f"{P}.head.b"] = (cfg.num_classes,)
        return out

    def check(self) -> None:
        _check_shapes(self.params, self.expected_shapes())

    @property
    def head_weight(self) -> np.ndarray:
        """Per-class weight vectors, ``C x d``."""
        return self.params[f"{self.prefix}.head.w"].data

    def forward(self, x: Tensor) -> SemanticOutput:
        return semantic_forward(x, self.params, self.cfg)


def semantic_forward(x: Tensor, params: Params, cfg: AgentConfig) -> SemanticOutput:
    P = SemanticAgent.prefix
    fmap = backbone_forward(x, params, len(cfg.channels), f"{P}.backbone")
    branches = [conv2d(fmap, params[f"{P}.ms.k{k}.w"], params[f"{P}.ms.k{k}.b"], pad=k // 2).relu()
                for k in cfg.kernel_sizes]
    ms = conv2d(concat(branches, axis=1), params[f"{P}.proj.w"], params[f"{P}.proj.b"])
    spatial = to_tokens(ms)  # B x HW x d
    pooled = global_avg_pool(ms)  # B x d
    W, b = params[f"{P}.head.w"], params[f"{P}.head.b"]
    # f_s^c = pooled * w_c; logit_c = sum_k f_s^c[k] + b_c
    per_class = pooled.reshape(pooled.shape[0], 1, cfg.d) * W
    logits = per_class.sum(axis=-1) + b
    return SemanticOutput(per_class, logits, logits.sigmoid(), spatial)


# -- visual agent -------------------------------------------------------------

def fab_channel_attention(fmap: Tensor, params: Params, prefix: str = "visual.fab"):
    """Squeeze-and-excitation gating: returns the channel-rescaled map and the gates."""
    B, Ch = fmap.shape[:2]
    w1 = params[f"{prefix}.fc1.w"]
    if Ch % w1.shape[1]:
        raise ConfigError(f"reduction width {w1.shape[1]} does not divide {Ch} channels")
    squeeze = global_avg_pool(fmap)
    hidden = linear(squeeze, w1, params[f"{prefix}.fc1.b"]).relu()
    gates = linear(hidden, params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"]).sigmoid()
    return fmap * gates.reshape(B, Ch, 1, 1), gates


def fab_position_attention(fmap: Tensor, params: Params, prefix: str = "visual.fab"):
    """Sigmoid-gated single-channel spatial map applied multiplicatively."""
    pm = conv2d(fmap, params[f"{prefix}.pos.w"], params[f"{prefix}.pos.b"]).sigmoid()
    out = fmap * pm
    B, _, H, W = pm.shape
    return out, pm.reshape(B, H, W)


class VisualAgent:
    prefix = "visual"

    def __init__(self, cfg: AgentConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dt = np.dtype(cfg.dtype)
        P = self.prefix
        p = init_backbone(rng, cfg.channels, cfg.in_channels, dt, f"{P}.backbone")
        ch = cfg.channels[-1]
        r = ch // cfg.se_reduction
        p[f"{P}.fab.fc1.w"] = param(he_linear(rng, ch, r, dt), "fab.fc1.w")
        p[f"{P}.fab.fc1.b"] = param(np.zeros(r, dt), "fab.fc1.b")
        p[f"{P}.fab.fc2.w"] = param(he_linear(rng, r, ch, dt, gain=1.0), "fab.fc2.w")
        p[f"{P}.fab.fc2.b"] = param(np.zeros(ch, dt), "fab.fc2.b")
        p[f"{P}.fab.pos.w"] = param(he_conv(rng, 1, ch, 1, dt) * 0.5, "fab.pos.w")
        p[f"{P}.fab.pos.b"] = param(np.zeros(1, dt), "fab.pos.b")
        p[f"{P}.proj.w"] = param(he_linear(rng, ch, cfg.d, dt), "proj.w")
        p[f"{P}.proj.b"] = param(np.zeros(cfg.d, dt), "proj.b")
        p[f"{P}.head.w"] = param(he_linear(rng, cfg.d, cfg.num_classes, dt, gain=1.0), "head.w")
        p[f"{P}.head.b"] = param(np.zeros(cfg.num_classes, dt), "head.b")
        for k, t in p.items():
            t.name = k
        self.params: Params = p
        self.check()

    def expected_shapes(self) -> dict:
        cfg, P = self.cfg, self.prefix
        out = {}
        cin = cfg.in_channels
        for i, c in enumerate(cfg.channels):
            out[f"{P}.backbone.{i}.w"] = (c, cin, 3, 3)
            out[f"{P}.backbone.{i}.b"] = (c,)
            cin = c
        r = cin // cfg.se_reduction
        out.update({
            f"{P}.fab.fc1.w": (cin, r), f"{P}.fab.fc1.b": (r,),
            f"{P}.fab.fc2.w": (r, cin), f"{P}.fab.fc2.b": (cin,),
            f"{P}.fab.pos.w": (1, cin, 1, 1), f"{P}.fab.pos.b": (1,),
            f"{P}.proj.w": (cin, cfg.d), f"{P}.proj.b": (cfg.d,),
            f"{P}.head.w": (cfg.d, cfg.num_classes), f"{P}.head.b": (cfg.num_classes,),
        })
        return out

    def check(self) -> None:
        _check_shapes(self.params, self.expected_shapes())

    def forward(self, x: Tensor) -> VisualOutput:
        return visual_forward(x, self.params, self.cfg)


def visual_forward(x: Tensor, params: Params, cfg: AgentConfig) -> VisualOutput:
    P = VisualAgent.prefix
    fmap = backbone_forward(x, params, len(cfg.channels), f"{P}.backbone")
    reweighted, gates = fab_channel_attention(fmap, params, f"{P}.fab")
    attended, pos_map = fab_position_attention(reweighted, params, f"{P}.fab")
    tokens = linear(to_tokens(attended), params[f"{P}.proj.w"], params[f"{P}.proj.b"])
    logits = linear(tokens.mean(axis=1), params[f"{P}.head.w"], params[f"{P}.head.b"])
    return VisualOutput(tokens, gates, pos_map, logits, logits.sigmoid())
