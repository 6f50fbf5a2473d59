"""Label-query transformer decoder (cross-attention only) and the asymmetric focal loss."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .agents import PROB_CLAMP
from .errors import ConfigError
from .layers import Params, he_linear, orthonormal_projection, param
from .numerics import Tensor, concat, layer_norm, linear, matmul, softmax

POS_STD = 0.02


@dataclass
class DecoderConfig:
    layers: int = 2
    heads: int = 4
    d: int = 64
    ffn_mult: int = 4
    fusion: str = "sum"  # or "concat"
    use_decoder: bool = True  # False: linear head over pooled fused features
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("decoder needs at least one layer")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.fusion not in ("sum", "concat"):
            raise ConfigError(f"unknown fusion {self.fusion!r}")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


@dataclass
class LabelEmbeddings:
    q0: Tensor  # C x d
    pos_label: Tensor  # C x d
    pos_feat: Tensor  # HW x d


@dataclass
class DiagnosticOutput:
    fused: Tensor  # B x C x d
    logits: Tensor  # B x C
    probs: Tensor
    attention: np.ndarray | None  # B x layers x heads x C x HW


def init_label_embeddings(semantic_head: np.ndarray | None, num_classes: int, hw: int, d: int,
                          seed: int = 0, cold_start: bool = False, dtype="float32") -> LabelEmbeddings:
    """Queries start from the semantic agent's per-class head weights unless ``cold_start``.

    Head widths different from ``d`` go through a seeded orthonormal projection.
    """
    rng = np.random.default_rng(seed)
    pos_label = rng.normal(0.0, POS_STD, (num_classes, d))
    pos_feat = rng.normal(0.0, POS_STD, (hw, d))
    if cold_start or semantic_head is None:
        q0 = rng.normal(0.0, POS_STD, (num_classes, d))
    else:
        head = np.asarray(semantic_head, dtype=np.float64)
        if head.shape[0] != num_classes:
            raise ConfigError(f"semantic head has {head.shape[0]} classes, decoder expects {num_classes}")
        if head.shape[1] != d:
            head = head @ orthonormal_projection(head.shape[1], d, seed)
        q0 = head
    dt = np.dtype(dtype)
    return LabelEmbeddings(param(q0.astype(dt), "diagnostic.embed.q0"),
                           param(pos_label.astype(dt), "diagnostic.embed.pos_label"),
                           param(pos_feat.astype(dt), "diagnostic.embed.pos_feat"))


def init_decoder_params(cfg: DecoderConfig, num_classes: int, in_dims: dict, seed: int = 0,
                        dtype="float32") -> Params:
    """Fusion projections, decoder layers and the per-class head.

    ``in_dims`` maps each feature source name (``semantic``, ``visual``, ``plain``) to its width.
    """
    rng = np.random.default_rng(seed)
    dt = np.dtype(dtype)
    d = cfg.d
    p: Params = {}
    if cfg.fusion == "sum":
        for src, width in in_dims.items():
            p[f"diagnostic.fuse.{src}.w"] = param(he_linear(rng, width, d, dt, gain=1.0), "")
            p[f"diagnostic.fuse.{src}.b"] = param(np.zeros(d, dt), "")
    else:
        width = sum(in_dims.values())
        p["diagnostic.fuse.cat.w"] = param(he_linear(rng, width, d, dt, gain=1.0), "")
        p["diagnostic.fuse.cat.b"] = param(np.zeros(d, dt), "")
    if cfg.use_decoder:
        for layer in range(cfg.layers):
            pre = f"diagnostic.layer{layer}"
            for m in ("wq", "wk", "wv", "wo"):
                p[f"{pre}.{m}"] = param(he_linear(rng, d, d, dt, gain=1.0), "")
            p[f"{pre}.ln.g"] = param(np.ones(d, dt), "")
            p[f"{pre}.ln.b"] = param(np.zeros(d, dt), "")
            hid = cfg.ffn_mult * d
            p[f"{pre}.ffn.w1"] = param(he_linear(rng, d, hid, dt), "")
            p[f"{pre}.ffn.b1"] = param(np.zeros(hid, dt), "")
            p[f"{pre}.ffn.w2"] = param(he_linear(rng, hid, d, dt, gain=1.0) * 0.5, "")
            p[f"{pre}.ffn.b2"] = param(np.zeros(d, dt), "")
        p["diagnostic.head.w"] = param(he_linear(rng, d, num_classes, dt, gain=1.0).T.copy(), "")
        p["diagnostic.head.b"] = param(np.zeros(num_classes, dt), "")
    else:
        p["diagnostic.linear_head.w"] = param(he_linear(rng, d, num_classes, dt, gain=1.0), "")
        p["diagnostic.linear_head.b"] = param(np.zeros(num_classes, dt), "")
    for k, t in p.items():
        t.name = k
    return p


def fuse_features(feats: dict, params: Params, cfg: DecoderConfig) -> Tensor:
    """Project each prior feature map (``B x HW x width``) to ``d`` and combine them."""
    names = sorted(feats)
    if not names:
        raise ConfigError("diagnostic agent needs at least one feature source")
    if cfg.fusion == "sum":
        out = None
        for n in names:
            term = linear(feats[n], params[f"diagnostic.fuse.{n}.w"], params[f"diagnostic.fuse.{n}.b"])
            out = term if out is None else out + term
        return out
    x = concat([feats[n] for n in names], axis=-1)
    return linear(x, params["diagnostic.fuse.cat.w"], params["diagnostic.fuse.cat.b"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, N, d = x.shape
    return x.reshape(B, N, heads, d // heads).transpose(0, 2, 1, 3)


def decoder_layer_forward(L_prev: Tensor, feat: Tensor, embeds: LabelEmbeddings, params: Params,
                          cfg: DecoderConfig, layer: int):
    """One cross-attention decoder layer; no self-attention among label queries.

    ``L_prev`` is ``B x C x d`` and ``feat`` is ``B x HW x d``. Returns the updated
    queries and the ``B x heads x C x HW`` attention weights.
    """
    pre = f"diagnostic.layer{layer}"
    B, C, d = L_prev.shape
    HW = feat.shape[1]
    h = cfg.heads
    q = matmul(L_prev + embeds.pos_label, params[f"{pre}.wq"])
    k = matmul(feat + embeds.pos_feat, params[f"{pre}.wk"])
    v = matmul(feat, params[f"{pre}.wv"])
    qh, kh, vh = _split_heads(q, h), _split_heads(k, h), _split_heads(v, h)
    scores = matmul(qh, kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(cfg.head_dim))
    attn = softmax(scores, axis=-1)  # B x h x C x HW
    ctx = matmul(attn, vh).transpose(0, 2, 1, 3).reshape(B, C, d)
    F_dot = matmul(ctx, params[f"{pre}.wo"]) + L_prev
    normed = layer_norm(F_dot, params[f"{pre}.ln.g"], params[f"{pre}.ln.b"], cfg.ln_eps)
    hidden = linear(normed, params[f"{pre}.ffn.w1"], params[f"{pre}.ffn.b1"]).relu()
    F = linear(hidden, params[f"{pre}.ffn.w2"], params[f"{pre}.ffn.b2"]) + F_dot
    assert attn.shape == (B, h, C, HW)
    return F, attn


def diagnostic_forward(prior_feats: dict, embeds: LabelEmbeddings | None, params: Params,
                       cfg: DecoderConfig) -> DiagnosticOutput:
    f = fuse_features(prior_feats, params, cfg)
    B = f.shape[0]
    if not cfg.use_decoder:
        pooled = f.mean(axis=1)
        logits = linear(pooled, params["diagnostic.linear_head.w"], params["diagnostic.linear_head.b"])
        fused = pooled.reshape(B, 1, cfg.d)
        return DiagnosticOutput(fused, logits, logits.sigmoid(), None)
    C, d = embeds.q0.shape
    if f.shape[1] != embeds.pos_feat.shape[0]:
        raise ConfigError(f"feature map has {f.shape[1]} positions, pos_feat has {embeds.pos_feat.shape[0]}")
    L = embeds.q0 * np.ones((B, 1, 1), dtype=embeds.q0.dtype)
    maps = []
    for layer in range(cfg.layers):
        L, attn = decoder_layer_forward(L, f, embeds, params, cfg, layer)
        maps.append(attn.data)
    W, b = params["diagnostic.head.w"], params["diagnostic.head.b"]
    logits = (L * W).sum(axis=-1) + b
    return DiagnosticOutput(L, logits, logits.sigmoid(), np.stack(maps, axis=1))


def asl_loss(probs: Tensor, labels, gamma_pos: float = 0.0, gamma_neg: float = 1.0) -> Tensor:
    """Asymmetric focal loss, nonnegative, averaged over batch and classes.

    Positive entries contribute ``(1-p)^gamma_pos * -log p``; negative entries
    ``p^gamma_neg * -log(1-p)``.
    """
    if gamma_pos < 0 or gamma_neg < 0:
        raise ConfigError("focusing exponents must be nonnegative")
    y = np.asarray(labels, dtype=probs.dtype)
    p = probs.clip(PROB_CLAMP, 1 - PROB_CLAMP)
    q = 1.0 - p
    pos = q ** gamma_pos * p.log() if gamma_pos else p.log()
    neg = p ** gamma_neg * q.log() if gamma_neg else q.log()
    return -(pos * y + neg * (1.0 - y)).mean()
