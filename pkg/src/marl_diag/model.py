"""The three-agent bundle: prior agents, diagnostic agent, and the frozen target copy."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .agents import AgentConfig, SemanticAgent, VisualAgent
from .diagnostic import (DecoderConfig, DiagnosticOutput, LabelEmbeddings, diagnostic_forward,
                         init_decoder_params, init_label_embeddings)
from .errors import ShapeMismatchError
from .layers import backbone_forward, he_linear, init_backbone, param, to_tokens
from .numerics import Tensor, linear, no_grad

log = logging.getLogger(__name__)

EMBED_KEYS = ("diagnostic.embed.q0", "diagnostic.embed.pos_label", "diagnostic.embed.pos_feat")


@dataclass
class ModelConfig:
    agent: AgentConfig = field(default_factory=AgentConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    use_semantic: bool = True
    use_visual: bool = True
    cold_start: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


class AgentBundle:
    """Parameters of every agent, grouped as ``semantic``, ``visual`` and ``diagnostic``.

    With both prior agents switched off, the diagnostic agent owns a plain
    backbone so it still has image features to attend over.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        ac, dc = cfg.agent, cfg.decoder
        dt = np.dtype(ac.dtype)
        seeds = np.random.SeedSequence(seed).generate_state(5)
        self.semantic = SemanticAgent(ac, int(seeds[0])) if cfg.use_semantic else None
        self.visual = VisualAgent(ac, int(seeds[1])) if cfg.use_visual else None
        in_dims = {}
        if self.semantic:
            in_dims["semantic"] = ac.d
        if self.visual:
            in_dims["visual"] = ac.d
        self.plain: dict = {}
        if not in_dims:
            rng = np.random.default_rng(int(seeds[2]))
            self.plain = init_backbone(rng, ac.channels, ac.in_channels, dt, "diagnostic.plain.backbone")
            self.plain["diagnostic.plain.proj.w"] = param(he_linear(rng, ac.channels[-1], ac.d, dt), "")
            self.plain["diagnostic.plain.proj.b"] = param(np.zeros(ac.d, dt), "")
            for k, t in self.plain.items():
                t.name = k
            in_dims["plain"] = ac.d
        self.sources = sorted(in_dims)
        self.diag = init_decoder_params(dc, ac.num_classes, in_dims, int(seeds[3]), dt)
        self.embeds: LabelEmbeddings | None = None
        if dc.use_decoder:
            head = self.semantic.head_weight if self.semantic is not None else None
            self.embeds = init_label_embeddings(head, ac.num_classes, ac.hw, dc.d, int(seeds[4]),
                                                cold_start=cfg.cold_start, dtype=dt)
        self._embed_seed = int(seeds[4])
        self.target: dict[str, np.ndarray] = {}
        self.syncs = 0
        self.sync_target()
        self.syncs = 0

    # -- parameter groups -----------------------------------------------------

    def diagnostic_params(self) -> dict:
        p = dict(self.plain)
        p.update(self.diag)
        if self.embeds is not None:
            p.update(zip(EMBED_KEYS, (self.embeds.q0, self.embeds.pos_label, self.embeds.pos_feat)))
        return p

    def groups(self) -> dict:
        """Ordered so the diagnostic agent updates before the priors are fine-tuned."""
        g = {"diagnostic": self.diagnostic_params()}
        if self.semantic:
            g["semantic"] = self.semantic.params
        if self.visual:
            g["visual"] = self.visual.params
        return g

    def named_parameters(self) -> dict:
        out = {}
        for params in self.groups().values():
            out.update(params)
        return out

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None

    def reinit_label_embeddings(self) -> None:
        """Re-derive the label queries from the (possibly pretrained) semantic head."""
        if self.embeds is None:
            return
        ac = self.cfg.agent
        head = self.semantic.head_weight if self.semantic is not None else None
        fresh = init_label_embeddings(head, ac.num_classes, ac.hw, self.cfg.decoder.d, self._embed_seed,
                                      cold_start=self.cfg.cold_start, dtype=np.dtype(ac.dtype))
        self.embeds.q0.data = fresh.q0.data
        self.target["diagnostic.embed.q0"] = fresh.q0.data.copy()

    # -- forward passes -------------------------------------------------------

    def features(self, x):
        """Prior-agent outputs for a normalized ``B x 1 x H x W`` batch.

        Returns ``(feats, semantic_out, visual_out)`` with ``feats`` mapping each
        source to a ``B x HW x d`` tensor.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        feats, sem, vis = {}, None, None
        if self.semantic:
            sem = self.semantic.forward(x)
            feats["semantic"] = sem.spatial_features
        if self.visual:
            vis = self.visual.forward(x)
            feats["visual"] = vis.attended_features
        if self.plain:
            ac = self.cfg.agent
            fmap = backbone_forward(x, self.plain, len(ac.channels), "diagnostic.plain.backbone")
            feats["plain"] = linear(to_tokens(fmap), self.plain["diagnostic.plain.proj.w"],
                                    self.plain["diagnostic.plain.proj.b"])
        return feats, sem, vis

    def diagnose(self, feats: dict, use_target: bool = False) -> DiagnosticOutput:
        if not use_target:
            return diagnostic_forward(feats, self.embeds, self.diag, self.cfg.decoder)
        params = {k: Tensor(self.target[k]) for k in self.diag}
        embeds = None
        if self.embeds is not None:
            embeds = LabelEmbeddings(*(Tensor(self.target[k]) for k in EMBED_KEYS))
        with no_grad():
            return diagnostic_forward(feats, embeds, params, self.cfg.decoder)

    def sync_target(self) -> None:
        self.target = {k: t.data.copy() for k, t in self.diagnostic_params().items()}
        self.syncs += 1

    def predict(self, dataset, stats, batch_size: int = 128) -> np.ndarray:
        from .data import batch_arrays

        out = []
        dtype = np.dtype(self.cfg.agent.dtype)
        with no_grad():
            for i in range(0, len(dataset), batch_size):
                idx = np.arange(i, min(i + batch_size, len(dataset)))
                x, _ = batch_arrays(dataset, idx, stats, train_mode=False, dtype=dtype)
                feats, _, _ = self.features(x)
                out.append(self.diagnose(feats).probs.data)
        return np.concatenate(out).astype(np.float64)

    def attention_maps(self, image: np.ndarray) -> dict:
        """Decoder attention (``layers x heads x C x HW``) and position map for one normalized image."""
        x = np.asarray(image, dtype=np.dtype(self.cfg.agent.dtype))[None, None]
        with no_grad():
            feats, _, vis = self.features(x)
            out = self.diagnose(feats)
        return {
            "attention": None if out.attention is None else out.attention[0].astype(np.float64),
            "position_map": None if vis is None else vis.position_map.data[0].astype(np.float64),
        }

    # -- state ----------------------------------------------------------------

    def state_dict(self) -> dict:
        state = {k: t.data for k, t in self.named_parameters().items()}
        state.update({f"target.{k}": v for k, v in self.target.items()})
        return state

    def load_state(self, state: dict, strict: bool = True, priors_only: bool = False) -> list:
        """Copy stored arrays into this bundle.

        Prior-agent class heads whose class count differs are left at their fresh
        initialization (returned in the list). Any other shape mismatch raises,
        naming the tensor; a width mismatch names both widths.
        """
        reinit = []
        d_here = self.cfg.agent.d
        targets = self.named_parameters()
        if priors_only:
            targets = {k: v for k, v in targets.items() if k.startswith(("semantic.", "visual."))}
        for name, t in targets.items():
            if name not in state:
                if strict:
                    raise ShapeMismatchError(f"checkpoint has no tensor {name}")
                continue
            arr = np.asarray(state[name])
            if arr.shape == t.shape:
                t.data = arr.astype(t.dtype, copy=True)
                continue
            is_head = ".head." in name and name.startswith(("semantic.", "visual."))
            if is_head and _class_count_only(name, arr.shape, t.shape, d_here):
                log.info("re-initializing %s: checkpoint shape %s, model shape %s", name, arr.shape, t.shape)
                reinit.append(name)
                continue
            d_ckpt = _guess_width(name, arr.shape)
            if d_ckpt is not None and d_ckpt != d_here:
                raise ShapeMismatchError(f"{name}: checkpoint feature width d={d_ckpt}, model d={d_here}")
            raise ShapeMismatchError(f"{name}: checkpoint shape {arr.shape} does not match model shape {t.shape}")
        if not priors_only:
            for k in self.target:
                key = f"target.{k}"
                if key in state:
                    arr = np.asarray(state[key])
                    if arr.shape != self.target[k].shape:
                        raise ShapeMismatchError(f"{key}: checkpoint shape {arr.shape}, model {self.target[k].shape}")
                    self.target[k] = arr.astype(self.target[k].dtype, copy=True)
        return reinit


def _class_count_only(name: str, ckpt_shape, model_shape, d: int) -> bool:
    if len(ckpt_shape) != len(model_shape):
        return False
    if name.endswith(".b"):
        return True
    # semantic head is C x d, visual head is d x C
    if name.startswith("semantic."):
        return ckpt_shape[1] == model_shape[1] == d
    return ckpt_shape[0] == model_shape[0] == d


def _guess_width(name: str, shape) -> int | None:
    if name.endswith("proj.b"):
        return shape[0]
    if name.startswith("semantic.") and name.endswith("proj.w"):
        return shape[0]
    if name.startswith("visual.") and name.endswith("proj.w"):
        return shape[1]
    return None
