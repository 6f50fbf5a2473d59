"""Training loop: prior pretraining, the episode/step loop with replay and TD updates, checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .agents import AgentConfig, prior_loss
from .checkpoint import Checkpoint, save_checkpoint
from .data import Dataset, DatasetStats, batch_arrays, load_dataset_dir, load_manifest, split
from .diagnostic import DecoderConfig, asl_loss
from .errors import ConfigError, TrainingDivergedError
from .evaluation import MetricsReport, evaluate, export_attention
from .model import AgentBundle, ModelConfig
from .numerics import Tensor
from .optim import AdamW, cosine_lr
from .rl import (EpsilonSchedule, ReplayBuffer, RLConfig, Transition, compute_reward, epsilon_at,
                 q_values, select_actions_batch, td_loss, td_target, total_loss)

log = logging.getLogger(__name__)

SEED_STREAMS = ("init", "order", "augment", "policy", "replay", "bootstrap")
DEFAULT_SPLIT = (2000 / 2600, 100 / 2600, 500 / 2600)


@dataclass
class RunConfig:
    """Flat run settings; round-trips through JSON."""

    data: str = ""
    pretrain_data: str | None = None
    out_dir: str = "runs/default"
    split: tuple = DEFAULT_SPLIT
    split_seed: int = 0
    seed: int = 1
    # model
    channels: tuple = (16, 32, 64, 64)
    kernel_sizes: tuple = (3, 5, 7)
    branch_channels: int = 16
    d: int = 64
    se_reduction: int = 4
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    fusion: str = "sum"
    use_decoder: bool = True
    use_semantic: bool = True
    use_visual: bool = True
    cold_start: bool = False
    dtype: str = "float32"
    # reinforcement learning
    rl: bool = True
    gamma: float = 0.9
    tau: float = 0.5
    lambda_p: float = 1.0
    lambda_ptd: float = 1.0
    lambda_td: float = 1.0
    lambda_d: float = 1.0
    eps_min: float = 0.2
    eps_steps: int = 0  # 0: decay over the whole run
    target_sync: int = 0  # 0: sync at the start of every episode
    replay_capacity: int = 4096
    replay_batch: int = 0  # 0: same as batch_size
    asl_gamma_pos: float = 0.0
    asl_gamma_neg: float = 1.0
    # optimization
    lr: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 32
    epochs: int = 20
    steps_per_episode: int = 1
    update_mode: str = "joint"  # or "separate"
    pretrain_epochs: int = 3
    # evaluation
    val_resamples: int = 200
    test_resamples: int = 1000
    export_attention: bool = True

    def __post_init__(self):
        self.split = tuple(float(r) for r in self.split)
        self.channels = tuple(int(c) for c in self.channels)
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        if self.update_mode not in ("joint", "separate"):
            raise ConfigError(f"update_mode must be 'joint' or 'separate', got {self.update_mode!r}")
        for name in ("batch_size", "epochs", "steps_per_episode", "replay_capacity"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay nonnegative")
        if not 0 <= self.eps_min <= 1:
            raise ConfigError("eps_min must lie in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        out = asdict(self)
        for k in ("split", "channels", "kernel_sizes"):
            out[k] = list(out[k])
        return out

    def seeds(self) -> dict:
        """One independent seed per random stream, derived from ``seed``."""
        state = np.random.SeedSequence(self.seed).generate_state(len(SEED_STREAMS))
        return {name: int(s) for name, s in zip(SEED_STREAMS, state)}

    def model_config(self, num_classes: int, image_size: int) -> ModelConfig:
        agent = AgentConfig(num_classes=num_classes, image_size=image_size, channels=self.channels,
                            kernel_sizes=self.kernel_sizes, branch_channels=self.branch_channels, d=self.d,
                            se_reduction=self.se_reduction, dtype=self.dtype)
        dec = DecoderConfig(layers=self.layers, heads=self.heads, d=self.d, ffn_mult=self.ffn_mult,
                            fusion=self.fusion, use_decoder=self.use_decoder)
        return ModelConfig(agent, dec, self.use_semantic, self.use_visual, self.cold_start)

    def rl_config(self) -> RLConfig:
        if not self.rl:
            return RLConfig(self.gamma, self.tau, self.lambda_p, 0.0, 0.0, self.lambda_d, self.target_sync)
        return RLConfig(self.gamma, self.tau, self.lambda_p, self.lambda_ptd, self.lambda_td, self.lambda_d,
                        self.target_sync)


@dataclass
class Counters:
    step: int = 0
    episode: int = 0
    epoch: int = 0
    replay_pushes: int = 0
    replay_updates: int = 0
    replay_skips: int = 0
    target_syncs: int = 0
    explored: int = 0
    selections: int = 0


@dataclass
class TrainResult:
    run_dir: Path
    history: list
    test: MetricsReport | None
    counters: Counters
    bundle: AgentBundle = field(repr=False)
    stats: DatasetStats | None = None
    update_order: list = field(default_factory=list)


# -- helpers ------------------------------------------------------------------

def _prepare_out_dir(out_dir, overwrite: bool) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise FileExistsError(f"{out} already holds a run; pass overwrite to replace it")
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    return out


def load_splits(cfg: RunConfig):
    path = Path(cfg.data)
    if not path.exists():
        raise FileNotFoundError(f"dataset path {path} does not exist")
    ds = load_dataset_dir(path) if path.is_dir() else load_manifest(path)
    return split(ds, cfg.split, cfg.split_seed)


def checkpoint_state(bundle: AgentBundle, opt: AdamW | None, counters: Counters, cfg: RunConfig,
                     stats: DatasetStats | None) -> tuple[dict, dict]:
    tensors = {k: v.copy() for k, v in bundle.state_dict().items()}
    if opt is not None:
        tensors.update({k: v.copy() for k, v in opt.state_dict().items()})
    meta = {"config": cfg.to_dict(), "counters": asdict(counters), "seeds": cfg.seeds(),
            "model": bundle.cfg.to_dict()}
    if stats is not None:
        meta["stats"] = {"mean": stats.mean, "std": stats.std}
    return tensors, meta


def bundle_from_checkpoint(ckpt: Checkpoint) -> tuple[AgentBundle, DatasetStats | None]:
    """Rebuild a bundle exactly as saved."""
    m = ckpt.meta["model"]
    mc = ModelConfig(AgentConfig(**m["agent"]), DecoderConfig(**m["decoder"]), m["use_semantic"],
                     m["use_visual"], m["cold_start"])
    bundle = AgentBundle(mc, seed=0)
    bundle.load_state(ckpt.tensors, strict=True)
    st = ckpt.meta.get("stats")
    return bundle, (DatasetStats(st["mean"], st["std"]) if st else None)


def sync_target(bundle: AgentBundle) -> None:
    bundle.sync_target()


# -- prior pretraining --------------------------------------------------------

def _prior_losses(sem, vis, y, eps: float, rlc: RLConfig, rng, use_td: bool):
    l_p, l_ptd = [], []
    for out in (sem, vis):
        if out is None:
            continue
        l_p.append(prior_loss(out.probs, y))
        if use_td:
            a, _ = select_actions_batch(out.probs.data, eps, rlc.tau, rng)
            r = compute_reward(a, y)
            l_ptd.append(td_loss(q_values(out.logits, a), td_target(r, out.logits.data, rlc.gamma)))
    return l_p, l_ptd


def pretrain_priors(cfg: RunConfig, domain: Dataset, out_path=None) -> Checkpoint:
    """Fit the semantic and visual agents on ``domain`` with the prior losses only."""
    if not (cfg.use_semantic or cfg.use_visual):
        raise ConfigError("pretraining needs at least one prior agent")
    seeds = cfg.seeds()
    H = domain.image_size[0]
    bundle = AgentBundle(cfg.model_config(domain.num_classes, H), seed=seeds["init"])
    stats = DatasetStats.from_dataset(domain)
    rlc = cfg.rl_config()
    groups = {k: v for k, v in bundle.groups().items() if k != "diagnostic"}
    opt = AdamW(groups, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng_order = np.random.default_rng(seeds["order"])
    rng_aug = np.random.default_rng(seeds["augment"])
    rng_pol = np.random.default_rng(seeds["policy"])
    n = len(domain)
    per_epoch = -(-n // cfg.batch_size)
    total = cfg.pretrain_epochs * per_epoch
    sched = EpsilonSchedule(cfg.eps_min, total)
    counters = Counters()
    dt = np.dtype(cfg.dtype)
    for epoch in range(cfg.pretrain_epochs):
        order = rng_order.permutation(n)
        for i in range(0, n, cfg.batch_size):
            x, y = batch_arrays(domain, order[i:i + cfg.batch_size], stats, True, rng_aug, dt)
            _, sem, vis = bundle.features(x)
            eps = epsilon_at(counters.step, sched) if cfg.rl else 0.0
            l_p, l_ptd = _prior_losses(sem, vis, y, eps, rlc, rng_pol, cfg.rl and rlc.lambda_ptd > 0)
            loss = total_loss(l_p, l_ptd, None, None, rlc)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(f"non-finite prior loss at step {counters.step}")
            opt.zero_grad()
            loss.backward()
            opt.step(cosine_lr(counters.step, total, cfg.lr))
            counters.step += 1
        counters.epoch = epoch + 1
        log.info("prior pretraining epoch %d loss %.4f", epoch + 1, float(loss.data))
    tensors, meta = checkpoint_state(bundle, None, counters, cfg, stats)
    tensors = {k: v for k, v in tensors.items() if k.startswith(("semantic.", "visual."))}
    meta["kind"] = "priors"
    ckpt = Checkpoint(tensors, meta)
    if out_path is not None:
        save_checkpoint(out_path, tensors, meta)
    return ckpt


# -- main loop ----------------------------------------------------------------

METRIC_LOSSES = ("l_p", "l_ptd", "l_td", "l_d")


def _write_metrics(path: Path, rows: list, C: int) -> None:
    cols = ["epoch", "split"] + [f"auc_class_{c}" for c in range(C)] + ["mean_auc", "ci_low", "ci_high"]
    cols += list(METRIC_LOSSES)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in cols})


def _report_row(epoch: int, split_name: str, rep: MetricsReport, losses: dict) -> dict:
    row = {"epoch": epoch, "split": split_name, "mean_auc": rep.mean_auc,
           "ci_low": rep.mean_ci[0], "ci_high": rep.mean_ci[1]}
    row.update({f"auc_class_{c}": a for c, a in enumerate(rep.per_class_auc)})
    row.update(losses)
    return row


def _float(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def train(cfg: RunConfig, priors: Checkpoint | None = None, splits=None, overwrite: bool = False,
          save: bool = True) -> TrainResult:
    """Run the full loop and write the run directory.

    ``splits`` may pass ``(train, val, test)`` datasets directly instead of reading ``cfg.data``.
    """
    train_ds, val_ds, test_ds = splits if splits is not None else load_splits(cfg)
    if len(train_ds) == 0:
        raise ConfigError("training split is empty")
    out = _prepare_out_dir(cfg.out_dir, overwrite) if save else Path(cfg.out_dir)
    seeds = cfg.seeds()
    C, H = train_ds.num_classes, train_ds.image_size[0]
    bundle = AgentBundle(cfg.model_config(C, H), seed=seeds["init"])
    if priors is not None:
        reinit = bundle.load_state(priors.tensors, strict=False, priors_only=True)
        if reinit:
            log.info("class heads re-initialized for the target class count: %s", ", ".join(reinit))
        bundle.reinit_label_embeddings()
        bundle.sync_target()
        bundle.syncs = 0
    stats = DatasetStats.from_dataset(train_ds)
    rlc = cfg.rl_config()
    dt = np.dtype(cfg.dtype)
    opt = AdamW(bundle.groups(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng_order = np.random.default_rng(seeds["order"])
    rng_aug = np.random.default_rng(seeds["augment"])
    rng_pol = np.random.default_rng(seeds["policy"])
    rng_rep = np.random.default_rng(seeds["replay"])
    replay = ReplayBuffer(cfg.replay_capacity, seeds["replay"]) if cfg.rl else None
    replay_batch = cfg.replay_batch or cfg.batch_size

    n = len(train_ds)
    per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * per_epoch * cfg.steps_per_episode
    sched = EpsilonSchedule(cfg.eps_min, cfg.eps_steps or total)
    counters = Counters()
    history: list[dict] = []
    rows: list[dict] = []
    best = -np.inf
    last_good = None
    if save:
        (out / "config.json").write_text(json.dumps({**cfg.to_dict(), "derived_seeds": seeds}, indent=2) + "\n")

    def abort(what: str):
        dump = {"what": what, "counters": asdict(counters),
                "nonfinite_params": [k for k, t in bundle.named_parameters().items()
                                     if not np.all(np.isfinite(t.data))]}
        if save:
            (out / "divergence.json").write_text(json.dumps(dump, indent=2) + "\n")
            if last_good is not None:
                save_checkpoint(out / "checkpoints" / "last_good.ckpt", *last_good)
        raise TrainingDivergedError(f"{what} at step {counters.step}; state dumped to {out}")

    t0 = time.time()
    for epoch in range(cfg.epochs):
        order = rng_order.permutation(n)
        sums = dict.fromkeys(("loss",) + METRIC_LOSSES, 0.0)
        for i in range(0, n, cfg.batch_size):
            x, y = batch_arrays(train_ds, order[i:i + cfg.batch_size], stats, True, rng_aug, dt)
            if cfg.rl and cfg.target_sync == 0:
                bundle.sync_target()
            for _ in range(cfg.steps_per_episode):
                parts = train_step(bundle, opt, x, y, cfg, rlc, sched, counters, replay, replay_batch,
                                   rng_pol, rng_rep, total)
                if parts is None:
                    abort("non-finite loss")
                for k, v in parts.items():
                    sums[k] += v
                counters.step += 1
                if cfg.rl and cfg.target_sync and counters.step % cfg.target_sync == 0:
                    bundle.sync_target()
            counters.episode += 1
            if save and (counters.episode % per_epoch == 0):
                last_good = checkpoint_state(bundle, opt, counters, cfg, stats)
        counters.epoch = epoch + 1
        counters.target_syncs = bundle.syncs
        steps = per_epoch * cfg.steps_per_episode
        losses = {k: v / steps for k, v in sums.items()}
        val = evaluate(bundle, val_ds, stats, resamples=cfg.val_resamples, seed=seeds["bootstrap"]) \
            if len(val_ds) else None
        entry = {"epoch": epoch + 1, **losses, "val_mean_auc": None if val is None else val.mean_auc,
                 "val_auc": None if val is None else val.per_class_auc, "elapsed": time.time() - t0}
        history.append(entry)
        if val is not None:
            rows.append(_report_row(epoch + 1, "val", val, losses))
        log.info("epoch %d loss %.4f val mean AUC %s", epoch + 1, losses["loss"],
                 "n/a" if val is None else f"{val.mean_auc:.4f}")
        if save:
            _write_metrics(out / "metrics.csv", rows, C)
            score = val.mean_auc if val is not None and val.mean_auc is not None else -epoch
            if score > best:
                best = score
                save_checkpoint(out / "checkpoints" / "best.ckpt", *checkpoint_state(bundle, opt, counters, cfg, stats))

    counters.target_syncs = bundle.syncs
    counters.replay_pushes = replay.pushes if replay is not None else 0
    test = None
    if len(test_ds):
        test = evaluate(bundle, test_ds, stats, resamples=cfg.test_resamples, seed=seeds["bootstrap"],
                        config=cfg.to_dict())
        rows.append(_report_row(cfg.epochs, "test", test, {}))
    if save:
        _write_metrics(out / "metrics.csv", rows, C)
        save_checkpoint(out / "checkpoints" / "last.ckpt", *checkpoint_state(bundle, opt, counters, cfg, stats))
        if test is not None:
            (out / "test_report.json").write_text(json.dumps(test.as_dict(), indent=2) + "\n")
        if cfg.export_attention and len(test_ds):
            export_attention(bundle, test_ds.images[0], out / "attention", stats)
    return TrainResult(out, history, test, counters, bundle, stats, list(opt.update_log))


def train_step(bundle: AgentBundle, opt: AdamW, x, y, cfg: RunConfig, rlc: RLConfig, sched: EpsilonSchedule,
               counters: Counters, replay: ReplayBuffer | None, replay_batch: int, rng_pol, rng_rep,
               total_steps: int) -> dict | None:
    """One step of the loop on a fixed minibatch state. Returns loss parts, or None on divergence."""
    eps = epsilon_at(counters.step, sched) if cfg.rl else 0.0
    feats, sem, vis = bundle.features(x)
    l_p, l_ptd = _prior_losses(sem, vis, y, eps, rlc, rng_pol, cfg.rl and rlc.lambda_ptd > 0)
    dfeats = feats if cfg.update_mode == "joint" else {k: v.detach() for k, v in feats.items()}
    out = bundle.diagnose(dfeats)
    l_d = asl_loss(out.probs, y, cfg.asl_gamma_pos, cfg.asl_gamma_neg)
    l_td = None
    if cfg.rl:
        a, explored = select_actions_batch(out.probs.data, eps, rlc.tau, rng_pol)
        counters.explored += int(explored.sum())
        counters.selections += len(a)
        r = compute_reward(a, y)
        for b in range(len(a)):
            s = {k: v.data[b].copy() for k, v in feats.items()}
            # the next state is the current one
            replay.push(Transition(s, a[b], r[b], s, counters.episode, counters.step))
        batch = replay.sample(replay_batch, rng_rep)
        if batch is None:
            counters.replay_skips += 1
        else:
            counters.replay_updates += 1
            S = {k: Tensor(np.stack([t.s[k] for t in batch])) for k in feats}
            A = np.stack([t.a for t in batch])
            R = np.stack([t.r for t in batch])
            z = bundle.diagnose(S).logits
            z_next = bundle.diagnose({k: Tensor(np.stack([t.s_next[k] for t in batch])) for k in feats},
                                     use_target=True).logits
            l_td = td_loss(q_values(z, A), td_target(R, z_next, rlc.gamma))
    loss = total_loss(l_p, l_ptd, l_td, l_d, rlc)
    if not np.isfinite(loss.data):
        return None
    lr = cosine_lr(counters.step, total_steps, cfg.lr)
    opt.zero_grad()
    if cfg.update_mode == "joint":
        loss.backward()
        opt.step(lr)
    else:
        diag_terms = [t * w for t, w in ((l_td, rlc.lambda_td), (l_d, rlc.lambda_d)) if t is not None and w]
        prior_terms = total_loss(l_p, l_ptd, None, None, rlc)
        if diag_terms:
            d_loss = diag_terms[0] if len(diag_terms) == 1 else diag_terms[0] + diag_terms[1]
            d_loss.backward()
            opt.step(lr, only=("diagnostic",))
        if isinstance(prior_terms, Tensor):
            prior_terms.backward()
            opt.step(lr, only=("semantic", "visual"))
    return {"loss": _float(loss), "l_p": sum(_float(t) for t in l_p), "l_ptd": sum(_float(t) for t in l_ptd),
            "l_td": 0.0 if l_td is None else _float(l_td), "l_d": _float(l_d)}
