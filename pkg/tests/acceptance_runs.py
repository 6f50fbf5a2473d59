"""Shared, cached training runs for the synthetic-benchmark acceptance checks.

Every run is deterministic, so results are cached under a key made from the
package source and the run settings. Set ``MARL_ACCEPT_CACHE=off`` to force
fresh runs, or point it at another directory.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from functools import lru_cache
from pathlib import Path

import numpy as np

from marl_diag.checkpoint import load_checkpoint, save_checkpoint
from marl_diag.data import SyntheticConfig, generate_synthetic, split
from marl_diag.training import RunConfig, bundle_from_checkpoint, checkpoint_state, pretrain_priors, train

ROOT = Path(__file__).resolve().parents[1]
SEEDS = (1, 2, 3, 4, 5)
EPOCHS = int(os.environ.get("MARL_ACCEPT_EPOCHS", "20"))
TARGET_AUC = 0.90

VARIANTS = {
    "full": {},
    "model8": {"rl": False},
    "eps0.8": {"eps_min": 0.8},
    "warm": {},
}

# domain B for prior pretraining: other seed, reversed contrasts, coarser texture
DOMAIN_B = SyntheticConfig(n=2000, seed=101, contrast=np.linspace(0.3, 0.55, 5).round(4).tolist(),
                           texture_std=0.08)


def _cache_dir() -> Path | None:
    v = os.environ.get("MARL_ACCEPT_CACHE", str(ROOT / ".acceptance_cache"))
    return None if v.lower() == "off" else Path(v)


@lru_cache(maxsize=None)
def _source_hash() -> str:
    h = hashlib.sha256()
    files = sorted((ROOT / "src" / "marl_diag").glob("*.py")) + [Path(__file__)]
    for p in files:
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


@lru_cache(maxsize=None)
def benchmark_splits():
    ds = generate_synthetic(SyntheticConfig())
    return split(ds, RunConfig().split, 0)


@lru_cache(maxsize=None)
def domain_b():
    return generate_synthetic(DOMAIN_B)


def run_config(variant: str, seed: int) -> RunConfig:
    return RunConfig(seed=seed, epochs=EPOCHS, out_dir="", export_attention=False, **VARIANTS[variant])


def _key(variant: str, seed: int) -> str:
    body = json.dumps({"cfg": run_config(variant, seed).to_dict(), "variant": variant,
                       "domain_b": DOMAIN_B.__dict__ if variant == "warm" else None}, sort_keys=True)
    return f"{variant}-s{seed}-{hashlib.sha256(body.encode()).hexdigest()[:10]}-{_source_hash()}"


def epochs_to(history: list, target: float = TARGET_AUC) -> int:
    """First epoch whose validation mean AUC reaches ``target``; one past the budget if none does."""
    for h in history:
        if h["val_mean_auc"] is not None and h["val_mean_auc"] >= target:
            return h["epoch"]
    return len(history) + 1


def get_run(variant: str, seed: int) -> dict:
    """Train (or fetch from cache) one benchmark run and return its summary."""
    cache = _cache_dir()
    key = _key(variant, seed)
    if cache is not None and (cache / f"{key}.json").exists():
        return json.loads((cache / f"{key}.json").read_text())
    cfg = run_config(variant, seed)
    t0 = time.time()
    priors = None
    if variant == "warm":
        priors = pretrain_priors(cfg, domain_b())
    res = train(cfg, priors=priors, splits=benchmark_splits(), save=False)
    summary = {
        "variant": variant, "seed": seed, "epochs": cfg.epochs,
        "test_mean_auc": res.test.mean_auc, "test_per_class": res.test.per_class_auc,
        "test_ci": list(res.test.mean_ci),
        "val": [h["val_mean_auc"] for h in res.history],
        "loss": [h["loss"] for h in res.history],
        "epochs_to_target": epochs_to(res.history),
        "seconds": time.time() - t0,
        "counters": res.counters.__dict__,
    }
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        if variant == "full":
            save_checkpoint(cache / f"{key}.ckpt", *checkpoint_state(res.bundle, None, res.counters, cfg, res.stats))
        (cache / f"{key}.json").write_text(json.dumps(summary, indent=1) + "\n")
    else:
        _bundles[key] = (res.bundle, res.stats)
    return summary


_bundles: dict = {}


def get_bundle(variant: str, seed: int):
    """Trained bundle and normalization stats for a finished run."""
    get_run(variant, seed)
    key = _key(variant, seed)
    if key in _bundles:
        return _bundles[key]
    return bundle_from_checkpoint(load_checkpoint(_cache_dir() / f"{key}.ckpt"))


if __name__ == "__main__":
    import sys

    wanted = sys.argv[1:] or list(VARIANTS)
    for seed in SEEDS:
        for v in wanted:
            r = get_run(v, seed)
            print(json.dumps({k: r[k] for k in ("variant", "seed", "test_mean_auc", "epochs_to_target",
                                                "seconds")}), flush=True)
