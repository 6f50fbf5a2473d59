"""A short end-to-end run: train the three agents, then score the held-out split.

Uses a reduced benchmark so it finishes in a couple of minutes on one core.
"""
import tempfile
from pathlib import Path

import numpy as np

from marl_diag.checkpoint import load_checkpoint
from marl_diag.data import SyntheticConfig, generate_synthetic, split
from marl_diag.evaluation import evaluate
from marl_diag.training import RunConfig, bundle_from_checkpoint, train

ds = generate_synthetic(SyntheticConfig(n=900, seed=0))
splits = split(ds, (600 / 900, 100 / 900, 200 / 900), seed=0)

out = Path(tempfile.mkdtemp()) / "run"
cfg = RunConfig(out_dir=str(out), epochs=4, seed=1, test_resamples=300)
res = train(cfg, splits=splits)

for h in res.history:
    print(f"epoch {h['epoch']}: loss {h['loss']:.3f} (ptd {h['l_ptd']:.3f}, td {h['l_td']:.3f}, "
          f"asl {h['l_d']:.3f}) val AUC {h['val_mean_auc']:.3f}")

t = res.test
print("test per-class AUC", np.round(t.per_class_auc, 3))
print(f"test mean AUC {t.mean_auc:.3f}  95% CI [{t.mean_ci[0]:.3f}, {t.mean_ci[1]:.3f}]")
print("counters", res.counters)
print("update order of the first step", res.update_order[:3])

# re-scoring from the stored checkpoint gives the same numbers
bundle, stats = bundle_from_checkpoint(load_checkpoint(out / "checkpoints" / "last.ckpt"))
again = evaluate(bundle, splits[2], stats, resamples=0)
print("re-evaluated mean AUC", round(again.mean_auc, 6))
print("run directory:", sorted(p.name for p in out.iterdir()))
print("attention maps:", len(list((out / "attention").glob("*.png"))))
