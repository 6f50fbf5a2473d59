"""Component ablation and the exploration-floor sweep at toy scale.

The command-line ``ablate`` and ``sweep-epsilon`` do the same at full scale.
"""

from marl_diag.cli import ABLATION_GRID
from marl_diag.data import SyntheticConfig, generate_synthetic, split
from marl_diag.training import RunConfig, train

ds = generate_synthetic(SyntheticConfig(n=500, seed=0))
splits = split(ds, (350 / 500, 50 / 500, 100 / 500), seed=0)
base = dict(out_dir="", epochs=3, seed=1, val_resamples=0, test_resamples=0, export_attention=False)

print("row  visual semantic decoder rl   test AUC")
for i, (vis, sem, dec, rl) in enumerate(ABLATION_GRID, start=1):
    cfg = RunConfig(use_visual=vis, use_semantic=sem, use_decoder=dec, rl=rl, **base)
    auc = train(cfg, splits=splits, save=False).test.mean_auc
    flags = "  ".join("+" if f else "-" for f in (vis, sem, dec, rl))
    print(f"{i:>3}  {flags}          {auc:.4f}")

for eps in (0.2, 0.5, 0.8):
    r = train(RunConfig(eps_min=eps, **base), splits=splits, save=False)
    share = r.counters.explored / r.counters.selections
    print(f"eps_min {eps}: test AUC {r.test.mean_auc:.4f}, explored {share:.2f} of selections")
