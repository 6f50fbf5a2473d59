"""ROC AUC with percentile-bootstrap intervals, model evaluation, and attention export."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.stats import rankdata

log = logging.getLogger(__name__)


def roc_auc(scores, labels) -> float | None:
    """Mann-Whitney AUC with half credit for ties; ``None`` if only one class is present."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    P = int(y.sum())
    N = y.size - P
    if P == 0 or N == 0:
        return None
    ranks = rankdata(s)
    return float((ranks[y].sum() - P * (P + 1) / 2.0) / (P * N))


def roc_auc_pairs(scores, labels) -> float | None:
    """O(P*N) pair-counting reference for :func:`roc_auc`."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        return None
    diff = pos[:, None] - neg[None, :]
    credit = (diff > 0).sum() + 0.5 * (diff == 0).sum()
    return float(credit / (pos.size * neg.size))


def _draw_indices(labels: np.ndarray, resamples: int, rng: np.random.Generator, max_retries: int):
    """Resample rows with replacement; redraw rows lacking a positive or a negative in some column."""
    n = labels.shape[0]
    idx = rng.integers(0, n, size=(resamples, n))
    lab2 = labels.reshape(n, -1)

    def ok(rows):
        sub = lab2[rows]  # R x n x C
        pos = sub.sum(axis=1)
        return ((pos > 0) & (pos < n)).any(axis=-1) if lab2.shape[1] > 1 else ((pos > 0) & (pos < n))[:, 0]

    valid = ok(idx)
    for _ in range(max_retries):
        if valid.all():
            break
        bad = np.flatnonzero(~valid)
        idx[bad] = rng.integers(0, n, size=(bad.size, n))
        valid[bad] = ok(idx[bad])
    return idx[valid], int((~valid).sum())


def _batched_auc(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """AUC per row of ``R x n`` arrays; NaN where a row has a single class."""
    y = labels.astype(bool)
    P = y.sum(axis=1).astype(np.float64)
    N = y.shape[1] - P
    ranks = rankdata(scores, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        auc = ((ranks * y).sum(axis=1) - P * (P + 1) / 2.0) / (P * N)
    auc[(P == 0) | (N == 0)] = np.nan
    return auc


def bootstrap_aucs(scores, labels, resamples: int = 1000, seed: int = 0, max_retries: int = 100):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int8)
    rng = np.random.default_rng(seed)
    idx, skipped = _draw_indices(y, resamples, rng, max_retries)
    if skipped:
        log.warning("bootstrap skipped %d resamples lacking both classes", skipped)
    return _batched_auc(s[idx], y[idx]), skipped


def bootstrap_ci(scores, labels, resamples: int = 1000, level: float = 0.95, seed: int = 0):
    """Percentile bootstrap interval for :func:`roc_auc` as ``(low, high)``."""
    if roc_auc(scores, labels) is None:
        raise ValueError("AUC undefined: labels contain a single class")
    aucs, _ = bootstrap_aucs(scores, labels, resamples, seed)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(aucs, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def bootstrap_mean_ci(scores: np.ndarray, labels: np.ndarray, resamples: int = 1000,
                      level: float = 0.95, seed: int = 0):
    """Interval for the class-averaged AUC, resampling rows jointly across classes."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int8)
    rng = np.random.default_rng(seed)
    idx, _ = _draw_indices(y, resamples, rng, 100)
    per_class = np.stack([_batched_auc(s[idx, c], y[idx, c]) for c in range(s.shape[1])], axis=1)
    means = np.nanmean(per_class, axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means[np.isfinite(means)], [alpha, 1.0 - alpha])
    return float(lo), float(hi)


@dataclass
class MetricsReport:
    per_class_auc: list  # None where undefined
    mean_auc: float | None
    ci_low: list
    ci_high: list
    mean_ci: tuple
    n: int
    undefined_classes: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "per_class_auc": self.per_class_auc, "mean_auc": self.mean_auc,
            "ci_low": self.ci_low, "ci_high": self.ci_high, "mean_ci": list(self.mean_ci),
            "n": self.n, "undefined_classes": self.undefined_classes,
        }


def metrics_from_scores(scores: np.ndarray, labels: np.ndarray, resamples: int = 1000,
                        seed: int = 0, level: float = 0.95, config: dict | None = None) -> MetricsReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    C = scores.shape[1]
    aucs, lows, highs, undefined = [], [], [], []
    for c in range(C):
        a = roc_auc(scores[:, c], labels[:, c])
        aucs.append(a)
        if a is None:
            undefined.append(c)
            lows.append(None)
            highs.append(None)
            continue
        if resamples:
            lo, hi = bootstrap_ci(scores[:, c], labels[:, c], resamples, level, seed + c)
            # the percentile interval can miss a point estimate sitting at the boundary
            lows.append(min(lo, a))
            highs.append(max(hi, a))
        else:
            lows.append(a)
            highs.append(a)
    defined = [a for a in aucs if a is not None]
    mean = float(np.mean(defined)) if defined else None
    if mean is not None and resamples:
        lo, hi = bootstrap_mean_ci(scores, labels, resamples, level, seed + C)
        mean_ci = (min(lo, mean), max(hi, mean))
    else:
        mean_ci = (mean, mean)
    return MetricsReport(aucs, mean, lows, highs, mean_ci, len(scores), undefined, dict(config or {}))


def evaluate(bundle, dataset, stats, resamples: int = 1000, seed: int = 0,
             batch_size: int = 128, config: dict | None = None) -> MetricsReport:
    """Score every sample greedily (no exploration, no augmentation) and summarize AUCs.

    Samples are put in id order first so the report does not depend on dataset order.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    order = np.argsort(np.array(dataset.ids), kind="stable")
    ds = dataset.subset(order)
    probs = bundle.predict(ds, stats, batch_size=batch_size)
    return metrics_from_scores(probs, ds.labels, resamples=resamples, seed=seed, config=config)


# -- attention export ---------------------------------------------------------

def _minmax_u8(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0:
        return np.zeros(m.shape, np.uint8)
    return np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_map(m: np.ndarray, stem: Path, csv: bool = True) -> None:
    Image.fromarray(_minmax_u8(m), mode="L").save(stem.with_suffix(".png"))
    if csv:
        np.savetxt(stem.with_suffix(".csv"), m, delimiter=",", fmt="%.17g")


def export_attention(bundle, image: np.ndarray, out_dir, stats=None) -> list[Path]:
    """Write decoder cross-attention maps (per layer/head/class and head means) and the position map.

    ``image`` is one ``H x W`` raw image in [0, 1]; ``stats`` normalizes it when given.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    x = np.asarray(image, dtype=np.float64)
    if stats is not None:
        x = (x - stats.mean) / stats.std
    maps = bundle.attention_maps(x)
    written = []
    attn = maps.get("attention")
    if attn is not None:
        L, H, C, HW = attn.shape
        side = int(round(np.sqrt(HW)))
        for l in range(L):
            for h in range(H):
                for c in range(C):
                    stem = out / f"attn_L{l}_H{h}_C{c}"
                    write_map(attn[l, h, c].reshape(side, side), stem)
                    written += [stem.with_suffix(".png"), stem.with_suffix(".csv")]
                stem = out / f"attn_mean_L{l}_H{h}"
                write_map(attn[l, h].mean(axis=0).reshape(side, side), stem)
                written += [stem.with_suffix(".png"), stem.with_suffix(".csv")]
    pm = maps.get("position_map")
    if pm is not None:
        stem = out / "posmap"
        write_map(pm, stem)
        written += [stem.with_suffix(".png"), stem.with_suffix(".csv")]
    return written


def raw_decoder_rows(bundle, image: np.ndarray) -> np.ndarray:
    """Unreshaped ``layers x heads x C x HW`` attention for one normalized image."""
    return bundle.attention_maps(np.asarray(image, dtype=np.float64))["attention"]
