"""Multi-label image datasets: CSV manifests, synthetic generation, splits, normalization."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage, optimize, stats

from .errors import ConfigError, ManifestError


@dataclass(frozen=True)
class MultiLabelSample:
    image: np.ndarray  # H x W, values in [0, 1] before normalization
    labels: np.ndarray  # C entries in {0, 1}
    id: str


class Dataset:
    """Immutable collection of grayscale images with multi-hot labels."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, ids: Sequence[str]):
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int8)
        if images.ndim != 3:
            raise ValueError(f"images must be N x H x W, got {images.shape}")
        if labels.ndim != 2 or len(labels) != len(images) or len(ids) != len(images):
            raise ValueError("images, labels and ids must have matching lengths")
        if labels.size and not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        images.setflags(write=False)
        labels.setflags(write=False)
        self.images = images
        self.labels = labels
        self.ids = tuple(ids)

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> MultiLabelSample:
        return MultiLabelSample(self.images[i], self.labels[i], self.ids[i])

    def __iter__(self) -> Iterator[MultiLabelSample]:
        return (self[i] for i in range(len(self)))

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[1:]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], [self.ids[i] for i in idx])


# -- manifest ingestion -------------------------------------------------------

def _parse_label(token: str, lineno: int) -> int:
    token = token.strip()
    if token not in ("0", "1"):
        raise ManifestError(f"line {lineno}: label token {token!r} is not 0 or 1")
    return int(token)


def load_manifest(manifest_path, image_root=None, num_classes: int | None = None) -> Dataset:
    """Read ``path,label_0,...,label_{C-1}`` rows into a :class:`Dataset`.

    ``image_root`` defaults to the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    root = Path(image_root) if image_root is not None else manifest_path.parent
    images, labels, ids = [], [], []
    with open(manifest_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "path":
            raise ManifestError(f"{manifest_path}: header must start with 'path'")
        C = len(header) - 1
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != C + 1:
                raise ManifestError(f"line {lineno}: expected {C + 1} fields, got {len(row)}")
            labels.append([_parse_label(t, lineno) for t in row[1:]])
            img_path = root / row[0]
            if not img_path.exists():
                raise FileNotFoundError(f"line {lineno}: image {row[0]!r} not found under {root}")
            with Image.open(img_path) as im:
                images.append(np.asarray(im.convert("L"), dtype=np.float32) / 255.0)
            ids.append(row[0])
    if not images:
        size = (0, 0)
        return Dataset(np.zeros((0, *size), np.float32), np.zeros((0, C), np.int8), [])
    return Dataset(np.stack(images), np.array(labels), ids)


def load_dataset_dir(path) -> Dataset:
    return load_manifest(Path(path) / "manifest.csv")


# -- synthetic generation -----------------------------------------------------

@dataclass
class SyntheticConfig:
    num_classes: int = 5
    image_size: int = 64
    n: int = 2600
    # diagonal: class prevalence; off-diagonal: joint probability of both present
    cooccurrence: list | None = None
    contrast: list | None = None
    noise_rate: float = 0.02
    seed: int = 0
    background: float = 0.3
    texture_std: float = 0.06
    blob_sigma: float = 0.12  # fraction of the grid cell size

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not 0 <= self.noise_rate < 1:
            raise ConfigError("noise_rate must lie in [0, 1)")
        C = self.num_classes
        if self.cooccurrence is None:
            self.cooccurrence = default_cooccurrence(C)
        if self.contrast is None:
            self.contrast = np.linspace(0.55, 0.3, C).round(4).tolist()
        M = np.asarray(self.cooccurrence, dtype=float)
        if M.shape != (C, C) or not np.allclose(M, M.T):
            raise ConfigError("cooccurrence must be a symmetric C x C matrix")
        p = np.diag(M)
        if np.any(p <= 0) or np.any(p >= 1):
            raise ConfigError("class prevalences (diagonal) must lie in (0, 1)")
        if len(self.contrast) != C:
            raise ConfigError("contrast needs one entry per class")

    @property
    def grid(self) -> int:
        return math.ceil(math.sqrt(self.num_classes))


def default_cooccurrence(C: int, prevalence: float = 0.3) -> list:
    M = np.full((C, C), prevalence * prevalence)
    np.fill_diagonal(M, prevalence)
    # classes 0 and 1 tend to appear together
    M[0, 1] = M[1, 0] = 0.15
    return M.round(6).tolist()


def _latent_correlation(p_i: float, p_j: float, joint: float) -> float:
    # Gaussian copula: find rho with P(Z_i < a_i, Z_j < a_j) = joint
    a_i, a_j = stats.norm.ppf(p_i), stats.norm.ppf(p_j)
    lo, hi = max(p_i + p_j - 1, 0.0), min(p_i, p_j)
    if not lo < joint < hi:
        raise ConfigError(f"joint probability {joint} infeasible for marginals {p_i}, {p_j}")

    def gap(rho):
        cov = [[1.0, rho], [rho, 1.0]]
        return stats.multivariate_normal(mean=[0, 0], cov=cov).cdf([a_i, a_j]) - joint

    return optimize.brentq(gap, -0.999, 0.999, xtol=1e-10)


def sample_label_sets(cfg: SyntheticConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw planted class indicators matching the configured marginals and pairwise joints."""
    M = np.asarray(cfg.cooccurrence, dtype=float)
    p = np.diag(M)
    C = len(p)
    R = np.eye(C)
    for i in range(C):
        for j in range(i + 1, C):
            if abs(M[i, j] - p[i] * p[j]) > 1e-12:
                R[i, j] = R[j, i] = _latent_correlation(p[i], p[j], M[i, j])
    if np.linalg.eigvalsh(R).min() <= 0:
        raise ConfigError("cooccurrence matrix implies a non positive-definite latent correlation")
    z = rng.standard_normal((n, C))
    z = z @ np.linalg.cholesky(R).T
    return (z < stats.norm.ppf(p)).astype(np.int8)


def _render(cfg: SyntheticConfig, planted: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    S, G = cfg.image_size, cfg.grid
    cell = S / G
    tex = ndimage.gaussian_filter(rng.standard_normal((S, S)), sigma=2.0)
    tex *= cfg.texture_std / (tex.std() + 1e-12)
    img = cfg.background + tex
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    sigma = cfg.blob_sigma * cell
    for c in np.flatnonzero(planted):
        r, q = divmod(int(c), G)
        # jitter the centre inside the middle half of the cell
        cy = (r + 0.5 + rng.uniform(-0.2, 0.2)) * cell
        cx = (q + 0.5 + rng.uniform(-0.2, 0.2)) * cell
        img += cfg.contrast[c] * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    return np.clip(img, 0.0, 1.0)


def region_slices(cfg_or_size, num_classes: int | None = None) -> list[tuple[slice, slice]]:
    """Pixel slices of each class's grid cell."""
    if isinstance(cfg_or_size, SyntheticConfig):
        S, C = cfg_or_size.image_size, cfg_or_size.num_classes
    else:
        S, C = int(cfg_or_size), int(num_classes)
    G = math.ceil(math.sqrt(C))
    edges = np.round(np.linspace(0, S, G + 1)).astype(int)
    out = []
    for c in range(C):
        r, q = divmod(c, G)
        out.append((slice(edges[r], edges[r + 1]), slice(edges[q], edges[q + 1])))
    return out


def generate_synthetic(cfg: SyntheticConfig, out_dir=None) -> Dataset:
    """Render a planted-blob dataset; writes ``manifest.csv``, ``images/`` and ``dataset_meta.json``
    when ``out_dir`` is given."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    planted = sample_label_sets(cfg, cfg.n, rng)
    flips = rng.random(planted.shape) < cfg.noise_rate
    labels = np.where(flips, 1 - planted, planted).astype(np.int8)
    # quantize to 8 bits so the in-memory set matches what a reload would see
    raw = np.stack([_render(cfg, planted[i], rng) for i in range(cfg.n)])
    pixels = np.round(raw * 255.0).astype(np.uint8)
    ids = [f"images/{i:05d}.png" for i in range(cfg.n)]

    if out_dir is not None:
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        for i, rel in enumerate(ids):
            Image.fromarray(pixels[i], mode="L").save(out / rel, optimize=False)
        with open(out / "manifest.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path"] + [f"label_{c}" for c in range(cfg.num_classes)])
            for rel, lab in zip(ids, labels):
                w.writerow([rel] + [str(int(v)) for v in lab])
        meta = {
            "seed": cfg.seed,
            "C": cfg.num_classes,
            "n": cfg.n,
            "noise_rate": cfg.noise_rate,
            "cooccurrence": cfg.cooccurrence,
            "image_size": cfg.image_size,
            "contrast": cfg.contrast,
            "background": cfg.background,
            "texture_std": cfg.texture_std,
            "blob_sigma": cfg.blob_sigma,
        }
        (out / "dataset_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return Dataset(pixels.astype(np.float32) / 255.0, labels, ids)


# -- splitting and normalization ----------------------------------------------

def split(dataset: Dataset, ratios: Sequence[float], seed: int):
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    return (dataset.subset(perm[:n_train]),
            dataset.subset(perm[n_train:n_train + n_val]),
            dataset.subset(perm[n_train + n_val:]))


@dataclass(frozen=True)
class DatasetStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("std must be positive")

    @classmethod
    def from_dataset(cls, train: Dataset) -> "DatasetStats":
        x = train.images.astype(np.float64)
        std = float(x.std())
        return cls(float(x.mean()), std if std > 0 else 1.0)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1]


def normalize_and_augment(sample: MultiLabelSample, stats: DatasetStats, train_mode: bool,
                          rng: np.random.Generator | None = None) -> MultiLabelSample:
    img = (sample.image - stats.mean) / stats.std
    if train_mode and rng is not None and rng.random() < 0.5:
        img = hflip(img)
    return MultiLabelSample(np.ascontiguousarray(img, dtype=sample.image.dtype), sample.labels, sample.id)


def batch_arrays(dataset: Dataset, idx, stats: DatasetStats, train_mode: bool,
                 rng: np.random.Generator | None = None, dtype=np.float32):
    """Normalized ``[B, 1, H, W]`` images and ``[B, C]`` labels; one flip draw per sample in order."""
    imgs = (dataset.images[idx].astype(np.float64) - stats.mean) / stats.std
    if train_mode and rng is not None:
        flip = rng.random(len(idx)) < 0.5
        imgs[flip] = imgs[flip][..., ::-1]
    return imgs[:, None].astype(dtype), dataset.labels[idx].astype(dtype)
