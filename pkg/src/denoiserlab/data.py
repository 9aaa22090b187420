"""Synthetic texture datasets, image-folder ingestion and the noise model."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import imageio
from .seeding import derive_seed


class DatasetError(ValueError):
    pass


CLASSES = ("gratings", "checker", "blobs", "speckle")
N_ORIENTATIONS = 4
MANIFEST_VERSION = 1


@dataclass
class Dataset:
    """Clean images in [0, 1], stacked as an (N, C, H, W) float32 array."""

    images: np.ndarray
    labels: np.ndarray | None = None
    class_names: list[str] | None = None
    attributes: list[dict] | None = None
    names: list[str] | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be NCHW, got shape {self.images.shape}")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise DatasetError("need exactly one label per image")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def mean(self) -> float:
        return float(self.images.astype(np.float64).mean())

    def mean_image(self) -> np.ndarray:
        return self.images.mean(axis=0)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        pick = lambda seq: None if seq is None else [seq[i] for i in idx]  # noqa: E731
        return Dataset(self.images[idx], None if self.labels is None else self.labels[idx],
                       self.class_names, pick(self.attributes), pick(self.names))


@dataclass(frozen=True)
class SigmaRange:
    sigma_min: float = 0.01
    sigma_max: float = 1.0

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")

    def cdf(self, sigma):
        lo, hi = np.sqrt(self.sigma_min), np.sqrt(self.sigma_max)
        return np.clip((np.sqrt(sigma) - lo) / (hi - lo), 0.0, 1.0)

    def inverse_cdf(self, u):
        lo, hi = np.sqrt(self.sigma_min), np.sqrt(self.sigma_max)
        return ((hi - lo) * np.asarray(u, dtype=np.float64) + lo) ** 2


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_sigma(rng_range: SigmaRange, seed, size=None):
    """Draw sigma with density proportional to sigma**-0.5 on [sigma_min, sigma_max]."""
    u = _as_rng(seed).uniform(size=size)
    s = rng_range.inverse_cdf(u)
    return float(s) if size is None else s


def corrupt(x, sigma, seed) -> np.ndarray:
    """x + sigma * z with z i.i.d. standard normal; no clipping.

    ``sigma`` may be a scalar or one value per leading item of ``x``.
    """
    x = np.asarray(x)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("sigma must be nonnegative")
    z = _as_rng(seed).standard_normal(x.shape)
    if sigma.ndim == 1:
        sigma = sigma.reshape((-1,) + (1,) * (x.ndim - 1))
    return (x + sigma * z).astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32)


# synthetic textures ------------------------------------------------------------

def _grid(size):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return x, y


def _grating(rng, size):
    bucket = int(rng.integers(N_ORIENTATIONS))
    theta = bucket * np.pi / N_ORIENTATIONS + rng.uniform(-np.pi / 16, np.pi / 16)
    freq = rng.uniform(0.08, 0.25)
    phase = rng.uniform(0, 2 * np.pi)
    contrast = rng.uniform(0.3, 0.5)
    level = rng.uniform(0.35, 0.65)
    x, y = _grid(size)
    img = level + contrast * np.sin(2 * np.pi * freq * (x * np.cos(theta) + y * np.sin(theta)) + phase)
    return img, {"orientation": bucket, "frequency": freq}


def _checker(rng, size):
    period = int(rng.integers(2, 7))
    ox, oy = rng.integers(0, 2 * period, size=2)
    lo, hi = rng.uniform(0.1, 0.35), rng.uniform(0.65, 0.9)
    x, y = _grid(size)
    parity = ((x.astype(int) + ox) // period + (y.astype(int) + oy) // period) % 2
    return np.where(parity == 1, hi, lo), {"period": period}


def _blobs(rng, size):
    count = int(rng.integers(1, 5))
    x, y = _grid(size)
    img = np.full((size, size), rng.uniform(0.1, 0.3))
    for _ in range(count):
        cx, cy = rng.uniform(0, size - 1, size=2)
        radius = rng.uniform(1.5, 4.0)
        img += rng.uniform(0.5, 0.8) * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * radius ** 2))
    return img, {"count": count}


def _speckle(rng, size):
    level = rng.uniform(0.25, 0.75)
    density = rng.uniform(0.05, 0.2)
    amp = rng.uniform(0.15, 0.25)
    dots = (rng.uniform(size=(size, size)) < density) * rng.choice([-1.0, 1.0], size=(size, size))
    return level + amp * dots, {"density": density}


GENERATORS = {"gratings": _grating, "checker": _checker, "blobs": _blobs, "speckle": _speckle}


def gen_textures(n: int, size: int = 16, classes: Sequence[str] = CLASSES, seed: int = 0,
                 channels: int = 1) -> Dataset:
    """Draw ``n`` images, cycling through ``classes``; each image has its own derived seed."""
    classes = list(classes)
    if not classes:
        raise DatasetError("class spec is empty")
    unknown = [c for c in classes if c not in GENERATORS]
    if unknown:
        raise DatasetError(f"unknown texture classes {unknown}; choose from {sorted(GENERATORS)}")
    images = np.empty((n, channels, size, size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    attrs = []
    for i in range(n):
        k = i % len(classes)
        rng = np.random.default_rng(derive_seed(seed, "texture", i))
        img, meta = GENERATORS[classes[k]](rng, size)
        images[i] = np.clip(img, 0.0, 1.0)[None]
        labels[i] = k
        attrs.append(meta)
    return Dataset(images, labels, classes, attrs, [f"img_{i:05d}" for i in range(n)])


class GaussianImageModel:
    """Images drawn from N(mean, cov) with the analytic (sigma-aware) Wiener denoiser."""

    def __init__(self, mean: np.ndarray, cov: np.ndarray, shape: tuple[int, ...]):
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        self.cov = np.asarray(cov, dtype=np.float64)
        self.shape = tuple(shape)
        self.n = self.mean.size
        evals, evecs = np.linalg.eigh(self.cov)
        self._evals = np.clip(evals, 0.0, None)
        self._evecs = evecs

    @classmethod
    def low_rank(cls, size: int = 8, rank: int = 4, mean: float = 0.5, std: float = 0.2,
                 seed: int = 0) -> "GaussianImageModel":
        """Low-rank covariance spanned by smooth random fields; per-pixel std ~ ``std``."""
        rng = np.random.default_rng(seed)
        yy, xx = np.mgrid[0:size, 0:size] / size
        basis = []
        for fy, fx in [(0, 0), (0, 1), (1, 0), (1, 1), (0, 2), (2, 0), (1, 2), (2, 1)][:rank]:
            phase = rng.uniform(0, 2 * np.pi)
            basis.append(np.cos(np.pi * (fx * xx + fy * yy) + phase).reshape(-1))
        U = np.linalg.qr(np.stack(basis, axis=1))[0]
        lam = np.linspace(1.0, 0.4, rank)
        lam *= (std ** 2) * size * size / lam.sum()
        cov = (U * lam) @ U.T
        return cls(np.full(size * size, mean), cov, (1, size, size))

    def sample(self, n: int, seed) -> np.ndarray:
        rng = _as_rng(seed)
        z = rng.standard_normal((n, self.n))
        x = self.mean + (z * np.sqrt(self._evals)) @ self._evecs.T
        return x.reshape((n,) + self.shape)

    def dataset(self, n: int, seed) -> Dataset:
        return Dataset(self.sample(n, seed).astype(np.float32))

    def wiener(self, x_sigma: np.ndarray, sigma) -> np.ndarray:
        """mu + C (C + sigma^2 I)^-1 (x_sigma - mu), per item."""
        flat = np.asarray(x_sigma, dtype=np.float64).reshape(len(x_sigma), -1)
        s2 = np.asarray(sigma, dtype=np.float64).reshape(-1, 1) ** 2
        coeff = (flat - self.mean) @ self._evecs
        shrunk = coeff * self._evals / (self._evals + s2)
        return (self.mean + shrunk @ self._evecs.T).reshape(np.shape(x_sigma))

    def residual(self, x_sigma, sigma):
        return self.wiener(x_sigma, sigma) - np.asarray(x_sigma, dtype=np.float64)

    def mmse(self, sigma) -> np.ndarray:
        """Expected squared error (summed over pixels) of the Wiener estimate."""
        s2 = np.asarray(sigma, dtype=np.float64)[..., None] ** 2
        return (self._evals * s2 / (self._evals + s2)).sum(axis=-1)


# folders and manifests -----------------------------------------------------------

def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation weights with a widened (box-like) kernel when shrinking."""
    scale = n_in / n_out
    support = max(scale, 1.0)
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.arange(n_in)
    w = np.clip(1.0 - np.abs(src[None, :] - centers[:, None]) / support, 0.0, None)
    return w / w.sum(axis=1, keepdims=True)


def _fit(img: np.ndarray, size: int) -> np.ndarray:
    """Center-crop CHW to a square, then resample to size x size."""
    _, h, w = img.shape
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    img = img[:, top:top + side, left:left + side]
    if side == size:
        return img
    R = _resize_matrix(side, size)
    return np.einsum("ij,cjk,lk->cil", R, img, R)


def load_folder(path, size: int | None = None, channels: int = 1) -> Dataset:
    """Load every PGM/PPM/PNG in ``path`` (sorted by filename) into a Dataset."""
    path = Path(path)
    if not path.is_dir():
        raise DatasetError(f"{path}: not a directory")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in imageio.SUFFIXES)
    if not files:
        raise DatasetError(f"{path}: no PGM/PPM/PNG images found")
    raw, errors = [], []
    for f in files:
        try:
            raw.append(imageio.from_uint8(imageio.read_image(f)))
        except (imageio.ImageFormatError, OSError, ValueError) as exc:
            errors.append(f"{f.name}: {exc}")
    if errors:
        raise DatasetError("unreadable images:\n  " + "\n  ".join(errors))
    if size is None:
        size = min(min(im.shape[1:]) for im in raw)
    out = []
    for im in raw:
        if im.shape[0] != channels:
            im = im.mean(axis=0, keepdims=True) if channels == 1 else np.repeat(im[:1], channels, axis=0)
        out.append(np.clip(_fit(im, size), 0.0, 1.0))
    return Dataset(np.stack(out).astype(np.float32), names=[f.stem for f in files])


def save_dataset(ds: Dataset, outdir, fmt: str = "pgm") -> Path:
    """Write images plus ``manifest.json``; returns the manifest path."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    names = ds.names or [f"img_{i:05d}" for i in range(len(ds))]
    entries = []
    for i, img in enumerate(ds.images):
        fname = f"{names[i]}.{fmt}"
        imageio.write_image(outdir / fname, imageio.to_uint8(img))
        entry = {"path": fname}
        if ds.labels is not None:
            entry["label"] = int(ds.labels[i])
        if ds.attributes is not None:
            entry["attributes"] = ds.attributes[i]
        entries.append(entry)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "n_images": len(ds),
        "shape": list(ds.image_shape),
        "class_names": ds.class_names,
        "normalization": {"range": [0.0, 1.0], "mean": round(ds.mean, 8), "mean_subtracted": False},
        "images": entries,
    }
    mpath = outdir / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return mpath


def load_dataset(path) -> Dataset:
    """Load a dataset from a manifest file, a directory holding one, or a bare image folder."""
    path = Path(path)
    if path.is_dir() and not (path / "manifest.json").exists():
        return load_folder(path)
    mpath = path / "manifest.json" if path.is_dir() else path
    if not mpath.exists():
        raise DatasetError(f"{mpath}: no such manifest")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise DatasetError(f"{mpath}: unsupported manifest version {manifest.get('format_version')}")
    base = mpath.parent
    imgs, labels, attrs, names = [], [], [], []
    for e in manifest["images"]:
        try:
            imgs.append(imageio.from_uint8(imageio.read_image(base / e["path"])))
        except (imageio.ImageFormatError, OSError) as exc:
            raise DatasetError(f"{e['path']}: {exc}") from exc
        labels.append(e.get("label"))
        attrs.append(e.get("attributes", {}))
        names.append(Path(e["path"]).stem)
    has_labels = all(lab is not None for lab in labels)
    return Dataset(np.stack(imgs), np.asarray(labels, dtype=np.int64) if has_labels else None,
                   manifest.get("class_names"), attrs, names)
