"""Spatially averaged channel activations and their statistics.

``abar`` is the per-channel spatial mean of a probe's activation map for one
noisy input; ``phi`` averages ``abar`` at the middle-block output over noise
draws. Everything else here (participation ratios, selectivity, stability,
channel statistics) is computed from those vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import Dataset, corrupt
from .seeding import derive_seed
from .unet import MIDDLE_OUT, Probe, UNetModel, activations

SELECTIVE_THRESHOLD = 0.5
DEFAULT_N_DRAWS = 16
# noise level at which phi is read out for sparsity, selectivity and geometry
DEFAULT_ANALYSIS_SIGMA = 0.5


@dataclass
class ReprVector:
    """Spatial-average vectors, one row per image."""

    values: np.ndarray
    probe: Probe
    sigma: float | None = None
    n_draws: int = 1
    image_ids: list | None = None

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, i) -> np.ndarray:
        return self.values[i]


def _batched(x: np.ndarray, batch: int):
    for s in range(0, len(x), batch):
        yield slice(s, s + batch)


def _abar_array(model: UNetModel, x_sigma: np.ndarray, probe: Probe, batch: int = 256) -> np.ndarray:
    out = []
    for sl in _batched(x_sigma, batch):
        out.append(activations(model, x_sigma[sl], probe).astype(np.float64).mean(axis=(2, 3)))
    return np.concatenate(out)


def abar(model: UNetModel, x_sigma, probe: Probe = MIDDLE_OUT, image_ids=None) -> ReprVector:
    """Spatial mean of the probe's activations for each (already noisy) input."""
    x = np.asarray(x_sigma)
    single = x.ndim == 3
    vals = _abar_array(model, x[None] if single else x, probe)
    return ReprVector(vals[0] if single else vals, probe, image_ids=image_ids)


def phi(model: UNetModel, x, sigma: float, n_draws: int = DEFAULT_N_DRAWS, seed: int = 0,
        probe: Probe = MIDDLE_OUT, image_ids=None) -> ReprVector:
    """Monte-Carlo mean of abar(x + sigma z) over ``n_draws`` noise draws.

    Draw k reuses ``corrupt(x, sigma, seed_k)`` with seed_0 = seed, so one draw
    equals a single abar call on ``corrupt(x, sigma, seed)``.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    x = np.asarray(x)
    single = x.ndim == 3
    xb = x[None] if single else x
    acc = np.zeros((len(xb), model.probe_channels(probe)))
    for k in range(n_draws):
        s = seed if k == 0 else derive_seed(seed, "phi-draw", k)
        acc += _abar_array(model, corrupt(xb, sigma, s), probe)
    vals = acc / n_draws
    return ReprVector(vals[0] if single else vals, probe, sigma, n_draws, image_ids)


def participation_ratio(v, d: int | None = None, axis: int = -1):
    """||v||_1^2 / (d ||v||_2^2) along ``axis``; ``d`` defaults to the vector length."""
    v = np.abs(np.asarray(v, dtype=np.float64))
    if d is None:
        d = v.shape[axis]
    # scaling by the max first keeps constant and one-hot vectors exact
    peak = v.max(axis=axis, keepdims=True)
    v = v / np.where(peak > 0, peak, 1.0)
    l1 = v.sum(axis=axis)
    l2 = (v * v).sum(axis=axis)
    if np.any(l2 == 0):
        raise ValueError("participation ratio is undefined for an all-zero vector")
    return l1 * l1 / (d * l2)


def cosine(a, b, axis: int = -1):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    num = (a * b).sum(axis=axis)
    den = np.sqrt((a * a).sum(axis=axis) * (b * b).sum(axis=axis))
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return np.clip(c, -1.0, 1.0)


def block_sparsity_profile(model: UNetModel, dataset: Dataset, sigma: float, seed: int = 0,
                           probes=None) -> dict[str, np.ndarray]:
    """PR of abar over the dataset for every multi-channel block input/output probe."""
    x_sigma = corrupt(dataset.images, sigma, seed)
    out = {}
    for probe in probes or model.probes():
        if model.probe_channels(probe) <= 1:
            continue
        vals = _abar_array(model, x_sigma, probe)
        out[probe.name] = participation_ratio(vals)
    return out


def histogram_table(values: np.ndarray, bins: int = 20) -> list[tuple[float, float, int]]:
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]


@dataclass
class SelectivityProfile:
    pr: np.ndarray                   # per-channel PR across images; nan for dead channels
    mean_activation: np.ndarray
    phi_table: np.ndarray            # images x channels
    threshold: float = SELECTIVE_THRESHOLD
    dead: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.dead is None:
            self.dead = ~np.isfinite(self.pr)

    @property
    def selective(self) -> np.ndarray:
        return np.flatnonzero(~self.dead & (self.pr < self.threshold))

    @property
    def common(self) -> np.ndarray:
        return np.flatnonzero(~self.dead & (self.pr >= self.threshold))

    def category(self, channel: int) -> str:
        if self.dead[channel]:
            return "dead"
        return "selective" if self.pr[channel] < self.threshold else "common"


def selectivity_from_table(phi_table: np.ndarray, threshold: float = SELECTIVE_THRESHOLD) -> SelectivityProfile:
    """Per-channel PR of the column c(i) = (phi(x_1)[i], ..., phi(x_n)[i]).

    Channels that never activate have no defined PR; they are marked dead
    rather than given a sentinel value.
    """
    table = np.asarray(phi_table, dtype=np.float64)
    alive = (table != 0).any(axis=0)
    pr = np.full(table.shape[1], np.nan)
    if alive.any():
        pr[alive] = participation_ratio(table[:, alive], axis=0)
    return SelectivityProfile(pr, table.mean(axis=0), table, threshold, ~alive)


def channel_selectivity(model: UNetModel, dataset: Dataset, sigma: float,
                        n_draws: int = DEFAULT_N_DRAWS, seed: int = 0,
                        threshold: float = SELECTIVE_THRESHOLD) -> SelectivityProfile:
    table = phi(model, dataset.images, sigma, n_draws, seed).values
    return selectivity_from_table(table, threshold)


def top_activating_images(profile: SelectivityProfile, channel: int, k: int) -> np.ndarray:
    """Ids of the k images with the largest phi[channel]; ties go to the lower id."""
    col = profile.phi_table[:, channel]
    if k > len(col):
        raise ValueError(f"k={k} exceeds dataset size {len(col)}")
    order = np.lexsort((np.arange(len(col)), -col))
    return order[:k]


def stability_curve(model: UNetModel, x, sigma_ref: float, sigma_grid, n_draws: int = DEFAULT_N_DRAWS,
                    probe: Probe = MIDDLE_OUT, seed: int = 0) -> np.ndarray:
    """cos(phi_probe(x, sigma_ref), phi_probe(x, sigma)) for each image and grid point.

    The same noise seeds are used at every sigma, so sigma == sigma_ref gives 1.
    """
    ref = phi(model, x, sigma_ref, n_draws, seed, probe).values
    cols = [cosine(ref, phi(model, x, s, n_draws, seed, probe).values) for s in sigma_grid]
    return np.stack(cols, axis=-1)


@dataclass
class ChannelStats:
    histograms: list[tuple[np.ndarray, np.ndarray]]   # per channel: (counts, edges)
    spatial_pr: np.ndarray                            # per channel, mean over images
    cumulative_variance: list[np.ndarray]             # per channel explained-variance curve
    selectivity: SelectivityProfile
    rank_correlation: float                           # Spearman(selectivity PR, spatial PR)


def pca_cumulative_variance(maps: np.ndarray) -> np.ndarray:
    """Cumulative explained-variance fractions of vectorized maps (rows = samples)."""
    X = np.asarray(maps, dtype=np.float64).reshape(len(maps), -1)
    X = X - X.mean(axis=0)
    cov = X.T @ X / max(len(X) - 1, 1)
    evals = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)
    total = evals.sum()
    if total == 0:
        return np.ones_like(evals)
    return np.cumsum(evals) / total


def channel_stats(model: UNetModel, dataset: Dataset, sigma: float, n_draws: int = DEFAULT_N_DRAWS,
                  seed: int = 0, bins: int = 20) -> ChannelStats:
    prof = channel_selectivity(model, dataset, sigma, n_draws, seed)
    maps = activations(model, corrupt(dataset.images, sigma, seed), MIDDLE_OUT).astype(np.float64)
    n, d = maps.shape[:2]
    flat = maps.reshape(n, d, -1)
    sums = (flat ** 2).sum(axis=2)
    l1 = flat.sum(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        spr = np.where(sums > 0, l1 ** 2 / (flat.shape[2] * sums), np.nan)
    spatial = np.array([np.nanmean(spr[:, i]) if np.isfinite(spr[:, i]).any() else np.nan
                        for i in range(d)])
    hists = [np.histogram(prof.phi_table[:, i], bins=bins) for i in range(d)]
    cumvar = [pca_cumulative_variance(flat[:, i, :]) for i in range(d)]
    ok = np.isfinite(prof.pr) & np.isfinite(spatial)
    rho = float(stats.spearmanr(prof.pr[ok], spatial[ok]).statistic) if ok.sum() > 2 else float("nan")
    return ChannelStats(hists, spatial, cumvar, prof, rho)
