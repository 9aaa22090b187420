"""Score-based distance between conditional densities and the embedding check.

The distance between densities p and q is

    d^2 = int_0^inf ( E_p ||s_p - s_q||^2 + E_q ||s_p - s_q||^2 ) sigma dsigma

with s the score of the density blurred at noise level sigma. For Gaussians
each one-sided term equals a KL divergence, which is how the quadrature and
Monte-Carlo machinery is validated. The integral is evaluated on a finite
sigma grid by the trapezoid rule in log sigma (integrand times sigma^2).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .representation import phi as phi_vector
from .sampler import GuidanceConfig, Schedule, guide_to_target, make_schedule, reconstruct
from .seeding import derive_seed
from .unet import UNetModel, residual

DEGENERACY_FLOOR = 1e-12

ScoreFn = Callable[[np.ndarray, float], np.ndarray]


class DivergenceError(ValueError):
    pass


@dataclass
class DistanceEstimate:
    value: float
    stderr: float
    sigma_grid: np.ndarray
    contributions: np.ndarray       # (2, G): mean integrand per sigma for each side
    n_samples: tuple[int, int]
    per_sample: tuple[np.ndarray, np.ndarray]

    @property
    def one_sided(self) -> tuple[float, float]:
        return float(self.per_sample[0].mean()), float(self.per_sample[1].mean())


def log_trapezoid(values: np.ndarray, sigma_grid) -> np.ndarray:
    """int f(sigma) sigma dsigma over the grid, along the last axis of ``values``."""
    s = np.asarray(sigma_grid, dtype=np.float64)
    if s.ndim != 1 or len(s) < 2 or np.any(s <= 0) or np.any(np.diff(s) <= 0):
        raise DivergenceError("sigma grid must be positive, increasing, with >= 2 points")
    return np.trapezoid(np.asarray(values) * s ** 2, np.log(s), axis=-1)


def default_sigma_grid(sigma_min: float = 0.01, sigma_max: float = 1.0, n: int = 12) -> np.ndarray:
    return np.geomspace(sigma_min, sigma_max, n)


def _side(samples: np.ndarray, score_a: ScoreFn, score_b: ScoreFn, sigma_grid, seed: int):
    """Per-sample integrals of ||score_a - score_b||^2 over the grid, plus the per-sigma means."""
    n = len(samples)
    vals = np.empty((n, len(sigma_grid)))
    for g, s in enumerate(sigma_grid):
        rng = np.random.default_rng(derive_seed(seed, "sigma", g))
        y = samples + s * rng.standard_normal(samples.shape)
        diff = (np.asarray(score_a(y, s), dtype=np.float64) - np.asarray(score_b(y, s), dtype=np.float64))
        vals[:, g] = (diff.reshape(n, -1) ** 2).sum(axis=1)
    return log_trapezoid(vals, sigma_grid), vals.mean(axis=0)


def score_distance(samples_1: np.ndarray, samples_2: np.ndarray, score_1: ScoreFn, score_2: ScoreFn,
                   sigma_grid, seeds: tuple[int, int] = (0, 1)) -> DistanceEstimate:
    """Symmetrized score distance from samples of each density and their blurred scores.

    Side i draws its noise from ``seeds[i]``, so swapping the densities and
    the seeds together gives exactly the same value.
    """
    s1 = np.asarray(samples_1, dtype=np.float64)
    s2 = np.asarray(samples_2, dtype=np.float64)
    if len(s1) < 2 or len(s2) < 2:
        raise DivergenceError("need at least two samples from each density")
    grid = np.asarray(sigma_grid, dtype=np.float64)
    i1, c1 = _side(s1, score_1, score_2, grid, seeds[0])
    i2, c2 = _side(s2, score_2, score_1, grid, seeds[1])
    value = float(i1.mean()) + float(i2.mean())
    se = float(np.sqrt(i1.var(ddof=1) / len(i1) + i2.var(ddof=1) / len(i2)))
    return DistanceEstimate(value, se, grid, np.stack([c1, c2]), (len(i1), len(i2)), (i1, i2))


def gaussian_score(mean, var) -> ScoreFn:
    """Score of N(mean, var) blurred by N(0, sigma^2): -(y - mean) / (var + sigma^2)."""
    return lambda y, s: -(y - mean) / (var + s ** 2)


def gaussian_kl(mu1, var1, mu2, var2) -> float:
    return float(0.5 * (np.log(var2 / var1) + (var1 + (mu1 - mu2) ** 2) / var2 - 1.0))


# learned conditional densities -------------------------------------------------

def conditional_score(model: UNetModel, x_sigma, phi_target, sigma: float,
                      guidance: GuidanceConfig = GuidanceConfig()) -> np.ndarray:
    """Denoised projection minus input: sigma^2 times the score of x_sigma given phi.

    ``x_sigma`` is guided toward ``phi_target`` and then denoised; the
    difference to ``x_sigma`` is returned, in the same units as a residual.
    """
    x = np.asarray(x_sigma, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    t = np.broadcast_to(np.asarray(phi_target, dtype=np.float64), (len(xb), np.shape(phi_target)[-1]))
    g = guide_to_target(model, xb, t, guidance).x
    out = g + residual(model, g).astype(np.float64) - xb
    return out[0] if single else out


def density_distance(model: UNetModel, x1, x2, sigma_grid=None, n_samples: int = 2,
                     schedule: Schedule | None = None, guidance: GuidanceConfig = GuidanceConfig(),
                     seeds: tuple[int, int] = (0, 1), phi_draws: int = 4) -> DistanceEstimate:
    """Score distance between p(x | phi(x1)) and p(x | phi(x2)).

    Samples of each conditional come from guided reconstruction; the
    conditional score at each grid sigma targets phi of the conditioning
    image at that sigma, averaged over ``phi_draws`` noise draws.
    """
    if n_samples < 2:
        raise DivergenceError("need at least two samples per side")
    grid = default_sigma_grid() if sigma_grid is None else np.asarray(sigma_grid, dtype=np.float64)
    schedule = schedule or make_schedule(float(grid[-1]), float(grid[0]), 20,
                                         mean=float(np.mean([np.mean(x1), np.mean(x2)])))
    images = (np.asarray(x1, dtype=np.float64), np.asarray(x2, dtype=np.float64))
    targets = [{float(s): phi_vector(model, im, float(s), phi_draws, derive_seed(sd, "phi", g)).values
                for g, s in enumerate(grid)} for im, sd in zip(images, seeds)]
    samples = [reconstruct(model, np.repeat(im[None], n_samples, axis=0), schedule, guidance,
                           seed=derive_seed(sd, "recon")) for im, sd in zip(images, seeds)]

    def score_for(k: int) -> ScoreFn:
        return lambda y, s: conditional_score(model, y, targets[k][float(s)], s, guidance) / s ** 2

    return score_distance(samples[0], samples[1], score_for(0), score_for(1), grid, seeds)


@dataclass
class EmbeddingReport:
    dphi2: np.ndarray
    d2: np.ndarray
    stderr: np.ndarray
    used: np.ndarray             # pairs above the degeneracy floor
    A: float
    B: float
    A_p5: float
    B_p95: float
    spearman: float

    @property
    def ratio(self) -> float:
        return self.B / self.A if self.A > 0 else float("inf")

    @property
    def n_excluded(self) -> int:
        return int((~self.used).sum())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pair", "dphi2", "d2", "stderr", "dphi", "d", "used"])
            for i in range(len(self.dphi2)):
                w.writerow([i, repr(float(self.dphi2[i])), repr(float(self.d2[i])),
                            repr(float(self.stderr[i])), repr(float(np.sqrt(self.dphi2[i]))),
                            repr(float(np.sqrt(max(self.d2[i], 0.0)))), int(self.used[i])])


def embedding_report(dphi2, d2, stderr=None, floor: float = DEGENERACY_FLOOR) -> EmbeddingReport:
    """Tightest constants A <= d2 / dphi2 <= B over the non-degenerate pairs."""
    dphi2 = np.asarray(dphi2, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    stderr = np.zeros_like(d2) if stderr is None else np.asarray(stderr, dtype=np.float64)
    used = dphi2 >= floor
    if not used.any():
        raise DivergenceError("every pair is below the degeneracy floor")
    ratio = d2[used] / dphi2[used]
    rho = float(stats.spearmanr(dphi2[used], d2[used]).statistic) if used.sum() > 2 else float("nan")
    return EmbeddingReport(dphi2, d2, stderr, used, float(ratio.min()), float(ratio.max()),
                           float(np.percentile(ratio, 5)), float(np.percentile(ratio, 95)), rho)


def embedding_check(model: UNetModel, image_pairs: Sequence[tuple[np.ndarray, np.ndarray]],
                    analysis_sigma: float, sigma_grid=None, n_samples: int = 2,
                    schedule: Schedule | None = None, guidance: GuidanceConfig = GuidanceConfig(),
                    seed: int = 0, phi_draws: int = 16, min_pairs: int = 10) -> EmbeddingReport:
    """||phi(x1) - phi(x2)||^2 against the density distance, over image pairs."""
    if len(image_pairs) < min_pairs:
        raise DivergenceError(f"need at least {min_pairs} pairs, got {len(image_pairs)}")
    dphi2, d2, se = [], [], []
    for i, (a, b) in enumerate(image_pairs):
        pseed = derive_seed(seed, "phi-pair", i)
        pa = phi_vector(model, a, analysis_sigma, phi_draws, pseed).values
        pb = phi_vector(model, b, analysis_sigma, phi_draws, pseed).values
        dphi2.append(float(((pa - pb) ** 2).sum()))
        if dphi2[-1] < DEGENERACY_FLOOR:
            d2.append(0.0)
            se.append(0.0)
            continue
        est = density_distance(model, a, b, sigma_grid, n_samples, schedule, guidance,
                               (derive_seed(seed, "pair", i, 0), derive_seed(seed, "pair", i, 1)))
        d2.append(est.value)
        se.append(est.stderr)
    return embedding_report(dphi2, d2, se)
