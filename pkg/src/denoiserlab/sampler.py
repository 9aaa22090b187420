"""Reverse-diffusion sampling and representation-guided reconstruction.

Any object with ``residual(x, sigma) -> ndarray`` can drive the sampler; a
UNet ignores ``sigma`` (it is blind), analytic oracles use it. Guidance
needs a UNet since it backpropagates through the encoder and middle block.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import ndnet
from .data import corrupt
from .seeding import derive_seed
from .unet import MIDDLE_OUT, UNetModel

logger = logging.getLogger(__name__)

STEP_RULES = ("full", "ancestral")


class SamplingError(RuntimeError):
    pass


class GuidanceError(SamplingError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Noise levels visited by the sampler, largest first."""

    sigmas: tuple[float, ...]
    mean: float | np.ndarray = 0.0

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        if len(s) < 2:
            raise ValueError("a schedule needs at least two noise levels")
        if not np.all(np.diff(s) < 0):
            raise ValueError("schedule must be strictly decreasing")
        if s[-1] < 0:
            raise ValueError("noise levels must be nonnegative")
        object.__setattr__(self, "sigmas", tuple(float(v) for v in s))

    @property
    def T(self) -> int:
        return len(self.sigmas)

    @property
    def sigma_max(self) -> float:
        return self.sigmas[0]


def make_schedule(sigma_max: float, sigma_min: float, T: int, mean=0.0) -> Schedule:
    """Geometric schedule from ``sigma_max`` down to ``sigma_min`` with ``T`` levels."""
    if not sigma_max > sigma_min > 0:
        raise ValueError("need sigma_max > sigma_min > 0")
    if T < 2:
        raise ValueError("T must be at least 2")
    r = (sigma_min / sigma_max) ** (1.0 / (T - 1))
    sig = [sigma_max * r ** k for k in range(T)]
    sig[-1] = sigma_min
    return Schedule(tuple(sig), mean)


@dataclass(frozen=True)
class GuidanceConfig:
    lr: float = 1.0
    max_iter: int = 50
    tol_rel: float = 1e-3
    n_draws: int = 1
    fixed_noise: bool = False    # reuse one conditioner noise draw across steps

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("guidance lr must be positive")
        if self.tol_rel <= 0:
            raise ValueError("tol_rel must be positive")
        if self.max_iter < 0:
            raise ValueError("max_iter must be nonnegative")
        if self.n_draws != 1:
            raise ValueError("guidance matches single noisy instances; n_draws must be 1")

    @property
    def enabled(self) -> bool:
        return self.max_iter > 0


@dataclass
class GuidanceResult:
    x: np.ndarray
    loss: np.ndarray             # per chain, at the returned x
    initial_loss: np.ndarray
    iterations: np.ndarray       # per chain, inner steps attempted
    target_norm2: np.ndarray


def _batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    return (x[None], True) if x.ndim == 3 else (x, False)


def _frozen(model: UNetModel) -> UNetModel:
    """Same weights without parameter gradients, so backward only reaches the input."""
    return UNetModel(model.config, {k: ndnet.Tensor(v.data, name=k) for k, v in model.params.items()})


def _abar(model: UNetModel, x: np.ndarray) -> np.ndarray:
    _, cap = model.forward(x.astype(model.params["out.weight"].dtype), {MIDDLE_OUT.name}, "M")
    return cap[MIDDLE_OUT.name].data.astype(np.float64).mean(axis=(2, 3))


def matching_loss(model: UNetModel, x: ndnet.Tensor, target) -> ndnet.Tensor:
    """sum over the batch of ||abar_M(x) - target||^2 as a differentiable scalar."""
    _, cap = model.forward(x, {MIDDLE_OUT.name}, "M")
    a = ndnet.spatial_mean(cap[MIDDLE_OUT.name])
    return ndnet.sum(ndnet.square(ndnet.sub(a, ndnet.as_tensor(target, a.dtype))))


def _loss_and_grad(model: UNetModel, x: np.ndarray, target: np.ndarray):
    dtype = model.params["out.weight"].dtype
    xt = ndnet.Tensor(x.astype(dtype), requires_grad=True)
    with ndnet.Tape() as tape:
        _, cap = model.forward(xt, {MIDDLE_OUT.name}, "M")
        a = ndnet.spatial_mean(cap[MIDDLE_OUT.name])
        d = ndnet.sub(a, ndnet.Tensor(target.astype(dtype)))
        per = ndnet.sum(ndnet.square(d), axis=1)
        total = ndnet.sum(per)
    tape.backward(total)
    return per.data.astype(np.float64), xt.grad.astype(np.float64)


def guidance_step(model: UNetModel, x_t, x_c_t, config: GuidanceConfig) -> GuidanceResult:
    """Gradient descent on ||abar_M(x) - abar_M(x_c_t)||^2, one chain per batch row.

    Each chain stops once its loss is below ``tol_rel * ||abar_M(x_c_t)||^2``
    or after ``max_iter`` attempted steps. A step that raises the loss is
    rejected and that chain's step size halved.
    """
    x, single = _batch(x_t)
    xc, _ = _batch(x_c_t)
    if x.shape != xc.shape:
        raise ndnet.ShapeError(f"sample {x.shape} and conditioner {xc.shape} differ in shape")
    if not config.enabled:
        return _unbatch(_identity_result(x), single)
    net = _frozen(model)
    return _unbatch(_descend(net, x, _abar(net, xc), config), single)


def guide_to_target(model: UNetModel, x, target, config: GuidanceConfig) -> GuidanceResult:
    """Like ``guidance_step`` but toward given representation vectors (one row per chain)."""
    xb, single = _batch(x)
    t = np.asarray(target, dtype=np.float64).reshape(len(xb), -1)
    if not config.enabled:
        return _unbatch(_identity_result(xb), single)
    return _unbatch(_descend(_frozen(model), xb, t, config), single)


def _identity_result(x) -> GuidanceResult:
    zero = np.zeros(len(x))
    return GuidanceResult(x.astype(np.float64), zero, zero, np.zeros(len(x), dtype=int), zero)


def _descend(net: UNetModel, x: np.ndarray, target: np.ndarray, config: GuidanceConfig) -> GuidanceResult:
    x = x.astype(np.float64)
    n = len(x)
    tnorm = (target ** 2).sum(axis=1)
    tol = config.tol_rel * tnorm
    loss, grad = _loss_and_grad(net, x, target)
    if not np.all(np.isfinite(grad)):
        raise GuidanceError("non-finite guidance gradient at iteration 0")
    init = loss.copy()
    eta = np.full(n, float(config.lr))
    iters = np.zeros(n, dtype=int)
    done = loss <= tol
    for it in range(config.max_iter):
        act = np.flatnonzero(~done)
        if len(act) == 0:
            break
        cand = x[act] - eta[act, None, None, None] * grad[act]
        l_new, g_new = _loss_and_grad(net, cand, target[act])
        if not np.all(np.isfinite(g_new)) or not np.all(np.isfinite(l_new)):
            raise GuidanceError(f"non-finite guidance gradient at iteration {it + 1}")
        iters[act] += 1
        better = l_new <= loss[act]
        acc = act[better]
        x[acc] = cand[better]
        loss[acc] = l_new[better]
        grad[acc] = g_new[better]
        eta[act[~better]] *= 0.5
        done[acc] = loss[acc] <= tol[acc]
    return GuidanceResult(x, loss, init, iters, tnorm)


def _unbatch(res: GuidanceResult, single: bool) -> GuidanceResult:
    if single:
        res.x = res.x[0]
    return res


def estimate_sigma(model, x, sigma=None):
    """Residual norm over sqrt(pixel count): the noise level the denoiser sees."""
    xb, single = _batch(x)
    r = np.asarray(model.residual(xb, sigma), dtype=np.float64).reshape(len(xb), -1)
    est = np.sqrt((r ** 2).sum(axis=1) / r.shape[1])
    return float(est[0]) if single else est


@dataclass
class TrajectoryLog:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "sigma", "guidance_loss", "guidance_iters", "sigma_hat"])
            for r in self.rows:
                w.writerow([r["step"], repr(r["sigma"]), repr(r["guidance_loss"]),
                            r["guidance_iters"], repr(r["sigma_hat"])])


def _score_step(model, x, sigma, sigma_next, rule, rng, step):
    r = np.asarray(model.residual(x, sigma), dtype=np.float64)
    z = rng.standard_normal(x.shape)
    if rule == "full":
        out = x + r + sigma_next * z
    else:
        # exact variance-exploding ancestral move from sigma to sigma_next
        frac = (sigma ** 2 - sigma_next ** 2) / sigma ** 2
        out = x + frac * r + sigma_next * np.sqrt(frac) * z
    if not np.all(np.isfinite(out)):
        raise SamplingError(f"non-finite sampler state at step {step} (sigma={sigma:.4g})")
    return out


def _init(shape, n, schedule: Schedule, seed):
    rng = np.random.default_rng(derive_seed(seed, "init"))
    mean = np.broadcast_to(np.asarray(schedule.mean, dtype=np.float64), tuple(shape))
    return mean + schedule.sigma_max * rng.standard_normal((n,) + tuple(shape))


def sample_unconditional(model, shape, schedule: Schedule, seed: int = 0, n: int | None = None,
                         rule: str = "full", log: TrajectoryLog | None = None) -> np.ndarray:
    """Reverse diffusion along ``schedule`` starting from N(mean, sigma_max^2).

    ``rule="full"`` takes the whole denoising move and then adds noise at the
    next level. ``rule="ancestral"`` takes the partial move whose output has
    exactly the next level's noise variance for Gaussian data. ``n`` chains
    are run in one batch; with ``n=None`` a single image is returned.
    """
    if rule not in STEP_RULES:
        raise ValueError(f"unknown step rule {rule!r}")
    x = _init(shape, 1 if n is None else n, schedule, seed)
    return _run(model, x, schedule, seed, rule, None, GuidanceConfig(max_iter=0), log,
                single=n is None)


def reconstruct(model, x_c, schedule: Schedule, guidance: GuidanceConfig = GuidanceConfig(),
                seed: int = 0, rule: str = "full", log: TrajectoryLog | None = None) -> np.ndarray:
    """Sample an image whose middle-block representation matches that of ``x_c``.

    At every level the conditioner is corrupted to the current sigma, the
    sample is guided toward its representation, then a score step is taken.
    ``x_c`` may be a batch; each row is an independent chain. With guidance
    disabled the output equals ``sample_unconditional`` with the same seed.
    """
    if rule not in STEP_RULES:
        raise ValueError(f"unknown step rule {rule!r}")
    xc, single = _batch(x_c)
    x = _init(xc.shape[1:], len(xc), schedule, seed)
    return _run(model, x, schedule, seed, rule, xc, guidance, log, single)


def _run(model, x, schedule, seed, rule, xc, guidance, log, single, on_guided=None):
    sig = schedule.sigmas
    fixed_z = None
    if xc is not None and guidance.fixed_noise:
        fixed_z = np.random.default_rng(derive_seed(seed, "cond-fixed")).standard_normal(xc.shape)
    for t in range(len(sig) - 1):
        rng = np.random.default_rng(derive_seed(seed, "step", t))
        g_loss, g_iter = 0.0, 0
        if xc is not None and guidance.enabled:
            if fixed_z is None:
                crng = np.random.default_rng(derive_seed(seed, "cond", t))
                xct = xc + sig[t] * crng.standard_normal(xc.shape)
            else:
                xct = xc + sig[t] * fixed_z
            res = guidance_step(model, x, xct, guidance)
            if np.any(res.loss > 10 * np.maximum(res.initial_loss, 1e-300)):
                raise GuidanceError(f"guidance diverged at step {t} (sigma={sig[t]:.4g})")
            if on_guided is not None:
                on_guided(t, x, res.x)
            x = res.x
            g_loss, g_iter = float(res.loss.mean()), int(res.iterations.max())
        elif on_guided is not None:
            on_guided(t, x, x)
        if log is not None:
            log.rows.append({"step": t, "sigma": sig[t], "guidance_loss": g_loss,
                             "guidance_iters": g_iter,
                             "sigma_hat": float(np.mean(estimate_sigma(model, x, sig[t])))})
        x = _score_step(model, x, sig[t], sig[t + 1], rule, rng, t)
    x = x + np.asarray(model.residual(x, sig[-1]), dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise SamplingError("non-finite sampler state at the final denoising step")
    return x[0] if single else x


@dataclass
class NoiseRow:
    sigma: float
    sigma_hat_pre: np.ndarray
    sigma_hat_post: np.ndarray

    @property
    def rel_change(self) -> np.ndarray:
        return np.abs(self.sigma_hat_post - self.sigma_hat_pre) / self.sigma_hat_pre


def verify_noise_preservation(model: UNetModel, x, sigma_list, guidance: GuidanceConfig = GuidanceConfig(),
                              seed: int = 0, rule: str = "full", mean=None) -> list[NoiseRow]:
    """Estimated noise level just before and just after each guidance step of a reconstruction.

    ``reconstruct`` is run on the batch ``x`` along the schedule ``sigma_list``
    (sorted largest first) and sigma-hat is read on every chain around the
    guidance step at each level. The last level only takes the final
    denoising move, so it has no row. ``mean`` is the initial mean; the
    batch mean image by default.
    """
    xb, _ = _batch(x)
    sig = tuple(sorted((float(s) for s in sigma_list), reverse=True))
    schedule = Schedule(sig, xb.mean(axis=0) if mean is None else mean)
    rows = []

    def record(t, before, after):
        rows.append(NoiseRow(sig[t], np.atleast_1d(estimate_sigma(model, before, sig[t])),
                             np.atleast_1d(estimate_sigma(model, after, sig[t]))))

    _run(model, _init(xb.shape[1:], len(xb), schedule, seed), schedule, seed, rule, xb,
         guidance, None, False, record)
    return rows
