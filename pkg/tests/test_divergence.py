import numpy as np
import pytest

from denoiserlab import data, divergence as dv, representation as rep, unet
from denoiserlab.sampler import GuidanceConfig, make_schedule
from denoiserlab.unet import UNetConfig

TINY = UNetConfig(base_channels=4, encoder_blocks=1, layers_per_encoder=1, layers_middle=1,
                  image_size=8)
WIDE = np.geomspace(1e-3, 1e3, 80)


def _shift_pair(n, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((n, 1)), 1 + rng.standard_normal((n, 1)),
            dv.gaussian_score(0.0, 1.0), dv.gaussian_score(1.0, 1.0))


def test_log_trapezoid_matches_analytic_integral():
    # int_a^b sigma / (1 + sigma^2)^2 dsigma = (1/(1+a^2) - 1/(1+b^2)) / 2
    a, b = 0.01, 1.0
    grid = np.geomspace(a, b, 400)
    got = dv.log_trapezoid(1 / (1 + grid ** 2) ** 2, grid)
    assert got == pytest.approx(0.5 * (1 / (1 + a ** 2) - 1 / (1 + b ** 2)), rel=1e-4)


@pytest.mark.parametrize("grid", [[1.0], [0.0, 1.0], [1.0, 0.5]])
def test_log_trapezoid_rejects_bad_grid(grid):
    with pytest.raises(dv.DivergenceError):
        dv.log_trapezoid(np.ones(len(grid)), grid)


def test_gaussian_shift_one_sided_terms_are_kl():
    s1, s2, f1, f2 = _shift_pair(200)
    est = dv.score_distance(s1, s2, f1, f2, WIDE)
    kl = dv.gaussian_kl(0, 1, 1, 1)
    assert kl == 0.5
    for side in est.one_sided:
        assert side == pytest.approx(kl, rel=0.01)
    assert est.value == pytest.approx(2 * kl, rel=0.01)


def test_gaussian_variance_ratio_kl():
    rng = np.random.default_rng(1)
    s1, s2 = rng.standard_normal((4000, 1)), np.sqrt(2) * rng.standard_normal((4000, 1))
    est = dv.score_distance(s1, s2, dv.gaussian_score(0, 1), dv.gaussian_score(0, 2), WIDE)
    kl12, kl21 = dv.gaussian_kl(0, 1, 0, 2), dv.gaussian_kl(0, 2, 0, 1)
    assert est.one_sided[0] == pytest.approx(kl12, rel=0.1)
    assert est.one_sided[1] == pytest.approx(kl21, rel=0.1)
    assert abs(est.value - kl12 - kl21) < 3 * est.stderr + 0.01


def test_grid_refinement_is_stable():
    s1, s2, f1, f2 = _shift_pair(50)
    coarse = dv.score_distance(s1, s2, f1, f2, np.geomspace(1e-3, 1e3, 40)).value
    fine = dv.score_distance(s1, s2, f1, f2, np.geomspace(1e-3, 1e3, 79)).value
    assert abs(fine - coarse) / fine < 0.01


def test_training_grid_truncates_the_integral():
    s1, s2, f1, f2 = _shift_pair(20)
    est = dv.score_distance(s1, s2, f1, f2, dv.default_sigma_grid(n=200))
    assert est.one_sided[0] == pytest.approx(0.5 * (1 / 1.0001 - 0.5), rel=1e-3)


def test_exact_symmetry_under_swap():
    rng = np.random.default_rng(3)
    s1, s2 = rng.standard_normal((30, 2)), 0.5 + 2 * rng.standard_normal((30, 2))
    f1, f2 = dv.gaussian_score(0, 1), dv.gaussian_score(0.5, 4)
    grid = dv.default_sigma_grid()
    a = dv.score_distance(s1, s2, f1, f2, grid, seeds=(5, 9))
    b = dv.score_distance(s2, s1, f2, f1, grid, seeds=(9, 5))
    assert a.value == b.value and a.stderr == b.stderr


def test_stderr_shrinks_as_inverse_sqrt_n():
    rng = np.random.default_rng(4)
    f1, f2 = dv.gaussian_score(0, 1), dv.gaussian_score(0, 3)
    ns = np.array([50, 200, 800, 3200])
    ses = [dv.score_distance(rng.standard_normal((n, 1)), np.sqrt(3) * rng.standard_normal((n, 1)),
                             f1, f2, dv.default_sigma_grid()).stderr for n in ns]
    slope = np.polyfit(np.log(ns), np.log(ses), 1)[0]
    assert -0.6 < slope < -0.4


def test_needs_two_samples_per_side():
    f = dv.gaussian_score(0, 1)
    with pytest.raises(dv.DivergenceError):
        dv.score_distance(np.zeros((1, 1)), np.zeros((5, 1)), f, f, dv.default_sigma_grid())


def test_embedding_report_proportional_case():
    dphi2 = np.array([0.5, 1.0, 2.0, 4.0, 1e-14])
    rpt = dv.embedding_report(dphi2, 3 * dphi2)
    assert rpt.A == pytest.approx(3.0) and rpt.B == pytest.approx(3.0) and rpt.ratio == pytest.approx(1.0)
    assert rpt.spearman == pytest.approx(1.0)
    assert rpt.n_excluded == 1 and not rpt.used[-1]
    with pytest.raises(dv.DivergenceError):
        dv.embedding_report([0.0, 1e-13], [1.0, 1.0])


def test_embedding_report_csv(tmp_path):
    rpt = dv.embedding_report([1.0, 2.0, 3.0], [1.0, 5.0, 4.0], [0.1, 0.2, 0.3])
    assert rpt.A == 1.0 and rpt.B == 2.5 and rpt.spearman == pytest.approx(0.5)
    rpt.to_csv(tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "pair,dphi2,d2,stderr,dphi,d,used" and len(lines) == 4


@pytest.fixture(scope="module")
def tiny():
    return unet.build(TINY, seed=0), data.gen_textures(4, 8, seed=0).images.astype(np.float64)


def test_conditional_score_self_target_is_plain_residual(tiny):
    model, images = tiny
    x = images[:2] + 0.2 * np.random.default_rng(0).standard_normal(images[:2].shape)
    target = rep.abar(model, x).values
    got = dv.conditional_score(model, x, target, 0.2)
    np.testing.assert_allclose(got, unet.residual(model, x), atol=1e-6)


def test_density_distance_symmetric_and_finite(tiny):
    model, images = tiny
    grid = np.geomspace(0.05, 1.0, 4)
    sched = make_schedule(1.0, 0.05, 4)
    g = GuidanceConfig(max_iter=5)
    a = dv.density_distance(model, images[0], images[1], grid, 2, sched, g, seeds=(1, 2), phi_draws=2)
    b = dv.density_distance(model, images[1], images[0], grid, 2, sched, g, seeds=(2, 1), phi_draws=2)
    assert np.isfinite(a.value) and a.value >= 0 and a.value == b.value


def test_embedding_check_requires_min_pairs(tiny):
    model, images = tiny
    with pytest.raises(dv.DivergenceError):
        dv.embedding_check(model, [(images[0], images[1])], 0.2, min_pairs=10)
