import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from denoiserlab import data, representation as rep, unet
from denoiserlab.unet import MIDDLE_OUT, Probe, UNetConfig


@pytest.fixture(scope="module")
def model():
    return unet.build(UNetConfig(), seed=0)


@pytest.fixture(scope="module")
def images():
    return data.gen_textures(6, 16, seed=0).images


def test_pr_unit_cases_exact():
    d = 7
    onehot = np.zeros(d)
    onehot[3] = 2.5
    assert rep.participation_ratio(onehot) == 1 / d
    assert rep.participation_ratio(np.full(d, 0.3)) == 1.0
    half = np.r_[np.ones(4), np.zeros(4)]
    assert rep.participation_ratio(half) == 0.5


def test_pr_zero_vector_rejected():
    with pytest.raises(ValueError):
        rep.participation_ratio(np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 12, elements=st.floats(0, 10)).filter(lambda v: v.sum() > 1e-3),
       st.floats(1e-3, 1e3))
def test_pr_bounds_and_scale_invariance(v, c):
    pr = rep.participation_ratio(v)
    assert 1 / 12 - 1e-12 <= pr <= 1 + 1e-12
    assert rep.participation_ratio(c * v) == pytest.approx(pr, rel=1e-9)


def test_cosine_range_and_zero():
    rng = np.random.default_rng(0)
    a, b = rng.random((5, 8)), rng.random((5, 8))
    c = rep.cosine(a, b)
    assert np.all((c >= 0) & (c <= 1))
    assert rep.cosine(a[0], a[0] * 3) == pytest.approx(1.0)
    assert rep.cosine(np.zeros(3), np.ones(3)) == 0.0


def test_abar_nonnegative_dimension(model, images):
    v = rep.abar(model, images)
    assert v.values.shape == (6, model.probe_channels(MIDDLE_OUT))
    assert (v.values >= 0).all()
    assert rep.abar(model, images[0]).values.shape == (model.probe_channels(MIDDLE_OUT),)


def test_phi_single_draw_is_abar_of_one_corruption(model, images):
    p = rep.phi(model, images, 0.3, n_draws=1, seed=11).values
    direct = rep.abar(model, data.corrupt(images, 0.3, 11)).values
    np.testing.assert_array_equal(p, direct)


def test_phi_deterministic_and_sigma_zero(model, images):
    a = rep.phi(model, images, 0.2, n_draws=3, seed=1).values
    np.testing.assert_array_equal(a, rep.phi(model, images, 0.2, n_draws=3, seed=1).values)
    z = rep.phi(model, images, 0.0, n_draws=4, seed=1).values
    np.testing.assert_allclose(z, rep.abar(model, images).values, rtol=1e-12)


def test_phi_monte_carlo_error_shrinks_as_inverse_sqrt(model, images):
    x = images[:1]
    ref = rep.phi(model, x, 0.5, n_draws=1024, seed=999).values[0]
    ns = np.array([2, 8, 32, 128])
    errs = []
    for n in ns:
        e = [np.sum((rep.phi(model, x, 0.5, n_draws=int(n), seed=s).values[0] - ref) ** 2)
             for s in range(12)]
        errs.append(np.sqrt(np.mean(e)))
    slope = np.polyfit(np.log(ns), np.log(errs), 1)[0]
    assert -0.7 < slope < -0.3


def test_phi_rejects_bad_args(model, images):
    with pytest.raises(ValueError):
        rep.phi(model, images, -0.1)
    with pytest.raises(ValueError):
        rep.phi(model, images, 0.1, n_draws=0)


def test_selectivity_single_image_and_uniform():
    one_hot = np.zeros((10, 3))
    one_hot[4, 0] = 2.0
    one_hot[:, 1] = 0.7
    prof = rep.selectivity_from_table(one_hot)
    assert prof.pr[0] == pytest.approx(0.1)
    assert prof.pr[1] == pytest.approx(1.0)
    assert prof.dead.tolist() == [False, False, True]
    assert prof.category(0) == "selective" and prof.category(1) == "common"
    assert prof.category(2) == "dead"
    assert prof.selective.tolist() == [0] and prof.common.tolist() == [1]


def test_top_activating_ties_go_to_lower_id():
    table = np.array([[1.0], [3.0], [3.0], [2.0], [3.0]])
    prof = rep.selectivity_from_table(table)
    assert rep.top_activating_images(prof, 0, 3).tolist() == [1, 2, 4]
    with pytest.raises(ValueError):
        rep.top_activating_images(prof, 0, 6)


def test_block_sparsity_profile_keys(model, images):
    ds = data.Dataset(images)
    prof = rep.block_sparsity_profile(model, ds, 0.2)
    assert "M.output" in prof and "M.input" in prof
    for v in prof.values():
        assert v.shape == (6,) and np.all((v > 0) & (v <= 1))


def test_stability_curve_reference_is_one(model, images):
    curve = rep.stability_curve(model, images[:2], 0.3, [0.1, 0.3, 0.6], n_draws=2,
                                probe=Probe("E2", "output"))
    assert curve.shape == (2, 3)
    np.testing.assert_allclose(curve[:, 1], 1.0)


def test_pca_rank_one_and_eigen_oracle():
    rng = np.random.default_rng(0)
    u = rng.standard_normal(6)
    maps = rng.standard_normal((40, 1)) * u[None]
    np.testing.assert_allclose(rep.pca_cumulative_variance(maps)[0], 1.0)
    X = rng.standard_normal((100, 4)) @ np.diag([3.0, 2.0, 1.0, 0.5])
    ev = np.sort(np.linalg.svd(X - X.mean(0), compute_uv=False) ** 2)[::-1]
    np.testing.assert_allclose(rep.pca_cumulative_variance(X), np.cumsum(ev) / ev.sum())


def test_histogram_table_counts():
    rows = rep.histogram_table(np.array([0.05, 0.06, 0.5, 1.0]), bins=10)
    assert len(rows) == 10 and sum(r[2] for r in rows) == 4 and rows[0][2] == 2


def test_channel_stats_shapes(model, images):
    cs = rep.channel_stats(model, data.Dataset(images), 0.2, n_draws=2)
    d = model.probe_channels(MIDDLE_OUT)
    assert len(cs.histograms) == d and cs.spatial_pr.shape == (d,)
    assert all(c[-1] == pytest.approx(1.0) for c in cs.cumulative_variance)
