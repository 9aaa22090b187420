import numpy as np
import pytest

from denoiserlab import ndnet, unet
from denoiserlab.unet import MIDDLE_OUT, Probe, UNetConfig


@pytest.fixture(scope="module")
def model():
    return unet.build(UNetConfig(), seed=0)


def test_full_scale_parameter_count():
    n = unet.parameter_count(UNetConfig.full_scale())
    assert 12_000_000 <= n <= 14_000_000


def test_desk_parameter_count_matches_enumeration(model):
    direct = sum(p.data.size for p in model.params.values())
    assert unet.parameter_count(model.config) == direct == model.n_parameters()


def test_same_seed_bit_identical():
    a = unet.build(UNetConfig(), seed=3)
    b = unet.build(UNetConfig(), seed=3)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_indivisible_image_size_rejected():
    with pytest.raises(unet.ConfigError):
        unet.build(UNetConfig(image_size=18), seed=0)


def test_channel_doubling_and_registry(model):
    names = [s.name for s in model.blocks]
    assert names == ["E1", "E2", "M", "D2", "D1"]
    assert model.skips == [("E1", "D1"), ("E2", "D2")]
    assert model.probe_channels(MIDDLE_OUT) == 16 * 2 ** 2
    assert unet.block_specs(UNetConfig.full_scale())[3].out_channels == 512


def test_zeroed_output_layer_gives_identity(model):
    m = model.copy()
    m.params["out.weight"].data[...] = 0
    m.params["out.bias"].data[...] = 0
    x = np.random.default_rng(0).standard_normal((2, 1, 16, 16)).astype(np.float32)
    assert np.all(unet.residual(m, x) == 0)
    np.testing.assert_array_equal(unet.denoise(m, x), x)


def test_residual_shape_and_denoise_identity(model):
    x = np.random.default_rng(1).standard_normal((3, 1, 16, 16)).astype(np.float32)
    r = unet.residual(model, x)
    assert r.shape == x.shape
    np.testing.assert_array_equal(unet.denoise(model, x), x + r)
    assert unet.residual(model, x[0]).shape == x[0].shape


def test_shape_mismatch_raises(model):
    with pytest.raises(ndnet.ShapeError):
        unet.residual(model, np.zeros((1, 2, 16, 16), np.float32))
    with pytest.raises(ndnet.ShapeError):
        unet.residual(model, np.zeros((1, 1, 10, 10), np.float32))


def test_forward_deterministic(model):
    x = np.random.default_rng(2).standard_normal((2, 1, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(unet.residual(model, x), unet.residual(model, x))


def test_probes_nonnegative_and_shapes(model):
    x = np.random.default_rng(3).standard_normal((2, 1, 16, 16)).astype(np.float32)
    for probe in model.probes():
        a = unet.activations(model, x, probe)
        spec = model.block(probe.block)
        assert a.shape[0] == 2 and a.shape[1] == model.probe_channels(probe)
        if probe.position == "output":
            assert (a >= 0).all()
            assert a.shape[2] == 16 // spec.scale
    assert unet.activations(model, x, Probe("E2", "output")).shape[2] == 16 // 2


def test_unknown_probe(model):
    with pytest.raises(KeyError):
        unet.activations(model, np.zeros((1, 1, 16, 16), np.float32), Probe("X9", "output"))


@pytest.mark.parametrize("config,expected", [
    (UNetConfig.full_scale(), 84),
    (UNetConfig(encoder_blocks=1, layers_per_encoder=1, layers_middle=1, image_size=8), None),
])
def test_receptive_field_analytic_matches_impulse(config, expected):
    rf = unet.receptive_field(config)
    if expected is not None:
        assert rf == expected
    assert unet.measure_receptive_field(config) == rf


def test_receptive_field_desk_and_single_conv():
    cfg = UNetConfig()
    assert unet.receptive_field(cfg) == unet.measure_receptive_field(cfg) == 40
    single = UNetConfig(encoder_blocks=1, layers_per_encoder=1, layers_middle=1, image_size=8)
    assert unet.receptive_field(single, "E1") == 3
