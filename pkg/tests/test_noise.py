import numpy as np
import pytest

from idf import noise
from idf.noise import NoiseSpec, make_rng

GRAY = np.full((3, 256, 256), 0.5)


def test_zero_parameters_are_identity():
    img = np.random.default_rng(0).random((3, 16, 16))
    rng = make_rng(1)
    for f in (noise.add_gaussian, noise.add_spatial_gaussian, noise.add_poisson,
              noise.add_salt_pepper, noise.add_speckle):
        np.testing.assert_array_equal(f(img, 0, rng), img)
    zero = np.zeros((3, 8, 8))
    np.testing.assert_array_equal(noise.add_poisson(zero, 3.0, rng), zero)
    np.testing.assert_array_equal(noise.add_speckle(zero, 0.5, rng), zero)


def test_outputs_in_range_and_deterministic():
    img = np.random.default_rng(0).random((3, 32, 32))
    for spec in ("gaussian:50", "spatial_gaussian:55", "poisson:3.5", "salt_pepper:0.2",
                 "speckle:0.04", "mixture:1", "mixture:4"):
        s = NoiseSpec.parse(spec, seed=9)
        a = s.apply(img)
        assert a.min() >= 0 and a.max() <= 1
        np.testing.assert_array_equal(a, s.apply(img))
        assert not np.array_equal(a, NoiseSpec.parse(spec, seed=10).apply(img))


def test_streams_are_independent():
    a = make_rng(5, 0).random(100)
    b = make_rng(5, 1).random(100)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, make_rng(5, 0).random(100))


def test_gaussian_std():
    n = noise.add_gaussian(GRAY, 25, make_rng(11)) - GRAY
    assert abs(n.std() / (25 / 255) - 1) < 0.03


def test_spatial_gaussian_correlation_and_variance():
    field = noise.spatial_gaussian_field((1, 256, 256), 55, make_rng(12))[0]
    a, b = field[:, :-1].ravel(), field[:, 1:].ravel()
    lag1 = np.corrcoef(a, b)[0, 1]
    assert lag1 > 0.4
    assert abs(lag1 / (6 / 9) - 1) < 0.15
    assert abs(field.var() / ((55 / 255) ** 2 / 9) - 1) < 0.05


def test_poisson_variance():
    n = noise.add_poisson(GRAY, 3.5, make_rng(13)) - GRAY
    # clamping at 3.5 * sqrt(0.5/255) ~ 0.155 is far from the 0/1 bounds
    assert abs(n.var() / (3.5 ** 2 * 0.5 / 255) - 1) < 0.05


def test_salt_pepper_counts():
    out = noise.add_salt_pepper(GRAY, 0.02, make_rng(14))
    hit = (out != 0.5).any(axis=0)
    assert abs(hit.mean() / 0.02 - 1) < 0.2
    # all channels of a hit pixel share one value
    assert ((out[0] == out[1]) & (out[1] == out[2])).all()
    salt = (out[0] == 1.0).sum()
    assert 0.4 <= salt / hit.sum() <= 0.6
    full = noise.add_salt_pepper(GRAY, 1.0, make_rng(1))
    assert np.isin(full, [0.0, 1.0]).all()


def test_speckle_variance():
    n = noise.add_speckle(GRAY, 0.04, make_rng(15)) - GRAY
    assert abs(n.var() / 0.01 - 1) < 0.05
    assert abs(n.mean()) < 1e-3


def test_mixture_levels_and_order(monkeypatch):
    assert noise.MIXTURE_LEVELS[1] == (0.003, 0.003, 1.0, 0.002, 0.003)
    assert noise.MIXTURE_LEVELS[4] == (0.008, 0.008, 1.0, 0.004, 0.008)
    calls = []
    for name in ("add_gaussian", "add_speckle", "add_poisson", "add_salt_pepper"):
        orig = getattr(noise, name)

        def spy(img, v, rng, _n=name, _f=orig):
            calls.append((_n, v))
            return _f(img, v, rng)
        monkeypatch.setattr(noise, name, spy)
    noise.add_mixture(GRAY[:, :8, :8], 1, make_rng(0))
    assert [c[0] for c in calls] == ["add_gaussian", "add_speckle", "add_poisson",
                                     "add_salt_pepper", "add_speckle"]
    assert calls[0][1] == pytest.approx(np.sqrt(0.003) * 255)
    assert [c[1] for c in calls[1:]] == [0.003, 1.0, 0.002, 0.003]
    zero = noise.add_mixture(np.zeros((3, 8, 8)), 4, make_rng(0))
    assert zero.min() >= 0


def test_spec_parsing_and_validation():
    s = NoiseSpec.parse("gaussian:25", 3)
    assert (s.kind, s.value, s.seed) == ("gaussian", 25.0, 3)
    assert str(s) == "gaussian:25"
    assert str(NoiseSpec.parse("salt_pepper:0.012")) == "salt_pepper:0.012"
    for bad in ("gaussian", "laplace:3", "gaussian:-1", "salt_pepper:1.5", "mixture:5", "speckle:x"):
        with pytest.raises(ValueError):
            NoiseSpec.parse(bad)
