import numpy as np
import pytest

from eoflow.autodiff import LOG_2PI
from eoflow.flow import affine_model
from eoflow.losses import nll_ml, pointwise_total_correlation
from eoflow.metrics import (entropy_spectrum, manifold_entropy, manifold_mutual_information,
                            manifold_total_correlation, mpmi_matrix, noise_floor)

from conftest import random_model

SHEAR = np.array([[1.0, 1.0], [0.0, 1.0]])


def test_noise_floor_values():
    assert noise_floor(0.1) == pytest.approx(-1.802585, abs=1e-6)
    assert noise_floor(0.1, full_constants=True) == pytest.approx(0.5 + np.log(0.1) + 0.5 * LOG_2PI)
    with pytest.raises(ValueError):
        noise_floor(0.0)


def test_entropy_is_mean_of_pointwise_loss():
    model = random_model(3, seed=1)
    x = np.random.default_rng(0).standard_normal((200, 3))
    h, err = manifold_entropy(model, x)
    vals = nll_ml(model, x)
    assert h == pytest.approx(vals.mean(), abs=1e-12)
    assert err == pytest.approx(vals.std(ddof=1) / np.sqrt(200), rel=1e-10)


def test_total_correlation_mean_matches_pointwise():
    model = random_model(4, seed=2)
    x = np.random.default_rng(1).standard_normal((100, 4))
    tc, _ = manifold_total_correlation(model, x)
    assert tc == pytest.approx(pointwise_total_correlation(model, x).mean(), abs=1e-12)


def test_metrics_reject_bad_samples():
    model = random_model(2)
    with pytest.raises(ValueError):
        manifold_entropy(model, np.zeros((1, 2)))
    with pytest.raises(ValueError):
        manifold_entropy(model, np.zeros((5, 3)))


def test_from_model_samples_are_seeded():
    model = random_model(2, seed=3)
    a = manifold_entropy(model, from_model=True, n=64, rng=np.random.default_rng(4))
    b = manifold_entropy(model, from_model=True, n=64, rng=np.random.default_rng(4))
    assert a == b


def test_shear_mutual_information_is_exact():
    x = np.random.default_rng(2).standard_normal((50, 2))
    i, err = manifold_mutual_information(affine_model(SHEAR), x, [0], [1])
    assert i == pytest.approx(np.log(np.sqrt(2)), abs=1e-12) and err < 1e-12


def test_spectrum_of_diagonal_linear_model():
    scales = np.array([0.5, 3.0, 1.0])
    model = affine_model(np.diag(scales))
    x = np.random.default_rng(3).standard_normal((4096, 3)) * scales
    spectrum = entropy_spectrum(model, x, noise_sigma=0.1)
    assert list(spectrum.permutation) == [1, 2, 0]
    expected = np.log(scales) + 0.5  # E[z^2]/2 = 1/2 without the 1/2 log 2pi constant
    assert np.all(np.abs(spectrum.values() - expected) < 3 * spectrum.std_errs + 1e-12)
    assert spectrum.above_floor() == 3 and spectrum.floor == pytest.approx(noise_floor(0.1))
    ranks = [r[1] for r in spectrum.rows()]
    assert ranks == [1, 2, 0]
    full = entropy_spectrum(model, x, full_constants=True)
    assert np.allclose(full.values() - spectrum.values(), 0.5 * LOG_2PI)


def test_spectrum_floor_counts_dimensions():
    model = affine_model(np.diag([1.0, 0.01]))
    x = np.random.default_rng(4).standard_normal((512, 2)) * [1.0, 0.01]
    assert entropy_spectrum(model, x, noise_sigma=0.1).above_floor() == 1


def test_mpmi_matrix_shear_and_pca():
    x = np.random.default_rng(5).standard_normal((64, 2))
    m = mpmi_matrix(affine_model(SHEAR), x)
    assert np.allclose(m.values[0, 1], np.log(np.sqrt(2)), atol=1e-12)
    assert np.allclose(m.values, m.values.T) and m.values[0, 0] == 0
    assert m.masked().mask[1, 1]
    q, _ = np.linalg.qr(np.random.default_rng(6).standard_normal((4, 4)))
    ortho = affine_model(q * np.array([4.0, 2.0, 1.0, 0.5]))
    assert np.max(mpmi_matrix(ortho, np.random.default_rng(7).standard_normal((32, 4))).values) < 1e-20


def test_mpmi_pair_matches_generic_mutual_information():
    model = random_model(3, seed=9)
    x = np.random.default_rng(8).standard_normal((40, 3))
    m = mpmi_matrix(model, x, order=[0, 1, 2])
    i02, _ = manifold_mutual_information(model, x, [0], [2])
    assert m.values[0, 2] == pytest.approx(i02, abs=1e-10)
    top = mpmi_matrix(model, x, k=2)
    assert top.values.shape == (2, 2)
    with pytest.raises(ValueError):
        mpmi_matrix(model, x, k=4)
