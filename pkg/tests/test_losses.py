import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eoflow import autodiff as ad
from eoflow.autodiff import LOG_2PI
from eoflow.errors import DegenerateGeometryError
from eoflow.flow import affine_model, build_model, decoder_jacobian_dense, encode
from eoflow.losses import (IndexSet, mml_loss, nll_ml, pointwise_manifold_entropy, pointwise_mmi,
                           pointwise_partition_mmi, pointwise_total_correlation,
                           stochastic_tc_batch)
from eoflow.training import sample_tc_indices

from conftest import random_model

SHEAR = np.array([[1.0, 1.0], [0.0, 1.0]])


def rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def test_index_set_basics():
    s = IndexSet([3, 1, 1])
    assert s.indices == (1, 3) and len(s) == 2
    assert s.complement(5).indices == (0, 2, 4)
    assert s.isdisjoint([0, 2]) and not s.isdisjoint([3])
    with pytest.raises(IndexError):
        s.check(3)


def test_nll_ml_identity_and_linear():
    assert nll_ml(affine_model(np.eye(1)), np.zeros(1)) == pytest.approx(0.5 * LOG_2PI, abs=1e-12)
    assert nll_ml(affine_model(np.eye(2)), np.zeros(2)) == pytest.approx(LOG_2PI, abs=1e-12)
    model = affine_model(np.diag([2.0, 1.0]))
    assert nll_ml(model, np.array([2.0, 1.0])) == pytest.approx(1 + np.log(2) + LOG_2PI, abs=1e-12)


def test_manifold_entropy_examples():
    ident = affine_model(np.eye(2))
    assert pointwise_manifold_entropy(ident, np.array([0.0, 5.0]), [0]) == pytest.approx(
        0.5 * LOG_2PI, abs=1e-12)
    diag = affine_model(np.diag([2.0, 1.0]))
    assert pointwise_manifold_entropy(diag, np.array([2.0, -3.0]), [0]) == pytest.approx(
        0.5 + np.log(2) + 0.5 * LOG_2PI, abs=1e-12)


def test_full_set_reduces_to_ml_exactly():
    model = random_model(4, seed=2)
    x = np.random.default_rng(0).standard_normal((10, 4))
    assert np.array_equal(pointwise_manifold_entropy(model, x, range(4)), nll_ml(model, x))


def test_manifold_entropy_errors():
    model = random_model(3)
    with pytest.raises(ValueError):
        pointwise_manifold_entropy(model, np.zeros(3), [])
    with pytest.raises(ValueError):
        pointwise_mmi(model, np.zeros(3), [0, 1], [1])
    with pytest.raises(DegenerateGeometryError):
        pointwise_total_correlation(_ZeroColumnModel(), np.zeros(2))


class _ZeroColumnModel:
    """Identity encoder paired with a decoder whose second Jacobian column is exactly zero."""

    dim = 2

    def __init__(self):
        self.inner = affine_model(np.eye(2))
        self.inner.params["affine.a"] = np.array([[1.0, 0.0], [0.0, 0.0]])

    def f(self, x, p=None, check=True):
        return x, ad.constant(np.zeros(x.shape[0]))

    def decoder_columns(self, z, indices, p=None):
        return self.inner.decoder_columns(z, indices, p)


def test_mmi_examples():
    x = np.random.default_rng(1).standard_normal((5, 2))
    assert np.allclose(pointwise_mmi(affine_model(np.diag([3.0, 0.5])), x, [0], [1]), 0.0, atol=1e-14)
    assert np.allclose(pointwise_mmi(affine_model(SHEAR), x, [0], [1]), np.log(np.sqrt(2)), atol=1e-12)
    assert np.allclose(pointwise_mmi(affine_model(rotation(0.7)), x, [0], [1]), 0.0, atol=1e-14)


def test_total_correlation_examples():
    x = np.random.default_rng(2).standard_normal((5, 2))
    assert np.allclose(pointwise_total_correlation(affine_model(rotation(1.1)), x), 0.0, atol=1e-14)
    assert np.allclose(pointwise_total_correlation(affine_model(SHEAR), x), np.log(np.sqrt(2)),
                       atol=1e-12)
    a = np.random.default_rng(3).standard_normal((5, 5))
    expected = np.sum(np.log(np.linalg.norm(a, axis=0))) - np.linalg.slogdet(a)[1]
    tc = pointwise_total_correlation(affine_model(a), np.random.default_rng(4).standard_normal((3, 5)))
    assert np.allclose(tc, expected, atol=1e-10)


def test_orthogonal_columns_give_zero_tc_everywhere():
    a = rotation(0.4) @ np.diag([3.0, 0.2])
    x = 10 * np.random.default_rng(5).standard_normal((50, 2))
    assert np.max(np.abs(pointwise_total_correlation(affine_model(a), x))) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([2, 3, 4, 6]), st.integers(0, 10_000), st.data())
def test_decomposition_and_hadamard_bounds(dim, seed, data):
    model = random_model(dim, seed=seed, n_blocks=2, width=8)
    x = np.random.default_rng(seed).standard_normal((4, dim))
    c = data.draw(st.integers(1, dim - 1))
    perm = np.random.default_rng(seed + 1).permutation(dim)
    s, t = perm[:c], perm[c:]
    l_ml = nll_ml(model, x)
    l_s = pointwise_manifold_entropy(model, x, s)
    l_t = pointwise_manifold_entropy(model, x, t)
    mmi = pointwise_mmi(model, x, s, t)
    assert np.max(np.abs(l_ml - (l_s + l_t - mmi))) < 1e-8
    assert mmi.min() >= -1e-9
    assert pointwise_total_correlation(model, x).min() >= -1e-9


def test_partition_mmi_telescopes():
    model = random_model(5, seed=8)
    x = np.random.default_rng(6).standard_normal((6, 5))
    parts = [[0, 3], [1], [2, 4]]
    direct = pointwise_partition_mmi(model, x, parts)
    tele = pointwise_mmi(model, x, [0, 3], [1]) + pointwise_mmi(model, x, [0, 1, 3], [2, 4])
    assert np.max(np.abs(direct - tele)) < 1e-8
    singles = pointwise_partition_mmi(model, x, [[i] for i in range(5)])
    assert np.allclose(singles, pointwise_total_correlation(model, x), atol=1e-10)
    with pytest.raises(ValueError):
        pointwise_partition_mmi(model, x, [[0, 1], [1, 2, 3, 4]])


def test_pointwise_entropy_matches_dense_jacobian():
    model = random_model(4, seed=3)
    x = np.random.default_rng(7).standard_normal(4)
    z, _ = encode(model, x)
    jac = decoder_jacobian_dense(model, z)
    s = [1, 3]
    expected = 0.5 * np.sum(z[s] ** 2) + 0.5 * np.linalg.slogdet(jac[:, s].T @ jac[:, s])[1] + LOG_2PI
    assert pointwise_manifold_entropy(model, x, s) == pytest.approx(expected, abs=1e-10)


# ---------------------------------------------------------------------------
# stochastic estimator and composite loss

def _dense_column_term(model, x):
    z, _ = encode(model, x)
    jac = decoder_jacobian_dense(model, z)
    return float(np.mean(np.sum(np.log(np.linalg.norm(jac, axis=1)), axis=1)))


def test_stochastic_batch_validation():
    model = random_model(4)
    x = np.zeros((3, 4))
    with pytest.raises(ValueError, match="batch size"):
        stochastic_tc_batch(model, x, [0, 1, 2])
    with pytest.raises(ValueError, match="never sampled"):
        stochastic_tc_batch(model, np.zeros((4, 4)), [0, 1, 2, 2])


def test_stochastic_permutation_covers_each_dimension_once():
    model = random_model(4, seed=1)
    x = np.random.default_rng(0).standard_normal((4, 4))
    assign = np.array([2, 0, 3, 1])
    z, _ = encode(model, x)
    jac = decoder_jacobian_dense(model, z)
    expected = np.mean(4 * np.log(np.linalg.norm(jac[np.arange(4), :, assign], axis=1)))
    assert stochastic_tc_batch(model, x, assign) == pytest.approx(expected, abs=1e-12)


def test_stochastic_linear_decoder_is_exact_for_any_assignment():
    a = np.random.default_rng(2).standard_normal((3, 3))
    model = affine_model(a)
    x = np.random.default_rng(3).standard_normal((9, 3))
    exact = np.sum(np.log(np.linalg.norm(a, axis=0)))
    rng = np.random.default_rng(4)
    for _ in range(5):
        assign, counts = sample_tc_indices(9, 3, rng)
        assert stochastic_tc_batch(model, x, assign, counts) == pytest.approx(exact, abs=1e-12)


def test_stochastic_estimator_unbiased():
    model = random_model(4, seed=21, scale=0.5)
    x = np.random.default_rng(5).standard_normal((8, 4))
    dense = _dense_column_term(model, x)
    rng = np.random.default_rng(6)
    draws = [stochastic_tc_batch(model, x, *sample_tc_indices(8, 4, rng)) for _ in range(400)]
    err = np.std(draws, ddof=1) / np.sqrt(len(draws))
    assert abs(np.mean(draws) - dense) < 3 * err


def test_mml_zero_weights_equals_ml_mean():
    model = random_model(3)
    x = np.random.default_rng(0).standard_normal((7, 3))
    loss, bd = mml_loss(model, x, {"tc": 0.0})
    assert float(loss.data) == pytest.approx(np.mean(nll_ml(model, x)), abs=0)
    loss, bd = mml_loss(model, x, {"core": 0, "detail": 0, "cd": 0}, mode="core-detail", core_size=1)
    assert float(loss.data) == np.mean(nll_ml(model, x))


def test_mml_stochastic_form_identity():
    model = random_model(3, seed=4)
    x = np.random.default_rng(1).standard_normal((6, 3))
    lam = 0.37
    l_ml = nll_ml(model, x)
    sum_li = sum(pointwise_manifold_entropy(model, x, [i]) for i in range(3))
    dense, bd = mml_loss(model, x, {"tc": lam})
    assert np.max(np.abs((1 - lam) * l_ml + lam * sum_li - bd.composite)) < 1e-10


def test_mml_core_detail_identity_on_shear():
    model = affine_model(SHEAR)
    x = np.random.default_rng(2).standard_normal((5, 2))
    _, bd = mml_loss(model, x, {"core": 1.0, "detail": 0.5, "cd": 2.0}, mode="core-detail", core_size=1)
    assert np.max(np.abs(bd.l_ml - (bd.l_core + bd.l_detail - bd.l_cd_mmi))) < 1e-8
    assert np.allclose(bd.l_cd_mmi, np.log(np.sqrt(2)))


def test_mml_rejects_bad_weights():
    model = random_model(3)
    x = np.zeros((3, 3))
    with pytest.raises(ValueError, match="negative"):
        mml_loss(model, x, {"core": -1.0}, mode="core-detail", core_size=1)
    with pytest.raises(ValueError, match="not valid"):
        mml_loss(model, x, {"core": 1.0}, mode="total")
    with pytest.raises(ValueError, match="core_size"):
        mml_loss(model, x, {"core": 1.0}, mode="core-detail", core_size=3)


def test_mml_gradients_match_finite_differences():
    model = build_model(2, n_blocks=1, mlp_width=4, seed=3)
    rng = np.random.default_rng(0)
    for k in model.params:
        if k.startswith("coupling"):
            model.params[k] = model.params[k] + 0.3 * rng.standard_normal(model.params[k].shape)
    x = rng.standard_normal((5, 2))
    names = model.trainable_names()
    p = model.tensor_params(names)
    loss, _ = mml_loss(model, x, {"tc": 0.7}, params=p)
    grads = dict(zip(names, ad.backward(loss, [p[k] for k in names])))
    name = "coupling0.w0"
    base = model.params[name].copy()
    for idx in [(0, 0), (0, 3)]:
        vals = []
        for h in (1e-5, -1e-5):
            model.params[name] = base.copy()
            model.params[name][idx] += h
            vals.append(float(mml_loss(model, x, {"tc": 0.7})[0].data))
        model.params[name] = base
        fd = (vals[0] - vals[1]) / 2e-5
        assert abs(grads[name][idx] - fd) <= 1e-4 * max(1.0, abs(fd))
