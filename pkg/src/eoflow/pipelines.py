"""Evaluation pipelines behind the command-line tools.

All functions are pure given their inputs and random generator and return
plain arrays or small result objects; file output lives in :mod:`eoflow.cli`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .flow import FlowModel
from .imaging import mse, psnr, ssim
from .linear import linear_flow_from_pca, pca_fit
from .losses import ml_terms
from .metrics import entropy_spectrum

ZERO, SAMPLE = "zero", "sample"
# allowed ratio of sample-mode to zero-mode MSE, with 10% slack on the factor 2
MSE_RATIO_BOUND = 2.0 * 1.1


def latent_order(model: FlowModel, data=None, n=1024, seed=0) -> np.ndarray:
    """Latent indices sorted by decreasing manifold entropy."""
    if data is None:
        return entropy_spectrum(model, from_model=True, n=n,
                                rng=np.random.default_rng(seed)).permutation
    return entropy_spectrum(model, data).permutation


def _encode(model, x):
    z, _ = model.f(ad.constant(np.atleast_2d(x)))
    return np.array(z.data)


def _decode(model, z):
    x, _ = model.g(ad.constant(np.atleast_2d(z)))
    return np.array(x.data)


def reconstruct(model: FlowModel, x, core_size: int, order=None, mode=ZERO, rng=None):
    """``g([f_C(x), z_D])`` with the detail ``z_D`` zeroed or drawn from the prior.

    The core is the first ``core_size`` entries of ``order`` (entropy order by
    default; identity order when ``order`` is ``"identity"``).
    """
    x = np.atleast_2d(np.asarray(x, np.float64))
    d = model.dim
    if not 0 <= core_size <= d:
        raise ValueError(f"core size must lie in 0..{d}, got {core_size}")
    if mode not in (ZERO, SAMPLE):
        raise ValueError(f"unknown detail mode {mode!r}")
    if order is None:
        order = latent_order(model, x) if len(x) >= 2 else np.arange(d)
    detail = np.asarray(order, dtype=int)[core_size:]
    z = _encode(model, x)
    if mode == ZERO:
        z[:, detail] = 0.0
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        z[:, detail] = rng.standard_normal((len(z), len(detail)))
    return _decode(model, z)


@dataclass
class RatePoint:
    core_size: int
    mode: str
    mse: float
    psnr: float
    ssim: float


@dataclass
class RateDistortion:
    points: list
    bound_ok: dict

    def curve(self, mode) -> list:
        return [p for p in self.points if p.mode == mode]

    @property
    def all_within_bound(self) -> bool:
        return all(self.bound_ok.values())


def rate_distortion(model: FlowModel, clean, noisy, core_sizes, order=None, rng=None,
                    image_shape=None) -> RateDistortion:
    """Distortion of zero- and sample-mode reconstructions of ``noisy`` against ``clean``.

    Per-image PSNR and SSIM are averaged; SSIM is NaN without an image shape.
    ``bound_ok[C]`` checks ``mean MSE_sample <= 2.2 * mean MSE_zero``.
    """
    clean = np.atleast_2d(np.asarray(clean, np.float64))
    noisy = np.atleast_2d(np.asarray(noisy, np.float64))
    if clean.shape != noisy.shape:
        raise ValueError("clean and noisy sets differ in shape")
    rng = np.random.default_rng(0) if rng is None else rng
    if order is None:
        order = latent_order(model, noisy)
    points, ok = [], {}
    for c in core_sizes:
        mses = {}
        for mode in (ZERO, SAMPLE):
            rec = reconstruct(model, noisy, c, order, mode, rng)
            per = [mse(a, b) for a, b in zip(clean, rec)]
            ps = [psnr(a, b) for a, b in zip(clean, rec)]
            ss = ([ssim(a.reshape(image_shape), b.reshape(image_shape)) for a, b in zip(clean, rec)]
                  if image_shape is not None else [np.nan])
            mses[mode] = float(np.mean(per))
            points.append(RatePoint(int(c), mode, mses[mode], float(np.mean(ps)),
                                    float(np.mean(ss))))
        ok[int(c)] = mses[SAMPLE] <= MSE_RATIO_BOUND * mses[ZERO] or mses[SAMPLE] == mses[ZERO]
    return RateDistortion(points, ok)


def score(model: FlowModel, x) -> np.ndarray:
    """``grad_x log q(x) = -grad_x L_ML(x)`` per row."""
    x = np.atleast_2d(np.asarray(x, np.float64))
    xt = ad.tensor(x, requires_grad=True)
    _, _, l_ml = ml_terms(model, xt)
    (g,) = ad.backward(ad.sum(l_ml), [xt])
    return -g


def denoise(model: FlowModel, noisy, sigma: float) -> np.ndarray:
    """One Tweedie step ``x + sigma^2 grad log q(x)``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = np.atleast_2d(np.asarray(noisy, np.float64))
    if sigma == 0:
        return x.copy()
    return x + sigma ** 2 * score(model, x)


@dataclass
class Archetypes:
    dims: np.ndarray
    magnitude: float
    origin: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    mean_columns: np.ndarray

    @property
    def contrast(self) -> np.ndarray:
        return self.positive - self.negative


def archetypes(model: FlowModel, dims, magnitude=4.0, data=None) -> Archetypes:
    """Decoded ``+-magnitude e_i`` traversals and mean Jacobian columns ``E[J_i]``.

    The mean is taken over encoded ``data`` or at the origin without data.
    """
    dims = np.asarray(dims, dtype=int)
    d = model.dim
    eye = np.eye(d)[dims]
    origin = _decode(model, np.zeros(d))[0]
    pos = _decode(model, magnitude * eye)
    neg = _decode(model, -magnitude * eye)
    z = np.zeros((1, d)) if data is None else _encode(model, data)
    cols = model.decoder_columns(ad.constant(z), dims)
    return Archetypes(dims, float(magnitude), origin, pos, neg, np.array(cols.data).mean(axis=0))


def pca_model(data) -> FlowModel:
    """PCA of ``data`` as a single-affine flow with entropy-ordered latents."""
    model = linear_flow_from_pca(pca_fit(data)).to_flow_model()
    model.meta["kind"] = "pca"
    return model
