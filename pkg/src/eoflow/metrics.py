"""Monte-Carlo manifold entropies, mutual informations and entropy spectra.

Every metric is the sample mean of the matching pointwise loss and is
reported together with its standard error.  Samples are data points by
default; ``from_model=True`` draws ``x = g(z)`` with ``z ~ N(0, I)`` instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_2PI
from .errors import DegenerateGeometryError
from .flow import FlowModel
from .losses import IndexSet, manifold_entropy_terms, mmi_terms, total_correlation_terms

HALF_LOG_2PI = 0.5 * LOG_2PI
DEFAULT_SAMPLES = 1024
# bound on B * D * D floats materialised per chunk of Jacobian columns
_CHUNK_BUDGET = 1 << 22


def noise_floor(sigma: float, full_constants: bool = False) -> float:
    """Entropy of a 1-d Gaussian of width ``sigma``: ``1/2 + log sigma`` (+ ``1/2 log 2pi``)."""
    if sigma <= 0:
        raise ValueError(f"noise sigma must be positive, got {sigma}")
    return 0.5 + float(np.log(sigma)) + (HALF_LOG_2PI if full_constants else 0.0)


def _mean_stderr(values: np.ndarray, axis=0):
    n = values.shape[axis]
    return values.mean(axis=axis), values.std(axis=axis, ddof=1) / np.sqrt(n)


def evaluation_points(model: FlowModel, samples=None, from_model=False, n=DEFAULT_SAMPLES,
                      rng=None) -> np.ndarray:
    """Points at which metrics are averaged: the given data or fresh model samples."""
    if from_model:
        rng = np.random.default_rng(0) if rng is None else rng
        n = n if samples is None else len(samples)
        z = rng.standard_normal((n, model.dim))
        return np.array(model.g(ad.constant(z))[0].data)
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ValueError(f"samples must have shape (N, {model.dim}), got {x.shape}")
    if x.shape[0] < 2:
        raise ValueError("at least two samples are needed for a standard error")
    return x


def _chunks(model: FlowModel, x: np.ndarray, with_columns=True):
    size = max(1, _CHUNK_BUDGET // (model.dim * model.dim)) if with_columns else 4096
    for start in range(0, len(x), size):
        rows = ad.constant(x[start:start + size])
        z, ld = model.f(rows)
        cols = model.decoder_columns(z, np.arange(model.dim)) if with_columns else None
        yield z, ld, cols


def pointwise_values(model: FlowModel, x: np.ndarray, fn) -> np.ndarray:
    """Apply ``fn(model, z, ld, cols)`` chunk-wise and concatenate the per-row tensors."""
    out = [np.array(fn(model, z, ld, cols).data) for z, ld, cols in _chunks(model, x)]
    return np.concatenate(out)


def manifold_entropy(model: FlowModel, samples=None, s=None, from_model=False,
                     n=DEFAULT_SAMPLES, rng=None):
    """``(H_S, stderr)``; ``S`` defaults to all latent dimensions."""
    x = evaluation_points(model, samples, from_model, n, rng)
    s = IndexSet(range(model.dim)) if s is None else IndexSet.of(s)
    vals = pointwise_values(model, x, lambda m, z, ld, c: manifold_entropy_terms(m, z, ld, s, cols=c))
    return _mean_stderr(vals)


def manifold_mutual_information(model: FlowModel, samples=None, s=(0,), t=(1,),
                                from_model=False, n=DEFAULT_SAMPLES, rng=None):
    """``(I_{S,T}, stderr)`` for disjoint index sets."""
    x = evaluation_points(model, samples, from_model, n, rng)
    vals = pointwise_values(model, x, lambda m, z, ld, c: mmi_terms(m, z, ld, s, t, cols=c))
    return _mean_stderr(vals)


def manifold_total_correlation(model: FlowModel, samples=None, from_model=False,
                               n=DEFAULT_SAMPLES, rng=None):
    x = evaluation_points(model, samples, from_model, n, rng)
    vals = pointwise_values(model, x, lambda m, z, ld, c: total_correlation_terms(m, z, ld, cols=c))
    return _mean_stderr(vals)


def _singleton_entropies(model: FlowModel, x: np.ndarray) -> np.ndarray:
    """Pointwise ``L_i`` for every dimension, shape ``(N, D)``, full constants."""
    out = []
    for z, _, cols in _chunks(model, x):
        sq = np.einsum("bkd,bkd->bk", cols.data, cols.data)
        if np.any(sq <= 0):
            raise DegenerateGeometryError("zero-length decoder Jacobian column")
        out.append(0.5 * z.data ** 2 + 0.5 * np.log(sq) + HALF_LOG_2PI)
    return np.concatenate(out)


@dataclass
class EntropySpectrum:
    """Per-dimension manifold entropies in model order, with the sorting permutation.

    ``entropies`` always hold the full normalisation constants;
    :meth:`values` drops ``1/2 log 2pi`` per dimension unless
    ``full_constants`` is set, which is the convention of the noise floor
    ``1/2 + log sigma``.
    """

    entropies: np.ndarray
    std_errs: np.ndarray
    permutation: np.ndarray
    noise_sigma: float | None
    n_samples: int
    full_constants: bool = False

    @property
    def dim(self) -> int:
        return len(self.entropies)

    def values(self) -> np.ndarray:
        return self.entropies - (0.0 if self.full_constants else HALF_LOG_2PI)

    def sorted_values(self) -> np.ndarray:
        return self.values()[self.permutation]

    @property
    def floor(self) -> float | None:
        if self.noise_sigma is None or self.noise_sigma <= 0:
            return None
        return noise_floor(self.noise_sigma, self.full_constants)

    def above_floor(self) -> int:
        """Number of dimensions whose entropy exceeds the noise floor."""
        if self.floor is None:
            return self.dim
        return int(np.sum(self.values() > self.floor))

    def rows(self):
        """``(rank, latent_index, entropy, std_err)`` in descending entropy order."""
        vals = self.values()
        return [(r, int(i), float(vals[i]), float(self.std_errs[i]))
                for r, i in enumerate(self.permutation)]


def entropy_spectrum(model: FlowModel, samples=None, noise_sigma=None, from_model=False,
                     n=DEFAULT_SAMPLES, rng=None, full_constants=False) -> EntropySpectrum:
    x = evaluation_points(model, samples, from_model, n, rng)
    h = _singleton_entropies(model, x)
    mean, err = _mean_stderr(h)
    perm = np.argsort(-mean, kind="stable")
    return EntropySpectrum(mean, err, perm, noise_sigma, len(x), full_constants)


@dataclass
class MPMIMatrix:
    """Pairwise manifold mutual informations over ordered latent dimensions.

    ``dims[r]`` is the model latent index at rank ``r``; the diagonal is
    undefined and stored as zero.
    """

    values: np.ndarray
    std_errs: np.ndarray
    dims: np.ndarray
    n_samples: int

    def masked(self) -> np.ma.MaskedArray:
        return np.ma.masked_array(self.values, mask=np.eye(len(self.dims), dtype=bool))


def mpmi_matrix(model: FlowModel, samples=None, k=None, order=None, from_model=False,
                n=DEFAULT_SAMPLES, rng=None) -> MPMIMatrix:
    """``I_ij = E[log|J_i| + log|J_j| - log|J_ij|]`` for the top-``k`` dimensions.

    ``order`` defaults to the entropy-spectrum order of the same samples.
    """
    x = evaluation_points(model, samples, from_model, n, rng)
    k = model.dim if k is None else int(k)
    if not 1 <= k <= model.dim:
        raise ValueError(f"k must lie in 1..{model.dim}, got {k}")
    if order is None:
        order = entropy_spectrum(model, x).permutation
    dims = np.asarray(order, dtype=int)[:k]
    per = []
    for _, _, cols in _chunks(model, x):
        c = cols.data[:, dims]
        gram = np.einsum("bkd,bld->bkl", c, c)
        diag = np.einsum("bkk->bk", gram)
        cos2 = gram ** 2 / (diag[:, :, None] * diag[:, None, :])
        off = ~np.eye(k, dtype=bool)
        val = np.zeros_like(cos2)
        # 2x2 Gram volume: |J_ij|^2 = a b - c^2
        val[:, off] = -0.5 * np.log1p(-np.minimum(cos2[:, off], 1.0))
        per.append(val)
    per = np.concatenate(per)
    per = 0.5 * (per + per.transpose(0, 2, 1))
    mean, err = _mean_stderr(per)
    return MPMIMatrix(mean, err, dims, len(x))
