"""Pointwise manifold losses and the composite maximum manifold-likelihood objective.

All quantities keep the ``(k/2) log 2pi`` normalisation of the standard normal
prior.  Latent indices are 0-based.  ``log|J_S|`` denotes the volume
``0.5 * log det(J_S^T J_S)`` of the decoder Jacobian columns in ``S``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_2PI, Tensor
from .errors import DegenerateGeometryError, ShapeError
from .flow import FlowModel, _batch_rows

TOTAL = "total"
CORE_DETAIL = "core-detail"
DENSE = "dense"
STOCHASTIC = "stochastic"


@dataclass(frozen=True)
class IndexSet:
    """Sorted, duplicate-free set of latent indices."""

    indices: tuple

    def __init__(self, indices: Iterable[int]):
        idx = tuple(sorted({int(i) for i in indices}))
        object.__setattr__(self, "indices", idx)

    @classmethod
    def of(cls, s) -> "IndexSet":
        return s if isinstance(s, IndexSet) else cls(s)

    @classmethod
    def range(cls, start, stop) -> "IndexSet":
        return cls(range(start, stop))

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __contains__(self, i):
        return i in self.indices

    def check(self, dim: int) -> "IndexSet":
        if self.indices and (self.indices[0] < 0 or self.indices[-1] >= dim):
            raise IndexError(f"index set {self.indices} not within 0..{dim - 1}")
        return self

    def complement(self, dim: int) -> "IndexSet":
        self.check(dim)
        return IndexSet(i for i in range(dim) if i not in self.indices)

    def union(self, other) -> "IndexSet":
        return IndexSet(self.indices + IndexSet.of(other).indices)

    def isdisjoint(self, other) -> bool:
        return not set(self.indices) & set(IndexSet.of(other).indices)

    def array(self) -> np.ndarray:
        return np.array(self.indices, dtype=int)


@dataclass
class LossBreakdown:
    """Per-sample loss terms of one batch plus the composite batch mean.

    Terms that the chosen mode does not compute are ``None``.  With the
    stochastic estimator ``l_tc`` holds the per-sample unbiased estimates,
    which are not individually non-negative.
    """

    l_ml: np.ndarray
    mml: float
    composite: np.ndarray
    mode: str
    estimator: str
    weights: dict = field(default_factory=dict)
    l_core: np.ndarray | None = None
    l_detail: np.ndarray | None = None
    l_cd_mmi: np.ndarray | None = None
    l_tc: np.ndarray | None = None

    def means(self) -> dict:
        out = {"l_ml": float(np.mean(self.l_ml)), "mml": self.mml}
        for name in ("l_core", "l_detail", "l_cd_mmi", "l_tc"):
            value = getattr(self, name)
            if value is not None:
                out[name] = float(np.mean(value))
        return out


# ---------------------------------------------------------------------------
# tensor-level building blocks (batched, differentiable)

def _rows(model: FlowModel, x):
    if isinstance(x, Tensor):
        return _batch_rows(x, model.dim)
    return _batch_rows(ad.tensor(x), model.dim)


def _half_sqnorm(z, idx: np.ndarray | None = None):
    if idx is not None:
        z = ad.index(z, (slice(None), idx))
    return 0.5 * ad.sqnorm(z, -1)


def ml_terms(model: FlowModel, x: Tensor, p=None):
    """``(z, logdet_enc, L_ML)`` for a 2-D batch."""
    z, ld = model.f(x, p)
    l_ml = _half_sqnorm(z) - ld + 0.5 * model.dim * LOG_2PI
    return z, ld, l_ml


def column_log_norms(cols: Tensor) -> Tensor:
    """``log ||J_i||`` from stacked columns of shape ``(..., D)``."""
    sq = ad.sqnorm(cols, -1)
    if np.any(sq.data <= 0.0):
        raise DegenerateGeometryError("zero-length decoder Jacobian column")
    return 0.5 * ad.log(sq)


def log_volume(cols: Tensor) -> Tensor:
    """``log|J_S|`` per row from columns of shape ``(B, k, D)``."""
    if cols.shape[1] == 1:
        return ad.reshape(column_log_norms(cols), (cols.shape[0],))
    gram = ad.matmul(cols, ad.transpose(cols))
    return 0.5 * ad.logdet_spd(gram)


def _subset_log_volume(model, z, ld, s: IndexSet, p, cols=None):
    if len(s) == model.dim:
        return -ld
    if cols is None:
        sub = model.decoder_columns(z, s.array(), p)
    else:
        sub = ad.index(cols, (slice(None), s.array()))
    return log_volume(sub)


def manifold_entropy_terms(model, z, ld, s: IndexSet, p=None, cols=None):
    """Pointwise ``L_S`` per row given encoder outputs."""
    s = IndexSet.of(s).check(model.dim)
    if len(s) == 0:
        raise ValueError("manifold entropy needs a non-empty index set")
    logvol = _subset_log_volume(model, z, ld, s, p, cols)
    return _half_sqnorm(z, s.array()) + logvol + 0.5 * len(s) * LOG_2PI


def mmi_terms(model, z, ld, s: IndexSet, t: IndexSet, p=None, cols=None):
    """Pointwise ``L_{S perp T}`` per row given encoder outputs."""
    s, t = IndexSet.of(s).check(model.dim), IndexSet.of(t).check(model.dim)
    if not s.isdisjoint(t):
        raise ValueError(f"index sets overlap: {s.indices} and {t.indices}")
    if len(s) == 0 or len(t) == 0:
        raise ValueError("mutual information needs non-empty index sets")
    return (_subset_log_volume(model, z, ld, s, p, cols)
            + _subset_log_volume(model, z, ld, t, p, cols)
            - _subset_log_volume(model, z, ld, s.union(t), p, cols))


def total_correlation_terms(model, z, ld, p=None, cols=None):
    """Dense pointwise ``L_TC = sum_i log||J_i|| - log|J|`` per row."""
    if cols is None:
        cols = model.decoder_columns(z, np.arange(model.dim), p)
    return ad.sum(column_log_norms(cols), 1) + ld


def _unwrap(t: Tensor, single: bool):
    arr = np.array(t.data)
    return float(arr[0]) if single else arr


# ---------------------------------------------------------------------------
# public pointwise quantities

def nll_ml(model: FlowModel, x):
    """Negative log-likelihood ``0.5||f(x)||^2 + log|J| + (D/2) log 2pi``."""
    rows, single = _rows(model, x)
    return _unwrap(ml_terms(model, rows)[2], single)


def pointwise_manifold_entropy(model: FlowModel, x, s):
    """``L_S(x) = 0.5||f_S(x)||^2 + log|J_S(f(x))| + (|S|/2) log 2pi``."""
    rows, single = _rows(model, x)
    z, ld = model.f(rows)
    return _unwrap(manifold_entropy_terms(model, z, ld, s), single)


def pointwise_mmi(model: FlowModel, x, s, t):
    """``L_{S perp T}(x) = log|J_S| + log|J_T| - log|J_ST|`` (non-negative)."""
    rows, single = _rows(model, x)
    z, ld = model.f(rows)
    return _unwrap(mmi_terms(model, z, ld, s, t), single)


def pointwise_total_correlation(model: FlowModel, x):
    rows, single = _rows(model, x)
    z, ld = model.f(rows)
    return _unwrap(total_correlation_terms(model, z, ld), single)


def pointwise_partition_mmi(model: FlowModel, x, partition):
    """``L_{S1 perp ... perp SM} = sum_k L_{S_k} - L_ML`` for a full partition."""
    sets = [IndexSet.of(s).check(model.dim) for s in partition]
    covered = sorted(i for s in sets for i in s)
    if covered != list(range(model.dim)):
        raise ValueError("partition must cover every latent index exactly once")
    rows, single = _rows(model, x)
    z, ld = model.f(rows)
    cols = model.decoder_columns(z, np.arange(model.dim))
    total = -(_half_sqnorm(z) - ld + 0.5 * model.dim * LOG_2PI)
    for s in sets:
        total = total + manifold_entropy_terms(model, z, ld, s, cols=cols)
    return _unwrap(total, single)


# ---------------------------------------------------------------------------
# stochastic total-correlation estimator

def tc_weights(assignment, counts) -> np.ndarray:
    """Per-sample weights ``B / m_i`` for the sampled dimension of each row."""
    assignment = np.asarray(assignment, dtype=int)
    counts = np.asarray(counts)
    return len(assignment) / counts[assignment]


def _validate_assignment(dim, batch_size, assignment, counts):
    assignment = np.asarray(assignment, dtype=int)
    if batch_size < dim:
        raise ValueError(f"stochastic estimator needs batch size >= D ({batch_size} < {dim})")
    if assignment.shape != (batch_size,):
        raise ShapeError("stochastic_tc", assignment.shape, (batch_size,))
    if np.any(assignment < 0) or np.any(assignment >= dim):
        raise IndexError("index assignment outside 0..D-1")
    observed = np.bincount(assignment, minlength=dim)
    if counts is None:
        counts = observed
    counts = np.asarray(counts)
    if counts.shape != (dim,) or not np.array_equal(counts, observed):
        raise ValueError("counts do not match the index assignment")
    if np.any(counts == 0):
        raise ValueError(f"dimensions never sampled: {np.flatnonzero(counts == 0).tolist()}")
    return assignment, counts


def sampled_log_norms(model, z, assignment, p=None):
    """``log||J_{a_j}(z_j)||`` per row via one batched jvp."""
    onehot = np.zeros(z.shape)
    onehot[np.arange(z.shape[0]), assignment] = 1.0
    _, jv = model.decoder_jvp(z, ad.constant(onehot), p)
    return column_log_norms(jv)


def stochastic_tc_batch(model: FlowModel, batch, assignment, counts=None) -> float:
    """Unbiased estimate of ``(1/B) sum_j sum_i log||J_i(f(x_j))||``.

    Each row ``j`` contributes the log column norm of its sampled dimension
    ``a_j`` weighted by ``B / m_{a_j}``.
    """
    rows, _ = _rows(model, batch)
    assignment, counts = _validate_assignment(model.dim, rows.shape[0], assignment, counts)
    z, _ = model.f(rows)
    logn = sampled_log_norms(model, z, assignment)
    return float(np.mean(tc_weights(assignment, counts) * logn.data))


# ---------------------------------------------------------------------------
# composite objective

_MODE_WEIGHTS = {TOTAL: {"tc"}, CORE_DETAIL: {"core", "detail", "cd"}}


def _check_weights(mode, weights):
    if mode not in _MODE_WEIGHTS:
        raise ValueError(f"unknown loss mode {mode!r}")
    allowed = _MODE_WEIGHTS[mode]
    extra = set(weights) - allowed
    if extra:
        raise ValueError(f"weights {sorted(extra)} not valid for mode {mode!r}")
    full = {k: float(weights.get(k, 0.0)) for k in sorted(allowed)}
    negative = [k for k, v in full.items() if v < 0]
    if negative:
        raise ValueError(f"negative loss weights are not supported: {negative}")
    return full


def mml_loss(model: FlowModel, batch, weights=None, mode=TOTAL, estimator=DENSE,
             core_size=None, assignment=None, rng=None, params=None, track_tc=True):
    """Composite batch loss as a differentiable scalar plus a :class:`LossBreakdown`.

    ``mode="total"`` uses weights ``{"tc"}``; dense gives ``L_ML + w L_TC``,
    stochastic gives ``(1 - w) L_ML + w sum_i L_i`` with sampled column norms.
    ``mode="core-detail"`` uses ``{"core", "detail", "cd"}`` with the split
    ``C = {0..core_size-1}`` and adds the weighted ``L_C``, ``L_D`` and
    ``L_{C perp D}`` to ``L_ML``.  ``track_tc=False`` skips the (then purely
    diagnostic) dense TC term when its weight is zero.
    """
    weights = _check_weights(mode, weights or {})
    if estimator not in (DENSE, STOCHASTIC):
        raise ValueError(f"unknown estimator {estimator!r}")
    if mode == CORE_DETAIL and estimator != DENSE:
        raise ValueError("core-detail mode only supports the dense estimator")
    rows, _ = _rows(model, batch)
    n, dim = rows.shape
    z, ld, l_ml = ml_terms(model, rows, params)
    extra = {}

    if mode == TOTAL:
        lam = weights["tc"]
        if estimator == DENSE and lam == 0.0:
            # plain likelihood: keep the TC term off the gradient graph
            l_tc = (total_correlation_terms(model, ad.constant(z.data), ad.constant(ld.data))
                    if track_tc else None)
            per_sample = l_ml
        elif estimator == DENSE:
            l_tc = total_correlation_terms(model, z, ld, params)
            per_sample = l_ml + lam * l_tc
        else:
            if assignment is None:
                from .training import sample_tc_indices
                rng = np.random.default_rng() if rng is None else rng
                assignment, counts = sample_tc_indices(n, dim, rng)
            else:
                counts = None
            assignment, counts = _validate_assignment(dim, n, assignment, counts)
            logn = sampled_log_norms(model, z, assignment, params)
            sum_li = (_half_sqnorm(z) + 0.5 * dim * LOG_2PI
                      + ad.constant(tc_weights(assignment, counts)) * logn)
            per_sample = (1.0 - lam) * l_ml + lam * sum_li
            l_tc = sum_li - l_ml
        if l_tc is not None:
            extra["l_tc"] = np.array(l_tc.data)
    else:
        if core_size is None or not 1 <= core_size <= dim - 1:
            raise ValueError(f"core_size must lie in 1..{dim - 1}, got {core_size}")
        core, detail = IndexSet.range(0, core_size), IndexSet.range(core_size, dim)
        cols = model.decoder_columns(z, np.arange(dim), params)
        l_core = manifold_entropy_terms(model, z, ld, core, params, cols)
        l_detail = manifold_entropy_terms(model, z, ld, detail, params, cols)
        l_cd = mmi_terms(model, z, ld, core, detail, params, cols)
        per_sample = (l_ml + weights["core"] * l_core + weights["detail"] * l_detail
                      + weights["cd"] * l_cd)
        extra.update(l_core=np.array(l_core.data), l_detail=np.array(l_detail.data),
                     l_cd_mmi=np.array(l_cd.data))

    scalar = ad.mean(per_sample)
    breakdown = LossBreakdown(l_ml=np.array(l_ml.data), mml=float(scalar.data),
                              composite=np.array(per_sample.data), mode=mode,
                              estimator=estimator, weights=weights, **extra)
    return scalar, breakdown
