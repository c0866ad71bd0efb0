"""PCA, linear flows and closed-form linear losses.

A linear flow ``x = A z + b`` with a standard normal prior is a Gaussian
model ``N(b, A A^T)``.  The closed forms below are expectations over data
with mean ``mu`` and covariance ``Sigma``; they double as analytic ground
truth for the nonlinear loss module.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import LOG_2PI
from .errors import NumericalError, ShapeError
from .flow import FlowModel, affine_model
from .losses import IndexSet, pointwise_manifold_entropy
from .optim import AdamState, adam_step


@dataclass
class PCAResult:
    mean: np.ndarray
    eigvecs: np.ndarray
    eigvals: np.ndarray
    n_samples: int = 0

    @property
    def dim(self) -> int:
        return len(self.eigvals)

    def covariance(self) -> np.ndarray:
        return (self.eigvecs * self.eigvals) @ self.eigvecs.T


def covariance(data) -> np.ndarray:
    """Maximum-likelihood (``1/N``) sample covariance."""
    x = np.asarray(data, dtype=np.float64)
    centred = x - x.mean(axis=0)
    return centred.T @ centred / len(x)


def _fix_signs(q: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    q = q.copy()
    pivot = np.argmax(np.abs(q), axis=0)
    signs = np.sign(q[pivot, np.arange(q.shape[1])])
    signs[signs == 0] = 1.0
    return q * signs


def pca_from_covariance(mean, cov, n_samples=0) -> PCAResult:
    """Eigendecomposition ``Sigma = Q Lambda Q^T`` with descending eigenvalues.

    Ties keep their original order; each eigenvector's largest-magnitude entry
    is positive.
    """
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ShapeError("pca", cov.shape, detail="covariance must be square")
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    bad = np.flatnonzero(vals <= 0)
    if bad.size:
        raise NumericalError(f"covariance is not positive definite: eigenvalue {vals[bad[0]]:.3e} "
                             f"at rank {bad[0]}")
    return PCAResult(np.array(mean, dtype=np.float64), _fix_signs(vecs), vals, n_samples)


def pca_fit(data) -> PCAResult:
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("pca_fit", x.shape, detail="expected an (N, D) array")
    if len(x) < 2:
        raise ValueError("PCA needs at least two samples")
    return pca_from_covariance(x.mean(axis=0), covariance(x), len(x))


@dataclass
class LinearFlow:
    """Decoder ``g(z) = A z + b``; encoder ``f(x) = A^{-1} (x - b)``."""

    a: np.ndarray
    b: np.ndarray = field(default=None)

    def __post_init__(self):
        self.a = np.array(self.a, dtype=np.float64)
        d = self.a.shape[0]
        if self.a.shape != (d, d):
            raise ShapeError("LinearFlow", self.a.shape, detail="A must be square")
        self.b = np.zeros(d) if self.b is None else np.array(self.b, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    @cached_property
    def svd(self):
        """``(U, s, Vh)`` with ``A = U diag(s) Vh``."""
        return np.linalg.svd(self.a)

    def decode(self, z):
        return np.asarray(z) @ self.a.T + self.b

    def encode(self, x):
        return np.linalg.solve(self.a, (np.asarray(x) - self.b).T).T

    def logabsdet(self) -> float:
        return float(np.sum(np.log(self.svd[1])))

    def to_flow_model(self) -> FlowModel:
        return affine_model(self.a, self.b)


def linear_flow_from_pca(p: PCAResult) -> LinearFlow:
    """``A = Q Lambda^{1/2}``, ``b = mu``."""
    return LinearFlow(p.eigvecs * np.sqrt(p.eigvals), p.mean)


def linear_flow_from_model(model: FlowModel) -> LinearFlow:
    """Inverse of :meth:`LinearFlow.to_flow_model` for single-affine models."""
    if len(model.layers) != 1 or model.layers[0].kind != "affine":
        raise ValueError("model is not a single affine layer")
    layer = model.layers[0]
    return LinearFlow(model.params[layer.key("a")], model.params[layer.key("b")])


# ---------------------------------------------------------------------------
# closed-form expected losses

def linear_ml_loss(a, b, mu, sigma) -> float:
    """Expected negative log-likelihood of ``N(b, A A^T)`` under data ``(mu, Sigma)``."""
    a, sigma = np.asarray(a, float), np.asarray(sigma, float)
    d = a.shape[0]
    prec = np.linalg.inv(a @ a.T)
    diff = np.asarray(mu, float) - np.asarray(b, float)
    logdet = np.linalg.slogdet(a)[1]
    return 0.5 * float(np.trace(prec @ sigma) + diff @ prec @ diff + 2 * logdet + d * LOG_2PI)


def linear_tc_loss(a) -> float:
    """``1/2 sum_i log(sum_j V_ij^2 s_j^2 / s_i^2)`` from the SVD ``A = U S V^T``.

    Equals ``sum_i log||A_i|| - log|det A|``; zero iff ``V`` is a signed
    permutation.
    """
    _, s, vh = np.linalg.svd(np.asarray(a, float))
    col_sq = (vh.T ** 2) @ (s ** 2)
    return 0.5 * float(np.sum(np.log(col_sq / s ** 2)))


def linear_subspace_loss(a, b, mu, sigma, s) -> float:
    """Expected ``L_S`` of the linear flow under data ``(mu, Sigma)``."""
    a = np.asarray(a, float)
    s = IndexSet.of(s).check(a.shape[0]).array()
    w = np.linalg.inv(a)[s]
    diff = np.asarray(mu, float) - np.asarray(b, float)
    second = np.asarray(sigma, float) + np.outer(diff, diff)
    a_s = a[:, s]
    logvol = 0.5 * np.linalg.slogdet(a_s.T @ a_s)[1]
    return 0.5 * float(np.trace(w @ second @ w.T)) + logvol + 0.5 * len(s) * LOG_2PI


def linear_subspace_entropy(a, s) -> float:
    """``L_S`` at the ML optimum ``A A^T = Sigma``, ``b = mu``.

    With ``A = Q Lambda^{1/2} R`` this is
    ``1/2 log det(R_S^T Lambda R_S) + |S|/2 (1 + log 2pi)``.
    """
    a = np.asarray(a, float)
    s = IndexSet.of(s).check(a.shape[0]).array()
    a_s = a[:, s]
    return 0.5 * float(np.linalg.slogdet(a_s.T @ a_s)[1]) + 0.5 * len(s) * (1.0 + LOG_2PI)


def linear_nested_compression_loss(a, tail_weights) -> float:
    """``sum_C w_C L_{tail C}(A)`` over the detail tails ``{C..D-1}``, ``C = 1..D-1``."""
    a = np.asarray(a, float)
    d = a.shape[0]
    w = np.asarray(tail_weights, float)
    if w.shape != (d - 1,):
        raise ShapeError("nested_compression", w.shape, (d - 1,))
    if np.any(w <= 0):
        raise ValueError("tail weights must be positive")
    return float(sum(w[c - 1] * linear_subspace_entropy(a, range(c, d)) for c in range(1, d)))


# ---------------------------------------------------------------------------
# compression versus reconstruction witness

@dataclass
class CompressionReport:
    sigma: float
    dims: tuple
    n_points: int
    max_residual: float
    detail_losses: np.ndarray
    reconstruction_terms: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_residual < 1e-8


def verify_compression_equals_reconstruction(sigma, dims, n_points=1000, seed=0,
                                             on_manifold=False) -> CompressionReport:
    """Check ``L_D(x) = ||x - Phi_rec(x)||^2 / (2 sigma^2) + |D| log sigma + |D|/2 log 2pi``.

    ``dims = (D, C)``.  The decoder is ``g(z) = G z_C + c + sigma U_D z_D``
    with random ``G, c`` and semi-orthonormal ``U_D``; ``Phi_rec`` decodes the
    core code with the detail set to zero.  The left side comes from the
    generic loss module, the right side from direct linear algebra.
    """
    d, c = dims
    if not 1 <= c <= d - 1:
        raise ValueError(f"core size must lie in 1..{d - 1}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((d, c))
    offset = rng.standard_normal(d)
    u, _ = np.linalg.qr(rng.standard_normal((d, d - c)))
    a = np.hstack([g, sigma * u])
    model = affine_model(a, offset)
    z = rng.standard_normal((n_points, d))
    if on_manifold:
        z[:, c:] = 0.0
    x = z @ a.T + offset
    lhs = pointwise_manifold_entropy(model, x, range(c, d))
    code = np.linalg.solve(a, (x - offset).T).T
    rec = code[:, :c] @ g.T + offset
    quad = np.sum((x - rec) ** 2, axis=1) / (2 * sigma ** 2)
    rhs = quad + (d - c) * np.log(sigma) + 0.5 * (d - c) * LOG_2PI
    return CompressionReport(float(sigma), (d, c), n_points,
                             float(np.max(np.abs(lhs - rhs))), lhs, quad)


# ---------------------------------------------------------------------------
# gradient fit of the closed-form objective

def _linear_objective(a: ad.Tensor, b: ad.Tensor, mu, sigma, lam):
    d = a.shape[0]
    prec = ad.inv(ad.matmul(a, ad.transpose(a)))
    diff = ad.constant(mu) - b
    quad = ad.sum(ad.mul(prec, ad.constant(sigma))) + ad.sum(diff * ad.matmul(prec, diff))
    logdet = ad.logabsdet(a)
    ml = 0.5 * (quad + 2.0 * logdet + d * LOG_2PI)
    tc = 0.5 * ad.sum(ad.log(ad.sqnorm(ad.transpose(a), -1))) - logdet
    return ml + lam * tc


def fit_linear_flow(mu, sigma, lam=1.0, steps=5000, lr=0.02, seed=0, a0=None) -> LinearFlow:
    """Minimise ``linear_ml_loss + lam * linear_tc_loss`` by Adam from a random start."""
    mu, sigma = np.asarray(mu, float), np.asarray(sigma, float)
    d = len(mu)
    rng = np.random.default_rng(seed)
    params = {"a": rng.standard_normal((d, d)) if a0 is None else np.array(a0, float),
              "b": np.zeros(d)}
    state = AdamState()
    for _ in range(steps):
        a, b = ad.tensor(params["a"], True), ad.tensor(params["b"], True)
        loss = _linear_objective(a, b, mu, sigma, lam)
        ga, gb = ad.backward(loss, [a, b])
        params, state = adam_step(params, {"a": ga, "b": gb}, state, lr)
    return LinearFlow(params["a"], params["b"])


def column_alignment(a, reference):
    """Best signed matching of the columns of ``a`` to those of ``reference``.

    Returns ``(perm, cosines)`` where column ``perm[i]`` of ``a`` is matched to
    column ``i`` of ``reference`` and ``cosines[i]`` is the absolute cosine.
    """
    a, ref = np.asarray(a, float), np.asarray(reference, float)
    an = a / np.linalg.norm(a, axis=0)
    rn = ref / np.linalg.norm(ref, axis=0)
    cos = np.abs(rn.T @ an)
    rows, cols = linear_sum_assignment(-cos)
    perm = cols[np.argsort(rows)]
    return perm, cos[np.arange(len(perm)), perm]
