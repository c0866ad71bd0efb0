"""Invertible encoder/decoder stacks: affine couplings plus orthogonal mixing.

A :class:`FlowModel` maps data ``x`` to latents ``z = f(x)`` (encoder) and back
with ``x = g(z)`` (decoder) using one shared parameter store.  Every layer works
on 2-D batches of either :class:`~eoflow.autodiff.Tensor` or
:class:`~eoflow.autodiff.Dual` values, which makes decoder jacobian columns a
single batched forward-mode pass.
"""

from __future__ import annotations

import io
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Dual, Tensor
from .errors import CheckpointError, NumericalError, ShapeError

CHECKPOINT_MAGIC = b"EOFL"
CHECKPOINT_VERSION = 1
DENSE_JACOBIAN_WARN_DIM = 256


def _random_orthogonal(rng, dim):
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def _batch_rows(x, dim):
    """Return a 2-D view of ``x`` and whether the input was a single vector."""
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ShapeError("flow", x.shape, (dim,))
        return ad.reshape(x, (1, dim)), True
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError("flow", x.shape, ("B", dim))
    return x, False


# ---------------------------------------------------------------------------
# layers

class Layer:
    """Bijection on ``R^dim``.  ``forward`` is the encoder direction."""

    kind = "layer"

    def __init__(self, name: str, dim: int):
        self.name = name
        self.dim = dim

    def param_shapes(self) -> dict[str, tuple]:
        return {}

    def trainable(self) -> set[str]:
        return set(self.param_shapes())

    def init_params(self, rng) -> dict[str, np.ndarray]:
        return {}

    def config(self) -> dict:
        return {}

    def forward(self, x, p):
        raise NotImplementedError

    def inverse(self, y, p):
        raise NotImplementedError

    def key(self, local: str) -> str:
        return f"{self.name}.{local}"

    def _zero_logdet(self, x):
        return Tensor(np.zeros(x.shape[0]))


class CouplingLayer(Layer):
    """Affine coupling on contiguous halves with a tanh MLP conditioner.

    Encoder direction: ``y1 = x1``, ``y2 = x2 * exp(s~) + t`` where
    ``s~ = clamp * tanh(s / clamp)`` and ``(s, t) = MLP(x1)``.
    The last MLP layer starts at zero so the layer is the identity at init.
    """

    kind = "coupling"

    def __init__(self, name, dim, width=64, depth=2, clamp=2.0):
        super().__init__(name, dim)
        if dim < 2:
            raise ValueError("coupling layers need dim >= 2")
        self.width = int(width)
        self.depth = int(depth)
        self.clamp = float(clamp)
        self.split = dim // 2

    def config(self):
        return {"width": self.width, "depth": self.depth, "clamp": self.clamp}

    def _sizes(self):
        return [self.split] + [self.width] * self.depth + [2 * (self.dim - self.split)]

    def param_shapes(self):
        sizes = self._sizes()
        shapes = {}
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes[f"w{k}"] = (n_in, n_out)
            shapes[f"b{k}"] = (n_out,)
        return shapes

    def init_params(self, rng):
        sizes = self._sizes()
        last = len(sizes) - 2
        out = {}
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if k == last:
                out[self.key(f"w{k}")] = np.zeros((n_in, n_out))
            else:
                out[self.key(f"w{k}")] = rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)
            out[self.key(f"b{k}")] = np.zeros(n_out)
        return out

    def _conditioner(self, x1, p):
        h = x1
        n = len(self._sizes()) - 1
        for k in range(n):
            w = p[self.key(f"w{k}")]
            b = p[self.key(f"b{k}")]
            h = ad.matmul(h, w) + ad.expand(b, (h.shape[0], b.shape[0]))
            if k < n - 1:
                h = ad.tanh(h)
        d2 = self.dim - self.split
        s = ad.index(h, (slice(None), slice(0, d2)))
        t = ad.index(h, (slice(None), slice(d2, 2 * d2)))
        s = ad.tanh(s * (1.0 / self.clamp)) * self.clamp
        return s, t

    def _halves(self, x):
        x1 = ad.index(x, (slice(None), slice(0, self.split)))
        x2 = ad.index(x, (slice(None), slice(self.split, self.dim)))
        return x1, x2

    def forward(self, x, p):
        x1, x2 = self._halves(x)
        s, t = self._conditioner(x1, p)
        y2 = x2 * ad.exp(s) + t
        return ad.concat([x1, y2], axis=1), ad.sum(s, 1)

    def inverse(self, y, p):
        y1, y2 = self._halves(y)
        s, t = self._conditioner(y1, p)
        x2 = (y2 - t) * ad.exp(-s)
        return ad.concat([y1, x2], axis=1), -ad.sum(s, 1)


class FixedOrthogonalLayer(Layer):
    """Constant orthogonal mixing ``y = Q x`` (random rotation or a permutation)."""

    kind = "fixed_orthogonal"

    def param_shapes(self):
        return {"q": (self.dim, self.dim)}

    def trainable(self):
        return set()

    def init_params(self, rng):
        return {self.key("q"): _random_orthogonal(rng, self.dim)}

    def forward(self, x, p):
        return ad.matmul(x, ad.transpose(p[self.key("q")])), self._zero_logdet(x)

    def inverse(self, y, p):
        return ad.matmul(y, p[self.key("q")]), self._zero_logdet(y)


class HouseholderLayer(Layer):
    """Learnable rotation ``Q = H_1 ... H_n`` built from Householder reflections."""

    kind = "householder"

    def __init__(self, name, dim, n_reflections=None):
        super().__init__(name, dim)
        self.n_reflections = int(dim if n_reflections is None else n_reflections)

    def config(self):
        return {"n_reflections": self.n_reflections}

    def param_shapes(self):
        return {"v": (self.n_reflections, self.dim)}

    def init_params(self, rng):
        return {self.key("v"): rng.standard_normal((self.n_reflections, self.dim))}

    def matrix(self, p):
        v = p[self.key("v")]
        d = self.dim
        q = ad.constant(np.eye(d))
        for k in range(self.n_reflections):
            vk = ad.reshape(ad.index(v, k), (d, 1))
            scale = 2.0 / ad.sqnorm(ad.index(v, k), -1)
            qv = ad.matmul(q, vk)
            q = q - ad.expand(scale, (d, d)) * ad.matmul(qv, ad.transpose(vk))
        return q

    def forward(self, x, p):
        q = self.matrix(p)
        return ad.matmul(x, ad.transpose(q)), self._zero_logdet(x)

    def inverse(self, y, p):
        return ad.matmul(y, self.matrix(p)), self._zero_logdet(y)


class AffineLayer(Layer):
    """Dense affine bijection; decoder direction ``x = A z + b``."""

    kind = "affine"

    def param_shapes(self):
        return {"a": (self.dim, self.dim), "b": (self.dim,)}

    def init_params(self, rng):
        return {self.key("a"): np.eye(self.dim), self.key("b"): np.zeros(self.dim)}

    def forward(self, x, p):
        a, b = p[self.key("a")], p[self.key("b")]
        n = x.shape[0]
        z = ad.matmul(x - ad.expand(b, (n, self.dim)), ad.transpose(ad.inv(a)))
        return z, -ad.expand(ad.logabsdet(a), (n,))

    def inverse(self, z, p):
        a, b = p[self.key("a")], p[self.key("b")]
        n = z.shape[0]
        x = ad.matmul(z, ad.transpose(a)) + ad.expand(b, (n, self.dim))
        return x, ad.expand(ad.logabsdet(a), (n,))


LAYER_KINDS = {cls.kind: cls for cls in (CouplingLayer, FixedOrthogonalLayer,
                                         HouseholderLayer, AffineLayer)}


# ---------------------------------------------------------------------------
# model

@dataclass
class FlowModel:
    """Ordered layer stack with a flat parameter store keyed ``layer.param``."""

    dim: int
    layers: list
    params: dict = field(default_factory=dict)
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def trainable_names(self) -> list[str]:
        names = []
        for layer in self.layers:
            names.extend(layer.key(k) for k in sorted(layer.trainable()))
        return names

    def tensor_params(self, requires_grad=()):
        """Wrap parameters as tensors; names in ``requires_grad`` become leaves."""
        wanted = set(requires_grad)
        return {k: Tensor(v, requires_grad=k in wanted) for k, v in self.params.items()}

    def n_parameters(self) -> int:
        return int(sum(self.params[k].size for k in self.trainable_names()))

    # differentiable passes ---------------------------------------------------

    def f(self, x, p=None, check=True):
        """Encoder on a 2-D batch; returns ``(z, logdet_enc)`` per row."""
        p = self.tensor_params() if p is None else p
        logdet = Tensor(np.zeros(x.shape[0]))
        for layer in self.layers:
            x, ld = layer.forward(x, p)
            logdet = logdet + ld
            if check:
                _check_finite(x, logdet, layer.name, "encode")
        return x, logdet

    def g(self, z, p=None, check=True):
        """Decoder on a 2-D batch; returns ``(x, logdet_dec)`` per row."""
        p = self.tensor_params() if p is None else p
        logdet = Tensor(np.zeros(z.shape[0]))
        for layer in reversed(self.layers):
            z, ld = layer.inverse(z, p)
            logdet = logdet + ld
            if check:
                _check_finite(z, logdet, layer.name, "decode")
        return z, logdet

    def decoder_columns(self, z, indices, p=None):
        """Jacobian columns ``J_i(z)`` for each ``i`` in ``indices``.

        Returns a tensor of shape ``(B, k, D)`` holding ``J_S(z)^T`` per row of
        ``z``; one batched forward-mode pass over ``B * k`` replicated rows.
        """
        indices = np.asarray(indices, dtype=int)
        n, k, d = z.shape[0], len(indices), self.dim
        if np.any(indices < 0) or np.any(indices >= d):
            raise IndexError(f"latent index out of range for D={d}: {indices}")
        zrep = z if k == 1 else ad.index(z, np.repeat(np.arange(n), k))
        tangent = np.zeros((n * k, d))
        tangent[np.arange(n * k), np.tile(indices, n)] = 1.0
        out = self.g(Dual(zrep, Tensor(tangent)), p)[0]
        return ad.reshape(out.tangent_or_zeros(), (n, k, d))

    def decoder_jvp(self, z, v, p=None):
        """``(g(z), J(z) v)`` for batched ``z`` and tangents ``v``."""
        out = self.g(Dual(z, v), p)[0]
        return out.primal, out.tangent_or_zeros()


def _check_finite(x, logdet, layer, direction):
    if not np.all(np.isfinite(ad.value_of(x))) or not np.all(np.isfinite(ad.value_of(logdet))):
        raise NumericalError(f"{direction}: non-finite output from layer '{layer}'")


def build_model(dim, n_blocks=4, mlp_width=64, mlp_depth=2, clamp=2.0, seed=0,
                learnable_rotation=True) -> FlowModel:
    """Blocks of (fixed random rotation, affine coupling), then a learnable rotation."""
    if dim < 2:
        raise ValueError(f"flow dimension must be >= 2, got {dim}")
    if n_blocks < 1:
        raise ValueError(f"n_blocks must be >= 1, got {n_blocks}")
    rng = np.random.default_rng(seed)
    layers = []
    for k in range(n_blocks):
        layers.append(FixedOrthogonalLayer(f"mix{k}", dim))
        layers.append(CouplingLayer(f"coupling{k}", dim, mlp_width, mlp_depth, clamp))
    if learnable_rotation:
        layers.append(HouseholderLayer("rotation", dim))
    params = {}
    for layer in layers:
        params.update(layer.init_params(rng))
    meta = {"n_blocks": n_blocks, "mlp_width": mlp_width, "mlp_depth": mlp_depth,
            "clamp": clamp, "learnable_rotation": learnable_rotation}
    return FlowModel(dim, layers, params, seed, meta)


def affine_model(a, b=None) -> FlowModel:
    """Single affine layer with decoder ``x = A z + b``."""
    a = np.array(a, dtype=np.float64)
    dim = a.shape[0]
    if a.shape != (dim, dim):
        raise ShapeError("affine_model", a.shape, detail="A must be square")
    b = np.zeros(dim) if b is None else np.array(b, dtype=np.float64)
    layer = AffineLayer("affine", dim)
    return FlowModel(dim, [layer], {layer.key("a"): a, layer.key("b"): b})


def permutation_matrix(perm) -> np.ndarray:
    """Matrix ``P`` with ``(P x)[i] = x[perm[i]]``."""
    perm = np.asarray(perm, dtype=int)
    p = np.zeros((len(perm), len(perm)))
    p[np.arange(len(perm)), perm] = 1.0
    return p


def with_latent_permutation(model: FlowModel, perm) -> FlowModel:
    """Copy of ``model`` whose latent ``i`` is the original latent ``perm[i]``."""
    layer = FixedOrthogonalLayer("relabel", model.dim)
    params = dict(model.params)
    params[layer.key("q")] = permutation_matrix(perm)
    return FlowModel(model.dim, list(model.layers) + [layer], params, model.seed, dict(model.meta))


# ---------------------------------------------------------------------------
# numpy-facing operations

def _as_rows(model, x):
    t = ad.tensor(x)
    return _batch_rows(t, model.dim)


def encode(model: FlowModel, x):
    """Encode ``x`` (shape ``(D,)`` or ``(B, D)``); returns ``(z, logdet_enc)``."""
    rows, single = _as_rows(model, x)
    z, ld = model.f(rows)
    z, ld = np.array(z.data), np.array(ld.data)
    return (z[0], float(ld[0])) if single else (z, ld)


def decode(model: FlowModel, z):
    """Decode ``z`` (shape ``(D,)`` or ``(B, D)``); returns ``(x, logdet_dec)``."""
    rows, single = _as_rows(model, z)
    x, ld = model.g(rows)
    x, ld = np.array(x.data), np.array(ld.data)
    return (x[0], float(ld[0])) if single else (x, ld)


def decoder_jacobian_column(model: FlowModel, z, i: int) -> np.ndarray:
    """Column ``J(z) e_i`` of the decoder Jacobian (0-based ``i``)."""
    if not 0 <= i < model.dim:
        raise IndexError(f"latent index {i} out of range for D={model.dim}")
    rows, single = _as_rows(model, z)
    cols = model.decoder_columns(rows, [i])
    out = np.array(cols.data[:, 0, :])
    return out[0] if single else out


def decoder_jacobian_dense(model: FlowModel, z) -> np.ndarray:
    """Full decoder Jacobian ``J[a, i] = d g_a / d z_i``; batched as ``(B, D, D)``."""
    if model.dim > DENSE_JACOBIAN_WARN_DIM:
        warnings.warn(f"dense Jacobian for D={model.dim} is expensive", RuntimeWarning,
                      stacklevel=2)
    rows, single = _as_rows(model, z)
    cols = model.decoder_columns(rows, np.arange(model.dim))
    jac = np.swapaxes(np.array(cols.data), 1, 2)
    return jac[0] if single else jac


# ---------------------------------------------------------------------------
# checkpoints: magic, version, D, JSON layer descriptors, LE float64 blobs

def _descriptor(model):
    return {
        "seed": model.seed,
        "meta": model.meta,
        "layers": [{"kind": l.kind, "name": l.name, "config": l.config()} for l in model.layers],
        "params": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
    }


def save_checkpoint(model: FlowModel, path) -> None:
    desc = json.dumps(_descriptor(model), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<III", CHECKPOINT_VERSION, model.dim, len(desc)))
    buf.write(desc)
    for value in model.params.values():
        buf.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> FlowModel:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 16:
        raise CheckpointError("checkpoint truncated in header")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:4]!r}")
    version, dim, desc_len = struct.unpack("<III", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(raw) < 16 + desc_len:
        raise CheckpointError("checkpoint truncated in layer descriptors")
    try:
        desc = json.loads(raw[16:16 + desc_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt layer descriptors") from exc
    layers = []
    for entry in desc["layers"]:
        cls = LAYER_KINDS.get(entry["kind"])
        if cls is None:
            raise CheckpointError(f"unknown layer kind {entry['kind']!r}")
        layers.append(cls(entry["name"], dim, **entry["config"]))
    params = {}
    offset = 16 + desc_len
    for entry in desc["params"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise CheckpointError(f"checkpoint truncated in parameter {entry['name']}")
        params[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8,
                                              offset=offset).astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{len(raw) - offset} trailing bytes after parameters")
    return FlowModel(dim, layers, params, desc["seed"], desc["meta"])
