"""Synthetic generators, IDX image ingestion, caching and noise inflation."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CACHE_MAGIC = b"EODS"
CACHE_VERSION = 1


@dataclass
class Dataset:
    """Immutable sample matrix with its normalisation and optional metadata.

    Normalised values are ``(raw - offset) / scale``.
    """

    samples: np.ndarray
    name: str = "data"
    scale: float = 1.0
    offset: float = 0.0
    metadata: dict = field(default_factory=dict)
    image_shape: tuple | None = None

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64)
        if x.ndim != 2:
            raise DataFormatError(f"dataset samples must be 2-D, got shape {x.shape}")
        if x.shape[0] == 0:
            raise DataFormatError("dataset is empty")
        if not np.all(np.isfinite(x)):
            raise DataFormatError("dataset contains non-finite values")
        x.flags.writeable = False
        self.samples = x

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def subset(self, idx) -> "Dataset":
        meta = {k: np.asarray(v)[idx] for k, v in self.metadata.items()}
        return Dataset(self.samples[idx], self.name, self.scale, self.offset, meta,
                       self.image_shape)

    def split(self, n_first: int):
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, self.n))


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"noise sigma must be positive, got {self.sigma}")


def _check_n(n):
    if n <= 0:
        raise ValueError(f"number of samples must be positive, got {n}")


def gaussian_dataset(dim, covariance, n, seed=0, mean=None) -> Dataset:
    """Samples of ``N(mean, covariance)``; ``covariance`` may be a vector of variances."""
    _check_n(n)
    cov = np.asarray(covariance, dtype=np.float64)
    cov = np.diag(cov) if cov.ndim == 1 else cov
    if cov.shape != (dim, dim):
        raise ValueError(f"covariance must be ({dim}, {dim}), got {cov.shape}")
    mean = np.zeros(dim) if mean is None else np.asarray(mean, dtype=np.float64)
    chol = np.linalg.cholesky(cov)
    z = np.random.default_rng(seed).standard_normal((n, dim))
    return Dataset(z @ chol.T + mean, name="gaussian")


def ring2d_dataset(n, radius_mean=1.0, radius_std=0.1, seed=0) -> Dataset:
    """Noisy ring ``r (cos phi, sin phi)`` with ``r ~ N(radius_mean, radius_std)``."""
    _check_n(n)
    rng = np.random.default_rng(seed)
    phi = rng.uniform(0.0, 2 * np.pi, n)
    r = radius_mean + radius_std * rng.standard_normal(n)
    x = np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)
    return Dataset(x, name="ring2d", metadata={"radius": r, "angle": phi})


def entangled_mixture(base_a: Dataset, base_b: Dataset, n, seed=0) -> Dataset:
    """``alpha x_a + (1 - alpha) x_b`` with ``alpha ~ U[0, 1]`` stored as metadata."""
    _check_n(n)
    if base_a.dim != base_b.dim:
        raise ValueError("mixture bases must have the same dimension")
    rng = np.random.default_rng(seed)
    ia = rng.integers(0, base_a.n, n)
    ib = rng.integers(0, base_b.n, n)
    alpha = rng.uniform(0.0, 1.0, n)
    x = alpha[:, None] * base_a.samples[ia] + (1 - alpha[:, None]) * base_b.samples[ib]
    return Dataset(x, name="mixture", metadata={"alpha": alpha},
                   image_shape=base_a.image_shape)


def prototype_mixture(dim=8, n=4000, seed=0) -> Dataset:
    """Uniform mixtures of two fixed random prototypes in ``[0, 1]^dim``."""
    protos = np.random.default_rng(seed).uniform(0.0, 1.0, (2, dim))
    a = Dataset(protos[:1], name="prototype_a")
    b = Dataset(protos[1:], name="prototype_b")
    out = entangled_mixture(a, b, n, seed + 1)
    out.metadata["prototypes"] = np.repeat(protos[None], n, axis=0)
    return out


# ---------------------------------------------------------------------------
# noise inflation

def inflate(batch, cfg: NoiseConfig | float, rng=None) -> np.ndarray:
    """``x + sigma * eps`` with fresh ``eps ~ N(0, I)``; the input is not modified.

    ``rng`` defaults to a generator seeded from ``cfg.seed``.
    """
    sigma = cfg.sigma if isinstance(cfg, NoiseConfig) else float(cfg)
    if sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    x = np.asarray(batch, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    if rng is None:
        rng = np.random.default_rng(cfg.seed if isinstance(cfg, NoiseConfig) else None)
    return x + sigma * rng.standard_normal(x.shape)


# ---------------------------------------------------------------------------
# IDX container

_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in _IDX_DTYPES:
        raise DataFormatError(f"{path}: bad IDX magic 0x{struct.unpack('>I', raw[:4])[0]:08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataFormatError(f"{path}: truncated IDX dimensions")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    dtype = np.dtype(_IDX_DTYPES[dtype_code])
    count = int(np.prod(dims)) if dims else 1
    if len(raw) - head != count * dtype.itemsize:
        raise DataFormatError(f"{path}: payload has {len(raw) - head} bytes, "
                              f"expected {count * dtype.itemsize}")
    return np.frombuffer(raw, dtype=dtype, offset=head).reshape(dims)


def write_idx(path, array) -> None:
    arr = np.asarray(array)
    codes = {np.dtype(v).newbyteorder("=").str[1:]: k for k, v in _IDX_DTYPES.items()}
    key = arr.dtype.newbyteorder("=").str[1:]
    if key not in codes:
        raise DataFormatError(f"dtype {arr.dtype} cannot be stored as IDX")
    code = codes[key]
    header = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(_IDX_DTYPES[code]).tobytes())


def load_idx(images_path, labels_path=None) -> Dataset:
    """Read an IDX image file (magic 0x803) into rows scaled to ``[0, 1]``."""
    images = read_idx(images_path)
    magic = struct.unpack(">I", Path(images_path).read_bytes()[:4])[0]
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{images_path}: expected image magic 0x803, got 0x{magic:x}")
    n = images.shape[0]
    meta = {}
    if labels_path is not None:
        labels = read_idx(labels_path)
        lmagic = struct.unpack(">I", Path(labels_path).read_bytes()[:4])[0]
        if lmagic != IDX_LABELS_MAGIC:
            raise DataFormatError(f"{labels_path}: expected label magic 0x801, got 0x{lmagic:x}")
        if labels.shape[0] != n:
            raise DataFormatError(f"{n} images but {labels.shape[0]} labels")
        meta["label"] = labels.astype(np.int64)
    x = images.reshape(n, -1).astype(np.float64) / 255.0
    return Dataset(x, name=Path(images_path).stem, scale=255.0, offset=0.0, metadata=meta,
                   image_shape=tuple(images.shape[1:]))


# ---------------------------------------------------------------------------
# dataset cache: "EODS", version, N, D (little-endian u32) then LE float64 rows

def save_cache(dataset: Dataset | np.ndarray, path) -> None:
    x = dataset.samples if isinstance(dataset, Dataset) else np.asarray(dataset, np.float64)
    header = CACHE_MAGIC + struct.pack("<III", CACHE_VERSION, x.shape[0], x.shape[1])
    Path(path).write_bytes(header + np.ascontiguousarray(x, dtype="<f8").tobytes())


def load_cache(path, name=None) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CACHE_MAGIC:
        raise DataFormatError(f"{path}: not a dataset cache")
    version, n, d = struct.unpack("<III", raw[4:16])
    if version != CACHE_VERSION:
        raise DataFormatError(f"{path}: unsupported cache version {version}")
    if len(raw) - 16 != n * d * 8:
        raise DataFormatError(f"{path}: payload size does not match {n}x{d}")
    x = np.frombuffer(raw, dtype="<f8", offset=16).reshape(n, d)
    return Dataset(x, name=name or Path(path).stem)


def load_samples(path) -> Dataset:
    """Load a dataset from a cache, IDX image, ``.npy`` or CSV file by extension."""
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix in (".eods", ".bin"):
            return load_cache(path)
        if suffix in (".idx", ".idx3-ubyte", ".ubyte") or path.name.endswith("ubyte"):
            return load_idx(path)
        if suffix == ".npy":
            return Dataset(np.load(path), name=path.stem)
        if suffix in (".csv", ".txt"):
            return Dataset(np.loadtxt(path, delimiter=",", comments="#", ndmin=2), name=path.stem)
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, DataFormatError):
            raise
        raise DataFormatError(f"cannot parse {path}: {exc}") from exc
    raise DataFormatError(f"unknown data file type: {path.name}")
