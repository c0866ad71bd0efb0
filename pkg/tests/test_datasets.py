import struct

import numpy as np
import pytest

from eoflow.datasets import (Dataset, NoiseConfig, entangled_mixture, gaussian_dataset, inflate,
                             load_cache, load_idx, load_samples, prototype_mixture, read_idx,
                             ring2d_dataset, save_cache, write_idx)
from eoflow.errors import DataFormatError


def test_gaussian_variances_within_sampling_error():
    data = gaussian_dataset(2, [4.0, 1.0], 100_000, seed=0)
    var = data.samples.var(axis=0, ddof=1)
    # std error of a sample variance is sigma^2 sqrt(2 / (n - 1))
    assert np.all(np.abs(var - [4.0, 1.0]) < 3 * np.array([4.0, 1.0]) * np.sqrt(2 / 99_999))
    assert np.all(np.abs(data.samples.mean(0)) < 3 * np.sqrt([4.0, 1.0] / np.array(100_000.0)))


def test_generators_are_seeded_and_read_only():
    a, b = ring2d_dataset(100, seed=3), ring2d_dataset(100, seed=3)
    assert a.samples.tobytes() == b.samples.tobytes()
    with pytest.raises(ValueError):
        a.samples[0, 0] = 1.0
    assert not np.array_equal(a.samples, ring2d_dataset(100, seed=4).samples)


def test_ring_metadata_reconstructs_points():
    d = ring2d_dataset(50, radius_mean=2.0, radius_std=0.1, seed=1)
    r, phi = d.metadata["radius"], d.metadata["angle"]
    assert np.allclose(d.samples, np.stack([r * np.cos(phi), r * np.sin(phi)], 1))


def test_dataset_validation():
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((0, 2)))
    with pytest.raises(DataFormatError):
        Dataset(np.array([[np.nan, 1.0]]))
    with pytest.raises(ValueError):
        gaussian_dataset(2, [1.0, 1.0], 0)
    with pytest.raises(ValueError):
        gaussian_dataset(3, [1.0, 1.0], 10)


def test_subset_and_split_carry_metadata():
    d = ring2d_dataset(10, seed=0)
    first, rest = d.split(4)
    assert first.n == 4 and rest.n == 6
    assert np.array_equal(rest.metadata["angle"], d.metadata["angle"][4:])


def test_entangled_mixture_is_convex_combination():
    protos = np.array([[0.0, 1.0], [2.0, 3.0]])
    a, b = Dataset(protos[:1]), Dataset(protos[1:])
    mix = entangled_mixture(a, b, 500, seed=2)
    alpha = mix.metadata["alpha"]
    assert np.allclose(mix.samples, alpha[:, None] * protos[0] + (1 - alpha[:, None]) * protos[1])
    assert 0 <= alpha.min() and alpha.max() <= 1
    with pytest.raises(ValueError):
        entangled_mixture(a, Dataset(np.zeros((1, 3))), 5)


def test_prototype_mixture_shape():
    d = prototype_mixture(dim=8, n=100, seed=0)
    assert d.samples.shape == (100, 8) and d.metadata["alpha"].shape == (100,)


def test_inflation_statistics_and_purity():
    x = np.zeros((20_000, 3))
    out = inflate(x, NoiseConfig(0.05, seed=1))
    assert np.all(x == 0)
    assert abs(out.std() - 0.05) < 3 * 0.05 / np.sqrt(2 * out.size)
    assert np.array_equal(inflate(x, 0.0), x)
    a = inflate(x[:5], 0.1, np.random.default_rng(0))
    b = inflate(x[:5], 0.1, np.random.default_rng(0))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        NoiseConfig(0.0)


def _write_images(path, images):
    n, h, w = images.shape
    path.write_bytes(struct.pack(">IIII", 0x803, n, h, w) + images.astype(np.uint8).tobytes())


def test_idx_round_trip_and_scaling(tmp_path):
    imgs = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4) * 10
    _write_images(tmp_path / "img.idx", imgs)
    (tmp_path / "lab.idx").write_bytes(struct.pack(">II", 0x801, 2) + bytes([7, 3]))
    d = load_idx(tmp_path / "img.idx", tmp_path / "lab.idx")
    assert d.image_shape == (3, 4) and d.dim == 12
    assert np.allclose(d.samples * 255, imgs.reshape(2, -1))
    assert list(d.metadata["label"]) == [7, 3]
    write_idx(tmp_path / "copy.idx", imgs)
    assert (tmp_path / "copy.idx").read_bytes() == (tmp_path / "img.idx").read_bytes()
    assert np.array_equal(read_idx(tmp_path / "copy.idx"), imgs)


def test_idx_errors(tmp_path):
    imgs = np.zeros((2, 2, 2), dtype=np.uint8)
    _write_images(tmp_path / "img.idx", imgs)
    raw = (tmp_path / "img.idx").read_bytes()
    (tmp_path / "short.idx").write_bytes(raw[:-1])
    with pytest.raises(DataFormatError, match="payload"):
        load_idx(tmp_path / "short.idx")
    (tmp_path / "bad.idx").write_bytes(b"\x01\x02" + raw[2:])
    with pytest.raises(DataFormatError, match="magic"):
        load_idx(tmp_path / "bad.idx")
    (tmp_path / "lab.idx").write_bytes(struct.pack(">II", 0x801, 3) + bytes(3))
    with pytest.raises(DataFormatError, match="labels"):
        load_idx(tmp_path / "img.idx", tmp_path / "lab.idx")
    with pytest.raises(DataFormatError, match="image magic"):
        load_idx(tmp_path / "lab.idx")


def test_cache_round_trip_and_header(tmp_path):
    d = gaussian_dataset(3, [1.0, 2.0, 3.0], 7, seed=5)
    save_cache(d, tmp_path / "d.eods")
    raw = (tmp_path / "d.eods").read_bytes()
    assert raw[:4] == b"EODS" and struct.unpack("<III", raw[4:16]) == (1, 7, 3)
    assert load_cache(tmp_path / "d.eods").samples.tobytes() == d.samples.tobytes()
    (tmp_path / "v2.eods").write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(DataFormatError, match="version"):
        load_cache(tmp_path / "v2.eods")


def test_load_samples_by_extension(tmp_path):
    x = np.random.default_rng(0).standard_normal((4, 2))
    np.save(tmp_path / "x.npy", x)
    np.savetxt(tmp_path / "x.csv", x, delimiter=",")
    assert np.array_equal(load_samples(tmp_path / "x.npy").samples, x)
    assert np.allclose(load_samples(tmp_path / "x.csv").samples, x)
    (tmp_path / "x.json").write_text("{}")
    with pytest.raises(DataFormatError):
        load_samples(tmp_path / "x.json")
    with pytest.raises(DataFormatError):
        load_samples(tmp_path / "missing.npy")
