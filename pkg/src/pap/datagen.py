"""Synthetic image-classification datasets and the PAPT tensor file format.

PAPT layout (all integers little-endian)::

    b"PAPT" | u8 dtype (0=f32, 1=f64) | u8 rank | rank x u64 extents | payload

The payload is the row-major array data.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"PAPT"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class TensorFormatError(ValueError):
    pass


class BadMagicError(TensorFormatError):
    pass


class TruncatedTensorError(TensorFormatError):
    pass


class UnknownDtypeError(TensorFormatError):
    pass


def encode_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    code = _CODES.get(t.dtype)
    if code is None:
        raise UnknownDtypeError(f"PAPT stores float32/float64 only, got {t.dtype}")
    if t.ndim > 255:
        raise TensorFormatError("rank exceeds 255")
    head = TENSOR_MAGIC + struct.pack("<BB", code, t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape)
    return head + np.ascontiguousarray(t, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> tuple[np.ndarray, int]:
    """Decode one tensor from the front of ``buf``; return it and the bytes consumed."""
    if len(buf) < 4 or buf[:4] != TENSOR_MAGIC:
        raise BadMagicError("missing PAPT magic")
    if len(buf) < 6:
        raise TruncatedTensorError("header truncated")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _DTYPES:
        raise UnknownDtypeError(f"unknown dtype code {code}")
    pos = 6 + 8 * rank
    if len(buf) < pos:
        raise TruncatedTensorError("shape truncated")
    shape = struct.unpack_from(f"<{rank}Q", buf, 6)
    dtype = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise TruncatedTensorError(f"payload has {len(buf) - pos} bytes, expected {nbytes}")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def save_tensor(path, t: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(t))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, used = decode_tensor(buf)
    if used != len(buf):
        raise TensorFormatError(f"{len(buf) - used} trailing bytes after tensor payload")
    return arr


# -- datasets -----------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    """Parameters of one synthetic dataset.

    ``pixel_mean``/``pixel_std`` are the target dataset statistics before
    clamping. ``noise_level`` is the per-pixel Gaussian noise relative to the
    (unit-variance) class templates and ``brightness_jitter`` the std of a
    per-image luminance offset (shared by all channels) on the same scale. With both at
    0 every image equals its class template.
    """

    name: str
    num_classes: int = 16
    samples_per_class: int = 80
    image_shape: tuple[int, int, int] = (3, 32, 32)
    pixel_mean: float = 0.45
    pixel_std: float = 0.22
    noise_level: float = 3.0
    brightness_jitter: float = 1.0
    pattern_seed: int = 0
    train_fraction: float = 0.75
    freq_range: tuple[float, float] = (1.0, 6.0)

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        object.__setattr__(self, "freq_range", tuple(float(v) for v in self.freq_range))

    def validate(self) -> None:
        if self.pixel_std <= 0:
            raise ValueError(f"pixel_std must be positive, got {self.pixel_std}")
        if self.noise_level < 0 or self.brightness_jitter < 0:
            raise ValueError("noise_level and brightness_jitter must be non-negative")
        if not 0 <= self.pixel_mean <= 1:
            raise ValueError("pixel_mean must lie in [0, 1]")
        if self.num_classes < 1 or self.samples_per_class < 2:
            raise ValueError("need at least one class and two samples per class")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must be in (0, 1)")
        if len(self.image_shape) != 3:
            raise ValueError("image_shape must be [C, H, W]")
        if len(self.freq_range) != 2 or not 0 < self.freq_range[0] <= self.freq_range[1]:
            raise ValueError("freq_range must be (low, high) with 0 < low <= high")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["freq_range"] = list(self.freq_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


@dataclass
class Dataset:
    spec: DatasetSpec
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray

    @property
    def images(self) -> np.ndarray:
        return np.concatenate([self.train_images, self.test_images])

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([self.train_labels, self.test_labels])


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode())


def class_templates(spec: DatasetSpec) -> np.ndarray:
    """Zero-mean procedural templates, jointly scaled to unit variance.

    Each class mixes three oriented colour gratings (spatial frequency in
    ``freq_range`` cycles per image) with two Gaussian blobs,
    all drawn from an RNG keyed on ``pattern_seed`` and the class index.
    """
    c, h, w = spec.image_shape
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    out = np.empty((spec.num_classes, c, h, w))
    for k in range(spec.num_classes):
        rng = np.random.default_rng([spec.pattern_seed, k])
        img = np.zeros((c, h, w))
        for _ in range(3):
            freq = rng.uniform(*spec.freq_range)
            theta = rng.uniform(0, np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            colour = rng.standard_normal(c)
            wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
            img += rng.uniform(0.5, 1.0) * colour[:, None, None] * wave
        for _ in range(2):
            cy, cx = rng.uniform(0.15, 0.85, size=2)
            radius = rng.uniform(0.08, 0.2)
            colour = rng.standard_normal(c)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
            img += 1.5 * colour[:, None, None] * blob
        out[k] = img - img.mean()
    return out / np.sqrt(np.mean(out**2))


def generate_dataset(spec: DatasetSpec, seed: int) -> Dataset:
    """Deterministically sample a dataset from ``spec``.

    Pixels are ``mean + std * (template + noise + offset) / sqrt(1 + noise_level**2 + brightness_jitter**2)``,
    clamped to [0, 1]. The split is stratified: the first
    ``train_fraction`` of each class goes to train.
    """
    spec.validate()
    templates = class_templates(spec)
    rng = np.random.default_rng([seed, spec.pattern_seed, _name_key(spec.name)])
    n_per = spec.samples_per_class
    n_train = max(1, min(n_per - 1, int(round(spec.train_fraction * n_per))))
    scale = spec.pixel_std / np.sqrt(1.0 + spec.noise_level**2 + spec.brightness_jitter**2)
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for k in range(spec.num_classes):
        noise = rng.standard_normal((n_per,) + spec.image_shape)
        offset = rng.standard_normal((n_per, 1, 1, 1))
        raw = templates[k][None] + spec.noise_level * noise + spec.brightness_jitter * offset
        imgs = np.clip(spec.pixel_mean + scale * raw, 0.0, 1.0).astype(np.float32)
        tr_x.append(imgs[:n_train])
        te_x.append(imgs[n_train:])
        tr_y.append(np.full(n_train, k))
        te_y.append(np.full(n_per - n_train, k))
    order = rng.permutation(n_train * spec.num_classes)
    return Dataset(
        spec,
        np.concatenate(tr_x)[order],
        np.concatenate(tr_y)[order],
        np.concatenate(te_x),
        np.concatenate(te_y),
    )


_SPLIT_FILES = ("train_images", "train_labels", "test_images", "test_labels")


def save_dataset(ds: Dataset, directory, seed: int | None = None) -> Path:
    """Write the four split tensors plus ``manifest.json``; return the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for key in _SPLIT_FILES:
        arr = getattr(ds, key)
        if key.endswith("labels"):
            arr = arr.astype(np.float64)
        save_tensor(directory / f"{key}.papt", arr)
        files[key] = f"{key}.papt"
    manifest = {"spec": ds.spec.to_dict(), "seed": seed, "files": files}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    arrays = {k: load_tensor(base / manifest["files"][k]) for k in _SPLIT_FILES}
    for k in ("train_labels", "test_labels"):
        arrays[k] = arrays[k].astype(np.int64)
    return Dataset(DatasetSpec.from_dict(manifest["spec"]), **arrays)
