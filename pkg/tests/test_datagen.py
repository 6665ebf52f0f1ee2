import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from pap import tensor as T
from pap.datagen import (
    BadMagicError,
    DatasetSpec,
    TensorFormatError,
    TruncatedTensorError,
    UnknownDtypeError,
    class_templates,
    decode_tensor,
    encode_tensor,
    generate_dataset,
    load_dataset,
    load_tensor,
    save_dataset,
    save_tensor,
)


# -- PAPT format -------------------------------------------------------------


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_roundtrip_bit_exact(tmp_path, dtype):
    t = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(dtype)
    save_tensor(tmp_path / "t.papt", t)
    back = load_tensor(tmp_path / "t.papt")
    assert back.dtype == dtype and back.shape == t.shape
    assert back.tobytes() == t.tobytes()


def test_scalar_roundtrip(tmp_path):
    t = np.array(3.25)
    save_tensor(tmp_path / "s.papt", t)
    back = load_tensor(tmp_path / "s.papt")
    assert back.shape == () and back == 3.25


def test_header_layout():
    buf = encode_tensor(np.zeros((2, 5), np.float64))
    assert buf[:4] == b"PAPT"
    assert buf[4] == 1 and buf[5] == 2
    assert struct.unpack_from("<2Q", buf, 6) == (2, 5)
    assert len(buf) == 6 + 16 + 10 * 8


def test_truncated_by_one_byte(tmp_path):
    buf = encode_tensor(np.ones((3, 3), np.float32))
    (tmp_path / "t.papt").write_bytes(buf[:-1])
    with pytest.raises(TruncatedTensorError):
        load_tensor(tmp_path / "t.papt")
    with pytest.raises(TruncatedTensorError):
        decode_tensor(buf[:8])


def test_distinct_errors(tmp_path):
    buf = encode_tensor(np.ones(2, np.float32))
    with pytest.raises(BadMagicError):
        decode_tensor(b"NOPE" + buf[4:])
    with pytest.raises(UnknownDtypeError):
        decode_tensor(buf[:4] + bytes([7]) + buf[5:])
    with pytest.raises(UnknownDtypeError):
        encode_tensor(np.ones(2, np.int32))
    (tmp_path / "x.papt").write_bytes(buf + b"\x00")
    with pytest.raises(TensorFormatError, match="trailing"):
        load_tensor(tmp_path / "x.papt")
    assert not issubclass(BadMagicError, TruncatedTensorError)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64]), hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)))
def test_roundtrip_property(arr):
    back, used = decode_tensor(encode_tensor(arr))
    assert used == len(encode_tensor(arr))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


# -- datasets ----------------------------------------------------------------


def small_spec(**kw):
    base = dict(name="t", num_classes=4, samples_per_class=12)
    base.update(kw)
    return DatasetSpec(**base)


def test_same_seed_byte_identical():
    a = generate_dataset(small_spec(), 3)
    b = generate_dataset(small_spec(), 3)
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        assert getattr(a, key).tobytes() == getattr(b, key).tobytes()
    c = generate_dataset(small_spec(), 4)
    assert c.train_images.tobytes() != a.train_images.tobytes()


def test_pixels_clamped_and_labels_valid():
    ds = generate_dataset(small_spec(pixel_mean=0.8, pixel_std=0.4), 0)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert set(np.unique(ds.labels)) == set(range(4))


def test_split_stratified_and_disjoint():
    ds = generate_dataset(small_spec(), 0)
    assert len(ds.train_labels) == 4 * 9 and len(ds.test_labels) == 4 * 3
    assert np.array_equal(np.bincount(ds.test_labels), [3, 3, 3, 3])
    train_rows = {r.tobytes() for r in ds.train_images}
    assert not any(r.tobytes() in train_rows for r in ds.test_images)


def test_noise_free_images_equal_template():
    spec = small_spec(pixel_mean=0.5, pixel_std=0.1, noise_level=0.0, brightness_jitter=0.0)
    ds = generate_dataset(spec, 0)
    tmpl = class_templates(spec)
    for k in range(4):
        imgs = ds.test_images[ds.test_labels == k]
        want = np.clip(0.5 + 0.1 * tmpl[k], 0, 1).astype(np.float32)
        assert np.array_equal(imgs, np.broadcast_to(want, imgs.shape))


def test_mean_matches_spec():
    ds = generate_dataset(DatasetSpec("m", pixel_mean=0.5, pixel_std=0.1), 0)
    assert abs(ds.images.mean() - 0.5) < 0.02


@pytest.mark.parametrize("mu,sigma", [(0.45, 0.22), (0.3, 0.15), (0.5, 0.15), (0.7, 0.15)])
def test_clamping_moves_few_pixels(mu, sigma):
    spec = DatasetSpec("c", samples_per_class=20, pixel_mean=mu, pixel_std=sigma)
    ds = generate_dataset(spec, 0)
    x = ds.images
    frac = np.mean((x == 0.0) | (x == 1.0))
    assert frac < 0.05
    assert abs(x.std() - sigma) < 0.02


def test_rejects_bad_spec():
    with pytest.raises(ValueError, match="pixel_std"):
        generate_dataset(small_spec(pixel_std=0.0), 0)
    with pytest.raises(ValueError):
        generate_dataset(small_spec(pixel_mean=1.5), 0)
    with pytest.raises(ValueError):
        generate_dataset(small_spec(freq_range=(3.0, 1.0)), 0)


def test_templates_distinguishable_by_linear_probe():
    spec = DatasetSpec("probe")
    ds = generate_dataset(spec, 0)
    xtr = ds.train_images.reshape(len(ds.train_images), -1).astype(np.float64)
    xte = ds.test_images.reshape(len(ds.test_images), -1).astype(np.float64)
    mean = xtr.mean(axis=0)
    w = np.zeros((spec.num_classes, xtr.shape[1]))
    b = np.zeros(spec.num_classes)
    r = np.random.default_rng(0)
    for _ in range(30):
        for idx in np.array_split(r.permutation(len(xtr)), 30):
            logits = T.linear(xtr[idx] - mean, w, b)
            _, d = T.softmax_cross_entropy(logits, ds.train_labels[idx])
            g = T.linear_backward(d, xtr[idx] - mean, w)
            w -= 0.05 * g.param_grads["weight"]
            b -= 0.05 * g.param_grads["bias"]
    acc = np.mean(T.linear(xte - mean, w, b).argmax(axis=1) == ds.test_labels)
    assert acc > 0.8


def test_dataset_save_load(tmp_path):
    ds = generate_dataset(small_spec(), 1)
    manifest = save_dataset(ds, tmp_path / "ds", seed=1)
    back = load_dataset(manifest)
    assert back.spec == ds.spec
    assert back.train_labels.dtype == np.int64
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        assert np.array_equal(getattr(back, key), getattr(ds, key))


def test_spec_dict_roundtrip():
    spec = small_spec(image_shape=[3, 16, 16], freq_range=[2, 4])
    assert DatasetSpec.from_dict(spec.to_dict()) == spec
