import gzip

import numpy as np
import pytest

from robattr.config import config_from_dict
from robattr.data import (IdxError, load_idx, synth_dataset, to_uint8, write_idx)
from robattr.train import load_datasets, train


def _write_pair(tmp_path, n=5, suffix=""):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(n, 4, 3), dtype=np.uint8)
    lab = rng.integers(0, 10, size=n, dtype=np.uint8)
    ip, lp = tmp_path / f"img{suffix}", tmp_path / f"lab{suffix}"
    write_idx(ip, img)
    write_idx(lp, lab)
    return ip, lp, img, lab


@pytest.mark.parametrize("suffix", ["", ".gz"])
def test_idx_round_trip(tmp_path, suffix):
    ip, lp, img, lab = _write_pair(tmp_path, suffix=suffix)
    ds = load_idx(ip, lp)
    np.testing.assert_array_equal(to_uint8(ds.x), img)
    np.testing.assert_array_equal(ds.y, lab)
    assert ds.input_shape == (4, 3) and ds.num_classes == 10
    if suffix:
        assert gzip.open(ip).read(4) == b"\x00\x00\x08\x03"


def test_idx_errors_name_expected_and_actual_bytes(tmp_path):
    ip, lp, _, _ = _write_pair(tmp_path)
    raw = ip.read_bytes()
    ip.write_bytes(raw[:-7])
    with pytest.raises(IdxError, match=f"expected {len(raw)} bytes, got {len(raw) - 7}"):
        load_idx(ip, lp)
    ip.write_bytes(b"\x00\x00\x08\x01" + raw[4:])
    with pytest.raises(IdxError, match="bad magic"):
        load_idx(ip, lp)
    ip.write_bytes(raw[:10])
    with pytest.raises(IdxError, match="truncated header"):
        load_idx(ip, lp)
    ip.write_bytes(raw)
    write_idx(lp, np.zeros(3, dtype=np.uint8))
    with pytest.raises(IdxError, match="5 images but 3 labels"):
        load_idx(ip, lp)
    with pytest.raises(IdxError):
        write_idx(lp, np.zeros(3, dtype=np.int32))


def test_dataset_views():
    ds = synth_dataset("two_gaussians", 10, seed=1)
    assert len(ds.take(slice(0, 4))) == 4
    assert ds.flat().x.shape == (10, 2)
    assert ds.samples[3].y == ds.y[3]
    with pytest.raises(ValueError):
        synth_dataset("spiral", 10)


@pytest.mark.parametrize("kind", ["two_gaussians", "xor_grid"])
def test_synthetic_sets_are_deterministic(kind):
    a, b = synth_dataset(kind, 100, seed=1), synth_dataset(kind, 100, seed=1)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)
    assert a.x.min() >= 0 and a.x.max() <= 1
    assert not np.array_equal(a.x, synth_dataset(kind, 100, seed=2).x)


def _synth_cfg(kind, layers, steps=600):
    return config_from_dict({
        "seed": 0,
        "data": {"kind": "synthetic", "synth": kind, "n_train": 200, "n_test": 200},
        "model": {"layers": layers, "input_shape": [2]},
        "objective": {"variant": "NATURAL"},
        "optim": {"lr": 0.05, "steps": steps, "batch_size": 50, "log_every": 100},
    })


def test_linear_model_separates_two_gaussians():
    cfg = _synth_cfg("two_gaussians", [["dense", 2, 2]])
    tr, te = load_datasets(cfg)
    net, _ = train(cfg, tr)
    assert (net.predict(tr.x) == tr.y).mean() == 1.0
    assert (net.predict(te.x) == te.y).mean() == 1.0


def test_xor_needs_a_hidden_layer():
    flat = _synth_cfg("xor_grid", [["dense", 2, 2]])
    tr, te = load_datasets(flat)
    net, _ = train(flat, tr)
    assert (net.predict(tr.x) == tr.y).mean() <= 0.75
    assert (net.predict(te.x) == te.y).mean() <= 0.75
    deep = _synth_cfg("xor_grid", [["dense", 2, 16], ["relu"], ["dense", 16, 2]], steps=1500)
    net, _ = train(deep, tr)
    assert (net.predict(tr.x) == tr.y).mean() == 1.0


def test_mnist_subset(mnist_dir):
    tr = load_idx(mnist_dir / "train-images-idx3-ubyte", mnist_dir / "train-labels-idx1-ubyte")
    te = load_idx(mnist_dir / "test-images-idx3-ubyte", mnist_dir / "test-labels-idx1-ubyte")
    assert tr.x.shape == (2000, 28, 28) and te.x.shape == (500, 28, 28)
    assert tr.x.min() >= 0 and tr.x.max() <= 1
    np.testing.assert_array_equal(np.bincount(tr.y), 200)
    np.testing.assert_array_equal(np.bincount(te.y), 50)
