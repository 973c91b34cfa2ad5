import gzip
import struct

import numpy as np
import pytest

from moesimvae.data import (CHECKPOINT_MAGIC, Checkpoint, Dataset, batch_iterator, load_checkpoint, load_csv,
                            load_embedding, load_idx, make_blobs, minmax_scale, save_checkpoint,
                            write_idx_images, write_idx_labels)
from moesimvae.errors import FormatError, IncompatibleCheckpointError, ParameterError


@pytest.fixture
def idx_files(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    images[0, 0, 0], images[0, 0, 1] = 255, 0
    labels = np.array([3, 1, 4, 1, 5], dtype=np.uint8)
    ip, lp = tmp_path / "img", tmp_path / "lab"
    write_idx_images(ip, images)
    write_idx_labels(lp, labels)
    return ip, lp, images, labels


def test_load_idx(idx_files):
    ip, lp, images, labels = idx_files
    ds = load_idx(ip, lp)
    assert ds.features.shape == (5, 784)
    assert ds.features[0, 0] == 1.0 and ds.features[0, 1] == 0.0
    np.testing.assert_array_equal(ds.labels, labels)
    assert ds.image_shape == (28, 28)
    np.testing.assert_allclose(ds.features[2], images[2].ravel() / 255.0, rtol=1e-6)


def test_load_idx_gzip(idx_files, tmp_path):
    ip, lp, _, _ = idx_files
    gz = tmp_path / "img.gz"
    with gzip.open(gz, "wb") as f:
        f.write(ip.read_bytes())
    np.testing.assert_array_equal(load_idx(gz).features, load_idx(ip).features)


def test_load_idx_errors(idx_files, tmp_path):
    ip, lp, _, _ = idx_files
    with pytest.raises(FormatError, match="magic"):
        load_idx(lp)
    truncated = tmp_path / "trunc"
    truncated.write_bytes(ip.read_bytes()[:-10])
    with pytest.raises(FormatError):
        load_idx(truncated)
    short = tmp_path / "short_labels"
    write_idx_labels(short, np.array([1, 2, 3]))
    with pytest.raises(FormatError, match="labels"):
        load_idx(ip, short)


def write(path, text):
    path.write_text(text)
    return path


def test_load_csv_labels_and_scaling(tmp_path):
    p = write(tmp_path / "a.csv", "m1,m2,pop\n1,5,a\n3,5,b\n2,5,a\n")
    ds = load_csv(p, label_column="pop")
    np.testing.assert_array_equal(ds.labels, [0, 1, 0])
    assert ds.label_names == ["a", "b"]
    np.testing.assert_allclose(ds.features[:, 0], [0.0, 1.0, 0.5])
    np.testing.assert_array_equal(ds.features[:, 1], 0.0)  # zero-range column
    assert ds.feature_names == ["m1", "m2"]


def test_load_csv_arcsinh(tmp_path):
    p = write(tmp_path / "a.csv", "m\n0\n5\n50\n")
    ds = load_csv(p, arcsinh_cofactor=5.0)
    v = np.arcsinh(np.array([0.0, 5.0, 50.0]) / 5.0)
    np.testing.assert_allclose(ds.features[:, 0], v / v.max(), rtol=1e-6)
    plain = load_csv(p)
    np.testing.assert_allclose(plain.features[:, 0], [0.0, 0.1, 1.0], rtol=1e-6)


def test_load_csv_errors(tmp_path):
    with pytest.raises(FormatError, match="line 3"):
        load_csv(write(tmp_path / "r.csv", "a,b\n1,2\n3\n"))
    with pytest.raises(FormatError, match="non-numeric"):
        load_csv(write(tmp_path / "n.csv", "a,b\n1,x\n"))
    with pytest.raises(FormatError, match="label column"):
        load_csv(write(tmp_path / "l.csv", "a,b\n1,2\n"), label_column="pop")


def test_scaling_reapplied_is_identity():
    rng = np.random.default_rng(1)
    x = rng.random((50, 4)) * 7 - 2
    scaled, lo, hi = minmax_scale(x)
    again, _, _ = minmax_scale(scaled, np.zeros(4), np.ones(4))
    np.testing.assert_allclose(again, scaled)
    same, _, _ = minmax_scale(x, lo, hi)
    np.testing.assert_array_equal(same, scaled)


def test_load_embedding(tmp_path):
    p = write(tmp_path / "e.csv", "0.5,1\n2,3\n")
    np.testing.assert_array_equal(load_embedding(p), [[0.5, 1], [2, 3]])


def test_dataset_invariants():
    with pytest.raises(FormatError):
        Dataset(np.array([[1.5]]))
    with pytest.raises(FormatError):
        Dataset(np.array([[np.nan]]))
    with pytest.raises(FormatError):
        Dataset(np.zeros((3, 2)), labels=[0, 1])


def test_batch_iterator():
    ds = Dataset(np.random.default_rng(0).random((10, 2)))
    sizes = [len(i) for i, _ in batch_iterator(ds, 4, seed=1, drop_last=True)]
    assert sizes == [4, 4]
    seen = np.concatenate([i for i, _ in batch_iterator(ds, 4, seed=1)])
    assert sorted(seen.tolist()) == list(range(10))
    a = [i.tolist() for i, _ in batch_iterator(ds, 3, seed=5, epoch=2)]
    b = [i.tolist() for i, _ in batch_iterator(ds, 3, seed=5, epoch=2)]
    c = [i.tolist() for i, _ in batch_iterator(ds, 3, seed=5, epoch=3)]
    assert a == b and a != c
    for idx, xb in batch_iterator(ds, 3, seed=0):
        np.testing.assert_array_equal(xb, ds.features[idx])
    with pytest.raises(ParameterError):
        next(batch_iterator(ds, 11, seed=0))
    with pytest.raises(ParameterError):
        next(batch_iterator(ds, 0, seed=0))


def test_make_blobs_geometry():
    ds = make_blobs(400, 20, 4, 10.0, seed=0)
    assert ds.features.shape == (400, 20)
    assert np.bincount(ds.labels).tolist() == [100] * 4
    raw = ds.features * (ds.scale_max - ds.scale_min) + ds.scale_min
    centres = np.array([raw[ds.labels == k].mean(0) for k in range(4)])
    d = np.linalg.norm(centres[:, None] - centres[None], axis=-1)[np.triu_indices(4, 1)]
    assert np.all(np.abs(d - 10.0) < 1.0)


def make_ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint(config={"model": {"latent_dim": 3}}, tensors={
        "encoder.0.weight": rng.standard_normal((4, 3)).astype(np.float32),
        "scalar": np.float32(2.5) * np.ones((), np.float32),
        "cluster_means": rng.standard_normal((2, 3)).astype(np.float32),
    }, step=7, epoch=1, optimizer_t=7, rng_state={"state": 123}, extra={"x": [1, 2]})


def test_checkpoint_round_trip(tmp_path):
    ck = make_ckpt()
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, ck)
    raw = path.read_bytes()
    assert raw[:8] == CHECKPOINT_MAGIC == b"MOESIMV1"
    back = load_checkpoint(path)
    for name, arr in ck.tensors.items():
        assert back.tensors[name].tobytes() == np.asarray(arr, np.float32).tobytes()
        assert back.tensors[name].shape == np.shape(arr)
    assert (back.step, back.epoch, back.optimizer_t) == (7, 1, 7)
    assert back.rng_state == {"state": 123} and back.extra == {"x": [1, 2]}
    assert list(tmp_path.iterdir()) == [path]  # no temp files left behind


def test_checkpoint_rejects_bad_files(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, make_ckpt())
    raw = path.read_bytes()
    bad_magic = tmp_path / "m"
    bad_magic.write_bytes(b"NOTMOESV" + raw[8:])
    with pytest.raises(IncompatibleCheckpointError, match="magic"):
        load_checkpoint(bad_magic)
    bad_version = tmp_path / "v"
    bad_version.write_bytes(raw[:8] + struct.pack("<I", 99) + raw[12:])
    with pytest.raises(IncompatibleCheckpointError, match="version"):
        load_checkpoint(bad_version)
    truncated = tmp_path / "t"
    truncated.write_bytes(raw[:-5])
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(truncated)
    # corrupt the descriptor length field
    bad_len = tmp_path / "l"
    bad_len.write_bytes(raw[:12] + struct.pack("<I", 10 ** 8) + raw[16:])
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(bad_len)
