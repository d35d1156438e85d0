import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ekiml.data import (
    BUNDLED_DIR,
    DATA_DIR_ENV,
    DataFormatError,
    ImageDataset,
    MinMaxTransform,
    SeriesDataset,
    file_checksum,
    load_mnist,
    load_series,
    load_voting,
    normalize_images,
    normalize_minmax,
    one_hot,
    one_step_split,
    parse_idx,
    parse_series,
    parse_voting,
    read_idx_file,
    resolve_data_path,
    verify_checksum,
    write_idx,
    write_idx_file,
)

VOTING = BUNDLED_DIR / "house-votes-84.data"
TRAIN_IMAGES = BUNDLED_DIR / "mnist-subset-train-images-idx3-ubyte.gz"
TRAIN_LABELS = BUNDLED_DIR / "mnist-subset-train-labels-idx1-ubyte.gz"


# -- IDX --


def test_parse_idx_label_vector():
    raw = bytes.fromhex("00000801") + struct.pack(">I", 3) + bytes([1, 2, 3])
    out = parse_idx(raw)
    assert out.dtype == np.uint8
    np.testing.assert_array_equal(out, [1, 2, 3])


def test_parse_idx_real_header():
    raw = gzip.decompress(TRAIN_IMAGES.read_bytes())
    assert raw[:4] == bytes.fromhex("00000803")
    assert struct.unpack(">3I", raw[4:16]) == (9000, 28, 28)
    images = parse_idx(raw)
    assert images.shape == (9000, 28, 28) and images.dtype == np.uint8


@pytest.mark.parametrize(
    "raw,reason",
    [
        (b"\x00\x00", "truncated"),
        (bytes.fromhex("00000801") + b"\x00\x00", "truncated"),
        (bytes.fromhex("00000801") + struct.pack(">I", 3) + b"\x01\x02", "truncated"),
        (bytes.fromhex("00000801") + struct.pack(">I", 1) + b"\x01\x02", "trailing-bytes"),
        (bytes.fromhex("01000801") + struct.pack(">I", 1) + b"\x01", "bad-magic"),
        (bytes.fromhex("00000701") + struct.pack(">I", 1) + b"\x01", "bad-magic"),
    ],
)
def test_parse_idx_errors(raw, reason):
    with pytest.raises(DataFormatError) as exc:
        parse_idx(raw)
    assert exc.value.reason == reason


@settings(max_examples=50, deadline=None)
@given(
    st.sampled_from([np.uint8, np.int8, np.int16, np.int32, np.float32, np.float64]),
    st.lists(st.integers(0, 5), min_size=0, max_size=4),
    st.integers(0, 2**32 - 1),
)
def test_idx_round_trip(dtype, shape, seed):
    rng = np.random.default_rng(seed)
    a = (rng.standard_normal(shape) * 100).astype(dtype)
    back = parse_idx(write_idx(a))
    assert back.dtype == np.dtype(dtype) and back.shape == a.shape
    assert back.tobytes() == a.tobytes()


def test_idx_file_round_trip(tmp_path):
    a = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    for name in ("x.idx", "x.idx.gz"):
        write_idx_file(tmp_path / name, a)
        np.testing.assert_array_equal(read_idx_file(tmp_path / name), a)
    write_idx_file(tmp_path / "y.gz", a)
    assert (tmp_path / "y.gz").read_bytes() == (tmp_path / "x.idx.gz").read_bytes()
    with pytest.raises(ValueError):
        write_idx(np.zeros(2, dtype=np.complex128))


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_parse_idx_fuzz(seed, n_mut):
    rng = np.random.default_rng(seed)
    raw = bytearray(write_idx(np.arange(12, dtype=np.uint8).reshape(3, 4)))
    for _ in range(n_mut):
        op = rng.integers(3)
        pos = int(rng.integers(len(raw))) if raw else 0
        if op == 0 and raw:
            raw[pos] = int(rng.integers(256))
        elif op == 1 and raw:
            del raw[pos]
        else:
            raw.insert(pos, int(rng.integers(256)))
    try:
        out = parse_idx(bytes(raw))
    except DataFormatError:
        return
    assert isinstance(out, np.ndarray)


# -- MNIST --


def test_load_mnist_bundled_subset():
    ds = load_mnist(TRAIN_IMAGES, TRAIN_LABELS)
    assert len(ds) == 9000 and ds.images.shape == (9000, 28, 28)
    assert set(np.unique(ds.labels)) == set(range(10))
    assert ds.one_hot.shape == (9000, 10)
    np.testing.assert_array_equal(ds.one_hot.argmax(axis=1), ds.labels)


def test_mnist_train_mean_close_to_full_set_value():
    ds = load_mnist(TRAIN_IMAGES, TRAIN_LABELS)
    # 0.1307 is the well-known full-training-set value; the subset is close.
    assert abs(ds.images.mean() / 255.0 - 0.1307) < 0.002


def test_load_mnist_rejects_bad_labels(tmp_path):
    write_idx_file(tmp_path / "i.idx", np.zeros((2, 2, 2), dtype=np.uint8))
    write_idx_file(tmp_path / "l.idx", np.array([1, 12], dtype=np.uint8))
    with pytest.raises(DataFormatError):
        load_mnist(tmp_path / "i.idx", tmp_path / "l.idx")
    write_idx_file(tmp_path / "l.idx", np.array([1, 2, 3], dtype=np.uint8))
    with pytest.raises(ValueError):
        load_mnist(tmp_path / "i.idx", tmp_path / "l.idx")


def test_one_hot():
    np.testing.assert_array_equal(one_hot([2, 0], 3), [[0, 0, 1], [1, 0, 0]])
    with pytest.raises(ValueError):
        one_hot([3], 3)


# -- image normalisation --


def test_normalize_two_value_case():
    train = np.stack([np.zeros((2, 2)), np.full((2, 2), 255.0)])
    tr, te, stats = normalize_images(train, train[:1])
    assert stats["mean"] == pytest.approx(0.5) and stats["std"] == pytest.approx(0.5)
    np.testing.assert_allclose(tr[0], -1.0)
    np.testing.assert_allclose(tr[1], 1.0)
    np.testing.assert_allclose(te, -1.0)


def test_normalize_uses_train_statistics_only():
    rng = np.random.default_rng(0)
    train = ImageDataset(rng.integers(0, 100, (20, 4, 4)).astype(np.uint8), np.zeros(20, dtype=int))
    test = ImageDataset(rng.integers(150, 256, (10, 4, 4)).astype(np.uint8), np.zeros(10, dtype=int), "test")
    tr, te, stats = normalize_images(train, test)
    assert abs(tr.mean()) < 1e-12 and tr.std() == pytest.approx(1.0)
    assert te.mean() > 1.0
    np.testing.assert_allclose(te, (test.images / 255.0 - stats["mean"]) / stats["std"])


def test_normalize_per_channel_and_errors():
    rng = np.random.default_rng(1)
    x = rng.integers(0, 256, (5, 3, 3, 3)).astype(np.float64)
    x[..., 2] = x[..., 2] / 4
    tr, _, stats = normalize_images(x, x)
    assert stats["mean"].shape == (3,)
    np.testing.assert_allclose(tr.mean(axis=(0, 1, 2)), 0.0, atol=1e-12)
    np.testing.assert_allclose(tr.std(axis=(0, 1, 2)), 1.0)
    with pytest.raises(ValueError):
        normalize_images(np.ones((2, 2, 2)), np.ones((1, 2, 2)))


# -- series --


def test_minmax_examples():
    t, z = normalize_minmax([2.0, 4.0, 6.0])
    np.testing.assert_array_equal(z, [0.0, 0.5, 1.0])
    assert t(8.0) == 1.5
    _, _, te = normalize_minmax([2.0, 6.0], [8.0, 0.0])
    np.testing.assert_array_equal(te, [1.5, -0.5])
    with pytest.raises(ValueError):
        MinMaxTransform.fit([3.0, 3.0])


@given(arrays(np.float64, st.integers(2, 50), elements=st.floats(-1e6, 1e6)))
def test_minmax_inverse_round_trip(x):
    if x.max() - x.min() < 1e-3:
        return
    t, z = normalize_minmax(x)
    assert z.min() == 0.0 and z.max() == 1.0
    np.testing.assert_allclose(t.inverse(z), x, atol=1e-12 * max(1.0, np.abs(x).max()))


def test_one_step_split():
    x, y = one_step_split([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(x, [1.0, 2.0])
    np.testing.assert_array_equal(y, [2.0, 3.0])
    x, y = one_step_split([5.0, 6.0])
    assert x.tolist() == [5.0] and y.tolist() == [6.0]
    with pytest.raises(ValueError):
        one_step_split([1.0])
    ds = SeriesDataset(np.arange(3650.0), 3001)
    x, y = one_step_split(ds.train)
    assert len(x) == len(y) == 3000
    assert len(ds.test) == 649
    with pytest.raises(ValueError):
        SeriesDataset(np.arange(3.0), 4)


def test_parse_series_formats(tmp_path):
    np.testing.assert_array_equal(parse_series("1.5\n2\n\n-3e1\n"), [1.5, 2.0, -30.0])
    csv = '"Date","Temp"\n"1981-01-01",20.7\n"1981-01-02",17.9\n'
    np.testing.assert_array_equal(parse_series(csv), [20.7, 17.9])
    with pytest.raises(DataFormatError):
        parse_series("1\nabc\n2\n")
    with pytest.raises(DataFormatError):
        parse_series("header only\n")
    with pytest.raises(DataFormatError):
        parse_series("1\nnan\n")
    (tmp_path / "s.csv").write_text(csv)
    ds = load_series(tmp_path / "s.csv", train_count=1)
    assert ds.boundary == 1 and ds.values.shape == (2,)


# -- voting records --


def test_parse_voting_record():
    line = "republican," + ",".join(["y", "n", "?"] * 5 + ["y"])
    ds = parse_voting(line + "\n", expected_records=1)
    np.testing.assert_array_equal(ds.features[0, :3], [1.0, -1.0, 0.0])
    assert ds.labels.tolist() == [-1]
    assert parse_voting(line.replace("republican", "democrat"), expected_records=1).labels.tolist() == [1]


@pytest.mark.parametrize(
    "text,reason",
    [
        ("democrat,y,n\n", "bad-record"),
        ("whig," + ",".join("y" * 16) + "\n", "bad-field"),
        ("democrat," + ",".join("x" * 16) + "\n", "bad-field"),
        ("democrat," + ",".join("y" * 16) + "\n", "bad-count"),
    ],
)
def test_parse_voting_errors(text, reason):
    with pytest.raises(DataFormatError) as exc:
        parse_voting(text)
    assert exc.value.reason == reason


def test_load_voting_bundled_counts():
    ds = load_voting(VOTING)
    assert ds.features.shape == (435, 16)
    assert int(np.sum(ds.labels == 1)) == 267
    assert int(np.sum(ds.labels == -1)) == 168
    assert set(np.unique(ds.features)) <= {-1.0, 0.0, 1.0}


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_parse_voting_fuzz(seed):
    rng = np.random.default_rng(seed)
    raw = bytearray(VOTING.read_bytes()[:2000])
    for _ in range(int(rng.integers(1, 6))):
        raw[int(rng.integers(len(raw)))] = int(rng.integers(256))
    try:
        parse_voting(raw.decode("utf-8", errors="replace"), expected_records=None)
    except DataFormatError:
        pass


# -- checksums and paths --


def test_checksums(tmp_path):
    p = tmp_path / "f"
    p.write_bytes(b"abc")
    want = "sha256:ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    assert file_checksum(p) == want
    assert verify_checksum(p, want.upper().replace("SHA256", "sha256")) == want
    assert file_checksum(p, "md5") == "md5:900150983cd24fb0d6963f7d28e17f72"
    with pytest.raises(DataFormatError):
        verify_checksum(p, "sha256:" + "0" * 64)
    with pytest.raises(ValueError):
        verify_checksum(p, "deadbeef")


def test_bundled_checksum_manifest():
    for line in (BUNDLED_DIR / "SHA256SUMS").read_text().splitlines():
        digest, name = line.split()
        verify_checksum(BUNDLED_DIR / name, f"sha256:{digest}")


def test_resolve_data_path(tmp_path, monkeypatch):
    monkeypatch.delenv(DATA_DIR_ENV, raising=False)
    assert resolve_data_path("house-votes-84.data") == VOTING
    (tmp_path / "house-votes-84.data").write_text("x")
    assert resolve_data_path("house-votes-84.data", tmp_path) == tmp_path / "house-votes-84.data"
    other = tmp_path / "env"
    other.mkdir()
    (other / "house-votes-84.data").write_text("y")
    monkeypatch.setenv(DATA_DIR_ENV, str(other))
    assert resolve_data_path("house-votes-84.data", tmp_path) == other / "house-votes-84.data"
    assert resolve_data_path(str(VOTING)) == VOTING


def test_full_mnist_train_mean():
    import os

    base = os.environ.get(DATA_DIR_ENV)
    path = None if base is None else resolve_data_path("train-images-idx3-ubyte.gz", base)
    if path is None or not path.exists() or BUNDLED_DIR in path.parents:
        pytest.skip("official MNIST training images not available (see `ekiml fetch`)")
    assert read_idx_file(path).mean() / 255.0 == pytest.approx(0.1307, abs=5e-5)
