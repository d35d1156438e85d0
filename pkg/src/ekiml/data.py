"""Dataset parsing, normalisation and splitting.

Covers the IDX container used by MNIST, the congressional voting records in
their comma-separated form, and univariate time series stored one value per
line (or as the last column of a CSV file).
"""

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DATA_DIR_ENV",
    "BUNDLED_DIR",
    "DataFormatError",
    "ImageDataset",
    "SeriesDataset",
    "VotingDataset",
    "MinMaxTransform",
    "parse_idx",
    "write_idx",
    "read_idx_file",
    "write_idx_file",
    "load_mnist",
    "one_hot",
    "normalize_images",
    "normalize_minmax",
    "one_step_split",
    "parse_series",
    "load_series",
    "sine_series",
    "parse_voting",
    "load_voting",
    "file_checksum",
    "verify_checksum",
    "resolve_data_path",
]

DATA_DIR_ENV = "EKIML_DATA_DIR"
BUNDLED_DIR = Path(__file__).resolve().parent / "datasets"


class DataFormatError(ValueError):
    """Malformed input file.

    Attributes
    ----------
    reason : str
        Short machine-readable cause, e.g. ``'bad-magic'`` or ``'truncated'``.
    detail : str
        Human-readable explanation.
    """

    def __init__(self, reason, detail):
        super().__init__(f"{reason}: {detail}")
        self.reason = reason
        self.detail = detail


# IDX type codes -> big-endian numpy dtypes.
_IDX_TYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {dt.newbyteorder(">") if dt.itemsize > 1 else dt: code for code, dt in _IDX_TYPES.items()}


def parse_idx(data):
    """Decode an IDX byte string into an array.

    The header is a big-endian 32-bit magic ``0x0000TTNN`` (``TT`` the element
    type, ``NN`` the number of dimensions), followed by ``NN`` big-endian
    32-bit sizes and the row-major payload.  MNIST images carry
    ``0x00000803`` and labels ``0x00000801``.
    """
    data = bytes(data)
    if len(data) < 4:
        raise DataFormatError("truncated", f"header needs 4 bytes, got {len(data)}")
    zero, type_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or type_code not in _IDX_TYPES:
        raise DataFormatError("bad-magic", f"magic 0x{data[:4].hex()} is not an IDX header")
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise DataFormatError("truncated", f"dimension table needs {header_len} bytes, got {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header_len])
    dtype = _IDX_TYPES[type_code]
    count = 1
    for d in dims:
        count *= d
    expected = header_len + count * dtype.itemsize
    if len(data) < expected:
        raise DataFormatError("truncated", f"payload needs {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise DataFormatError("trailing-bytes", f"{len(data) - expected} bytes after payload")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=header_len)
    return arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)


def write_idx(array):
    """Encode `array` as IDX bytes (inverse of :func:`parse_idx`)."""
    a = np.asarray(array)
    key = a.dtype.newbyteorder(">") if a.dtype.itemsize > 1 else a.dtype
    if key not in _IDX_CODES:
        raise ValueError(f"dtype {a.dtype} has no IDX type code")
    if a.ndim > 255:
        raise ValueError("too many dimensions for IDX")
    header = struct.pack(">HBB", 0, _IDX_CODES[key], a.ndim)
    header += struct.pack(f">{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype=key).tobytes()


def _read_maybe_gzip(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise DataFormatError("bad-gzip", f"{path}: {exc}") from None
    return raw


def read_idx_file(path):
    """Parse an IDX file, transparently gunzipping ``.gz`` content."""
    return parse_idx(_read_maybe_gzip(path))


def write_idx_file(path, array, compress=None):
    payload = write_idx(array)
    if compress is None:
        compress = str(path).endswith(".gz")
    if compress:
        # mtime=0 keeps the archive byte-identical across runs.
        payload = gzip.compress(payload, mtime=0)
    Path(path).write_bytes(payload)


@dataclass(frozen=True)
class ImageDataset:
    """Images ``(N, H, W)`` or ``(N, H, W, C)`` with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.split not in ("train", "test"):
            raise ValueError("split must be 'train' or 'test'")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def one_hot(self):
        return one_hot(self.labels, self.num_classes)

    def subset(self, idx):
        return ImageDataset(self.images[idx], self.labels[idx], self.split, self.num_classes)


def one_hot(labels, num_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels outside 0..{num_classes - 1}")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def load_mnist(images_path, labels_path, split="train"):
    images = read_idx_file(images_path)
    labels = read_idx_file(labels_path)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise DataFormatError("bad-shape", f"expected uint8 images (N, H, W), got {images.dtype} {images.shape}")
    if labels.ndim != 1:
        raise DataFormatError("bad-shape", f"expected a label vector, got shape {labels.shape}")
    if labels.size and labels.max() > 9:
        raise DataFormatError("bad-label", "MNIST labels must lie in 0..9")
    return ImageDataset(images, labels.astype(np.int64), split)


def normalize_images(train, test):
    """Scale to [0, 1], then standardise with statistics of the training images.

    Grayscale images use one global mean and standard deviation over every
    training pixel; images with a trailing channel axis get one pair per
    channel.  The test images are transformed with the training statistics.

    Returns
    -------
    train_norm, test_norm : ndarray
    stats : dict with ``mean`` and ``std``
    """
    tr = np.asarray(train.images if isinstance(train, ImageDataset) else train, dtype=np.float64) / 255.0
    te = np.asarray(test.images if isinstance(test, ImageDataset) else test, dtype=np.float64) / 255.0
    if tr.ndim == 4:
        axes = (0, 1, 2)
    else:
        axes = None
    mean = tr.mean(axis=axes)
    std = tr.std(axis=axes)
    if np.any(std == 0):
        raise ValueError("training images have zero standard deviation")
    return (tr - mean) / std, (te - mean) / std, {"mean": mean, "std": std}


@dataclass(frozen=True)
class MinMaxTransform:
    """Affine map ``x -> (x - lo) / (hi - lo)`` fitted on a training series."""

    lo: float
    hi: float

    @classmethod
    def fit(cls, train):
        train = np.asarray(train, dtype=np.float64)
        if train.size == 0:
            raise ValueError("cannot fit min-max scaling on an empty series")
        lo, hi = float(train.min()), float(train.max())
        if not hi > lo:
            raise ValueError("training series is constant; min-max scaling undefined")
        return cls(lo, hi)

    def __call__(self, x):
        return (np.asarray(x, dtype=np.float64) - self.lo) / (self.hi - self.lo)

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * (self.hi - self.lo) + self.lo


def normalize_minmax(train, test=None):
    """Fit min-max scaling on `train`; return ``(transform, train_n[, test_n])``."""
    t = MinMaxTransform.fit(train)
    if test is None:
        return t, t(train)
    return t, t(train), t(test)


@dataclass(frozen=True)
class SeriesDataset:
    """Ordered values with the first ``boundary`` of them used for training."""

    values: np.ndarray
    boundary: int

    def __post_init__(self):
        if not 0 <= self.boundary <= self.values.shape[0]:
            raise ValueError(f"boundary {self.boundary} outside 0..{self.values.shape[0]}")

    @property
    def train(self):
        return self.values[: self.boundary]

    @property
    def test(self):
        return self.values[self.boundary :]


def one_step_split(values):
    """Inputs ``values[:-1]`` and targets ``values[1:]``."""
    v = np.asarray(values.values if isinstance(values, SeriesDataset) else values, dtype=np.float64)
    if v.shape[0] < 2:
        raise ValueError("one-step split needs at least two values")
    return v[:-1].copy(), v[1:].copy()


def parse_series(text):
    """Parse a univariate series.

    Each non-blank line holds either one number or comma-separated fields of
    which the last is the value (e.g. ``date,value``).  Leading lines whose
    value field is not numeric are treated as a header and skipped; a
    non-numeric line after the first value is an error.
    """
    values = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        field = line.split(",")[-1].strip().strip('"').strip("'")
        try:
            v = float(field)
        except ValueError:
            if values:
                raise DataFormatError("bad-value", f"line {lineno}: {field!r} is not a number") from None
            continue
        if not np.isfinite(v):
            raise DataFormatError("bad-value", f"line {lineno}: non-finite value")
        values.append(v)
    if not values:
        raise DataFormatError("empty", "no numeric values found")
    return np.array(values)


def load_series(path, train_count=None):
    values = parse_series(Path(path).read_text())
    boundary = values.shape[0] if train_count is None else int(train_count)
    return SeriesDataset(values, boundary)


def sine_series(n, period=25.0, amplitude=1.0, noise=0.0, phase=0.0, rng=None):
    """``amplitude * sin(2 pi t / period + phase)`` for t = 0..n-1, plus optional noise."""
    t = np.arange(n, dtype=np.float64)
    s = amplitude * np.sin(2.0 * np.pi * t / period + phase)
    if noise:
        if rng is None:
            raise ValueError("noisy series need an rng")
        s = s + noise * rng.standard_normal(n)
    return s


@dataclass(frozen=True)
class VotingDataset:
    """Votes in {+1, -1, 0} (yea, nay, other) and party labels (+1 Democrat)."""

    features: np.ndarray
    labels: np.ndarray


_VOTE = {"y": 1.0, "n": -1.0, "?": 0.0}
_PARTY = {"democrat": 1, "republican": -1}


def parse_voting(text, expected_records=435):
    """Parse ``party,v1,...,v16`` records.

    Votes map ``y -> +1``, ``n -> -1`` and ``? -> 0``; parties map
    ``democrat -> +1`` and ``republican -> -1``.
    """
    feats, labels = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        fields = [f.strip().lower() for f in line.split(",")]
        if len(fields) != 17:
            raise DataFormatError("bad-record", f"line {lineno}: expected 17 fields, got {len(fields)}")
        if fields[0] not in _PARTY:
            raise DataFormatError("bad-field", f"line {lineno}: unknown party {fields[0]!r}")
        try:
            feats.append([_VOTE[f] for f in fields[1:]])
        except KeyError as exc:
            raise DataFormatError("bad-field", f"line {lineno}: unknown vote {exc.args[0]!r}") from None
        labels.append(_PARTY[fields[0]])
    if expected_records is not None and len(labels) != expected_records:
        raise DataFormatError("bad-count", f"expected {expected_records} records, got {len(labels)}")
    return VotingDataset(np.array(feats, dtype=np.float64).reshape(-1, 16), np.array(labels, dtype=np.int64))


def load_voting(path, expected_records=435):
    return parse_voting(Path(path).read_text(), expected_records)


def file_checksum(path, algorithm="sha256"):
    h = hashlib.new(algorithm)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return f"{algorithm}:{h.hexdigest()}"


def verify_checksum(path, expected):
    """Compare against ``'algo:hexdigest'``; raise ``DataFormatError`` on mismatch."""
    algorithm, _, digest = expected.partition(":")
    if not digest:
        raise ValueError(f"checksum {expected!r} must look like 'sha256:<hex>'")
    actual = file_checksum(path, algorithm)
    if actual != f"{algorithm}:{digest.lower()}":
        raise DataFormatError("checksum-mismatch", f"{path}: expected {expected}, got {actual}")
    return actual


def resolve_data_path(name, base_dir=None):
    """Locate a data file.

    Absolute paths are used as given.  Relative names are looked up in the
    directory named by the ``EKIML_DATA_DIR`` environment variable, then in
    `base_dir` (typically the config file's directory), then among the files
    bundled with the package.
    """
    p = Path(name)
    if p.is_absolute():
        return p
    candidates = []
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        candidates.append(Path(env) / p)
    if base_dir is not None:
        candidates.append(Path(base_dir) / p)
    candidates.append(BUNDLED_DIR / p)
    for c in candidates:
        if c.exists():
            return c
    searched = ", ".join(str(c) for c in candidates)
    raise FileNotFoundError(f"data file {name!r} not found (searched {searched})")
