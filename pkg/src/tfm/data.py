"""Dataset ingestion: synthetic Gaussian mixtures, IDX and CSV files."""
import csv
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .tensor import make_rng

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class DatasetBundle:
    """Samples with integer class labels.

    ``is_test`` marks samples from a designated test set (IDX/CSV test
    files); when absent, the task builder holds out a test fraction.
    """

    X: np.ndarray
    y: np.ndarray
    n_classes: int
    is_test: np.ndarray = None
    name: str = ""
    mean: np.ndarray = field(default=None, repr=False)
    std: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.X) != len(self.y):
            raise DataError(f"{len(self.X)} samples but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            bad = int(np.flatnonzero((self.y < 0) | (self.y >= self.n_classes))[0])
            raise DataError(f"label {self.y[bad]} of sample {bad} outside [0, {self.n_classes})")

    @property
    def sample_shape(self):
        return self.X.shape[1:]

    def normalize(self):
        """Standardize per channel with statistics from the non-test samples."""
        ref = self.X if self.is_test is None else self.X[~self.is_test]
        if self.X.ndim == 4:
            axes = (0, 2, 3)
            mean = ref.mean(axis=axes)
            std = ref.std(axis=axes)
            shape = (1, -1, 1, 1)
        else:
            mean = np.array([ref.mean()])
            std = np.array([ref.std()])
            shape = (1,) * self.X.ndim
        std = np.where(std > 0, std, 1.0)
        self.mean, self.std = mean.astype(np.float32), std.astype(np.float32)
        self.X = ((self.X - self.mean.reshape(shape)) / self.std.reshape(shape)).astype(np.float32)
        return self


def make_synthetic(classes=10, dim=64, n=500, seed=0, separation=4.0,
                   clusters_per_class=3, noise=1.0, latent_dim=None):
    """Gaussian-mixture classification data.

    Each class is a mixture of ``clusters_per_class`` isotropic Gaussians,
    so classes are not linearly separable in general. ``separation`` is the
    typical distance between two cluster centres; ``n`` is samples per class.
    With ``latent_dim`` the clusters live in a shared low-dimensional space
    embedded into ``dim`` dimensions by one random orthonormal map, so all
    classes compete for the same input directions.
    """
    if classes < 1 or dim < 1 or n < 1 or clusters_per_class < 1:
        raise ConfigError("synthetic dataset needs positive classes, dim, n and clusters")
    if latent_dim is not None and not 1 <= latent_dim <= dim:
        raise ConfigError("latent_dim must lie in [1, dim]")
    rng = make_rng(seed)
    d = dim if latent_dim is None else latent_dim
    centers = rng.normal(size=(classes, clusters_per_class, d)) * (separation / np.sqrt(2 * d))
    y = np.repeat(np.arange(classes), n)
    which = rng.integers(0, clusters_per_class, size=y.size)
    Z = centers[y, which]
    if latent_dim is not None:
        basis, _ = np.linalg.qr(rng.normal(size=(dim, latent_dim)))
        Z = Z @ basis.T
    X = Z + noise * rng.normal(size=(y.size, dim))
    return DatasetBundle(X.astype(np.float32), y, classes, name=f"synth-{classes}x{dim}x{n}-s{seed}")


def _read_idx(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in IDX_DTYPES:
        raise FormatError(f"{path}: bad IDX magic number", 0)
    dtype = IDX_DTYPES[raw[2]]
    ndim = raw[3]
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    start = 4 + 4 * ndim
    count = int(np.prod(dims)) if dims else 0
    need = start + count * dtype.itemsize
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes for dims {dims}, got {len(raw)}",
                          min(len(raw), need))
    return np.frombuffer(raw, dtype=dtype, count=count, offset=start).reshape(dims)


def _idx_pair(images, labels):
    X = _read_idx(images)
    y = _read_idx(labels)
    if y.ndim != 1 or len(y) != len(X):
        raise FormatError(f"{labels}: {len(y)} labels for {len(X)} images")
    if X.ndim == 3:
        X = X[:, None]
    scale = 255.0 if X.dtype == np.dtype(">u1") else 1.0
    X = X.astype(np.float32) / np.float32(scale)
    return X, y.astype(np.int64)


def load_idx(images, labels, test_images=None, test_labels=None, n_classes=None):
    X, y = _idx_pair(images, labels)
    is_test = np.zeros(len(y), dtype=bool)
    if test_images:
        Xt, yt = _idx_pair(test_images, test_labels)
        if Xt.shape[1:] != X.shape[1:]:
            raise FormatError(f"{test_images}: sample shape {Xt.shape[1:]} != {X.shape[1:]}")
        X = np.concatenate([X, Xt])
        y = np.concatenate([y, yt])
        is_test = np.concatenate([is_test, np.ones(len(yt), dtype=bool)])
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    return DatasetBundle(X, y, n_classes, is_test, name=os.path.basename(images))


def _read_csv(path, sample_shape):
    rows, labels = [], []
    width = None
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    with fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise FormatError(f"{path}: need a label and at least one value", lineno)
            elif len(row) != width:
                raise FormatError(f"{path}: row has {len(row)} columns, expected {width}",
                                  lineno)
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}: {exc}", lineno) from None
    if not rows:
        raise DataError(f"{path}: no samples")
    X = np.asarray(rows, dtype=np.float32)
    if sample_shape:
        if int(np.prod(sample_shape)) != X.shape[1]:
            raise FormatError(f"{path}: {X.shape[1]} values do not fit shape {sample_shape}")
        X = X.reshape((len(X),) + tuple(sample_shape))
    return X, np.asarray(labels, dtype=np.int64)


def load_csv(path, test_path=None, sample_shape=None, n_classes=None):
    """``label,value,value,...`` rows, no header."""
    X, y = _read_csv(path, sample_shape)
    is_test = None
    if test_path:
        Xt, yt = _read_csv(test_path, sample_shape)
        if Xt.shape[1:] != X.shape[1:]:
            raise FormatError(f"{test_path}: sample shape differs from {path}")
        is_test = np.concatenate([np.zeros(len(y), bool), np.ones(len(yt), bool)])
        X, y = np.concatenate([X, Xt]), np.concatenate([y, yt])
    if n_classes is None:
        n_classes = int(y.max()) + 1
    return DatasetBundle(X, y, n_classes, is_test, name=os.path.basename(path))


SYNTH_KEYS = ("classes", "dim", "n", "seed", "separation", "clusters_per_class", "noise",
              "latent_dim")


def parse_synth_spec(text):
    """``synth:classes=10,dim=64,n=500,seed=3`` -> keyword dict."""
    body = text.split(":", 1)[1] if ":" in text else ""
    out = {}
    for item in filter(None, body.split(",")):
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in SYNTH_KEYS:
            raise ConfigError(f"unknown synthetic dataset option {key!r}")
        out[key] = float(value) if key in ("separation", "noise") else int(value)
    return out


def load_dataset(path=None, format=None, normalize=True, **options):
    """Load a dataset as a normalized :class:`DatasetBundle`.

    ``format`` is ``"idx"``, ``"csv"`` or ``"synth"``. For ``"synth"``,
    ``path`` may be a JSON file of generator options, an inline
    ``synth:key=value,...`` string, or omitted (options as keywords).
    """
    fmt = (format or _guess_format(path)).lower()
    if fmt in ("synth", "synth-spec"):
        params = {}
        if path and path.startswith("synth"):
            params = parse_synth_spec(path)
        elif path:
            try:
                with open(path) as fh:
                    params = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise DataError(f"cannot read synthetic spec {path}: {exc}") from None
        params.update({k: v for k, v in options.items() if k in SYNTH_KEYS and v is not None})
        bad = set(params) - set(SYNTH_KEYS)
        if bad:
            raise ConfigError(f"unknown synthetic dataset options {sorted(bad)}")
        bundle = make_synthetic(**params)
    elif fmt == "idx":
        labels = options.get("labels_path")
        if not labels:
            raise ConfigError("IDX datasets need labels_path")
        bundle = load_idx(path, labels, options.get("test_path"),
                          options.get("test_labels_path"), options.get("n_classes"))
    elif fmt == "csv":
        bundle = load_csv(path, options.get("test_path"), options.get("sample_shape"),
                          options.get("n_classes"))
    else:
        raise ConfigError(f"unknown dataset format {fmt!r}")
    return bundle.normalize() if normalize else bundle


def _guess_format(path):
    if path is None or path.startswith("synth") or path.endswith(".json"):
        return "synth"
    if path.endswith(".csv"):
        return "csv"
    return "idx"


def hflip(X, rng, p=0.5):
    """Flip each image left-right with probability ``p``; flat samples pass through."""
    if X.ndim != 4:
        return X
    flip = rng.random(len(X)) < p
    if not flip.any():
        return X
    out = X.copy()
    out[flip] = out[flip][..., ::-1]
    return out
