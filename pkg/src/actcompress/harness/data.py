"""Dataset loaders: seeded synthetic sets, IDX files and CSV."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    num_classes: int  # 0 for regression targets

    @property
    def num_features(self) -> int:
        return int(np.prod(self.x_train.shape[1:]))


def parse_source(source: str) -> tuple[str, dict]:
    kind, _, rest = source.partition(":")
    opts = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, eq, value = item.partition("=")
        if not eq:
            raise DataError(f"dataset option {item!r} is not key=value")
        opts[key.strip()] = value.strip()
    return kind.strip(), opts


def synthetic(n=1000, d=64, k=10, seed=0, sep=3.0):
    """Gaussian mixture: class means on a sphere of radius ``sep``, unit noise."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((k, d))
    centers *= sep / np.linalg.norm(centers, axis=1, keepdims=True)
    y = rng.integers(0, k, n)
    x = centers[y] + rng.standard_normal((n, d))
    return x.astype(np.float32), y.astype(np.int64)


def linreg(n=256, d=8, noise=0.5, seed=0):
    """Least-squares problem y = X theta + noise; targets are (n, 1)."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    theta = rng.standard_normal(d)
    y = x @ theta + noise * rng.standard_normal(n)
    return x.astype(np.float32), y.reshape(-1, 1).astype(np.float32)


def read_idx(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header at byte offset {len(raw)}")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic >> 8 != 0x08:
        raise DataError(f"{path}: bad magic 0x{magic:08x} at byte offset 0 (expected unsigned-byte IDX)")
    ndim = magic & 0xFF
    if ndim == 0:
        raise DataError(f"{path}: zero dimensions at byte offset 3")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataError(f"{path}: truncated dimension list at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise DataError(f"{path}: truncated payload at byte offset {len(raw)}; "
                        f"expected {head + count} bytes")
    if len(raw) - head > count:
        raise DataError(f"{path}: {len(raw) - head - count} trailing bytes at byte offset {head + count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_idx(images, labels, limit=None):
    x = read_idx(images)
    y = read_idx(labels)
    if x.ndim < 2:
        raise DataError(f"{images}: image file needs at least 2 dimensions")
    if y.ndim != 1:
        raise DataError(f"{labels}: label file must be 1-dimensional")
    if x.shape[0] != y.shape[0]:
        raise DataError(f"{x.shape[0]} images but {y.shape[0]} labels")
    if limit is not None:
        x, y = x[:limit], y[:limit]
    x = (x.reshape(x.shape[0], -1).astype(np.float32) / 255.0)
    return x, y.astype(np.int64)


def load_csv(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    rows, labels, width, offset = [], [], None, 0
    for line in raw.split(b"\n"):
        start = offset
        offset += len(line) + 1
        text = line.strip()
        if not text or text.startswith(b"#"):
            continue
        cells = text.split(b",")
        if width is None:
            width = len(cells)
            if width < 2:
                raise DataError(f"{path}: need at least one feature and a label (byte offset {start})")
        elif len(cells) != width:
            raise DataError(f"{path}: expected {width} fields, got {len(cells)} at byte offset {start}")
        try:
            feats = [float(c) for c in cells[:-1]]
            label = float(cells[-1])
        except ValueError:
            raise DataError(f"{path}: non-numeric field at byte offset {start}") from None
        if label != int(label) or label < 0:
            raise DataError(f"{path}: label must be a nonnegative integer at byte offset {start}")
        rows.append(feats)
        labels.append(int(label))
    if not rows:
        raise DataError(f"{path}: no samples")
    return np.asarray(rows, dtype=np.float32), np.asarray(labels, dtype=np.int64)


def _split(x, y, eval_fraction, num_classes):
    n_eval = int(round(len(x) * eval_fraction))
    if n_eval >= len(x):
        raise DataError("eval split leaves no training samples")
    cut = len(x) - n_eval
    return Dataset(x[:cut], y[:cut], x[cut:], y[cut:], num_classes)


def load_dataset(source: str, eval_fraction: float = 0.2) -> Dataset:
    """``synthetic:n=..,d=..,k=..,seed=..,sep=..`` | ``linreg:n=..,d=..,noise=..,seed=..`` |
    ``idx:images=..,labels=..[,limit=..]`` | ``csv:path=..`` (a bare path after the colon also works).

    The last ``eval_fraction`` of samples become the eval split.
    """
    head, _, rest = source.partition(":")
    if head.strip() == "csv" and "=" not in rest:
        x, y = load_csv(rest.strip())
        return _split(x, y, eval_fraction, int(y.max()) + 1)
    kind, opts = parse_source(source)
    try:
        if kind == "synthetic":
            k = int(opts.get("k", 10))
            x, y = synthetic(int(opts.get("n", 1000)), int(opts.get("d", 64)), k,
                             int(opts.get("seed", 0)), float(opts.get("sep", 3.0)))
            return _split(x, y, eval_fraction, k)
        if kind == "linreg":
            x, y = linreg(int(opts.get("n", 256)), int(opts.get("d", 8)),
                          float(opts.get("noise", 0.5)), int(opts.get("seed", 0)))
            return _split(x, y, eval_fraction, 0)
        limit = int(opts["limit"]) if "limit" in opts else None
    except DataError:
        raise
    except (TypeError, ValueError) as e:
        raise DataError(f"bad dataset option in {source!r}: {e}") from e
    if kind == "idx":
        if "images" not in opts or "labels" not in opts:
            raise DataError("idx dataset needs images=<path> and labels=<path>")
        x, y = load_idx(opts["images"], opts["labels"], limit)
    elif kind == "csv":
        if "path" not in opts:
            raise DataError("csv dataset needs path=<file>")
        x, y = load_csv(opts["path"])
        if limit is not None:
            x, y = x[:limit], y[:limit]
    else:
        raise DataError(f"unknown dataset kind {kind!r}")
    return _split(x, y, eval_fraction, int(y.max()) + 1)
