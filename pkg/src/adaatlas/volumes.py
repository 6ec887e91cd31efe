"""Volumetric array conventions, label/probability conversions and Dice.

Arrays follow a channel-first layout without a batch axis:

* image volume: ``(1, H, W, D)`` float
* label map: ``(H, W, D)`` integer, values in ``{0, ..., C-1}``
* probability map: ``(C, H, W, D)`` float, every voxel on the simplex

The ``.aavol`` container stores one such array as a 24-byte little-endian
header followed by the row-major voxel data::

    offset  size  field
    0       6     magic b"AAVOL1"
    6       1     dtype code (see ``DTYPE_CODES``)
    7       1     reserved, zero
    8       4     C  (uint32)
    12      4     H  (uint32)
    16      4     W  (uint32)
    20      4     D  (uint32)
    24      ...   C*H*W*D little-endian elements, C-order

Label maps are written with ``C = 1``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"AAVOL1"
HEADER = struct.Struct("<6sBxIIII")

DTYPE_CODES = {
    1: np.dtype("<u1"),
    2: np.dtype("<i4"),
    3: np.dtype("<i8"),
    4: np.dtype("<f4"),
    5: np.dtype("<f8"),
}
_CODE_OF = {dt: code for code, dt in DTYPE_CODES.items()}

PROB_TOL = 1e-5


class InvalidLabelError(ValueError):
    pass


class ContainerError(ValueError):
    """Raised for unreadable or corrupt ``.aavol`` data."""


def check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ValueError(f"label map must be 3D (H, W, D), got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InvalidLabelError(f"label map must be integer, got {labels.dtype}")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InvalidLabelError(
            f"labels must lie in [0, {num_classes - 1}], found range "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels


def check_probmap(p, atol: float = PROB_TOL) -> np.ndarray:
    """Validate a probability map and return it as an array.

    Accepts numpy arrays or anything convertible (torch tensors are detached
    by the caller).
    """
    p = np.asarray(p)
    if p.ndim != 4:
        raise ValueError(f"probability map must be 4D (C, H, W, D), got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("probability map has non-finite entries")
    if p.min() < -atol or p.max() > 1 + atol:
        raise ValueError("probability map entries outside [0, 1]")
    err = np.abs(p.sum(axis=0) - 1.0).max()
    if err > atol:
        raise ValueError(f"probability map channel sums deviate from 1 by {err:.3g}")
    return p


def standardize(x: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance rescaling of an image volume."""
    x = np.asarray(x, dtype=np.float64)
    std = x.std()
    if std < 1e-12:
        return x - x.mean()
    return (x - x.mean()) / std


def one_hot(labels, num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = check_labels(labels, num_classes)
    out = np.zeros((num_classes,) + labels.shape, dtype=dtype)
    np.put_along_axis(out, labels[None].astype(np.intp), 1, axis=0)
    return out


def argmax_labels(p) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return np.argmax(np.asarray(p), axis=0).astype(np.int64)


@dataclass(frozen=True)
class DiceReport:
    per_class: dict
    mean_fg: float

    def as_row(self) -> dict:
        row = {f"dice_{k}": v for k, v in self.per_class.items()}
        row["mean_fg"] = self.mean_fg
        return row


def dice(pred, gt, num_classes: int) -> DiceReport:
    pred = check_labels(pred, num_classes)
    gt = check_labels(gt, num_classes)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    per_class = {}
    for k in range(num_classes):
        p = pred == k
        g = gt == k
        denom = int(p.sum()) + int(g.sum())
        per_class[k] = 1.0 if denom == 0 else 2.0 * int((p & g).sum()) / denom
    mean_fg = float(np.mean([per_class[k] for k in range(1, num_classes)]))
    return DiceReport(per_class=per_class, mean_fg=mean_fg)


# -- container IO -----------------------------------------------------------

def encode_array(arr) -> bytes:
    """Serialize a 1- to 4-D array into ``.aavol`` bytes.

    Arrays with fewer than four axes are left-padded with unit axes.
    """
    arr = np.asarray(arr)
    if arr.ndim > 4:
        raise ValueError(f"container holds at most 4 axes, got {arr.ndim}")
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODE_OF:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    shape = (1,) * (4 - arr.ndim) + arr.shape
    header = HEADER.pack(MAGIC, _CODE_OF[dt], *shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_array(buf: bytes) -> np.ndarray:
    """Inverse of :func:`encode_array`; always returns a 4D array."""
    if len(buf) < HEADER.size:
        raise ContainerError("truncated header")
    magic, code, c, h, w, d = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if code not in DTYPE_CODES:
        raise ContainerError(f"unknown dtype code {code}")
    dt = DTYPE_CODES[code]
    n = c * h * w * d
    if len(buf) != HEADER.size + n * dt.itemsize:
        raise ContainerError(
            f"payload size {len(buf) - HEADER.size} does not match header ({n} x {dt.itemsize})"
        )
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=HEADER.size)
    return arr.reshape(c, h, w, d).astype(dt.newbyteorder("="))


def save_volume(path, arr) -> None:
    Path(path).write_bytes(encode_array(arr))


def load_volume(path) -> np.ndarray:
    return decode_array(Path(path).read_bytes())


def load_labels(path) -> np.ndarray:
    arr = load_volume(path)
    if arr.shape[0] != 1 or not np.issubdtype(arr.dtype, np.integer):
        raise ContainerError(f"{path} does not hold a label map")
    return arr[0].astype(np.int64)
