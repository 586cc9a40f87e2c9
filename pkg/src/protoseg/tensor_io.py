"""Readers and writers for every on-disk format the engine touches.

Formats (all multi-byte values little-endian):

``.igft`` feature tensor::

    "IGFT" | u32 version=1 | u32 dtype (1 = f32) | u32 ndim | ndim x u64 dims | payload

``.igl`` label array::

    "IGLB" | u32 version=1 | u64 count | u32 ignore_id | count x u32

``.ppm`` binary portable pixmap (P6, maxval 255).

``.poses`` text, one scan per line, 12 reals: the row-major 3x4 ``[R|t]``.
"""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    LabelRangeError,
    NonFiniteError,
    ShapeMismatchError,
    TruncatedError,
    UnsupportedFormatError,
)

IGFT_MAGIC = b"IGFT"
IGFT_VERSION = 1
DTYPE_F32 = 1
IGL_MAGIC = b"IGLB"
IGL_VERSION = 1
DEFAULT_IGNORE_ID = 0xFFFFFFFF

_IGFT_HEAD = struct.Struct("<4sIII")
_IGL_HEAD = struct.Struct("<4sIQI")

FORMAT_VERSIONS = {"igft": IGFT_VERSION, "igl": IGL_VERSION, "ppm": "P6/255", "poses": "3x4 text"}


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# feature tensors
# ---------------------------------------------------------------------------


def encode_tensor(array) -> bytes:
    arr = np.asarray(array, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
    head = _IGFT_HEAD.pack(IGFT_MAGIC, IGFT_VERSION, DTYPE_F32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + dims + arr.tobytes()


def decode_tensor(data: bytes, path=None) -> np.ndarray:
    if len(data) < 4:
        raise TruncatedError("file shorter than magic", path, len(data))
    if data[:4] != IGFT_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {IGFT_MAGIC!r}", path, 0)
    if len(data) < _IGFT_HEAD.size:
        raise TruncatedError("truncated header", path, len(data))
    _, version, dtype, ndim = _IGFT_HEAD.unpack_from(data)
    if version != IGFT_VERSION:
        raise UnsupportedFormatError(f"unsupported version {version}", path, 4)
    if dtype != DTYPE_F32:
        raise UnsupportedFormatError(f"unsupported dtype tag {dtype}", path, 8)
    dims_end = _IGFT_HEAD.size + 8 * ndim
    if len(data) < dims_end:
        raise TruncatedError("truncated dimension list", path, len(data))
    shape = struct.unpack_from(f"<{ndim}Q", data, _IGFT_HEAD.size)
    expected = 4 * int(np.prod(shape, dtype=np.uint64)) if ndim else 4
    payload = len(data) - dims_end
    if payload != expected:
        raise ShapeMismatchError(
            f"shape {tuple(shape)} needs {expected} payload bytes, found {payload}", path, dims_end
        )
    arr = np.frombuffer(data, dtype="<f4", offset=dims_end).reshape(shape)
    bad = ~np.isfinite(arr)
    if bad.any():
        first = int(np.flatnonzero(bad.ravel())[0])
        raise NonFiniteError("non-finite value in payload", path, dims_end + 4 * first)
    return arr.astype(np.float32)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read(), path)


def write_tensor(array, path) -> None:
    _atomic_write(path, encode_tensor(array))


def read_feature_matrix(path) -> np.ndarray:
    """Load a 2-D ``.igft`` tensor as a ``(rows, dims)`` float32 array."""
    arr = read_tensor(path)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D feature matrix, got ndim={arr.ndim}", path, 12)
    return arr


def write_feature_matrix(matrix, path) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {matrix.shape}")
    if not np.isfinite(matrix).all():
        raise ValueError("feature matrix contains non-finite values")
    write_tensor(matrix, path)


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelArray:
    labels: np.ndarray
    ignore_id: int = DEFAULT_IGNORE_ID

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    def validate(self, num_classes: int, path=None) -> None:
        bad = (self.labels != self.ignore_id) & (self.labels >= num_classes)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise LabelRangeError(
                f"label {int(self.labels[i])} at index {i} not < {num_classes} classes",
                path,
                _IGL_HEAD.size + 4 * i if path is not None else None,
            )


def encode_labels(labels: LabelArray) -> bytes:
    head = _IGL_HEAD.pack(IGL_MAGIC, IGL_VERSION, len(labels.labels), labels.ignore_id)
    return head + labels.labels.astype("<u4").tobytes()


def decode_labels(data: bytes, path=None) -> LabelArray:
    if len(data) >= 4 and data[:4] != IGL_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {IGL_MAGIC!r}", path, 0)
    if len(data) < _IGL_HEAD.size:
        raise TruncatedError("truncated header", path, len(data))
    _, version, count, ignore_id = _IGL_HEAD.unpack_from(data)
    if version != IGL_VERSION:
        raise UnsupportedFormatError(f"unsupported version {version}", path, 4)
    payload = len(data) - _IGL_HEAD.size
    if payload < 4 * count:
        raise TruncatedError(f"{count} labels need {4 * count} bytes, found {payload}", path, len(data))
    if payload > 4 * count:
        raise ShapeMismatchError(f"{payload - 4 * count} trailing bytes", path, _IGL_HEAD.size + 4 * count)
    labels = np.frombuffer(data, dtype="<u4", offset=_IGL_HEAD.size, count=count)
    return LabelArray(labels, ignore_id)


def read_labels(path, ignore_id: int | None = None, num_classes: int | None = None) -> LabelArray:
    """Load an ``.igl`` file.

    ``ignore_id``, when given, must match the id stored in the file.
    ``num_classes``, when given, enables the label range check.
    """
    with open(path, "rb") as fh:
        out = decode_labels(fh.read(), path)
    if ignore_id is not None and out.ignore_id != ignore_id:
        raise FormatError(f"file ignore_id {out.ignore_id} != expected {ignore_id}", path, 16)
    if num_classes is not None:
        out.validate(num_classes, path)
    return out


def write_labels(labels: LabelArray, path) -> None:
    _atomic_write(path, encode_labels(labels))


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

_PPM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_ppm(data: bytes, path=None) -> np.ndarray:
    """Decode a P6 pixmap into an ``(height, width, 3)`` uint8 array."""
    if data[:2] != b"P6":
        raise UnsupportedFormatError(f"unsupported pixmap magic {data[:2]!r}, only P6", path, 0)
    pos = 2
    values = []
    for _ in range(3):
        m = _PPM_TOKEN.match(data, pos)
        if m is None:
            raise TruncatedError("truncated pixmap header", path, pos)
        try:
            values.append(int(m.group(1)))
        except ValueError:
            raise FormatError(f"bad header token {m.group(1)!r}", path, m.start(1)) from None
        pos = m.end()
    width, height, maxval = values
    if maxval != 255:
        raise UnsupportedFormatError(f"unsupported maxval {maxval}, only 255", path, pos)
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise TruncatedError("missing whitespace before pixel data", path, pos)
    pos += 1
    need = 3 * width * height
    if len(data) - pos < need:
        raise TruncatedError(f"need {need} pixel bytes, found {len(data) - pos}", path, len(data))
    return np.frombuffer(data, np.uint8, need, pos).reshape(height, width, 3).copy()


def encode_ppm(image) -> bytes:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (height, width, 3) image, got {img.shape}")
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read(), path)


def write_image(image, path) -> None:
    _atomic_write(path, encode_ppm(image))


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoseSE3:
    """Rigid sensor-to-world transform ``x_world = R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def check(self, tol: float = 1e-5) -> None:
        r = self.rotation
        if not (np.isfinite(r).all() and np.isfinite(self.translation).all()):
            raise ValueError("pose contains non-finite values")
        if np.abs(r @ r.T - np.eye(3)).max() > tol:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > tol:
            raise ValueError("rotation determinant is not +1")

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def as_row(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]]).ravel()


def encode_poses(poses) -> bytes:
    lines = [" ".join(repr(float(v)) for v in p.as_row()) for p in poses]
    return "".join(line + "\n" for line in lines).encode("ascii")


def decode_poses(data: bytes, path=None) -> list[PoseSE3]:
    poses = []
    offset = 0
    for lineno, raw in enumerate(data.split(b"\n")):
        line_offset = offset
        offset += len(raw) + 1
        if not raw.strip():
            continue
        try:
            vals = [float(tok) for tok in raw.split()]
        except ValueError:
            raise FormatError(f"line {lineno + 1}: non-numeric pose value", path, line_offset) from None
        if len(vals) != 12:
            raise ShapeMismatchError(f"line {lineno + 1}: expected 12 values, got {len(vals)}", path, line_offset)
        m = np.array(vals).reshape(3, 4)
        pose = PoseSE3(m[:, :3], m[:, 3])
        try:
            pose.check()
        except ValueError as exc:
            raise FormatError(f"line {lineno + 1}: {exc}", path, line_offset) from None
        poses.append(pose)
    return poses


def read_poses(path) -> list[PoseSE3]:
    with open(path, "rb") as fh:
        return decode_poses(fh.read(), path)


def write_poses(poses, path) -> None:
    _atomic_write(path, encode_poses(poses))
