"""N-D greyscale container, line traversal, normalization and file I/O.

Volumes are stored as C-ordered arrays, so the last axis varies fastest.
Intensities are kept in [0, 1] once loaded from an integer format.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import DegenerateMeanError, FormatError

__all__ = [
    "ImageVolume",
    "LineView",
    "line_views",
    "normalize",
    "mean_grey",
    "rel_dist_to_mean",
    "load_pgm",
    "save_pgm",
    "load_raw3d",
    "save_raw3d",
]


@dataclass(frozen=True)
class ImageVolume:
    """Greyscale image or volume with per-axis physical spacing.

    ``data`` is copied on construction and frozen read-only; filtering
    always produces new volumes.
    """

    data: np.ndarray
    spacing: tuple[float, ...] = field(default=())

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim not in (1, 2, 3):
            raise ValueError(f"expected 1, 2 or 3 axes, got {data.ndim}")
        if data.size == 0:
            raise ValueError("empty volume")
        spacing = tuple(float(h) for h in self.spacing) or (1.0,) * data.ndim
        if len(spacing) != data.ndim:
            raise ValueError(f"spacing has {len(spacing)} entries for {data.ndim} axes")
        if not all(h > 0 and math.isfinite(h) for h in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def with_data(self, data) -> "ImageVolume":
        """Same geometry, new intensities."""
        data = np.asarray(data)
        if data.shape != self.dims:
            data = data.reshape(self.dims)
        return ImageVolume(data, self.spacing)

    @classmethod
    def from_flat(cls, values, dims: Sequence[int], spacing: Sequence[float] = ()):
        values = np.asarray(values, dtype=np.float64)
        if values.size != int(np.prod(dims)):
            raise ValueError(f"{values.size} samples do not fill dims {tuple(dims)}")
        return cls(values.reshape(tuple(dims)), tuple(spacing))


@dataclass(frozen=True)
class LineView:
    """One grid line along ``axis``: flat indices into the parent volume."""

    axis: int
    indices: np.ndarray

    @property
    def length(self) -> int:
        return self.indices.size

    def take(self, v: ImageVolume) -> np.ndarray:
        return v.flat[self.indices]


def line_views(v: ImageVolume, axis: int) -> Iterator[LineView]:
    """Yield every line of ``v`` running along ``axis``.

    Each voxel appears in exactly one line per axis.
    """
    if not 0 <= axis < v.ndim:
        raise ValueError(f"axis {axis} out of range for {v.ndim}-D volume")
    idx = np.arange(v.size).reshape(v.dims)
    rows = np.moveaxis(idx, axis, -1).reshape(-1, v.dims[axis])
    for row in rows:
        yield LineView(axis, row.copy())


def normalize(v: ImageVolume) -> ImageVolume:
    """Min-max rescale intensities to [0, 1].

    A constant volume already inside [0, 1] is returned unchanged; any other
    constant volume is clipped into the interval.
    """
    lo, hi = float(v.data.min()), float(v.data.max())
    if hi == lo:
        return v.with_data(np.clip(v.data, 0.0, 1.0))
    return v.with_data((v.data - lo) / (hi - lo))


def mean_grey(v: ImageVolume) -> float:
    return math.fsum(v.flat) / v.size


def rel_dist_to_mean(v: ImageVolume, ord=2) -> float:
    """Relative distance ``||U - mu||/||mu||`` to the constant mean image.

    ``ord`` is passed to :func:`numpy.linalg.norm`; the default is Euclidean.
    """
    mu = mean_grey(v)
    if mu == 0.0:
        raise DegenerateMeanError("mean grey level is zero; relative distance undefined")
    ref = np.full(v.size, mu)
    return float(np.linalg.norm(v.flat - ref, ord=ord) / np.linalg.norm(ref, ord=ord))


# --- PGM -------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*([^\s#]+)")


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    for _ in range(count):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise FormatError("truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    return tokens, pos


def load_pgm(buf: bytes) -> ImageVolume:
    """Parse a P2 (ASCII) or P5 (binary) portable greymap.

    Grey levels ``0..maxval`` map linearly onto [0, 1].
    """
    if len(buf) < 2:
        raise FormatError("empty PGM stream")
    magic = buf[:2]
    if magic not in (b"P2", b"P5"):
        raise FormatError(f"unsupported magic number {magic!r}")
    try:
        (_, w, h, mx), pos = _header_tokens(buf, 4)
        width, height, maxval = int(w), int(h), int(mx)
    except ValueError as exc:
        raise FormatError(f"malformed PGM header: {exc}") from None
    if width <= 0 or height <= 0 or not 0 < maxval <= 65535:
        raise FormatError(f"bad PGM geometry {width}x{height} maxval {maxval}")
    count = width * height
    if magic == b"P5":
        # exactly one whitespace byte separates maxval from the raster
        pos += 1
        dtype = ">u2" if maxval > 255 else "u1"
        nbytes = count * np.dtype(dtype).itemsize
        raster = buf[pos:pos + nbytes]
        if len(raster) < nbytes:
            raise FormatError(f"truncated PGM payload: {len(raster)} of {nbytes} bytes")
        values = np.frombuffer(raster, dtype=dtype).astype(np.int64)
    else:
        body = re.sub(rb"#[^\n]*", b" ", buf[pos:]).split()
        if len(body) < count:
            raise FormatError(f"truncated PGM payload: {len(body)} of {count} samples")
        try:
            values = np.array([int(t) for t in body[:count]], dtype=np.int64)
        except ValueError:
            raise FormatError("non-integer sample in P2 raster") from None
    if values.max(initial=0) > maxval or values.min(initial=0) < 0:
        raise FormatError("sample exceeds maxval")
    return ImageVolume(values.reshape(height, width) / maxval)


def quantize(data: np.ndarray, max_grey: int) -> np.ndarray:
    return np.rint(np.clip(data, 0.0, 1.0) * max_grey).astype(np.int64)


def save_pgm(v: ImageVolume, max_grey: int = 255, binary: bool = True) -> bytes:
    """Serialize a 2-D volume as P5 (default) or P2; values are clipped to [0, 1]."""
    if v.ndim != 2:
        raise FormatError(f"PGM holds 2-D images, got {v.ndim}-D")
    if not 0 < max_grey <= 65535:
        raise ValueError(f"max_grey must be in 1..65535, got {max_grey}")
    height, width = v.dims
    q = quantize(v.data, max_grey)
    if binary:
        header = f"P5\n{width} {height}\n{max_grey}\n".encode("ascii")
        dtype = ">u2" if max_grey > 255 else "u1"
        return header + q.astype(dtype).tobytes()
    lines = [f"P2\n{width} {height}\n{max_grey}"]
    lines += [" ".join(str(x) for x in row) for row in q]
    return ("\n".join(lines) + "\n").encode("ascii")


# --- raw 3-D volumes ----------------------------------------------------------

_RAW_TYPES = {"u8": "u1", "u16": "u2", "f32": "f4"}
_INT_MAX = {"u8": 255, "u16": 65535}


def _parse_header(text: str) -> dict[str, str]:
    fields = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise FormatError(f"header line {lineno}: expected 'key: value'")
        fields[key.strip().lower()] = value.strip()
    return fields


def load_raw3d(header: str, payload: bytes) -> ImageVolume:
    """Build a volume from a ``key: value`` text header and a binary payload.

    Required keys are ``dims`` (slowest axis first), ``dtype`` (u8, u16 or
    f32); ``spacing`` defaults to unit spacing and ``endian`` to little.
    Integer samples are scaled to [0, 1] by the type maximum, f32 is kept
    verbatim.
    """
    fields = _parse_header(header)
    try:
        dims = tuple(int(x) for x in fields["dims"].split())
        dtype = fields["dtype"].lower()
    except KeyError as exc:
        raise FormatError(f"header missing {exc.args[0]!r}") from None
    except ValueError:
        raise FormatError(f"bad dims {fields['dims']!r}") from None
    if dtype not in _RAW_TYPES:
        raise FormatError(f"unknown scalar type {dtype!r}")
    if not dims or any(d <= 0 for d in dims):
        raise FormatError(f"bad dims {dims}")
    try:
        spacing = tuple(float(x) for x in fields.get("spacing", "").split())
    except ValueError:
        raise FormatError(f"bad spacing {fields['spacing']!r}") from None
    endian = fields.get("endian", "little").lower()
    if endian not in ("little", "big"):
        raise FormatError(f"unknown endianness {endian!r}")
    dt = np.dtype(_RAW_TYPES[dtype]).newbyteorder("<" if endian == "little" else ">")
    expected = int(np.prod(dims)) * dt.itemsize
    if len(payload) != expected:
        raise FormatError(f"payload has {len(payload)} bytes, dims {dims} need {expected}")
    values = np.frombuffer(payload, dtype=dt).astype(np.float64)
    if dtype in _INT_MAX:
        values = values / _INT_MAX[dtype]
    try:
        return ImageVolume.from_flat(values, dims, spacing)
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def save_raw3d(v: ImageVolume, dtype: str = "f32", endian: str = "little") -> tuple[str, bytes]:
    """Inverse of :func:`load_raw3d`; returns ``(header_text, payload)``."""
    if dtype not in _RAW_TYPES:
        raise FormatError(f"unknown scalar type {dtype!r}")
    if endian not in ("little", "big"):
        raise FormatError(f"unknown endianness {endian!r}")
    dt = np.dtype(_RAW_TYPES[dtype]).newbyteorder("<" if endian == "little" else ">")
    if dtype in _INT_MAX:
        samples = quantize(v.flat, _INT_MAX[dtype])
    else:
        samples = v.flat
    header = (
        f"dims: {' '.join(str(d) for d in v.dims)}\n"
        f"spacing: {' '.join(repr(h) for h in v.spacing)}\n"
        f"dtype: {dtype}\n"
        f"endian: {endian}\n"
    )
    return header, samples.astype(dt).tobytes()
