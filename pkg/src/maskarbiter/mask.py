"""Packed binary masks, exact overlap metrics, and run-length codecs.

Masks are stored as row-major bit arrays packed into 64-bit words so that
intersection and union reduce to word-wise AND/OR plus popcount. All metric
ratios are formed from exact integer pixel counts and divided once in 64-bit
floating point, which makes them bit-identical across platforms.

The run-length form is column-major with alternating background/foreground
runs, beginning with a (possibly zero) background run. Decoding accepts
interior zero-length runs by merging their neighbours; encoding never emits
them, so every constructed RleMask is canonical.

Everything here is immutable after construction and safe to share across
threads; all operations are pure functions.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DimensionMismatch, MalformedFile, MalformedRle

_WORD_BYTES = 8


class Mask:
    """Immutable binary mask of shape (height, width)."""

    __slots__ = ("_width", "_height", "_words", "_area")

    def __init__(self, width: int, height: int, words: np.ndarray) -> None:
        if width < 1 or height < 1:
            raise ValueError("mask dimensions must be positive")
        expected = _word_count(width, height)
        if words.dtype != np.uint64 or words.ndim != 1 or len(words) != expected:
            raise ValueError("words must be a 1-d uint64 array of length %d" % expected)
        self._width = int(width)
        self._height = int(height)
        self._words = words
        self._words.flags.writeable = False
        self._area: int | None = None
        pad = expected * 64 - width * height
        if pad and int(words[-1] >> np.uint64(64 - pad)) != 0:
            raise ValueError("padding bits beyond width*height must be zero")

    @property
    def width(self) -> int:
        return self._width

    @property
    def height(self) -> int:
        return self._height

    @property
    def words(self) -> np.ndarray:
        """Packed little-endian bit words, row-major. Read-only."""
        return self._words

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Mask":
        """Build from a 2-d boolean (or 0/1) array of shape (height, width)."""
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise ValueError("expected a 2-d array")
        height, width = arr.shape
        flat = np.ascontiguousarray(arr, dtype=bool).reshape(-1)
        packed = np.packbits(flat, bitorder="little")
        pad = -len(packed) % _WORD_BYTES
        if pad:
            packed = np.concatenate([packed, np.zeros(pad, dtype=np.uint8)])
        return cls(width, height, packed.view(np.uint64))

    @classmethod
    def zeros(cls, width: int, height: int) -> "Mask":
        return cls(width, height, np.zeros(_word_count(width, height), dtype=np.uint64))

    @classmethod
    def full(cls, width: int, height: int) -> "Mask":
        n = width * height
        words = np.full(_word_count(width, height), ~np.uint64(0), dtype=np.uint64)
        pad = len(words) * 64 - n
        if pad:
            words[-1] = np.uint64((1 << (64 - pad)) - 1)
        return cls(width, height, words)

    def to_array(self) -> np.ndarray:
        """Unpack to a 2-d boolean array of shape (height, width)."""
        bits = np.unpackbits(
            self._words.view(np.uint8), count=self._width * self._height, bitorder="little"
        )
        return bits.reshape(self._height, self._width).astype(bool)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Mask):
            return NotImplemented
        return (
            self._width == other._width
            and self._height == other._height
            and np.array_equal(self._words, other._words)
        )

    def __hash__(self) -> int:
        return hash((self._width, self._height, self._words.tobytes()))

    def __repr__(self) -> str:
        return f"Mask({self._width}x{self._height}, area={area(self)})"


def _word_count(width: int, height: int) -> int:
    return (width * height + 63) // 64


@dataclass(frozen=True)
class PixelPair:
    """Exact pixel counts shared by the overlap metrics."""

    intersection: int
    union: int
    area_a: int
    area_b: int


def area(m: Mask) -> int:
    """Number of set pixels."""
    if m._area is None:
        m._area = int(np.bitwise_count(m._words).sum())
    return m._area


def _require_same_shape(a, b) -> None:
    if a.width != b.width or a.height != b.height:
        raise DimensionMismatch(
            f"shape mismatch: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def overlap(a: Mask, b: Mask) -> PixelPair:
    """Exact intersection/union pixel counts via word-wise AND/OR."""
    _require_same_shape(a, b)
    inter = int(np.bitwise_count(a._words & b._words).sum())
    un = int(np.bitwise_count(a._words | b._words).sum())
    return PixelPair(intersection=inter, union=un, area_a=area(a), area_b=area(b))


def iou(a: Mask, b: Mask) -> float:
    """Intersection over union. Both empty -> 1.0, exactly one empty -> 0.0."""
    p = overlap(a, b)
    if p.union == 0:
        return 1.0
    return p.intersection / p.union


def dice(a: Mask, b: Mask) -> float:
    """Dice coefficient. Both empty -> 1.0, exactly one empty -> 0.0."""
    p = overlap(a, b)
    total = p.area_a + p.area_b
    if total == 0:
        return 1.0
    return 2.0 * p.intersection / total


class RleMask:
    """Canonical column-major run-length encoding of a binary mask.

    counts alternate background, foreground, ... and begin with a (possibly
    zero) background run. Construction canonicalizes: interior zero-length
    runs are merged away, so two encodings of the same mask always compare
    equal. Raises MalformedRle when the runs cannot describe a width x height
    bitmap.
    """

    __slots__ = ("_width", "_height", "_counts", "_ends")

    def __init__(self, height: int, width: int, counts: Iterable[int]) -> None:
        if not isinstance(height, int) or not isinstance(width, int):
            raise MalformedRle("height and width must be integers")
        if height < 1 or width < 1:
            raise MalformedRle("dimensions must be positive")
        canon = _canonicalize_counts(counts)
        total = int(sum(canon))
        if total != width * height:
            raise MalformedRle(
                f"run lengths sum to {total}, expected {width * height}"
            )
        self._height = height
        self._width = width
        self._counts = np.asarray(canon, dtype=np.int64)
        self._counts.flags.writeable = False
        # Cached cumulative run ends keep the streaming overlap path cheap.
        self._ends = np.cumsum(self._counts)
        self._ends.flags.writeable = False

    @property
    def height(self) -> int:
        return self._height

    @property
    def width(self) -> int:
        return self._width

    @property
    def counts(self) -> np.ndarray:
        """Canonical run lengths as a read-only int64 array."""
        return self._counts

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RleMask):
            return NotImplemented
        return (
            self._height == other._height
            and self._width == other._width
            and np.array_equal(self._counts, other._counts)
        )

    def __hash__(self) -> int:
        return hash((self._height, self._width, self._counts.tobytes()))

    def __repr__(self) -> str:
        return f"RleMask({self._width}x{self._height}, {len(self._counts)} runs)"


def _canonicalize_counts(counts: Iterable[int]) -> list[int]:
    raw = list(counts)
    if not raw:
        raise MalformedRle("counts must be non-empty")
    for c in raw:
        if isinstance(c, float) or not isinstance(c, (int, np.integer)):
            raise MalformedRle(f"run length {c!r} is not an integer")
        if c < 0:
            raise MalformedRle(f"run length {c} is negative")
    # Runs alternate by input position; merge away zero-length ones.
    merged: list[list[int]] = []  # [value, length] pairs
    for idx, c in enumerate(raw):
        value = idx % 2
        if c == 0:
            continue
        if merged and merged[-1][0] == value:
            merged[-1][1] += int(c)
        else:
            merged.append([value, int(c)])
    if not merged:
        raise MalformedRle("all run lengths are zero")
    out: list[int] = []
    if merged[0][0] == 1:
        out.append(0)  # leading zero marks a mask starting with foreground
    out.extend(length for _, length in merged)
    return out


def encode_rle(m: Mask) -> RleMask:
    """Encode to canonical column-major runs."""
    flat = m.to_array().ravel(order="F")
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return RleMask(m.height, m.width, counts)


def decode_rle(r: RleMask) -> Mask:
    """Expand runs back into a packed mask."""
    values = (np.arange(len(r.counts)) % 2).astype(bool)
    flat = np.repeat(values, r.counts)
    return Mask.from_array(flat.reshape((r.height, r.width), order="F"))


def rle_overlap(a: RleMask, b: RleMask) -> PixelPair:
    """Exact overlap counts from two run encodings, no bitmap materialized.

    Merges both run boundary sets, then reads each segment's value in either
    mask from the parity of the run that contains it. Matches
    overlap(decode_rle(a), decode_rle(b)) on every input.
    """
    _require_same_shape(a, b)
    ends_a, ends_b = a._ends, b._ends
    bounds = np.sort(np.concatenate((ends_a, ends_b)), kind="stable")
    lens = np.diff(bounds, prepend=0)
    # Segment (prev, bound] sits inside one run of each mask; odd run index
    # means foreground.
    va = np.searchsorted(ends_a, bounds, side="left") & 1
    vb = np.searchsorted(ends_b, bounds, side="left") & 1
    inter = int(np.dot(lens, va & vb))
    un = int(np.dot(lens, va | vb))
    area_a = int(a._counts[1::2].sum())
    area_b = int(b._counts[1::2].sum())
    return PixelPair(intersection=inter, union=un, area_a=area_a, area_b=area_b)


# -- file formats ------------------------------------------------------------

_PBM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def save_mask(m: Mask, path: str | os.PathLike, format: str | None = None) -> None:
    """Write a mask as binary PBM (P4) or as an RLE JSON object."""
    fmt = _resolve_format(path, format)
    if fmt == "pbm":
        rows = np.packbits(m.to_array(), axis=1)  # MSB-first, rows byte-padded
        header = b"P4\n%d %d\n" % (m.width, m.height)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(rows.tobytes())
    else:
        r = encode_rle(m)
        payload = {"size": [r.height, r.width], "counts": r.counts.tolist()}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
            fh.write("\n")


def load_mask(path: str | os.PathLike, format: str | None = None) -> Mask:
    """Read a mask written by save_mask (or any conforming producer)."""
    fmt = _resolve_format(path, format)
    if fmt == "pbm":
        with open(path, "rb") as fh:
            return _parse_pbm(fh.read(), path)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MalformedFile(f"{path}: not valid JSON: {exc}") from exc
    return decode_rle(rle_from_json(payload, source=str(path)))


def rle_from_json(payload: object, source: str = "rle JSON") -> RleMask:
    """Parse the {"size": [height, width], "counts": [...]} interchange form."""
    if not isinstance(payload, dict):
        raise MalformedFile(f"{source}: expected a JSON object")
    size = payload.get("size")
    counts = payload.get("counts")
    if (
        not isinstance(size, (list, tuple))
        or len(size) != 2
        or not all(isinstance(v, int) and not isinstance(v, bool) for v in size)
    ):
        raise MalformedFile(f"{source}: size must be [height, width]")
    if not isinstance(counts, (list, tuple)):
        raise MalformedFile(f"{source}: counts must be a list")
    try:
        return RleMask(size[0], size[1], counts)
    except MalformedRle as exc:
        raise MalformedFile(f"{source}: {exc}") from exc


def rle_to_json(r: RleMask) -> dict:
    return {"size": [r.height, r.width], "counts": r.counts.tolist()}


def _resolve_format(path: str | os.PathLike, format: str | None) -> str:
    if format is None:
        ext = os.path.splitext(os.fspath(path))[1].lower()
        if ext == ".pbm":
            return "pbm"
        if ext == ".json":
            return "rle-json"
        raise ValueError(f"cannot infer mask format from extension {ext!r}")
    if format not in ("pbm", "rle-json"):
        raise ValueError(f"unknown mask format {format!r}")
    return format


def _parse_pbm(data: bytes, path) -> Mask:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 3 and pos < len(data):
        match = _PBM_TOKEN.match(data, pos)
        if match is None:
            break
        tokens.append(match.group(1))
        pos = match.end()
    if len(tokens) < 3 or tokens[0] != b"P4":
        raise MalformedFile(f"{path}: not a binary PBM (P4) file")
    try:
        width, height = int(tokens[1]), int(tokens[2])
    except ValueError as exc:
        raise MalformedFile(f"{path}: non-numeric PBM dimensions") from exc
    if width < 1 or height < 1:
        raise MalformedFile(f"{path}: PBM dimensions must be positive")
    # Exactly one whitespace byte separates the header from the raster.
    if pos >= len(data) or data[pos : pos + 1] not in (b"\n", b" ", b"\t", b"\r"):
        raise MalformedFile(f"{path}: missing separator before PBM raster")
    pos += 1
    row_bytes = (width + 7) // 8
    need = row_bytes * height
    raster = data[pos : pos + need]
    if len(raster) < need:
        raise MalformedFile(
            f"{path}: PBM raster truncated ({len(raster)} of {need} bytes)"
        )
    rows = np.frombuffer(raster, dtype=np.uint8).reshape(height, row_bytes)
    bits = np.unpackbits(rows, axis=1)[:, :width]
    return Mask.from_array(bits)
