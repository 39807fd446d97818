"""Flat parameter vectors with a named layout.

A :class:`ParamVector` is the unit exchanged between clients and server.
Every tensor of a model lives in one contiguous float64 buffer; the
:class:`Layout` maps names to ``(offset, length, shape)`` slices of it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import LayoutError


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int
    shape: tuple[int, ...]


class Layout:
    """Ordered, contiguous, non-overlapping map of named tensor slices."""

    def __init__(self, entries: Iterable[tuple[str, Sequence[int]]]):
        segments = []
        offset = 0
        for name, shape in entries:
            shape = tuple(int(s) for s in shape)
            length = int(np.prod(shape)) if shape else 1
            segments.append(Segment(name, offset, length, shape))
            offset += length
        names = [s.name for s in segments]
        if len(set(names)) != len(names):
            raise LayoutError(f"duplicate names in layout: {names}")
        self.segments: tuple[Segment, ...] = tuple(segments)
        self.size = offset
        self._index = {s.name: s for s in segments}

    def __getitem__(self, name: str) -> Segment:
        try:
            return self._index[name]
        except KeyError:
            raise LayoutError(f"no segment named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __iter__(self) -> Iterator[Segment]:
        return iter(self.segments)

    def __len__(self) -> int:
        return len(self.segments)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Layout) and self.segments == other.segments

    def __hash__(self) -> int:
        return hash(self.segments)

    def __repr__(self) -> str:
        return f"Layout({len(self.segments)} segments, size={self.size})"

    def names(self) -> list[str]:
        return [s.name for s in self.segments]


class ParamVector:
    """Real-valued parameters plus the layout that gives them meaning."""

    __slots__ = ("values", "layout")

    def __init__(self, values: np.ndarray, layout: Layout):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.size != layout.size:
            raise LayoutError(
                f"values of size {values.size} do not match layout size {layout.size}"
            )
        self.values = values
        self.layout = layout

    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        return cls(np.zeros(layout.size), layout)

    @classmethod
    def from_arrays(cls, layout: Layout, arrays: dict[str, np.ndarray]) -> "ParamVector":
        out = cls.zeros(layout)
        for name, arr in arrays.items():
            out[name] = arr
        return out

    def __getitem__(self, name: str) -> np.ndarray:
        seg = self.layout[name]
        return self.values[seg.offset : seg.offset + seg.length].reshape(seg.shape)

    def __setitem__(self, name: str, value) -> None:
        seg = self.layout[name]
        value = np.asarray(value, dtype=np.float64)
        if value.size != seg.length:
            raise LayoutError(f"{name}: expected {seg.length} values, got {value.size}")
        self.values[seg.offset : seg.offset + seg.length] = value.ravel()

    def _check(self, other: "ParamVector") -> None:
        if not isinstance(other, ParamVector) or other.layout != self.layout:
            raise LayoutError("parameter layouts differ")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values - other.values, self.layout)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(self.values * float(scalar), self.layout)

    __rmul__ = __mul__

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, ParamVector)
            and other.layout == self.layout
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None  # mutable

    def __repr__(self) -> str:
        return f"ParamVector(size={self.values.size}, segments={len(self.layout)})"

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def allclose(self, other: "ParamVector", **kw) -> bool:
        self._check(other)
        return bool(np.allclose(self.values, other.values, **kw))

    # -- serialization -------------------------------------------------------
    #
    # <u8 count> then count x (<u8 offset> <u8 length>) then the float64 values,
    # all little-endian.

    def to_bytes(self) -> bytes:
        head = struct.pack("<Q", len(self.layout))
        for seg in self.layout:
            head += struct.pack("<QQ", seg.offset, seg.length)
        return head + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, template: Layout | None = None) -> "ParamVector":
        """Decode :meth:`to_bytes` output.

        Without a ``template`` the segments come back as flat vectors named
        ``"0"``, ``"1"``, ... since the wire format only records offsets.
        """
        if len(buf) < 8:
            raise LayoutError("truncated parameter buffer")
        (count,) = struct.unpack_from("<Q", buf, 0)
        pos = 8
        pairs = []
        for _ in range(count):
            if pos + 16 > len(buf):
                raise LayoutError("truncated layout table")
            pairs.append(struct.unpack_from("<QQ", buf, pos))
            pos += 16
        expected = 0
        for off, length in pairs:
            if off != expected:
                raise LayoutError("layout table is not contiguous")
            expected += length
        values = np.frombuffer(buf, dtype="<f8", offset=pos).astype(np.float64)
        if values.size != expected:
            raise LayoutError(f"expected {expected} values, found {values.size}")
        if template is None:
            layout = Layout((str(i), (length,)) for i, (_, length) in enumerate(pairs))
        else:
            if [(s.offset, s.length) for s in template] != [tuple(p) for p in pairs]:
                raise LayoutError("buffer layout does not match template")
            layout = template
        return cls(values.copy(), layout)
