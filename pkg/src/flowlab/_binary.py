"""Little-endian record reading/writing shared by the checkpoint formats."""

from __future__ import annotations

import struct

import numpy as np


class FormatError(ValueError):
    """A binary artifact could not be decoded."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"{self.what}: truncated file (needed {n} bytes at offset {self.pos}, "
                f"{len(self.data) - self.pos} left)"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def magic(self, expected: bytes) -> None:
        got = self.data[: len(expected)]
        if len(got) < len(expected):
            raise TruncatedFileError(f"{self.what}: truncated file (no magic)")
        if got != expected:
            raise BadMagicError(f"{self.what}: bad magic {got!r}, expected {expected!r}")
        self.pos = len(expected)

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)

    def version(self, expected: int) -> None:
        v = self.u32()
        if v != expected:
            raise VersionMismatchError(f"{self.what}: version mismatch (file {v}, supported {expected})")

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} trailing bytes")


def u32(value: int) -> bytes:
    return struct.pack("<I", int(value))


def u8(value: int) -> bytes:
    return struct.pack("<B", int(value))


def f32(values) -> bytes:
    return np.ascontiguousarray(values, dtype="<f4").tobytes()
