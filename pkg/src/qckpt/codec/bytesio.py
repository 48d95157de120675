"""Little-endian fixed-width and LEB128 varint byte helpers."""
import struct

from ..errors import CorruptBitstream


def zigzag(n: int) -> int:
    return (n << 1) if n >= 0 else ((-n << 1) - 1)


def unzigzag(z: int) -> int:
    return (z >> 1) if not z & 1 else -((z + 1) >> 1)


class Writer:
    def __init__(self):
        self._parts = []

    def raw(self, b: bytes):
        self._parts.append(bytes(b))

    def fixed(self, fmt: str, *vals):
        self._parts.append(struct.pack("<" + fmt, *vals))

    def uvar(self, n: int):
        if n < 0:
            raise ValueError("uvar takes non-negative integers")
        out = bytearray()
        while True:
            byte = n & 0x7F
            n >>= 7
            if n:
                out.append(byte | 0x80)
            else:
                out.append(byte)
                break
        self._parts.append(bytes(out))

    def svar(self, n: int):
        self.uvar(zigzag(n))

    def blob(self, b: bytes):
        self.uvar(len(b))
        self.raw(b)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)

    def __len__(self):
        return sum(len(p) for p in self._parts)


class Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = memoryview(buf)
        self.pos = pos

    def raw(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CorruptBitstream(f"read of {n} bytes past end at offset {self.pos}")
        out = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return out

    def fixed(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.raw(struct.calcsize(fmt)))

    def uvar(self) -> int:
        shift = 0
        n = 0
        while True:
            if self.pos >= len(self.buf):
                raise CorruptBitstream("truncated varint")
            byte = self.buf[self.pos]
            self.pos += 1
            n |= (byte & 0x7F) << shift
            if not byte & 0x80:
                return n
            shift += 7
            if shift > 70:
                raise CorruptBitstream("varint too long")

    def svar(self) -> int:
        return unzigzag(self.uvar())

    def blob(self) -> bytes:
        return self.raw(self.uvar())

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.pos
