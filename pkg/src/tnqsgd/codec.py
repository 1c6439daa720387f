"""Binary transport of quantized gradients (``TNQ1`` format).

Layout, all multi-byte fields little-endian::

    0-3   magic  b"TNQ1"
    4     version (1)
    5     scheme tag (0=TNQ, 1=TUQ, 2=NQ, 3=UQ)
    6     bits per coordinate
    7     reserved (0)
    8-15  alpha, float64
    16-23 gamma, float64
    24-31 d, uint64
    32-   payload: level indices, ``bits`` each, LSB-first, ceil(d*bits/8) bytes

A header with ``alpha == 0`` is a zero marker: the layer was all zeros and
decodes to zeros without a grid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorruptionError, FormatError, InvalidInputError, LengthError, ProtocolError
from .quantizer import QuantConfig, QuantizationGrid, Scheme, dequantize, stochastic_quantize, truncate

MAGIC = b"TNQ1"
VERSION = 1
HEADER = struct.Struct("<4sBBBxddQ")
HEADER_BYTES = HEADER.size
HEADER_BITS = 8 * HEADER_BYTES


def payload_size(d: int, bits: int) -> int:
    return (d * bits + 7) // 8


@dataclass(frozen=True)
class EncodedGradient:
    scheme: Scheme
    bits: int
    alpha: float
    gamma: float
    d: int
    payload: bytes

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    @property
    def is_zero_marker(self) -> bool:
        return self.alpha == 0.0

    @property
    def nbits(self) -> int:
        """Bits on the wire, header included."""
        return HEADER_BITS + self.d * self.bits

    def to_bytes(self) -> bytes:
        head = HEADER.pack(MAGIC, VERSION, int(self.scheme), self.bits, self.alpha, self.gamma, self.d)
        return head + self.payload

    @classmethod
    def from_bytes(cls, buf: bytes) -> "EncodedGradient":
        if len(buf) < HEADER_BYTES:
            raise LengthError(f"need {HEADER_BYTES} header bytes, got {len(buf)}")
        magic, version, tag, bits, alpha, gamma, d = HEADER.unpack_from(buf)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        if buf[7] != 0:
            raise FormatError("reserved header byte is not zero")
        try:
            scheme = Scheme(tag)
        except ValueError:
            raise FormatError(f"unknown scheme tag {tag}") from None
        if not 1 <= bits <= 32:
            raise FormatError(f"invalid bit width {bits}")
        payload = bytes(buf[HEADER_BYTES:])
        want = payload_size(d, bits)
        if len(payload) != want:
            raise LengthError(f"payload has {len(payload)} bytes, header implies {want}")
        return cls(scheme, bits, alpha, gamma, d, payload)


def pack_indices(indices, bits: int) -> bytes:
    idx = np.asarray(indices, dtype=np.uint64)
    shifts = np.arange(bits, dtype=np.uint64)
    planes = ((idx[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)
    return np.packbits(planes.ravel(), bitorder="little").tobytes()


def unpack_indices(payload: bytes, bits: int, d: int) -> np.ndarray:
    if len(payload) < payload_size(d, bits):
        raise LengthError("payload too short")
    raw = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little", count=d * bits)
    weights = np.uint64(1) << np.arange(bits, dtype=np.uint64)
    return (raw.reshape(d, bits).astype(np.uint64) * weights).sum(axis=1).astype(np.int64)


def _check_grid(grid: QuantizationGrid, levels: int, alpha: float):
    if grid.levels != levels:
        raise ProtocolError(f"grid has {grid.levels} levels, config needs {levels}")
    tol = 1e-12 * max(1.0, alpha)
    if abs(grid.lo + alpha) > tol or abs(grid.hi - alpha) > tol:
        raise ProtocolError("grid range does not match the threshold")


def encode(g, config: QuantConfig, grid: QuantizationGrid, rng, gamma: float = 0.0) -> EncodedGradient:
    """Truncate, stochastically round and bit-pack a gradient vector."""
    g = np.asarray(g, dtype=np.float64).ravel()
    if g.size == 0:
        raise InvalidInputError("cannot encode an empty gradient")
    alpha = float(config.threshold)
    _check_grid(grid, config.levels, alpha)
    idx = stochastic_quantize(truncate(g, alpha), grid, rng)
    return EncodedGradient(config.scheme, config.bits, alpha, float(gamma), g.size, pack_indices(idx, config.bits))


def zero_marker(d: int, scheme: Scheme, bits: int) -> EncodedGradient:
    return EncodedGradient(Scheme.parse(scheme), bits, 0.0, 0.0, d, bytes(payload_size(d, bits)))


def decode_indices(e: EncodedGradient) -> np.ndarray:
    return unpack_indices(e.payload, e.bits, e.d)


def decode(e: EncodedGradient, grid: QuantizationGrid | None) -> np.ndarray:
    if len(e.payload) != payload_size(e.d, e.bits):
        raise LengthError("payload length does not match header")
    if e.is_zero_marker:
        return np.zeros(e.d)
    idx = decode_indices(e)
    if grid.levels != e.levels:
        raise ProtocolError(f"grid has {grid.levels} levels, payload uses {e.levels}")
    if idx.size and idx.max() > grid.levels:
        raise CorruptionError(f"index {idx.max()} exceeds level count {grid.levels}")
    return dequantize(idx, grid)


def write_file(path, e: EncodedGradient):
    with open(path, "wb") as f:
        f.write(e.to_bytes())


def read_file(path) -> EncodedGradient:
    with open(path, "rb") as f:
        return EncodedGradient.from_bytes(f.read())
