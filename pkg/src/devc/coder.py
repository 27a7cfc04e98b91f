"""Lossless binary range coder and the sign quantizer it serves.

The coder is a classic range coder with 64-bit state, byte-wise
renormalization, carry propagation through a cache/pending-byte scheme, and
an 8-byte terminating flush.  Probabilities are quantized to 16-bit fixed
point on both sides, so encoder and decoder walk identical integer state
machines and the round trip is exact for any admissible probability
sequence.

Symbols are {-1, +1}.  The cumulative layout assigns [0, 65536 - p16) to -1
and [65536 - p16, 65536) to +1, where p16 is the quantized probability of +1.

A Payload wraps the coder bytes with a fixed 8-byte header:
  u32 big-endian symbol count, u32 big-endian CRC-32 of the coder bytes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .errors import ChecksumError, NumericError, ProtocolError

_MASK = (1 << 64) - 1
_TOP = 1 << 56
_SHIFT_LOW = 56
_LOW_MASK = _TOP - 1
_PROB_ONE = 1 << 16

ProbabilitySource = Union[Sequence[float], Callable[[list], float]]


def quantize_probability(p: float) -> int:
    """Map a probability of +1 to the 16-bit integer grid, clamped so both
    symbols stay codable."""
    if not 0.0 <= p <= 1.0:
        raise NumericError(f"probability {p!r} outside [0, 1]")
    q = int(p * 65536.0 + 0.5)
    if q < 1:
        return 1
    if q > 65535:
        return 65535
    return q


def _quantize_probability_array(probs: np.ndarray) -> list:
    if probs.size and (not np.all(np.isfinite(probs)) or probs.min() < 0.0 or probs.max() > 1.0):
        raise NumericError("probabilities must be finite and within [0, 1]")
    q = np.floor(probs * 65536.0 + 0.5).astype(np.int64)
    return np.clip(q, 1, 65535).tolist()


class RangeEncoder:
    """Streaming encoder; call encode() per symbol, then finish()."""

    def __init__(self):
        self._low = 0
        self._range = _MASK
        self._cache = -1
        self._pending = 0
        self._out = bytearray()
        self._finished = False

    def _shift_low(self):
        low = self._low
        if low < (0xFF << _SHIFT_LOW) or low > _MASK:
            carry = low >> 64
            out = self._out
            if self._cache >= 0:
                out.append((self._cache + carry) & 0xFF)
            if self._pending:
                filler = (0xFF + carry) & 0xFF
                out.extend(bytes([filler]) * self._pending)
                self._pending = 0
            self._cache = (low >> _SHIFT_LOW) & 0xFF
        else:
            self._pending += 1
        self._low = (low & _LOW_MASK) << 8

    def encode(self, symbol: int, p_plus: float) -> None:
        self.encode_quantized(symbol, quantize_probability(p_plus))

    def encode_quantized(self, symbol: int, p16: int) -> None:
        if self._finished:
            raise ProtocolError("encoder already finished")
        r = self._range >> 16
        if symbol == 1:
            self._low += r * (_PROB_ONE - p16)
            self._range = r * p16
        elif symbol == -1:
            self._range = r * (_PROB_ONE - p16)
        else:
            raise NumericError(f"symbol {symbol!r} not in {{-1, +1}}")
        while self._range < _TOP:
            self._shift_low()
            self._range <<= 8

    def encode_many(self, symbols: Sequence[int], p16s: Sequence[int]) -> None:
        """Hot path: encode a pre-quantized batch with locals only."""
        if self._finished:
            raise ProtocolError("encoder already finished")
        low = self._low
        range_ = self._range
        cache = self._cache
        pending = self._pending
        out = self._out
        append = out.append
        for symbol, p16 in zip(symbols, p16s):
            r = range_ >> 16
            if symbol == 1:
                low += r * (_PROB_ONE - p16)
                range_ = r * p16
            elif symbol == -1:
                range_ = r * (_PROB_ONE - p16)
            else:
                raise NumericError(f"symbol {symbol!r} not in {{-1, +1}}")
            while range_ < _TOP:
                if low < 0xFF00000000000000 or low > _MASK:
                    carry = low >> 64
                    if cache >= 0:
                        append((cache + carry) & 0xFF)
                    if pending:
                        filler = (0xFF + carry) & 0xFF
                        out.extend(bytes([filler]) * pending)
                        pending = 0
                    cache = (low >> 56) & 0xFF
                else:
                    pending += 1
                low = (low & _LOW_MASK) << 8
                range_ <<= 8
        self._low = low
        self._range = range_
        self._cache = cache
        self._pending = pending

    def finish(self) -> bytes:
        if self._finished:
            raise ProtocolError("encoder already finished")
        self._finished = True
        for _ in range(9):
            self._shift_low()
        return bytes(self._out)


class RangeDecoder:
    """Streaming decoder over the coder bytes of one payload."""

    def __init__(self, data: bytes):
        if len(data) < 8:
            raise ProtocolError("coder stream shorter than its 8-byte flush")
        self._data = data
        self._pos = 8
        self._range = _MASK
        code = 0
        for b in data[:8]:
            code = (code << 8) | b
        self._code = code

    def decode(self, p_plus: float) -> int:
        return self.decode_quantized(quantize_probability(p_plus))

    def decode_quantized(self, p16: int) -> int:
        r = self._range >> 16
        split = r * (_PROB_ONE - p16)
        if self._code >= split:
            symbol = 1
            self._code -= split
            self._range = r * p16
        else:
            symbol = -1
            self._range = split
        data = self._data
        pos = self._pos
        end = len(data)
        while self._range < _TOP:
            if pos >= end:
                raise ProtocolError("coder stream exhausted before all symbols")
            self._code = ((self._code << 8) | data[pos]) & _MASK
            pos += 1
            self._range <<= 8
        self._pos = pos
        return symbol

    def decode_many(self, p16s: Sequence[int]) -> list:
        """Hot path: decode a pre-quantized batch with locals only."""
        code = self._code
        range_ = self._range
        data = self._data
        pos = self._pos
        end = len(data)
        symbols = []
        append = symbols.append
        for p16 in p16s:
            r = range_ >> 16
            split = r * (_PROB_ONE - p16)
            if code >= split:
                append(1)
                code -= split
                range_ = r * p16
            else:
                append(-1)
                range_ = split
            while range_ < _TOP:
                if pos >= end:
                    raise ProtocolError("coder stream exhausted before all symbols")
                code = ((code << 8) | data[pos]) & _MASK
                pos += 1
                range_ <<= 8
        self._code = code
        self._range = range_
        self._pos = pos
        return symbols


@dataclass(frozen=True)
class Payload:
    """One entropy-coded symbol stream with its framing header."""

    symbol_count: int
    data: bytes

    HEADER_BYTES = 8

    def __post_init__(self):
        if not 0 <= self.symbol_count < 1 << 32:
            raise ProtocolError(f"symbol count {self.symbol_count} outside u32 range")

    def to_bytes(self) -> bytes:
        return struct.pack(">II", self.symbol_count, zlib.crc32(self.data)) + self.data

    @property
    def size_bytes(self) -> int:
        return self.HEADER_BYTES + len(self.data)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Payload":
        if len(raw) < cls.HEADER_BYTES:
            raise ProtocolError("payload shorter than its 8-byte header")
        symbol_count, crc = struct.unpack(">II", raw[:8])
        data = raw[8:]
        if zlib.crc32(data) != crc:
            raise ChecksumError("payload checksum mismatch")
        return cls(symbol_count=symbol_count, data=data)


def range_encode(symbols: Sequence[int], probabilities: Sequence[float]) -> Payload:
    """Encode a ±1 symbol sequence under per-symbol probabilities of +1."""
    syms = np.asarray(symbols)
    if syms.ndim != 1:
        syms = syms.reshape(-1)
    probs = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    if syms.size != probs.size:
        raise ProtocolError(
            f"{syms.size} symbols but {probs.size} probabilities"
        )
    encoder = RangeEncoder()
    encoder.encode_many(syms.tolist(), _quantize_probability_array(probs))
    return Payload(symbol_count=int(syms.size), data=encoder.finish())


def range_decode(
    payload: Payload,
    probability_source: ProbabilitySource,
    symbol_count: int | None = None,
) -> np.ndarray:
    """Decode a payload back to its ±1 symbols.

    probability_source is either an array of per-symbol probabilities of +1
    or a callable receiving the decoded prefix (list of ints) and returning
    the next probability.
    """
    n = payload.symbol_count if symbol_count is None else symbol_count
    if n != payload.symbol_count:
        raise ProtocolError(
            f"expected {n} symbols but payload declares {payload.symbol_count}"
        )
    decoder = RangeDecoder(payload.data)
    if callable(probability_source):
        decoded: list = []
        for _ in range(n):
            decoded.append(decoder.decode(float(probability_source(decoded))))
        return np.asarray(decoded, dtype=np.int8)
    probs = np.asarray(probability_source, dtype=np.float64).reshape(-1)
    if probs.size != n:
        raise ProtocolError(f"{probs.size} probabilities for {n} symbols")
    symbols = decoder.decode_many(_quantize_probability_array(probs))
    return np.asarray(symbols, dtype=np.int8)


def quantize(values, mu, sigma):
    """Binary sign quantizer: +1 where y >= mu, else -1 (ties go to +1)."""
    y = np.asarray(values)
    m = np.asarray(mu)
    s = np.asarray(sigma)
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(m))):
        raise NumericError("quantize requires finite values and means")
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise NumericError("quantize requires finite positive scales")
    out = np.where(y >= m, np.int8(1), np.int8(-1))
    if out.ndim == 0:
        return int(out)
    return out


def dequantize(symbols, mu, sigma):
    """Reconstruction for the sign quantizer: mu + sigma * b."""
    b = np.asarray(symbols)
    m = np.asarray(mu)
    s = np.asarray(sigma)
    if not np.all((b == 1) | (b == -1)):
        raise NumericError("symbols must be ±1")
    if not np.all(np.isfinite(m)):
        raise NumericError("dequantize requires finite means")
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise NumericError("dequantize requires finite positive scales")
    out = m + s * b
    if np.ndim(out) == 0:
        return float(out)
    return out
