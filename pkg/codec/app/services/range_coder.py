"""Carry-propagating range coder over 16-bit CDF tables.

The encoder keeps a 33-bit ``low`` and a 32-bit ``range``; bytes are
emitted through a one-byte cache so carries can ripple into pending 0xFF
bytes. The decoder mirrors it with a 32-bit ``code`` register.
"""
from typing import List, Sequence, Tuple

import structlog

from app.core.exceptions import RangeCoderError
from app.services.cdf import PRECISION_BITS, TOTAL, CdfTable

logger = structlog.get_logger(__name__)

TOP = 1 << 24
MASK32 = (1 << 32) - 1
FLUSH_BYTES = 5


class RangeEncoder:
    def __init__(self) -> None:
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.output = bytearray()

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.output.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & MASK32

    def encode(self, cum: int, freq: int) -> None:
        r = self.range >> PRECISION_BITS
        self.low += r * cum
        self.range = r * freq
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(FLUSH_BYTES):
            self._shift_low()
        return bytes(self.output)


class RangeDecoder:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.position = 0
        self.range = MASK32
        self.code = 0
        for _ in range(FLUSH_BYTES):
            self.code = ((self.code << 8) | self._next_byte()) & MASK32

    def _next_byte(self) -> int:
        if self.position >= len(self.data):
            raise RangeCoderError(
                "Truncated range-coded stream", details={"bytes": len(self.data)}
            )
        byte = self.data[self.position]
        self.position += 1
        return byte

    def decode(self, table: CdfTable) -> int:
        r = self.range >> PRECISION_BITS
        value = self.code // r
        if value >= TOTAL:
            raise RangeCoderError("Corrupt range-coded stream", details={"position": self.position})
        symbol = table.lookup(value)
        cum, freq = table.interval(symbol)
        self.code -= r * cum
        self.range = r * freq
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next_byte()) & MASK32
            self.range <<= 8
        return symbol


def clamp_symbols(symbols: Sequence[int], tables: Sequence[CdfTable]) -> Tuple[List[int], int]:
    """Clamp every symbol into its table's range; returns the symbols and the clamp count."""
    if len(symbols) != len(tables):
        raise RangeCoderError(
            "Symbol and table counts differ",
            details={"symbols": len(symbols), "tables": len(tables)},
        )
    clamped = [table.clamp(s) for s, table in zip(symbols, tables)]
    changed = sum(1 for a, b in zip(symbols, clamped) if int(a) != b)
    return clamped, changed


def rc_encode(symbols: Sequence[int], tables: Sequence[CdfTable], stream: str = "") -> bytes:
    """Code one symbol per table and flush.

    Registers are 32 bits wide, with one spare bit of ``low`` holding the
    carry; the one-byte cache plays the part a 64-bit ``low`` plays in wider
    coders. With 16-bit tables ``range >> 16`` never drops below 2**8, so
    every symbol interval stays non-empty. ``finish`` writes five bytes,
    enough for the decoder to prime its 32-bit code register and stop
    exactly at the end of the stream.
    """
    clamped, changed = clamp_symbols(symbols, tables)
    if changed:
        logger.warning("symbols_clamped", stream=stream, count=changed, total=len(clamped))

    encoder = RangeEncoder()
    for symbol, table in zip(clamped, tables):
        encoder.encode(*table.interval(symbol))
    return encoder.finish()


def rc_decode(data: bytes, tables: Sequence[CdfTable], n: int) -> List[int]:
    if n != len(tables):
        raise RangeCoderError(
            "Symbol count does not match the number of tables",
            details={"n": n, "tables": len(tables)},
        )
    decoder = RangeDecoder(data)
    return [decoder.decode(table) for table in tables]
