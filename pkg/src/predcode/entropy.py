"""Adaptive order-0 frequency model and a 32-bit integer arithmetic coder.

The coder follows the classic low/high/pending-bits scheme: after every
symbol the interval is renormalized so that ``high - low + 1 > 2**30``, which
keeps the model total (at most 2**16) well inside the available precision.
Bits are packed MSB first. This module is the reference implementation; the
compiled kernels reproduce it bit for bit.
"""

from __future__ import annotations

import numpy as np

ALPHABET = 511  # residuals -255..255
INCREMENT = 24
RESCALE_LIMIT = 1 << 16

_BITS = 32
_TOP = (1 << _BITS) - 1
_HALF = 1 << (_BITS - 1)
_QUARTER = 1 << (_BITS - 2)


class CoderError(ArithmeticError):
    """Internal arithmetic-coder invariant violated."""


class ResidualModel:
    """Adaptive symbol counts kept in a Fenwick tree.

    Every count starts at 1; coding symbol ``s`` adds ``increment`` to its
    count, and whenever the total exceeds ``limit`` all counts are halved
    (never below 1).
    """

    def __init__(self, alphabet: int = ALPHABET, increment: int = INCREMENT, limit: int = RESCALE_LIMIT):
        if alphabet < 1:
            raise ValueError("alphabet must be non-empty")
        if alphabet + increment > limit:
            raise ValueError("rescale limit too small for alphabet")
        self.alphabet = alphabet
        self.increment = increment
        self.limit = limit
        self.counts = [1] * alphabet
        self.total = alphabet
        self._tree = [0] * (alphabet + 1)
        self._rebuild()

    def _rebuild(self) -> None:
        tree = [0] * (self.alphabet + 1)
        for i, c in enumerate(self.counts, start=1):
            tree[i] += c
            j = i + (i & -i)
            if j <= self.alphabet:
                tree[j] += tree[i]
        self._tree = tree

    def cumulative(self, symbol: int) -> int:
        """Sum of counts of all symbols below ``symbol``."""
        total = 0
        i = symbol
        tree = self._tree
        while i > 0:
            total += tree[i]
            i -= i & -i
        return total

    def interval(self, symbol: int) -> tuple[int, int]:
        lo = self.cumulative(symbol)
        return lo, lo + self.counts[symbol]

    def find(self, target: int) -> int:
        """Symbol whose cumulative interval contains ``target``."""
        pos = 0
        step = 1 << self.alphabet.bit_length()
        tree = self._tree
        while step:
            nxt = pos + step
            if nxt <= self.alphabet and tree[nxt] <= target:
                pos = nxt
                target -= tree[nxt]
            step >>= 1
        return pos

    def update(self, symbol: int) -> None:
        self.counts[symbol] += self.increment
        self.total += self.increment
        if self.total > self.limit:
            self.counts = [max(1, c >> 1) for c in self.counts]
            self.total = sum(self.counts)
            self._rebuild()
            return
        i = symbol + 1
        tree = self._tree
        while i <= self.alphabet:
            tree[i] += self.increment
            i += i & -i

    def state(self) -> tuple:
        return tuple(self.counts)


class ArithmeticEncoder:
    def __init__(self):
        self.low = 0
        self.high = _TOP
        self.pending = 0
        self._bits: list[int] = []

    def _emit(self, bit: int) -> None:
        self._bits.append(bit)
        if self.pending:
            self._bits.extend([bit ^ 1] * self.pending)
            self.pending = 0

    def encode_symbol(self, model: ResidualModel, symbol: int) -> None:
        if not 0 <= symbol < model.alphabet:
            raise ValueError(f"symbol {symbol} outside alphabet of {model.alphabet}")
        lo, hi = model.interval(symbol)
        total = model.total
        span = self.high - self.low + 1
        self.high = self.low + span * hi // total - 1
        self.low = self.low + span * lo // total
        if self.low > self.high:
            raise CoderError("empty coding interval")
        while True:
            if self.high < _HALF:
                self._emit(0)
            elif self.low >= _HALF:
                self._emit(1)
                self.low -= _HALF
                self.high -= _HALF
            elif self.low >= _QUARTER and self.high < _HALF + _QUARTER:
                self.pending += 1
                self.low -= _QUARTER
                self.high -= _QUARTER
            else:
                break
            self.low <<= 1
            self.high = (self.high << 1) | 1
        model.update(symbol)

    def flush(self) -> bytes:
        """Terminate the code and return all bytes written so far."""
        self.pending += 1
        self._emit(0 if self.low < _QUARTER else 1)
        bits = self._bits
        bits.extend([0] * (-len(bits) % 8))
        packed = np.packbits(np.array(bits, dtype=np.uint8)) if bits else np.zeros(0, np.uint8)
        self._bits = []
        return packed.tobytes()


class ArithmeticDecoder:
    def __init__(self, data: bytes):
        self._bits = np.unpackbits(np.frombuffer(bytes(data), dtype=np.uint8)).tolist()
        self._pos = 0
        self.overrun = 0  # bits consumed past the end of the data
        self.low = 0
        self.high = _TOP
        self.code = 0
        for _ in range(_BITS):
            self.code = (self.code << 1) | self._next_bit()

    def _next_bit(self) -> int:
        if self._pos < len(self._bits):
            bit = self._bits[self._pos]
            self._pos += 1
            return bit
        self.overrun += 1
        return 0

    def decode_symbol(self, model: ResidualModel) -> int:
        total = model.total
        span = self.high - self.low + 1
        if not self.low <= self.code <= self.high:
            raise CoderError("code value outside the coding interval")
        target = ((self.code - self.low + 1) * total - 1) // span
        if not 0 <= target < total:
            raise CoderError("code value outside the coding interval")
        symbol = model.find(target)
        lo, hi = model.interval(symbol)
        self.high = self.low + span * hi // total - 1
        self.low = self.low + span * lo // total
        while True:
            if self.high < _HALF:
                pass
            elif self.low >= _HALF:
                self.low -= _HALF
                self.high -= _HALF
                self.code -= _HALF
            elif self.low >= _QUARTER and self.high < _HALF + _QUARTER:
                self.low -= _QUARTER
                self.high -= _QUARTER
                self.code -= _QUARTER
            else:
                break
            self.low <<= 1
            self.high = (self.high << 1) | 1
            self.code = (self.code << 1) | self._next_bit()
        model.update(symbol)
        return symbol


def encode_symbols(symbols, alphabet: int = ALPHABET, increment: int = INCREMENT, limit: int = RESCALE_LIMIT) -> bytes:
    model = ResidualModel(alphabet, increment, limit)
    enc = ArithmeticEncoder()
    for s in np.asarray(symbols, dtype=np.int64).tolist():
        enc.encode_symbol(model, s)
    return enc.flush()


def decode_symbols(
    data: bytes, count: int, alphabet: int = ALPHABET, increment: int = INCREMENT, limit: int = RESCALE_LIMIT
) -> tuple[np.ndarray, int]:
    """Decode ``count`` symbols; also returns the number of bits read past the end."""
    model = ResidualModel(alphabet, increment, limit)
    dec = ArithmeticDecoder(data)
    out = np.empty(count, dtype=np.int32)
    for i in range(count):
        out[i] = dec.decode_symbol(model)
    return out, dec.overrun
