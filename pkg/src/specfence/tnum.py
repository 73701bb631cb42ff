"""Tristate numbers: a (value, mask) pair where set mask bits are unknown.

All operations take a ``bits`` width (64 by default) so the same code can be
checked exhaustively at small widths.
"""

from __future__ import annotations

from dataclasses import dataclass

from .isa import AluOp


@dataclass(frozen=True, slots=True)
class Tnum:
    value: int
    mask: int

    @property
    def is_const(self) -> bool:
        return self.mask == 0

    def is_valid(self) -> bool:
        return self.value & self.mask == 0

    def contains(self, v: int) -> bool:
        return tnum_contains(self, v)

    def __str__(self) -> str:
        return f"({self.value:#x}; {self.mask:#x})"


def full(bits: int = 64) -> int:
    return (1 << bits) - 1


def const(v: int, bits: int = 64) -> Tnum:
    return Tnum(v & full(bits), 0)


def unknown(bits: int = 64) -> Tnum:
    return Tnum(0, full(bits))


def tnum_contains(t: Tnum, v: int) -> bool:
    return (v & ~t.mask) == t.value


def tnum_range(lo: int, hi: int, bits: int = 64) -> Tnum:
    """Smallest tnum covering every value in [lo, hi]."""
    chi = lo ^ hi
    n = chi.bit_length()
    if n >= bits:
        return unknown(bits)
    delta = (1 << n) - 1
    return Tnum(lo & ~delta, delta)


def tnum_intersect(a: Tnum, b: Tnum) -> Tnum:
    """Meet of two tnums; only meaningful when they share a member."""
    v = a.value | b.value
    mu = a.mask & b.mask
    return Tnum(v & ~mu, mu)


def tnums_compatible(a: Tnum, b: Tnum) -> bool:
    return (a.value ^ b.value) & ~(a.mask | b.mask) == 0


def tnum_add(a: Tnum, b: Tnum, bits: int = 64) -> Tnum:
    w = full(bits)
    sm = (a.mask + b.mask) & w
    sv = (a.value + b.value) & w
    sigma = (sm + sv) & w
    chi = sigma ^ sv
    mu = (chi | a.mask | b.mask) & w
    return Tnum(sv & ~mu, mu)


def tnum_sub(a: Tnum, b: Tnum, bits: int = 64) -> Tnum:
    w = full(bits)
    dv = (a.value - b.value) & w
    alpha = (dv + a.mask) & w
    beta = (dv - b.mask) & w
    chi = alpha ^ beta
    mu = (chi | a.mask | b.mask) & w
    return Tnum(dv & ~mu, mu)


def tnum_and(a: Tnum, b: Tnum) -> Tnum:
    alpha = a.value | a.mask
    beta = b.value | b.mask
    v = a.value & b.value
    return Tnum(v, alpha & beta & ~v)


def tnum_or(a: Tnum, b: Tnum) -> Tnum:
    v = a.value | b.value
    mu = a.mask | b.mask
    return Tnum(v, mu & ~v)


def tnum_xor(a: Tnum, b: Tnum) -> Tnum:
    v = a.value ^ b.value
    mu = a.mask | b.mask
    return Tnum(v & ~mu, mu)


def tnum_lshift(a: Tnum, k: int, bits: int = 64) -> Tnum:
    w = full(bits)
    return Tnum((a.value << k) & w, (a.mask << k) & w)


def tnum_rshift(a: Tnum, k: int) -> Tnum:
    return Tnum(a.value >> k, a.mask >> k)


def tnum_arshift(a: Tnum, k: int, bits: int = 64) -> Tnum:
    w = full(bits)
    sign = 1 << (bits - 1)

    def sar(x: int) -> int:
        return (((x ^ sign) - sign) >> k) & w

    return Tnum(sar(a.value), sar(a.mask))


def tnum_mul(a: Tnum, b: Tnum, bits: int = 64) -> Tnum:
    w = full(bits)
    acc_v = (a.value * b.value) & w
    acc_m = Tnum(0, 0)
    while a.value or a.mask:
        if a.value & 1:
            acc_m = tnum_add(acc_m, Tnum(0, b.mask), bits)
        elif a.mask & 1:
            acc_m = tnum_add(acc_m, Tnum(0, b.value | b.mask), bits)
        a = tnum_rshift(a, 1)
        b = tnum_lshift(b, 1, bits)
    return tnum_add(Tnum(acc_v, 0), acc_m, bits)


def tnum_binop(op: AluOp, a: Tnum, b: Tnum, bits: int = 64) -> Tnum:
    """Sound abstract transfer for ``op`` over tnums of the given width.

    Shift amounts are taken modulo ``bits`` to match the concrete semantics;
    a shift by a non-constant amount yields a fully unknown result.
    """
    if op is AluOp.ADD:
        return tnum_add(a, b, bits)
    if op is AluOp.SUB:
        return tnum_sub(a, b, bits)
    if op is AluOp.AND:
        return tnum_and(a, b)
    if op is AluOp.OR:
        return tnum_or(a, b)
    if op is AluOp.XOR:
        return tnum_xor(a, b)
    if op is AluOp.MUL:
        return tnum_mul(a, b, bits)
    if not b.is_const:
        return unknown(bits)
    k = b.value & (bits - 1)
    if op is AluOp.LSH:
        return tnum_lshift(a, k, bits)
    if op is AluOp.RSH:
        return tnum_rshift(a, k)
    if op is AluOp.ARSH:
        return tnum_arshift(a, k, bits)
    raise ValueError(op)


def tnum_min_ge(t: Tnum, x: int, bits: int = 64) -> int | None:
    """Smallest member of ``t`` that is >= x, or None."""
    if x > full(bits):
        return None
    x = max(x, 0)
    if tnum_contains(t, x):
        return x
    # raise x at the lowest bit position i where x has 0, the tnum allows 1,
    # and the bits above i already agree with the tnum
    best = None
    for i in range(bits):
        bit = 1 << i
        if x & bit or not (t.value | t.mask) & bit:
            continue
        high = ~((bit << 1) - 1)
        if (x & ~t.mask & high) != (t.value & high):
            continue
        best = (x & high) | bit | (t.value & (bit - 1))
        break
    return best


def tnum_max_le(t: Tnum, x: int, bits: int = 64) -> int | None:
    """Largest member of ``t`` that is <= x, or None."""
    w = full(bits)
    if x < 0:
        return None
    x = min(x, w)
    comp = Tnum(~(t.value | t.mask) & w, t.mask)
    r = tnum_min_ge(comp, w - x, bits)
    return None if r is None else w - r
