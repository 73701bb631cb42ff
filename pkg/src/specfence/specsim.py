"""Concrete interpreter with scheduled transient execution and a CT-leakage oracle.

Memory layout (flat 64-bit addresses)::

    stack   [0x0e00, 0x1000)        fp = 0x1000
    ctx     [0x2000, 0x2000 + ctx_size)
    map m   [0x10000 + m * 0x1000, + padded_size)
    code    0x100000 + 8 * pc       (instruction fetch addresses)

Every other address is secret. Uninitialized stack bytes and registers start
with secret-derived contents, so reading them counts as touching secrets.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .isa import (
    FP,
    STACK_SIZE,
    U64,
    Opcode,
    Program,
    alu_eval,
    cond_eval,
)

STACK_TOP = 0x1000
STACK_BASE = STACK_TOP - STACK_SIZE
CTX_BASE = 0x2000
MAP_BASE = 0x10000
MAP_STRIDE = 0x1000
CODE_BASE = 0x100000
REG_SECRET_BASE = 0x7FFF_0000_0000
DEFAULT_MAX_STEPS = 100_000

FETCH = "F"
DATA = "D"


def map_base(map_id: int) -> int:
    return MAP_BASE + map_id * MAP_STRIDE


def fetch_addr(pc: int) -> int:
    return CODE_BASE + 8 * pc


def _mix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & U64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & U64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & U64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class SecretFilling:
    """Deterministic secret byte for every address, with optional overrides."""

    seed: int
    overrides: tuple[tuple[int, int], ...] = ()

    def __call__(self, addr: int) -> int:
        for a, v in self.overrides:
            if a == addr:
                return v
        return _mix64(self.seed * 0x100000001B3 ^ addr) & 0xFF

    def with_bytes(self, mapping: dict[int, int]) -> SecretFilling:
        return SecretFilling(self.seed, self.overrides + tuple(sorted(mapping.items())))


@dataclass(frozen=True)
class ProgramInput:
    ctx: bytes = b""
    maps: tuple[tuple[int, bytes], ...] = ()

    @classmethod
    def from_words(cls, words: list[int], maps: dict[int, bytes] | None = None) -> ProgramInput:
        ctx = b"".join((w & U64).to_bytes(8, "little") for w in words)
        return cls(ctx, tuple(sorted((maps or {}).items())))


@dataclass(frozen=True)
class Schedule:
    mispredict: frozenset[int] = frozenset()
    bypass: frozenset[int] = frozenset()
    window: int = 16

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if any(o < 0 for o in self.mispredict | self.bypass):
            raise ValueError("ordinals must be non-negative")

    def __str__(self) -> str:
        parts = []
        if self.mispredict:
            parts.append("mispredict=" + ",".join(map(str, sorted(self.mispredict))))
        if self.bypass:
            parts.append("bypass=" + ",".join(map(str, sorted(self.bypass))))
        parts.append(f"window={self.window}")
        return " ".join(parts)


EMPTY_SCHEDULE = Schedule()


def parse_schedule(text: str) -> Schedule:
    """Parse ``mispredict=0,2 bypass=1 window=16`` (all fields optional)."""
    fields: dict[str, str] = {}
    for tok in text.split():
        key, sep, val = tok.partition("=")
        if not sep or key not in ("mispredict", "bypass", "window") or key in fields:
            raise ValueError(f"bad schedule token {tok!r}")
        fields[key] = val

    def ordinals(s: str) -> frozenset[int]:
        return frozenset(int(x) for x in s.split(",") if x != "")

    return Schedule(
        ordinals(fields.get("mispredict", "")),
        ordinals(fields.get("bypass", "")),
        int(fields.get("window", "16")),
    )


@dataclass
class ExecTrace:
    leakage: list[tuple[str, int]]
    result: int | str  # r0 or "FAULT: reason"
    transient_insns: int = 0
    memory: tuple[bytes, ...] = ()

    @property
    def faulted(self) -> bool:
        return isinstance(self.result, str)

    def dump(self) -> str:
        return "\n".join(f"{k} {a:#x}" for k, a in self.leakage)


class _Fault(Exception):
    pass


class _Machine:
    def __init__(self, p: Program, inp: ProgramInput, filling: SecretFilling, sched: Schedule):
        self.p = p
        self.insns = p.instructions
        self.filling = filling
        self.sched = sched
        self.stack = bytearray(filling(STACK_BASE + i) for i in range(STACK_SIZE))
        ctx = bytearray(p.ctx_size)
        ctx[: len(inp.ctx)] = inp.ctx[: p.ctx_size]
        self.ctx = ctx
        given = dict(inp.maps)
        self.regions: list[tuple[int, int, bytearray, bool]] = [
            (STACK_BASE, STACK_TOP, self.stack, True),
            (CTX_BASE, CTX_BASE + p.ctx_size, ctx, False),
        ]
        self.maps = []
        for m in p.maps:
            buf = bytearray(m.padded_size)
            data = given.get(m.id, b"")[: m.value_size]
            buf[: len(data)] = data
            self.maps.append(buf)
            base = map_base(m.id)
            self.regions.append((base, base + m.padded_size, buf, True))
        self.regs = [int.from_bytes(bytes(filling(REG_SECRET_BASE + 8 * r + k) for k in range(8)), "little")
                     for r in range(11)]
        self.regs[1] = CTX_BASE
        self.regs[FP] = STACK_TOP
        self.leak: list[tuple[str, int]] = []
        self.branch_ord = 0
        self.store_ord = 0
        self.transient = 0

    # memory -------------------------------------------------------------

    def _region(self, addr: int, size: int):
        for lo, hi, buf, writable in self.regions:
            if lo <= addr and addr + size <= hi:
                return buf, addr - lo, writable
        return None

    def _byte(self, addr: int, shadow: dict[int, int]) -> int:
        if addr in shadow:
            return shadow[addr]
        for lo, hi, buf, _ in self.regions:
            if lo <= addr < hi:
                return buf[addr - lo]
        return self.filling(addr)

    def load(self, addr: int, size: int, shadow: dict[int, int] | None) -> int:
        self.leak.append((DATA, addr))
        if shadow is None:
            r = self._region(addr, size)
            if r is None:
                raise _Fault(f"load of {size} bytes at {addr:#x} outside any region")
            buf, off, _ = r
            return int.from_bytes(buf[off:off + size], "little")
        return int.from_bytes(bytes(self._byte((addr + k) & U64, shadow) for k in range(size)), "little")

    def is_stack(self, addr: int, size: int) -> bool:
        return STACK_BASE <= addr and addr + size <= STACK_TOP

    # execution ----------------------------------------------------------

    def _alu_operand(self, insn, regs):
        return insn.imm & U64 if insn.opcode in (Opcode.ALU_IMM, Opcode.JCOND_IMM) else regs[insn.src]

    def run(self, max_steps: int) -> ExecTrace:
        regs = self.regs
        insns = self.insns
        pc = 0
        steps = 0
        try:
            while True:
                steps += 1
                if steps > max_steps:
                    raise _Fault("step limit exceeded")
                insn = insns[pc]
                self.leak.append((FETCH, fetch_addr(pc)))
                op = insn.opcode
                nxt = pc + 1
                if op is Opcode.EXIT:
                    break
                if op is Opcode.MOV_IMM:
                    regs[insn.dst] = insn.imm & U64
                elif op is Opcode.MOV_REG:
                    regs[insn.dst] = regs[insn.src]
                elif op is Opcode.ALU_IMM or op is Opcode.ALU_REG:
                    regs[insn.dst] = alu_eval(insn.alu_op, regs[insn.dst], self._alu_operand(insn, regs))
                elif op is Opcode.MAP_PTR:
                    regs[insn.dst] = map_base(insn.map_id)
                elif op is Opcode.LOAD:
                    regs[insn.dst] = self.load((regs[insn.src] + insn.off) & U64, insn.size, None)
                elif op is Opcode.STORE_REG or op is Opcode.STORE_IMM:
                    self._arch_store(insn, regs, nxt)
                elif op is Opcode.JMP:
                    nxt = pc + 1 + insn.off
                elif op is Opcode.JCOND_IMM or op is Opcode.JCOND_REG:
                    taken = cond_eval(insn.cond, regs[insn.dst], self._alu_operand(insn, regs))
                    target = pc + 1 + insn.off
                    ordinal = self.branch_ord
                    self.branch_ord += 1
                    if ordinal in self.sched.mispredict:
                        self._transient_run(pc + 1 if taken else target, list(regs), {})
                    nxt = target if taken else pc + 1
                # barriers are architectural no-ops
                pc = nxt
            result: int | str = regs[0]
        except _Fault as e:
            result = f"FAULT: {e}"
        return ExecTrace(self.leak, result, self.transient, tuple(bytes(m) for m in self.maps))

    def _arch_store(self, insn, regs, nxt: int) -> None:
        addr = (regs[insn.dst] + insn.off) & U64
        size = insn.size
        val = regs[insn.src] if insn.opcode is Opcode.STORE_REG else insn.imm & U64
        self.leak.append((DATA, addr))
        r = self._region(addr, size)
        if r is None or not r[2]:
            raise _Fault(f"store of {size} bytes at {addr:#x} outside writable memory")
        buf, off, _ = r
        bypass = False
        if self.is_stack(addr, size):
            bypass = self.store_ord in self.sched.bypass
            self.store_ord += 1
        old = bytes(buf[off:off + size])
        buf[off:off + size] = (val & ((1 << (8 * size)) - 1)).to_bytes(size, "little")
        if bypass:
            self._transient_run(nxt, list(regs), {addr + k: old[k] for k in range(size)})

    def _transient_run(self, pc: int, regs: list[int], shadow: dict[int, int]) -> None:
        """Execute up to ``window`` instructions transiently, then squash."""
        insns = self.insns
        n = len(insns)
        for _ in range(self.sched.window):
            if not 0 <= pc < n:
                break
            insn = insns[pc]
            self.leak.append((FETCH, fetch_addr(pc)))
            self.transient += 1
            op = insn.opcode
            if op is Opcode.EXIT or op is Opcode.NOSPEC_V1 or op is Opcode.NOSPEC_V4:
                break
            nxt = pc + 1
            if op is Opcode.MOV_IMM:
                regs[insn.dst] = insn.imm & U64
            elif op is Opcode.MOV_REG:
                regs[insn.dst] = regs[insn.src]
            elif op is Opcode.ALU_IMM or op is Opcode.ALU_REG:
                regs[insn.dst] = alu_eval(insn.alu_op, regs[insn.dst], self._alu_operand(insn, regs))
            elif op is Opcode.MAP_PTR:
                regs[insn.dst] = map_base(insn.map_id)
            elif op is Opcode.LOAD:
                regs[insn.dst] = self.load((regs[insn.src] + insn.off) & U64, insn.size, shadow)
            elif op is Opcode.STORE_REG or op is Opcode.STORE_IMM:
                addr = (regs[insn.dst] + insn.off) & U64
                val = regs[insn.src] if op is Opcode.STORE_REG else insn.imm & U64
                self.leak.append((DATA, addr))
                skip = False
                if self.is_stack(addr, insn.size):
                    skip = self.store_ord in self.sched.bypass
                    self.store_ord += 1
                if not skip:
                    for k in range(insn.size):
                        shadow[(addr + k) & U64] = (val >> (8 * k)) & 0xFF
            elif op is Opcode.JMP:
                nxt = pc + 1 + insn.off
            else:
                taken = cond_eval(insn.cond, regs[insn.dst], self._alu_operand(insn, regs))
                ordinal = self.branch_ord
                self.branch_ord += 1
                if ordinal in self.sched.mispredict:
                    taken = not taken
                nxt = pc + 1 + insn.off if taken else pc + 1
            pc = nxt


def run_concrete(
    p: Program,
    inp: ProgramInput | None = None,
    filling: SecretFilling | None = None,
    sched: Schedule = EMPTY_SCHEDULE,
    max_steps: int = DEFAULT_MAX_STEPS,
) -> ExecTrace:
    """Run ``p`` on concrete inputs under a misprediction/bypass schedule."""
    m = _Machine(p, inp or ProgramInput(), filling or SecretFilling(0), sched)
    return m.run(max_steps)


def is_secret_address(p: Program, addr: int) -> bool:
    if STACK_BASE <= addr < STACK_TOP or CTX_BASE <= addr < CTX_BASE + p.ctx_size:
        return False
    return not any(map_base(m.id) <= addr < map_base(m.id) + m.padded_size for m in p.maps)


def secret_accesses(p: Program, trace: ExecTrace) -> list[int]:
    return [a for k, a in trace.leakage if k == DATA and is_secret_address(p, a)]


# ---------------------------------------------------------------------------
# schedules and the differential check


def count_branches(p: Program) -> int:
    return sum(i.opcode in (Opcode.JCOND_IMM, Opcode.JCOND_REG) for i in p.instructions)


def count_stores(p: Program) -> int:
    return sum(i.opcode in (Opcode.STORE_REG, Opcode.STORE_IMM) for i in p.instructions)


def enumerate_schedules(
    p: Program, max_branches: int, max_stores: int, max_window: int, cap: int = 4096
) -> list[Schedule]:
    """Every mispredict/bypass assignment over the first ordinals, windows {1, max_window}."""
    nb = min(max_branches, count_branches(p))
    ns = min(max_stores, count_stores(p))
    windows = sorted({1, max_window})
    total = (1 << nb) * (1 << ns) * len(windows)
    if total > cap:
        raise ValueError(f"{total} schedules exceed the cap of {cap}")
    out = []
    for w in windows:
        for mbits in range(1 << nb):
            mis = frozenset(i for i in range(nb) if mbits >> i & 1)
            for sbits in range(1 << ns):
                byp = frozenset(i for i in range(ns) if sbits >> i & 1)
                out.append(Schedule(mis, byp, w))
    return out


@dataclass(frozen=True)
class NoLeak:
    runs: int = 0

    def __bool__(self) -> bool:
        return False


@dataclass(frozen=True)
class Leak:
    schedule: Schedule
    input: ProgramInput
    fillings: tuple[SecretFilling, SecretFilling]
    traces: tuple[ExecTrace, ExecTrace] = field(compare=False, repr=False)

    def __bool__(self) -> bool:
        return True

    def first_difference(self) -> int:
        a, b = (t.leakage for t in self.traces)
        for i, (x, y) in enumerate(itertools.zip_longest(a, b)):
            if x != y:
                return i
        return -1


LeakVerdict = NoLeak | Leak


def differential_leak_check(
    p: Program,
    inputs: list[ProgramInput],
    schedules: list[Schedule],
    fillings: list[SecretFilling],
    max_steps: int = DEFAULT_MAX_STEPS,
) -> LeakVerdict:
    """Look for an (input, schedule) whose leakage trace depends on secrets."""
    if len(fillings) < 2:
        raise ValueError("need at least two secret fillings")
    runs = 0
    for sched in schedules:
        for inp in inputs:
            ref = run_concrete(p, inp, fillings[0], sched, max_steps)
            runs += 1
            for f in fillings[1:]:
                other = run_concrete(p, inp, f, sched, max_steps)
                runs += 1
                if other.leakage != ref.leakage:
                    return Leak(sched, inp, (fillings[0], f), (ref, other))
    return NoLeak(runs)

