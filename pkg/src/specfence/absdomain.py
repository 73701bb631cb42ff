"""Abstract machine state and the single-step abstract transfer function."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

from . import tnum as tn
from .isa import (
    FP,
    STACK_SIZE,
    U64,
    AluOp,
    Cond,
    Instruction,
    Opcode,
    Program,
    to_signed,
)
from .tnum import Tnum

NUM_SLOTS = STACK_SIZE // 8
SIGN = 1 << 63


# ---------------------------------------------------------------------------
# scalars


@dataclass(frozen=True, slots=True)
class ScalarInfo:
    tnum: Tnum
    umin: int
    umax: int

    @classmethod
    def const(cls, v: int) -> ScalarInfo:
        v &= U64
        return cls(Tnum(v, 0), v, v)

    @classmethod
    def unknown(cls) -> ScalarInfo:
        return cls(tn.unknown(), 0, U64)

    @classmethod
    def sized(cls, nbytes: int) -> ScalarInfo:
        hi = (1 << (8 * nbytes)) - 1
        return cls(Tnum(0, hi), 0, hi)

    @property
    def is_const(self) -> bool:
        return self.tnum.is_const

    @property
    def value(self) -> int:
        return self.tnum.value

    def contains(self, v: int) -> bool:
        return self.umin <= v <= self.umax and tn.tnum_contains(self.tnum, v)

    def srange(self) -> tuple[int, int]:
        if self.umax < SIGN or self.umin >= SIGN:
            return to_signed(self.umin), to_signed(self.umax)
        return -SIGN, SIGN - 1

    def __str__(self) -> str:
        if self.is_const:
            return f"{self.value:#x}"
        return f"[{self.umin:#x}, {self.umax:#x}] {self.tnum}"


def normalize(t: Tnum, umin: int, umax: int) -> ScalarInfo | None:
    """Tighten a (tnum, range) pair so both bounds are members; None if empty."""
    umin = max(umin, t.value)
    umax = min(umax, t.value | t.mask)
    if umin > umax:
        return None
    lo = tn.tnum_min_ge(t, umin)
    if lo is None or lo > umax:
        return None
    hi = tn.tnum_max_le(t, umax)
    t = tn.tnum_intersect(t, tn.tnum_range(lo, hi))
    return ScalarInfo(t, lo, hi)


def _must(t: Tnum, lo: int, hi: int) -> ScalarInfo:
    s = normalize(t, lo, hi)
    assert s is not None, "sound transfer produced an empty scalar"
    return s


def scalar_alu(op: AluOp, a: ScalarInfo, b: ScalarInfo) -> ScalarInfo:
    t = tn.tnum_binop(op, a.tnum, b.tnum)
    lo, hi = 0, U64
    if op is AluOp.ADD:
        if a.umax + b.umax <= U64:
            lo, hi = a.umin + b.umin, a.umax + b.umax
    elif op is AluOp.SUB:
        if a.umin >= b.umax:
            lo, hi = a.umin - b.umax, a.umax - b.umin
    elif op is AluOp.MUL:
        if a.umax * b.umax <= U64:
            lo, hi = a.umin * b.umin, a.umax * b.umax
    elif op is AluOp.AND:
        hi = min(a.umax, b.umax)
    elif op is AluOp.OR:
        lo = max(a.umin, b.umin)
    elif op in (AluOp.LSH, AluOp.RSH) and b.is_const:
        k = b.value & 63
        if op is AluOp.RSH:
            lo, hi = a.umin >> k, a.umax >> k
        elif a.umax << k <= U64:
            lo, hi = a.umin << k, a.umax << k
    return _must(t, lo, hi)


# ---------------------------------------------------------------------------
# branch refinement

_NEGATE = {
    Cond.EQ: Cond.NE, Cond.NE: Cond.EQ,
    Cond.LT: Cond.GE, Cond.GE: Cond.LT,
    Cond.LE: Cond.GT, Cond.GT: Cond.LE,
    Cond.SLT: Cond.SGE, Cond.SGE: Cond.SLT,
    Cond.SLE: Cond.SGT, Cond.SGT: Cond.SLE,
}
_SWAP = {Cond.GT: Cond.LT, Cond.GE: Cond.LE, Cond.SGT: Cond.SLT, Cond.SGE: Cond.SLE}


def _with_range(s: ScalarInfo, lo: int, hi: int) -> ScalarInfo | None:
    return normalize(s.tnum, max(s.umin, lo), min(s.umax, hi))


def _with_srange(s: ScalarInfo, smin: int, smax: int) -> ScalarInfo | None:
    """Intersect with the values whose signed view lies in [smin, smax]."""
    if smin > smax:
        return None
    parts = []
    if smax >= 0:
        parts.append((max(s.umin, max(smin, 0)), min(s.umax, smax)))
    if smin < 0:
        parts.append((max(s.umin, smin + (1 << 64)), min(s.umax, min(smax, -1) + (1 << 64))))
    parts = [(lo, hi) for lo, hi in parts if lo <= hi]
    if not parts:
        return None
    return normalize(s.tnum, min(lo for lo, _ in parts), max(hi for _, hi in parts))


def _refine_holds(cond: Cond, a: ScalarInfo, b: ScalarInfo) -> tuple[ScalarInfo, ScalarInfo] | None:
    if cond in _SWAP:
        r = _refine_holds(_SWAP[cond], b, a)
        return None if r is None else (r[1], r[0])
    if cond is Cond.EQ:
        if not tn.tnums_compatible(a.tnum, b.tnum):
            return None
        s = normalize(tn.tnum_intersect(a.tnum, b.tnum), max(a.umin, b.umin), min(a.umax, b.umax))
        return None if s is None else (s, s)
    if cond is Cond.NE:
        if a.is_const and b.is_const and a.value == b.value:
            return None
        a2, b2 = a, b
        if b.is_const:
            a2 = _exclude_endpoint(a, b.value)
        if a.is_const:
            b2 = _exclude_endpoint(b, a.value)
        if a2 is None or b2 is None:
            return None
        return a2, b2
    if cond in (Cond.LT, Cond.LE):
        strict = cond is Cond.LT
        if strict and b.umax == 0:
            return None
        a2 = _with_range(a, 0, b.umax - 1 if strict else b.umax)
        b2 = _with_range(b, a.umin + 1 if strict else a.umin, U64)
        if a2 is None or b2 is None:
            return None
        return a2, b2
    if cond in (Cond.SLT, Cond.SLE):
        strict = cond is Cond.SLT
        amin, _ = a.srange()
        _, bmax = b.srange()
        a2 = _with_srange(a, -SIGN, bmax - 1 if strict else bmax)
        b2 = _with_srange(b, amin + 1 if strict else amin, SIGN - 1)
        if a2 is None or b2 is None:
            return None
        return a2, b2
    raise ValueError(cond)


def _exclude_endpoint(s: ScalarInfo, c: int) -> ScalarInfo | None:
    lo, hi = s.umin, s.umax
    if lo == c:
        lo += 1
    if hi == c:
        hi -= 1
    if lo > hi:
        return None
    return normalize(s.tnum, lo, hi)


def refine_on_branch(
    cond: Cond, lhs: ScalarInfo, rhs: ScalarInfo, taken: bool
) -> tuple[ScalarInfo, ScalarInfo] | None:
    """Narrow both operands to the branch outcome; None means infeasible."""
    return _refine_holds(cond if taken else _NEGATE[cond], lhs, rhs)


# ---------------------------------------------------------------------------
# register and stack types


class _Uninit:
    __slots__ = ()

    def __repr__(self) -> str:
        return "UNINIT"


UNINIT = _Uninit()


@dataclass(frozen=True, slots=True)
class Scalar:
    info: ScalarInfo


@dataclass(frozen=True, slots=True)
class PtrStack:
    off: int


@dataclass(frozen=True, slots=True)
class PtrCtx:
    off: int


@dataclass(frozen=True, slots=True)
class PtrMap:
    map_id: int
    off: int
    var: ScalarInfo | None = None  # variable part added on top of ``off``

    def bounds(self) -> tuple[int, int]:
        if self.var is None:
            return self.off, self.off
        return self.off + self.var.umin, self.off + self.var.umax


RegType = object  # UNINIT | Scalar | PtrStack | PtrCtx | PtrMap
POINTER_TYPES = (PtrStack, PtrCtx, PtrMap)
SPILLED_SCALAR = Scalar(ScalarInfo.unknown())


def is_pointer(t: RegType) -> bool:
    return isinstance(t, POINTER_TYPES)


def type_kind(t: RegType) -> str:
    if t is UNINIT:
        return "uninit"
    if isinstance(t, Scalar):
        return "scalar"
    return "ptr"


@dataclass(frozen=True, slots=True)
class Slot:
    kind: RegType  # UNINIT, SPILLED_SCALAR or a pointer type
    init: int  # byte-initialization bitmap, bit i = byte i of the slot

    def describe(self) -> str:
        return type_kind(self.kind)


EMPTY_SLOT = Slot(UNINIT, 0)


@dataclass(frozen=True, slots=True)
class AbstractState:
    pc: int
    regs: tuple
    stack: tuple
    speculative: bool = False
    budget_used: int = 0

    @classmethod
    def entry(cls) -> AbstractState:
        regs = [UNINIT] * 11
        regs[1] = PtrCtx(0)
        regs[FP] = PtrStack(0)
        return cls(0, tuple(regs), (EMPTY_SLOT,) * NUM_SLOTS)

    def set_reg(self, r: int, t: RegType) -> AbstractState:
        regs = list(self.regs)
        regs[r] = t
        return replace(self, regs=tuple(regs))

    def step_to(self, pc: int) -> AbstractState:
        return replace(self, pc=pc, budget_used=self.budget_used + 1)


# ---------------------------------------------------------------------------
# step outcomes


class UnsafeKind(enum.Enum):
    TYPE_VIOLATION = "type_violation"
    BREAKOUT = "breakout"
    UNINIT_READ = "uninit_read"
    VARIABLE_STACK_ACCESS = "variable_stack_access"


@dataclass(frozen=True)
class Continue:
    states: tuple[AbstractState, ...]


@dataclass(frozen=True)
class Exit:
    pass


@dataclass(frozen=True)
class Unsafe:
    kind: UnsafeKind
    detail: str


StepOutcome = Continue | Exit | Unsafe


def _type_violation(msg: str) -> Unsafe:
    return Unsafe(UnsafeKind.TYPE_VIOLATION, msg)


def _breakout(msg: str) -> Unsafe:
    return Unsafe(UnsafeKind.BREAKOUT, msg)


def _uninit(msg: str) -> Unsafe:
    return Unsafe(UnsafeKind.UNINIT_READ, msg)


def _region_limits(t: RegType, p: Program) -> tuple[int, int]:
    """Closed offset interval a pointer of this type may hold."""
    if isinstance(t, PtrStack):
        return -STACK_SIZE, 0
    if isinstance(t, PtrCtx):
        return 0, p.ctx_size - 1
    return 0, p.map_decl(t.map_id).padded_size - 1


def _pointer_arith(p: Program, insn: Instruction, d: RegType, s: ScalarInfo) -> RegType | Unsafe:
    op = insn.alu_op
    if op not in (AluOp.ADD, AluOp.SUB):
        return _type_violation(f"{op.name} on pointer r{insn.dst}")
    if s.is_const:
        delta = to_signed(s.value)
        if op is AluOp.SUB:
            delta = -delta
        if isinstance(d, PtrStack):
            res: RegType = PtrStack(d.off + delta)
            lo = hi = res.off
        elif isinstance(d, PtrCtx):
            res = PtrCtx(d.off + delta)
            lo = hi = res.off
        else:
            res = PtrMap(d.map_id, d.off + delta, d.var)
            lo, hi = res.bounds()
    else:
        if isinstance(d, PtrStack):
            return Unsafe(UnsafeKind.VARIABLE_STACK_ACCESS, f"non-constant offset added to stack pointer r{insn.dst}")
        if isinstance(d, PtrCtx) or op is AluOp.SUB:
            return _type_violation(f"non-constant {op.name} on pointer r{insn.dst}")
        var = s if d.var is None else scalar_alu(AluOp.ADD, d.var, s)
        res = PtrMap(d.map_id, d.off, var)
        lo, hi = res.bounds()
    rlo, rhi = _region_limits(d, p)
    if lo < rlo or hi > rhi:
        return _breakout(f"pointer arithmetic leaves region: offsets [{lo}, {hi}] not in [{rlo}, {rhi}]")
    return res


def _alu(s: AbstractState, insn: Instruction, p: Program, src: RegType) -> StepOutcome:
    d = s.regs[insn.dst]
    if d is UNINIT:
        return _uninit(f"r{insn.dst} read before write")
    if isinstance(d, Scalar) and isinstance(src, Scalar):
        res: RegType | Unsafe = Scalar(scalar_alu(insn.alu_op, d.info, src.info))
    elif is_pointer(d) and isinstance(src, Scalar):
        res = _pointer_arith(p, insn, d, src.info)
    else:
        res = _type_violation(f"{insn.alu_op.name} mixing pointer operands")
    if isinstance(res, Unsafe):
        return res
    return Continue((s.set_reg(insn.dst, res).step_to(s.pc + 1),))


def _stack_access(s: AbstractState, base: PtrStack, insn: Instruction) -> tuple[int, int] | Unsafe:
    addr = base.off + insn.off
    if addr < -STACK_SIZE or addr + insn.size > 0:
        return _breakout(f"stack access at fp{addr:+d} size {insn.size} out of bounds")
    if addr % insn.size:
        return _type_violation(f"misaligned stack access at fp{addr:+d}")
    rel = addr + STACK_SIZE
    return rel // 8, ((1 << insn.size) - 1) << (rel % 8)


def _map_access(p: Program, base: PtrMap, insn: Instruction) -> Unsafe | None:
    lo, hi = base.bounds()
    lo += insn.off
    hi += insn.off + insn.size
    size = p.map_decl(base.map_id).padded_size
    if lo < 0 or hi > size:
        return _breakout(f"map {base.map_id} access [{lo}, {hi}) outside [0, {size})")
    return None


def _load(s: AbstractState, insn: Instruction, p: Program) -> StepOutcome:
    base = s.regs[insn.src]
    if base is UNINIT:
        return _uninit(f"r{insn.src} read before write")
    if isinstance(base, Scalar):
        return _type_violation(f"dereference of scalar r{insn.src}")
    val: RegType = Scalar(ScalarInfo.sized(insn.size))
    if isinstance(base, PtrCtx):
        lo = base.off + insn.off
        if lo < 0 or lo + insn.size > p.ctx_size:
            return _breakout(f"ctx access [{lo}, {lo + insn.size}) outside [0, {p.ctx_size})")
    elif isinstance(base, PtrMap):
        bad = _map_access(p, base, insn)
        if bad:
            return bad
    else:
        loc = _stack_access(s, base, insn)
        if isinstance(loc, Unsafe):
            return loc
        slot_i, bm = loc
        slot = s.stack[slot_i]
        if slot.init & bm != bm:
            return _uninit(f"read of uninitialized stack bytes at fp{base.off + insn.off:+d}")
        if is_pointer(slot.kind):
            if insn.size != 8:
                return _type_violation("partial read of spilled pointer")
            val = slot.kind
    return Continue((s.set_reg(insn.dst, val).step_to(s.pc + 1),))


def _store(s: AbstractState, insn: Instruction, p: Program) -> StepOutcome:
    base = s.regs[insn.dst]
    if insn.opcode is Opcode.STORE_REG:
        val = s.regs[insn.src]
        if val is UNINIT:
            return _uninit(f"r{insn.src} read before write")
    else:
        val = Scalar(ScalarInfo.const(insn.imm))
    if base is UNINIT:
        return _uninit(f"r{insn.dst} read before write")
    if isinstance(base, Scalar):
        return _type_violation(f"store through scalar r{insn.dst}")
    if isinstance(base, PtrCtx):
        return _type_violation("context is read-only")
    if isinstance(base, PtrMap):
        bad = _map_access(p, base, insn)
        if bad:
            return bad
        if is_pointer(val):
            return _type_violation("pointer stored into map")
        return Continue((s.step_to(s.pc + 1),))
    loc = _stack_access(s, base, insn)
    if isinstance(loc, Unsafe):
        return loc
    slot_i, bm = loc
    old = s.stack[slot_i]
    if is_pointer(val):
        if insn.size != 8:
            return _type_violation("partial spill of pointer")
        new = Slot(val, 0xFF)
    elif is_pointer(old.kind):
        new = Slot(SPILLED_SCALAR, 0xFF)
    else:
        new = Slot(SPILLED_SCALAR, old.init | bm)
    stack = list(s.stack)
    stack[slot_i] = new
    return Continue((replace(s, stack=tuple(stack)).step_to(s.pc + 1),))


def _branch(s: AbstractState, insn: Instruction) -> StepOutcome:
    lhs = s.regs[insn.dst]
    rhs = s.regs[insn.src] if insn.opcode is Opcode.JCOND_REG else Scalar(ScalarInfo.const(insn.imm))
    for r, t in ((insn.dst, lhs), (insn.src, rhs)):
        if t is UNINIT:
            return _uninit(f"r{r} read before write")
    if not (isinstance(lhs, Scalar) and isinstance(rhs, Scalar)):
        return _type_violation("comparison involving a pointer")
    target = s.pc + 1 + insn.off
    if s.speculative:
        # mispredictions may flip any inner branch: both ways, no refinement
        return Continue((s.step_to(target), s.step_to(s.pc + 1)))
    succ = []
    for taken, pc in ((True, target), (False, s.pc + 1)):
        r = refine_on_branch(insn.cond, lhs.info, rhs.info, taken)
        if r is None:
            continue
        st = s
        if insn.opcode is Opcode.JCOND_REG and insn.src != insn.dst:
            st = st.set_reg(insn.src, Scalar(r[1]))
        st = st.set_reg(insn.dst, Scalar(r[0]))
        succ.append(st.step_to(pc))
    return Continue(tuple(succ))


def abstract_step(s: AbstractState, insn: Instruction, p: Program) -> StepOutcome:
    """Execute ``insn`` abstractly from ``s``."""
    op = insn.opcode
    if op is Opcode.NOSPEC_V1 or op is Opcode.NOSPEC_V4:
        return Continue((s.step_to(s.pc + 1),))
    if op is Opcode.EXIT:
        if s.regs[0] is UNINIT:
            return _uninit("r0 not set at exit")
        return Exit()
    if op is Opcode.JMP:
        return Continue((s.step_to(s.pc + 1 + insn.off),))
    if op is Opcode.MOV_IMM:
        return Continue((s.set_reg(insn.dst, Scalar(ScalarInfo.const(insn.imm))).step_to(s.pc + 1),))
    if op is Opcode.MOV_REG:
        v = s.regs[insn.src]
        if v is UNINIT:
            return _uninit(f"r{insn.src} read before write")
        return Continue((s.set_reg(insn.dst, v).step_to(s.pc + 1),))
    if op is Opcode.MAP_PTR:
        return Continue((s.set_reg(insn.dst, PtrMap(insn.map_id, 0)).step_to(s.pc + 1),))
    if op is Opcode.ALU_IMM:
        return _alu(s, insn, p, Scalar(ScalarInfo.const(insn.imm)))
    if op is Opcode.ALU_REG:
        v = s.regs[insn.src]
        if v is UNINIT:
            return _uninit(f"r{insn.src} read before write")
        return _alu(s, insn, p, v)
    if op is Opcode.LOAD:
        return _load(s, insn, p)
    if op is Opcode.STORE_REG or op is Opcode.STORE_IMM:
        return _store(s, insn, p)
    return _branch(s, insn)
