"""Bytecode instruction set, program container and textual assembly.

The ISA is a small BPF-like subset: 64-bit register ALU ops, sized loads and
stores, forward/backward jumps, a map-pointer pseudo instruction and the two
speculation barriers ``nospec_v1`` / ``nospec_v4``.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass

U64 = (1 << 64) - 1
FP = 10
NUM_REGS = 11
STACK_SIZE = 512
MAX_MAP_SIZE = 4096
MAX_CTX_SIZE = 4096
MAX_MAP_ID = 255


class Opcode(enum.Enum):
    MOV_IMM = "mov_imm"
    MOV_REG = "mov_reg"
    ALU_IMM = "alu_imm"
    ALU_REG = "alu_reg"
    LOAD = "load"
    STORE_REG = "store_reg"
    STORE_IMM = "store_imm"
    JMP = "jmp"
    JCOND_IMM = "jcond_imm"
    JCOND_REG = "jcond_reg"
    MAP_PTR = "map_ptr"
    EXIT = "exit"
    NOSPEC_V1 = "nospec_v1"
    NOSPEC_V4 = "nospec_v4"


class AluOp(enum.Enum):
    ADD = "+"
    SUB = "-"
    AND = "&"
    OR = "|"
    XOR = "^"
    LSH = "<<"
    RSH = ">>"
    ARSH = "s>>"
    MUL = "*"


class Cond(enum.Enum):
    EQ = "=="
    NE = "!="
    LT = "<"
    LE = "<="
    GT = ">"
    GE = ">="
    SLT = "s<"
    SLE = "s<="
    SGT = "s>"
    SGE = "s>="


SHIFT_OPS = frozenset({AluOp.LSH, AluOp.RSH, AluOp.ARSH})
BRANCH_OPS = frozenset({Opcode.JMP, Opcode.JCOND_IMM, Opcode.JCOND_REG})
COND_BRANCH_OPS = frozenset({Opcode.JCOND_IMM, Opcode.JCOND_REG})
STORE_OPS = frozenset({Opcode.STORE_REG, Opcode.STORE_IMM})
BARRIER_OPS = frozenset({Opcode.NOSPEC_V1, Opcode.NOSPEC_V4})
# opcodes whose dst register is written
WRITES_DST = frozenset(
    {Opcode.MOV_IMM, Opcode.MOV_REG, Opcode.ALU_IMM, Opcode.ALU_REG, Opcode.LOAD, Opcode.MAP_PTR}
)


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    dst: int = 0
    src: int = 0
    imm: int = 0
    off: int = 0
    size: int = 8
    alu_op: AluOp | None = None
    cond: Cond | None = None
    map_id: int = 0

    def jump_target(self, pc: int) -> int:
        return pc + 1 + self.off


def pow2ceil(n: int) -> int:
    if n <= 1:
        return 1
    return 1 << (n - 1).bit_length()


@dataclass(frozen=True)
class MapDecl:
    id: int
    value_size: int

    @property
    def padded_size(self) -> int:
        return pow2ceil(self.value_size)


@dataclass(frozen=True)
class Program:
    instructions: tuple[Instruction, ...]
    maps: tuple[MapDecl, ...] = ()
    ctx_size: int = 0
    name: str = "prog"

    def __len__(self) -> int:
        return len(self.instructions)

    def __getitem__(self, i: int) -> Instruction:
        return self.instructions[i]

    def map_decl(self, map_id: int) -> MapDecl:
        for m in self.maps:
            if m.id == map_id:
                return m
        raise KeyError(map_id)

    def same_code(self, other: Program) -> bool:
        """Equality ignoring the program name."""
        return (
            self.instructions == other.instructions
            and self.maps == other.maps
            and self.ctx_size == other.ctx_size
        )


def to_signed(v: int, bits: int = 64) -> int:
    v &= (1 << bits) - 1
    return v - (1 << bits) if v >> (bits - 1) else v


def alu_eval(op: AluOp, x: int, y: int) -> int:
    """Concrete 64-bit semantics of an ALU op on unsigned operands."""
    x &= U64
    y &= U64
    if op is AluOp.ADD:
        return (x + y) & U64
    if op is AluOp.SUB:
        return (x - y) & U64
    if op is AluOp.AND:
        return x & y
    if op is AluOp.OR:
        return x | y
    if op is AluOp.XOR:
        return x ^ y
    if op is AluOp.MUL:
        return (x * y) & U64
    k = y & 63
    if op is AluOp.LSH:
        return (x << k) & U64
    if op is AluOp.RSH:
        return x >> k
    if op is AluOp.ARSH:
        return (to_signed(x) >> k) & U64
    raise ValueError(op)


def cond_eval(cond: Cond, x: int, y: int) -> bool:
    x &= U64
    y &= U64
    if cond.name.startswith("S"):
        x, y = to_signed(x), to_signed(y)
    if cond in (Cond.EQ,):
        return x == y
    if cond is Cond.NE:
        return x != y
    if cond in (Cond.LT, Cond.SLT):
        return x < y
    if cond in (Cond.LE, Cond.SLE):
        return x <= y
    if cond in (Cond.GT, Cond.SGT):
        return x > y
    return x >= y


# ---------------------------------------------------------------------------
# structural validation


@dataclass(frozen=True)
class StructuralError:
    index: int
    kind: str
    reason: str

    def __str__(self) -> str:
        return f"{self.kind}@{self.index}: {self.reason}"


def validate_structure(p: Program) -> list[StructuralError]:
    errs: list[StructuralError] = []

    def err(i: int, kind: str, reason: str) -> None:
        errs.append(StructuralError(i, kind, reason))

    n = len(p.instructions)
    if n == 0:
        err(-1, "EmptyProgram", "program has no instructions")
        return errs
    if not 0 <= p.ctx_size <= MAX_CTX_SIZE:
        err(-1, "BadContext", f"ctx size {p.ctx_size} outside 0..{MAX_CTX_SIZE}")
    ids = set()
    for m in p.maps:
        if m.id in ids:
            err(-1, "DuplicateMap", f"map {m.id} declared twice")
        ids.add(m.id)
        if not 0 <= m.id <= MAX_MAP_ID:
            err(-1, "BadMap", f"map id {m.id} outside 0..{MAX_MAP_ID}")
        if not 0 < m.value_size <= MAX_MAP_SIZE:
            err(-1, "BadMap", f"map {m.id} size {m.value_size} outside 1..{MAX_MAP_SIZE}")

    for i, insn in enumerate(p.instructions):
        op = insn.opcode
        for r in (insn.dst, insn.src):
            if not 0 <= r < NUM_REGS:
                err(i, "BadRegister", f"register r{r}")
        if op in WRITES_DST and insn.dst == FP:
            err(i, "WriteToFramePointer", "r10 is read-only")
        if not -(1 << 63) <= insn.imm < (1 << 63):
            err(i, "BadImmediate", f"immediate {insn.imm} does not fit 64 bits")
        if not -(1 << 15) <= insn.off < (1 << 15):
            err(i, "BadOffset", f"offset {insn.off} does not fit 16 bits")
        if op in (Opcode.ALU_IMM, Opcode.ALU_REG) and insn.alu_op is None:
            err(i, "MissingAluOp", "ALU instruction without operation")
        if op is Opcode.ALU_IMM and insn.alu_op in SHIFT_OPS and not 0 <= insn.imm <= 63:
            err(i, "BadShift", f"shift amount {insn.imm}")
        if op in COND_BRANCH_OPS and insn.cond is None:
            err(i, "MissingCond", "conditional jump without condition")
        if op in (Opcode.LOAD, Opcode.STORE_REG, Opcode.STORE_IMM) and insn.size not in (1, 2, 4, 8):
            err(i, "BadSize", f"memory size {insn.size}")
        if op in BRANCH_OPS and not 0 <= insn.jump_target(i) < n:
            err(i, "JumpOutOfRange", f"target {insn.jump_target(i)} outside program")
        if op is Opcode.MAP_PTR and insn.map_id not in ids:
            err(i, "UnknownMap", f"map {insn.map_id} not declared")
    if p.instructions[-1].opcode not in (Opcode.EXIT, Opcode.JMP):
        err(n - 1, "FallthroughOffEnd", "last instruction must be exit or goto")
    return errs


# ---------------------------------------------------------------------------
# assembly text


class AsmError(ValueError):
    def __init__(self, line: int, col: int, msg: str):
        super().__init__(f"line {line}, col {col}: {msg}")
        self.line = line
        self.col = col
        self.msg = msg


_REG = r"(r\d+|fp)"
_NUM = r"([+-]?\s*(?:0x[0-9a-fA-F]+|\d+))"
_LABEL = r"([A-Za-z_.][\w.]*)"
_ALU_SYM = "|".join(re.escape(o.value) for o in sorted(AluOp, key=lambda o: -len(o.value)))
_COND_SYM = "|".join(re.escape(c.value) for c in sorted(Cond, key=lambda c: -len(c.value)))
_MEM = rf"\*\(u(8|16|32|64)\)\(\s*{_REG}\s*(?:([+-])\s*(0x[0-9a-fA-F]+|\d+))?\s*\)"

_PATTERNS: list[tuple[str, re.Pattern[str]]] = [
    ("exit", re.compile(r"exit")),
    ("nospec_v1", re.compile(r"nospec_v1")),
    ("nospec_v4", re.compile(r"nospec_v4")),
    ("goto", re.compile(rf"goto\s+{_LABEL}")),
    ("jcond", re.compile(rf"if\s+{_REG}\s*({_COND_SYM})\s*(?:{_REG}|{_NUM})\s+goto\s+{_LABEL}")),
    ("map_ptr", re.compile(rf"{_REG}\s*=\s*map_ptr\s+(\d+)")),
    ("load", re.compile(rf"{_REG}\s*=\s*{_MEM}")),
    ("store", re.compile(rf"{_MEM}\s*=\s*(?:{_REG}|{_NUM})")),
    ("alu", re.compile(rf"{_REG}\s*({_ALU_SYM})=\s*(?:{_REG}|{_NUM})")),
    ("mov", re.compile(rf"{_REG}\s*=\s*(?:{_REG}|{_NUM})")),
]
_DIRECTIVE_CTX = re.compile(r"\.ctx\s+size\s*=\s*(\d+)")
_DIRECTIVE_MAP = re.compile(r"\.map\s+(\d+)\s+size\s*=\s*(\d+)")
_LABEL_DEF = re.compile(rf"\s*{_LABEL}\s*:")


def _parse_int(text: str) -> int:
    return int(text.replace(" ", "").replace("\t", ""), 0)


def parse_asm(text: str, name: str = "prog") -> Program:
    """Assemble source text into a Program."""
    labels: dict[str, int] = {}
    pending: list[tuple[int, int, str, tuple]] = []  # (line, col, kind, groups)
    maps: list[MapDecl] = []
    ctx_size = 0

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].rstrip()
        col = 1
        while True:
            m = _LABEL_DEF.match(line)
            if not m or line[m.end():m.end() + 1] == "=":
                break
            label = m.group(1)
            if label in labels:
                raise AsmError(lineno, m.start(1) + 1, f"duplicate label {label!r}")
            labels[label] = len(pending)
            col += m.end()
            line = line[m.end():]
        stripped = line.strip()
        if not stripped:
            continue
        col += len(line) - len(line.lstrip())
        if stripped.startswith("."):
            if (m := _DIRECTIVE_CTX.fullmatch(stripped)) is not None:
                ctx_size = int(m.group(1))
            elif (m := _DIRECTIVE_MAP.fullmatch(stripped)) is not None:
                maps.append(MapDecl(int(m.group(1)), int(m.group(2))))
            else:
                raise AsmError(lineno, col, f"unknown directive {stripped!r}")
            continue
        for kind, pat in _PATTERNS:
            m = pat.fullmatch(stripped)
            if m is not None:
                pending.append((lineno, col, kind, m.groups()))
                break
        else:
            raise AsmError(lineno, col, f"syntax error: {stripped!r}")

    insns = [
        _build(idx, line, col, kind, groups, labels) for idx, (line, col, kind, groups) in enumerate(pending)
    ]
    return Program(tuple(insns), tuple(maps), ctx_size, name)


def _reg(text: str, line: int, col: int) -> int:
    if text == "fp":
        return FP
    r = int(text[1:])
    if r >= NUM_REGS:
        raise AsmError(line, col, f"unknown register {text!r}")
    return r


def _imm(text: str, line: int, col: int, lo: int = -(1 << 63), hi: int = U64) -> int:
    v = _parse_int(text)
    if not lo <= v <= hi:
        raise AsmError(line, col, f"immediate {text.strip()} out of range")
    if v > (1 << 63) - 1:
        v = to_signed(v)
    return v


def _mem_off(sign: str | None, num: str | None, line: int, col: int) -> int:
    if num is None:
        return 0
    v = _parse_int(num) * (-1 if sign == "-" else 1)
    if not -(1 << 15) <= v < (1 << 15):
        raise AsmError(line, col, f"offset {v} out of range")
    return v


def _build(idx: int, line: int, col: int, kind: str, g: tuple, labels: dict[str, int]) -> Instruction:
    def target(label: str) -> int:
        if label not in labels:
            raise AsmError(line, col, f"unknown label {label!r}")
        return labels[label] - idx - 1

    if kind == "exit":
        return Instruction(Opcode.EXIT)
    if kind == "nospec_v1":
        return Instruction(Opcode.NOSPEC_V1)
    if kind == "nospec_v4":
        return Instruction(Opcode.NOSPEC_V4)
    if kind == "goto":
        return Instruction(Opcode.JMP, off=target(g[0]))
    if kind == "jcond":
        dst, sym, src, num, label = g
        cond = Cond(sym)
        if src is not None:
            return Instruction(Opcode.JCOND_REG, dst=_reg(dst, line, col), src=_reg(src, line, col),
                               cond=cond, off=target(label))
        return Instruction(Opcode.JCOND_IMM, dst=_reg(dst, line, col), imm=_imm(num, line, col),
                           cond=cond, off=target(label))
    if kind == "map_ptr":
        return Instruction(Opcode.MAP_PTR, dst=_reg(g[0], line, col), map_id=int(g[1]))
    if kind == "load":
        dst, bits, base, sign, num = g
        return Instruction(Opcode.LOAD, dst=_reg(dst, line, col), src=_reg(base, line, col),
                           size=int(bits) // 8, off=_mem_off(sign, num, line, col))
    if kind == "store":
        bits, base, sign, num, src, imm = g
        common = {"dst": _reg(base, line, col), "size": int(bits) // 8, "off": _mem_off(sign, num, line, col)}
        if src is not None:
            return Instruction(Opcode.STORE_REG, src=_reg(src, line, col), **common)
        return Instruction(Opcode.STORE_IMM, imm=_imm(imm, line, col), **common)
    if kind == "alu":
        dst, sym, src, num = g
        op = AluOp(sym)
        if src is not None:
            return Instruction(Opcode.ALU_REG, dst=_reg(dst, line, col), src=_reg(src, line, col), alu_op=op)
        if op in SHIFT_OPS:
            return Instruction(Opcode.ALU_IMM, dst=_reg(dst, line, col), alu_op=op, imm=_imm(num, line, col, 0, 63))
        return Instruction(Opcode.ALU_IMM, dst=_reg(dst, line, col), alu_op=op, imm=_imm(num, line, col))
    if kind == "mov":
        dst, src, num = g
        if src is not None:
            return Instruction(Opcode.MOV_REG, dst=_reg(dst, line, col), src=_reg(src, line, col))
        return Instruction(Opcode.MOV_IMM, dst=_reg(dst, line, col), imm=_imm(num, line, col))
    raise AssertionError(kind)


def _mem_text(size: int, base: int, off: int) -> str:
    sign = "-" if off < 0 else "+"
    return f"*(u{size * 8})(r{base} {sign} {abs(off)})"


def format_insn(insn: Instruction, target_label: str | None = None) -> str:
    op = insn.opcode
    if op is Opcode.MOV_IMM:
        return f"r{insn.dst} = {insn.imm}"
    if op is Opcode.MOV_REG:
        return f"r{insn.dst} = r{insn.src}"
    if op is Opcode.ALU_IMM:
        return f"r{insn.dst} {insn.alu_op.value}= {insn.imm}"
    if op is Opcode.ALU_REG:
        return f"r{insn.dst} {insn.alu_op.value}= r{insn.src}"
    if op is Opcode.LOAD:
        return f"r{insn.dst} = {_mem_text(insn.size, insn.src, insn.off)}"
    if op is Opcode.STORE_REG:
        return f"{_mem_text(insn.size, insn.dst, insn.off)} = r{insn.src}"
    if op is Opcode.STORE_IMM:
        return f"{_mem_text(insn.size, insn.dst, insn.off)} = {insn.imm}"
    if op is Opcode.MAP_PTR:
        return f"r{insn.dst} = map_ptr {insn.map_id}"
    if op is Opcode.EXIT:
        return "exit"
    if op is Opcode.NOSPEC_V1:
        return "nospec_v1"
    if op is Opcode.NOSPEC_V4:
        return "nospec_v4"
    label = target_label if target_label is not None else f"{insn.off:+d}"
    if op is Opcode.JMP:
        return f"goto {label}"
    rhs = f"r{insn.src}" if op is Opcode.JCOND_REG else str(insn.imm)
    return f"if r{insn.dst} {insn.cond.value} {rhs} goto {label}"


def emit_asm(p: Program) -> str:
    """Render a Program as assembly that parses back to the same Program."""
    targets = sorted({insn.jump_target(i) for i, insn in enumerate(p.instructions) if insn.opcode in BRANCH_OPS})
    names = {t: f"L{t}" for t in targets}
    lines: list[str] = []
    if p.ctx_size:
        lines.append(f".ctx size={p.ctx_size}")
    for m in p.maps:
        lines.append(f".map {m.id} size={m.value_size}")
    for i, insn in enumerate(p.instructions):
        if i in names:
            lines.append(f"{names[i]}:")
        label = names.get(insn.jump_target(i)) if insn.opcode in BRANCH_OPS else None
        lines.append(format_insn(insn, label))
    return "\n".join(lines)
