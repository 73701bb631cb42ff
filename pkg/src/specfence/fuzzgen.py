"""Seeded random program and input generator for the soundness harness.

Programs are emitted as assembly text and parsed, so every generated program
goes through the same front end as hand-written ones. Jumps only go forward,
which keeps path counts bounded without loop heuristics.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .isa import Program, parse_asm
from .specsim import ProgramInput

SCALARS = (0, 2, 3, 4, 5)
POINTERS = (6, 7, 8, 9)
CONDS = ("==", "!=", "<", "<=", ">", ">=", "s<", "s>")
ALU = ("+", "-", "&", "|", "^", "<<", ">>", "*")
SECRET_ADDR = 0x500000


@dataclass(frozen=True)
class GenConfig:
    max_snippets: int = 10
    max_branches: int = 5
    ctx_size: int = 32
    map_sizes: tuple[int, ...] = (8, 256, 40)


class _Builder:
    def __init__(self, rng: random.Random, cfg: GenConfig):
        self.rng = rng
        self.cfg = cfg
        self.lines: list[str] = []
        self.pending: list[list] = []  # [snippets_left, label]
        self.nlabels = 0
        self.branches = 0

    def label(self) -> str:
        self.nlabels += 1
        return f"L{self.nlabels}"

    def forward_label(self) -> str:
        name = self.label()
        self.pending.append([self.rng.randint(0, 3), name])
        return name

    def place_due_labels(self, final: bool = False) -> None:
        keep = []
        for entry in self.pending:
            if final or entry[0] <= 0:
                self.lines.append(f"{entry[1]}:")
            else:
                entry[0] -= 1
                keep.append(entry)
        self.pending = keep

    # operand helpers -------------------------------------------------------

    def scalar(self) -> int:
        return self.rng.choice(SCALARS)

    def ptr(self) -> int:
        return self.rng.choice(POINTERS)

    def map_id(self) -> int:
        return self.rng.randrange(len(self.cfg.map_sizes))

    def ctx_off(self, size: int) -> int:
        return self.rng.randrange(0, self.cfg.ctx_size // size) * size

    def slot(self) -> int:
        return 8 * self.rng.randint(1, 4)

    def size(self) -> int:
        return self.rng.choice((1, 2, 4, 8, 8))

    def transmit(self, val: int) -> list[str]:
        """Use a byte value as an index into the 256-byte map."""
        q = self.ptr()
        return [f"r{q} = map_ptr 1", f"r{q} += r{val}", f"r{self.scalar()} = *(u8)(r{q} + 0)"]

    # snippets --------------------------------------------------------------

    def s_ctx_load(self):
        size = self.size()
        return [f"r{self.scalar()} = *(u{8 * size})(r1 + {self.ctx_off(size)})"]

    def s_const(self):
        return [f"r{self.scalar()} = {self.rng.choice((0, 1, 7, 255, 4096, -1))}"]

    def s_alu(self):
        op = self.rng.choice(ALU)
        rhs = f"r{self.scalar()}" if self.rng.random() < 0.4 else str(self.rng.randint(0, 63))
        return [f"r{self.scalar()} {op}= {rhs}"]

    def s_map_ptr(self):
        return [f"r{self.ptr()} = map_ptr {self.map_id()}"]

    def s_map_load(self):
        m = self.map_id()
        p = self.ptr()
        size = min(self.size(), self.cfg.map_sizes[m] & -self.cfg.map_sizes[m], 8)
        off = self.rng.randrange(0, max(1, self.cfg.map_sizes[m] // size)) * size
        return [f"r{p} = map_ptr {m}", f"r{self.scalar()} = *(u{8 * size})(r{p} + {off})"]

    def s_map_index(self):
        m = self.map_id()
        idx, p = self.scalar(), self.ptr()
        out = [f"r{idx} = *(u8)(r1 + {self.ctx_off(1)})"]
        if self.rng.random() < 0.7:
            out.append(f"if r{idx} >= {self.cfg.map_sizes[m]} goto {self.forward_label()}")
            self.branches += 1
        val = self.scalar()
        out += [f"r{p} = map_ptr {m}", f"r{p} += r{idx}", f"r{val} = *(u8)(r{p} + 0)"]
        if self.rng.random() < 0.5:
            out += self.transmit(val)
        if self.rng.random() < 0.3:
            out.append(f"*(u8)(r{p} + 0) = r{self.scalar()}")
        return out

    def s_stack_store(self):
        src = self.rng.random()
        if src < 0.4:
            val = str(self.rng.randint(0, 100))
        elif src < 0.8:
            val = f"r{self.scalar()}"
        else:
            val = f"r{self.ptr()}"
        return [f"*(u64)(fp - {self.slot()}) = {val}"]

    def s_stack_load(self):
        dst = self.scalar() if self.rng.random() < 0.6 else self.ptr()
        return [f"r{dst} = *(u64)(fp - {self.slot()})"]

    def s_spill_deref(self):
        p, q, slot = self.ptr(), self.ptr(), self.slot()
        return [
            f"r{p} = map_ptr {self.map_id()}",
            f"*(u64)(fp - {slot}) = r{p}",
            f"r{q} = *(u64)(fp - {slot})",
            f"r{self.scalar()} = *(u8)(r{q} + 0)",
        ]

    def s_stl_gadget(self):
        # a scalar slot is overwritten by a pointer and then dereferenced
        slot, s, p, q = self.slot(), self.scalar(), self.ptr(), self.ptr()
        return [
            f"*(u64)(fp - {slot}) = r{s}",
            f"r{p} = map_ptr {self.map_id()}",
            f"*(u64)(fp - {slot}) = r{p}",
            f"r{q} = *(u64)(fp - {slot})",
            f"r{self.scalar()} = *(u8)(r{q} + 0)",
        ]

    def s_branch(self):
        self.branches += 1
        lhs = self.scalar()
        rhs = f"r{self.scalar()}" if self.rng.random() < 0.3 else str(self.rng.choice((0, 1, 5, 100, 255)))
        return [f"if r{lhs} {self.rng.choice(CONDS)} {rhs} goto {self.forward_label()}"]

    def s_confusion(self):
        # a register that is a map pointer on one path and a scalar on the other
        self.branches += 2
        flag, r, dst = self.scalar(), self.ptr(), self.scalar()
        while dst == flag:
            dst = self.scalar()
        a, c = self.label(), self.label()
        return [
            f"r{flag} = *(u64)(r1 + {self.ctx_off(8)})",
            f"r{r} = *(u64)(r1 + {self.ctx_off(8)})",
            f"if r{flag} == 0 goto {a}",
            f"r{r} = map_ptr {self.map_id()}",
            f"{a}: if r{flag} == 0 goto {c}",
            f"r{dst} = *(u8)(r{r} + 0)",
            *self.transmit(dst),
            f"{c}: r{dst} = 0",
        ]

    def s_stack_arith(self):
        p = self.ptr()
        return [f"r{p} = fp", f"r{p} += -{self.slot()}", f"*(u64)(r{p} + 0) = r{self.scalar()}"]


DEFAULT_GEN = GenConfig()


_SNIPPETS = [
    ("s_ctx_load", 4), ("s_const", 2), ("s_alu", 3), ("s_map_ptr", 1), ("s_map_load", 2),
    ("s_map_index", 3), ("s_stack_store", 3), ("s_stack_load", 2), ("s_spill_deref", 1),
    ("s_stl_gadget", 1), ("s_branch", 4), ("s_confusion", 2), ("s_stack_arith", 1),
]


def random_program_text(rng: random.Random, cfg: GenConfig = DEFAULT_GEN, name: str = "fuzz") -> str:
    b = _Builder(rng, cfg)
    header = [f".ctx size={cfg.ctx_size}"] + [f".map {i} size={s}" for i, s in enumerate(cfg.map_sizes)]
    if rng.random() < 0.85:
        for r in SCALARS:
            b.lines.append(f"r{r} = *(u64)(r1 + {b.ctx_off(8)})" if rng.random() < 0.5 else f"r{r} = {rng.randint(0, 9)}")
    names, weights = zip(*_SNIPPETS)
    for _ in range(rng.randint(1, cfg.max_snippets)):
        choice = rng.choices(names, weights)[0]
        if choice in ("s_branch", "s_confusion") and b.branches >= cfg.max_branches:
            choice = "s_alu"
        b.lines += getattr(b, choice)()
        b.place_due_labels()
    b.place_due_labels(final=True)
    b.lines.append(f"r0 = r{b.scalar()}" if rng.random() < 0.5 else "r0 = 0")
    b.lines.append("exit")
    return "\n".join(header + b.lines)


def random_program(rng: random.Random, cfg: GenConfig = DEFAULT_GEN, name: str = "fuzz") -> Program:
    return parse_asm(random_program_text(rng, cfg), name=name)


def random_inputs(p: Program, rng: random.Random, n: int) -> list[ProgramInput]:
    """Inputs mixing zeros, small values, large values and a secret-space address."""
    out = []
    for k in range(n):
        words = []
        for _ in range((p.ctx_size + 7) // 8):
            pick = rng.random()
            if k == 0:
                words.append(0)
            elif pick < 0.3:
                words.append(rng.randint(0, 8))
            elif pick < 0.6:
                words.append(rng.randint(0, 300))
            elif pick < 0.8:
                words.append(SECRET_ADDR)
            else:
                words.append(rng.getrandbits(64))
        ctx = b"".join(w.to_bytes(8, "little") for w in words)[: p.ctx_size]
        maps = {m.id: rng.randbytes(m.value_size) for m in p.maps}
        out.append(ProgramInput(ctx, tuple(sorted(maps.items()))))
    return out
