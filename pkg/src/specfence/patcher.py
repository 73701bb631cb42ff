"""Materialize patch directives into a rewritten program."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

from .isa import BRANCH_OPS, AluOp, Instruction, Opcode, Program
from .verifier import DirectiveKind, PatchDirective, Placement


class PatchError(ValueError):
    pass


class LoweringTarget(enum.Enum):
    FENCE_MACHINE = "fence"
    NOOP_MACHINE = "noop"


@dataclass(frozen=True)
class PatchPlan:
    original: Program
    directives: tuple[PatchDirective, ...]
    index_map: tuple[int, ...]
    patched: Program


_VALID_PLACEMENT = {
    DirectiveKind.NOSPEC_V1: Placement.BEFORE,
    DirectiveKind.NOSPEC_V4: Placement.AFTER,
    DirectiveKind.MASK_INDEX: Placement.BEFORE,
}


def _materialize(p: Program, d: PatchDirective) -> Instruction:
    if d.kind is DirectiveKind.NOSPEC_V1:
        return Instruction(Opcode.NOSPEC_V1)
    if d.kind is DirectiveKind.NOSPEC_V4:
        return Instruction(Opcode.NOSPEC_V4)
    try:
        padded = p.map_decl(d.map_id).padded_size
    except KeyError:
        raise PatchError(f"mask directive at {d.index} names unknown map {d.map_id}") from None
    return Instruction(Opcode.ALU_IMM, dst=d.reg, alu_op=AluOp.AND, imm=padded - 1)


def _check(p: Program, directives: list[PatchDirective]) -> None:
    seen = set()
    for d in directives:
        key = (d.index, d.kind, d.placement)
        if key in seen:
            raise PatchError(f"duplicate directive {d}")
        seen.add(key)
        if not 0 <= d.index < len(p):
            raise PatchError(f"directive index {d.index} outside program")
        if d.placement is not _VALID_PLACEMENT[d.kind]:
            raise PatchError(f"{d.kind.name} cannot be placed {d.placement.value}")
        insn = p.instructions[d.index]
        if d.placement is Placement.AFTER and insn.opcode in BRANCH_OPS | {Opcode.EXIT}:
            raise PatchError(f"nothing falls through after instruction {d.index}")
        if d.kind is DirectiveKind.MASK_INDEX and (
            insn.opcode is not Opcode.ALU_REG or insn.alu_op is not AluOp.ADD or insn.src != d.reg
        ):
            raise PatchError(f"mask directive at {d.index} does not precede an add of r{d.reg}")


def _relayout(p: Program, before: dict[int, list[Instruction]], after: dict[int, list[Instruction]],
              keep: set[int] | None = None) -> tuple[Program, list[int]]:
    """Emit instructions with insertions/removals, then re-point every jump.

    A jump to original instruction t lands on the first instruction emitted
    for t (its BEFORE insertions, if any); removed instructions forward to the
    next emitted position.
    """
    n = len(p)
    out: list[tuple[Instruction, int | None]] = []  # (insn, original index if it is a branch)
    index_map = [0] * n
    entry = [0] * (n + 1)
    for i, insn in enumerate(p.instructions):
        entry[i] = len(out)
        for extra in before.get(i, ()):
            out.append((extra, None))
        index_map[i] = len(out)
        if keep is None or i in keep:
            out.append((insn, i))
        for extra in after.get(i, ()):
            out.append((extra, None))
    entry[n] = len(out)
    insns = []
    for pos, (insn, orig) in enumerate(out):
        if orig is not None and insn.opcode in BRANCH_OPS:
            target = entry[insn.jump_target(orig)]
            off = target - pos - 1
            if not -(1 << 15) <= off < (1 << 15):
                raise PatchError(f"jump displacement {off} overflows after patching")
            insn = replace(insn, off=off)
        insns.append(insn)
    return Program(tuple(insns), p.maps, p.ctx_size, p.name), index_map


def apply_patches(p: Program, directives: list[PatchDirective]) -> tuple[Program, list[int]]:
    """Insert barriers and index masks; returns the new program and index map."""
    directives = sorted(directives, key=PatchDirective.sort_key)
    _check(p, directives)
    before: dict[int, list[Instruction]] = {}
    after: dict[int, list[Instruction]] = {}
    for d in directives:
        bucket = before if d.placement is Placement.BEFORE else after
        bucket.setdefault(d.index, []).append(_materialize(p, d))
    return _relayout(p, before, after)


def plan_patches(p: Program, directives: list[PatchDirective]) -> PatchPlan:
    patched, index_map = apply_patches(p, directives)
    return PatchPlan(p, tuple(sorted(directives, key=PatchDirective.sort_key)), tuple(index_map), patched)


def lower_barriers(p: Program, target: LoweringTarget) -> Program:
    """Drop barriers the target machine does not need."""
    if target is LoweringTarget.FENCE_MACHINE:
        return p
    keep = {i for i, insn in enumerate(p.instructions) if insn.opcode is not Opcode.NOSPEC_V4}
    if len(keep) == len(p):
        return p
    lowered, _ = _relayout(p, {}, {}, keep)
    return lowered
