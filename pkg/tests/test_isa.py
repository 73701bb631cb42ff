import random

import pytest
from conftest import CORPUS
from hypothesis import given
from hypothesis import strategies as st

from specfence.fuzzgen import random_program
from specfence.isa import (
    AluOp,
    AsmError,
    Cond,
    Instruction,
    MapDecl,
    Opcode,
    Program,
    alu_eval,
    cond_eval,
    emit_asm,
    parse_asm,
    pow2ceil,
    validate_structure,
)


def kinds(p):
    return [e.kind for e in validate_structure(p)]


def test_confusion_shape(confusion):
    assert len(confusion) == 11
    assert confusion.ctx_size == 16
    assert [m.padded_size for m in confusion.maps] == [8, 256]
    a = confusion[4]
    assert a.opcode is Opcode.JCOND_IMM and a.cond is Cond.EQ
    assert a.jump_target(4) == 9
    assert validate_structure(confusion) == []


def test_memory_operand_forms():
    p = parse_asm("r2 = *(u32)(fp - 8)\n*(u16)(r3 + 0x10) = r4\n*(u8)(r1) = -1\nexit")
    load, st_reg, st_imm, _ = p.instructions
    assert (load.src, load.off, load.size) == (10, -8, 4)
    assert (st_reg.dst, st_reg.src, st_reg.off, st_reg.size) == (3, 4, 16, 2)
    assert (st_imm.opcode, st_imm.imm, st_imm.off) == (Opcode.STORE_IMM, -1, 0)


def test_large_immediate_is_stored_signed():
    p = parse_asm("r0 = 0xffffffffffffffff\nexit")
    assert p[0].imm == -1


@pytest.mark.parametrize("path", sorted(CORPUS.glob("*.s")), ids=lambda p: p.stem)
def test_corpus_round_trip(path):
    p = parse_asm(path.read_text(), name=path.stem)
    again = parse_asm(emit_asm(p), name=path.stem)
    assert again == p


@given(st.integers(0, 2**32))
def test_fuzz_round_trip(seed):
    p = random_program(random.Random(seed))
    assert validate_structure(p) == []
    assert parse_asm(emit_asm(p), name=p.name) == p


@pytest.mark.parametrize(
    "text, msg",
    [
        ("r11 = 0\nexit", "unknown register"),
        ("r0 <<= 64\nexit", "out of range"),
        ("goto nowhere", "nowhere"),
        ("x: r0 = 0\nx: exit", "duplicate label"),
        ("r0 = frobnicate\nexit", "syntax error"),
        (".stack size=4\nexit", "unknown directive"),
    ],
)
def test_asm_errors(text, msg):
    with pytest.raises(AsmError, match=msg):
        parse_asm(text)


def test_asm_error_position():
    with pytest.raises(AsmError) as e:
        parse_asm("r0 = 0\n   bogus\nexit")
    assert (e.value.line, e.value.col) == (2, 4)


@pytest.mark.parametrize(
    "text, kind",
    [
        ("r0 = 0", "FallthroughOffEnd"),
        ("r10 = 0\nexit", "WriteToFramePointer"),
        ("r2 = map_ptr 3\nexit", "UnknownMap"),
        ("if r0 == 0 goto end\nexit\nend:", "JumpOutOfRange"),
        (".map 0 size=8\n.map 0 size=16\nexit", "DuplicateMap"),
        (".map 0 size=0\nexit", "BadMap"),
    ],
)
def test_structural_errors(text, kind):
    assert kind in kinds(parse_asm(text))


def test_structural_errors_on_raw_instructions():
    p = Program((Instruction(Opcode.LOAD, dst=0, src=1, size=3), Instruction(Opcode.EXIT)))
    assert kinds(p) == ["BadSize"]
    p = Program((Instruction(Opcode.JMP, off=40000),))
    assert "BadOffset" in kinds(p)
    assert kinds(Program(())) == ["EmptyProgram"]
    p = Program((Instruction(Opcode.ALU_IMM, alu_op=AluOp.LSH, imm=64), Instruction(Opcode.EXIT)))
    assert kinds(p) == ["BadShift"]


def test_pow2ceil():
    assert [pow2ceil(n) for n in (1, 2, 3, 8, 40, 4096)] == [1, 2, 4, 8, 64, 4096]
    assert MapDecl(0, 257).padded_size == 512


def test_alu_eval_edges():
    assert alu_eval(AluOp.ADD, 2**64 - 1, 1) == 0
    assert alu_eval(AluOp.SUB, 0, 1) == 2**64 - 1
    assert alu_eval(AluOp.LSH, 1, 65) == 2  # amount taken mod 64
    assert alu_eval(AluOp.ARSH, 2**63, 63) == 2**64 - 1
    assert alu_eval(AluOp.RSH, 2**63, 63) == 1


def test_cond_eval_signedness():
    minus_one = 2**64 - 1
    assert cond_eval(Cond.GT, minus_one, 0)
    assert not cond_eval(Cond.SGT, minus_one, 0)
    assert cond_eval(Cond.SLE, minus_one, 0)
    assert cond_eval(Cond.GE, 5, 5) and not cond_eval(Cond.NE, 5, 5)
