import random

import pytest
from conftest import load
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from specfence.fuzzgen import random_inputs, random_program
from specfence.isa import Opcode, alu_eval, cond_eval, parse_asm
from specfence.patcher import apply_patches
from specfence.specsim import (
    CTX_BASE,
    DATA,
    EMPTY_SCHEDULE,
    FETCH,
    STACK_TOP,
    Leak,
    NoLeak,
    ProgramInput,
    Schedule,
    SecretFilling,
    differential_leak_check,
    enumerate_schedules,
    fetch_addr,
    map_base,
    parse_schedule,
    run_concrete,
    secret_accesses,
)
from specfence.verifier import DefenseMode, PatchDirective, VerifierConfig, verify

U64 = (1 << 64) - 1
CONFUSION_INPUT = ProgramInput.from_words([0, 0x500000])
F1, F2 = SecretFilling(1), SecretFilling(2)


def reference_run(p, inp):
    """Plain sequential interpreter over a flat byte dict; no speculation."""
    mem = {CTX_BASE + i: b for i, b in enumerate(inp.ctx)}
    maps = dict(inp.maps)
    for m in p.maps:
        data = maps.get(m.id, b"").ljust(m.value_size, b"\0")
        mem.update({map_base(m.id) + i: data[i] for i in range(m.value_size)})
    regs = [0] * 11
    regs[1], regs[10] = CTX_BASE, STACK_TOP
    pc = 0
    for _ in range(10_000):
        insn = p.instructions[pc]
        op, nxt = insn.opcode, pc + 1
        rhs = regs[insn.src] if op in (Opcode.ALU_REG, Opcode.JCOND_REG) else insn.imm & U64
        if op is Opcode.EXIT:
            return regs[0], {m.id: bytes(mem[map_base(m.id) + i] for i in range(m.value_size)) for m in p.maps}
        if op is Opcode.MOV_IMM:
            regs[insn.dst] = insn.imm & U64
        elif op is Opcode.MOV_REG:
            regs[insn.dst] = regs[insn.src]
        elif op in (Opcode.ALU_IMM, Opcode.ALU_REG):
            regs[insn.dst] = alu_eval(insn.alu_op, regs[insn.dst], rhs)
        elif op is Opcode.MAP_PTR:
            regs[insn.dst] = map_base(insn.map_id)
        elif op is Opcode.LOAD:
            a = regs[insn.src] + insn.off
            regs[insn.dst] = int.from_bytes(bytes(mem[a + k] for k in range(insn.size)), "little")
        elif op in (Opcode.STORE_REG, Opcode.STORE_IMM):
            a = regs[insn.dst] + insn.off
            v = regs[insn.src] if op is Opcode.STORE_REG else insn.imm & U64
            for k in range(insn.size):
                mem[a + k] = v >> (8 * k) & 0xFF
        elif op is Opcode.JMP or op in (Opcode.JCOND_IMM, Opcode.JCOND_REG) and cond_eval(insn.cond, regs[insn.dst], rhs):
            nxt = pc + 1 + insn.off
        pc = nxt
    raise AssertionError("reference run did not terminate")


def test_confusion_leaks_under_misprediction(confusion):
    f = F1.with_bytes({0x500000: 0x41})
    arch = run_concrete(confusion, CONFUSION_INPUT, f)
    assert arch.result == 0 and arch.transient_insns == 0
    assert secret_accesses(confusion, arch) == []
    spec = run_concrete(confusion, CONFUSION_INPUT, f, parse_schedule("mispredict=1"))
    assert spec.result == 0
    assert (DATA, 0x500000) in spec.leakage
    assert (DATA, map_base(1) + 0x41) in spec.leakage
    assert secret_accesses(confusion, spec) == [0x500000]


def test_confusion_patched_stops_at_barrier(confusion):
    patched, _ = apply_patches(confusion, verify(confusion).patches)
    t = run_concrete(patched, CONFUSION_INPUT, F1, parse_schedule("mispredict=1"))
    assert t.transient_insns == 1
    assert secret_accesses(patched, t) == []


def test_differential_check_confusion(confusion):
    scheds = enumerate_schedules(confusion, 3, 2, 16)
    leak = differential_leak_check(confusion, [CONFUSION_INPUT], scheds, [F1, F2])
    assert isinstance(leak, Leak) and leak
    assert leak.schedule.mispredict == {1}
    assert leak.first_difference() >= 0
    # the witness replays to the same traces
    again = [run_concrete(confusion, leak.input, f, leak.schedule).leakage for f in leak.fillings]
    assert again == [t.leakage for t in leak.traces]
    patched, _ = apply_patches(confusion, verify(confusion).patches)
    ok = differential_leak_check(patched, [CONFUSION_INPUT], enumerate_schedules(patched, 3, 2, 16), [F1, F2])
    assert isinstance(ok, NoLeak) and not ok and ok.runs > 0


def test_trivial_program_has_no_leak():
    p = load("trivial")
    scheds = enumerate_schedules(p, 3, 2, 16)
    assert not differential_leak_check(p, [ProgramInput()], scheds, [F1, F2])


def test_differential_needs_two_fillings(confusion):
    with pytest.raises(ValueError):
        differential_leak_check(confusion, [CONFUSION_INPUT], [EMPTY_SCHEDULE], [F1])


def test_transient_loads_do_not_fault():
    p = parse_asm(".ctx size=8\nr2 = *(u64)(r1 + 0)\nif r2 == 0 goto out\nr0 = *(u64)(r2 + 0)\nout: r0 = 0\nexit")
    t = run_concrete(p, ProgramInput.from_words([0]), F1, parse_schedule("mispredict=0"))
    assert t.result == 0 and not t.faulted
    assert (DATA, 0) in t.leakage
    arch = run_concrete(p, ProgramInput.from_words([0xdead0]))
    assert arch.faulted and arch.result.startswith("FAULT")


def test_architectural_faults():
    assert run_concrete(parse_asm("r0 = *(u64)(r1 + 8)\nexit")).faulted
    assert run_concrete(parse_asm(".ctx size=8\n*(u64)(r1 + 0) = 1\nr0 = 0\nexit")).faulted
    t = run_concrete(load("infinite_loop"), max_steps=100)
    assert t.result == "FAULT: step limit exceeded"


def test_bypass_sees_old_stack_bytes():
    p = parse_asm("""
.map 1 size=256
    *(u64)(fp - 8) = 7
    r2 = *(u8)(fp - 8)
    r3 = map_ptr 1
    r3 += r2
    r0 = *(u8)(r3 + 0)
    r0 = 0
    exit
""")
    f = F1.with_bytes({STACK_TOP - 8: 0x33})
    arch = run_concrete(p, filling=f)
    assert (DATA, map_base(1) + 7) in arch.leakage
    t = run_concrete(p, filling=f, sched=parse_schedule("bypass=0"))
    assert (DATA, map_base(1) + 0x33) in t.leakage
    assert t.leakage[-len(arch.leakage):] != arch.leakage or len(t.leakage) > len(arch.leakage)
    assert differential_leak_check(p, [ProgramInput()], [parse_schedule("bypass=0")], [F1, F2])
    assert not differential_leak_check(p, [ProgramInput()], [EMPTY_SCHEDULE], [F1, F2])
    fenced, _ = apply_patches(p, [PatchDirective.v4(0)])
    assert not differential_leak_check(fenced, [ProgramInput()], [parse_schedule("bypass=0")], [F1, F2])


def test_transient_stores_are_squashed():
    p = parse_asm("""
.ctx size=8
.map 0 size=8
    r2 = *(u64)(r1 + 0)
    r3 = map_ptr 0
    if r2 == 0 goto out
    *(u64)(r3 + 0) = 99
    r0 = *(u64)(r3 + 0)
out:
    r0 = *(u64)(r3 + 0)
    exit
""")
    t = run_concrete(p, ProgramInput.from_words([0]), F1, parse_schedule("mispredict=0"))
    assert t.result == 0 and t.memory == (bytes(8),)
    assert (DATA, map_base(0)) in t.leakage and t.transient_insns == 4


def test_window_bounds_transient_run(confusion):
    for w, n in ((1, 1), (2, 2), (16, 6)):
        t = run_concrete(confusion, CONFUSION_INPUT, F1, Schedule(frozenset({1}), window=w))
        assert t.transient_insns == n


def test_trace_dump(confusion):
    t = run_concrete(confusion, CONFUSION_INPUT)
    lines = t.dump().splitlines()
    assert lines[0] == f"F {fetch_addr(0):#x}"
    assert lines[1] == f"D {CTX_BASE:#x}"
    assert len(lines) == len(t.leakage)


def test_enumerate_schedules_counts(confusion):
    assert len(enumerate_schedules(parse_asm("if r1 == 0 goto e\ne: r0 = 0\nexit"), 3, 2, 16)) == 4
    p = parse_asm("if r1 == 0 goto e\nif r1 == 1 goto e\ne: *(u64)(fp - 8) = 1\nr0 = 0\nexit")
    scheds = enumerate_schedules(p, 3, 2, 16)
    assert len(scheds) == 16 and len(set(scheds)) == 16
    assert {s.window for s in scheds} == {1, 16}
    assert len(enumerate_schedules(p, 3, 2, 1)) == 8
    with pytest.raises(ValueError, match="cap"):
        enumerate_schedules(p, 3, 2, 16, cap=10)


def test_parse_schedule():
    s = parse_schedule("mispredict=0,2 bypass=1 window=4")
    assert s == Schedule(frozenset({0, 2}), frozenset({1}), 4)
    assert parse_schedule(str(s)) == s
    assert parse_schedule("") == EMPTY_SCHEDULE
    assert str(EMPTY_SCHEDULE) == "window=16"


@pytest.mark.parametrize("text", ["foo=1", "mispredict", "mispredict=a", "window=0", "mispredict=-1",
                                  "window=3 window=4"])
def test_parse_schedule_errors(text):
    with pytest.raises(ValueError):
        parse_schedule(text)


def test_secret_filling():
    assert F1(0x1234) == F1(0x1234)
    assert any(F1(a) != F2(a) for a in range(16))
    f = F1.with_bytes({5: 0xAB})
    assert f(5) == 0xAB and f(6) == F1(6)


def _programs():
    return st.integers(0, 2**32).map(lambda s: (s, random_program(random.Random(s))))


@settings(max_examples=80, deadline=None)
@given(_programs(), st.integers(0, 2**32))
def test_empty_schedule_matches_reference(sp, iseed):
    _, p = sp
    assume(verify(p, VerifierConfig(mode=DefenseMode.NONE)).accepted)
    for inp in random_inputs(p, random.Random(iseed), 3):
        t = run_concrete(p, inp, F1)
        assert not t.faulted and t.transient_insns == 0
        result, maps = reference_run(p, inp)
        assert t.result == result
        decls = sorted(p.maps, key=lambda m: m.id)
        assert [buf[: m.value_size] for buf, m in zip(t.memory, decls)] == [maps[m.id] for m in decls]


@settings(max_examples=80, deadline=None)
@given(_programs(), st.integers(0, 2**32), st.sets(st.integers(0, 4)), st.sets(st.integers(0, 3)),
       st.integers(1, 20))
def test_squash_preserves_architecture(sp, iseed, mis, byp, window):
    _, p = sp
    inp = random_inputs(p, random.Random(iseed), 2)[1]
    sched = Schedule(frozenset(mis), frozenset(byp), window)
    arch = run_concrete(p, inp, F1)
    spec = run_concrete(p, inp, F1, sched)
    assert spec.result == arch.result and spec.memory == arch.memory
    assert spec == run_concrete(p, inp, F1, sched)


@settings(max_examples=80, deadline=None)
@given(_programs(), st.integers(0, 2**32), st.sets(st.integers(0, 6)))
def test_fence_on_every_successor_limits_transient_fetches(sp, iseed, mis):
    _, p = sp
    sites = set()
    for i, insn in enumerate(p.instructions):
        if insn.opcode in (Opcode.JCOND_IMM, Opcode.JCOND_REG):
            sites |= {i + 1, insn.jump_target(i)}
    patched, _ = apply_patches(p, [PatchDirective.v1(i) for i in sorted(sites)])
    inp = random_inputs(p, random.Random(iseed), 2)[1]
    arch = run_concrete(patched, inp, F1).leakage
    spec = run_concrete(patched, inp, F1, Schedule(frozenset(mis))).leakage
    # drop the single barrier fetch that follows each mispredicted branch
    filtered, i, ordinal = [], 0, 0
    branch_fetches = {fetch_addr(j) for j, insn in enumerate(patched.instructions)
                      if insn.opcode in (Opcode.JCOND_IMM, Opcode.JCOND_REG)}
    while i < len(spec):
        e = spec[i]
        filtered.append(e)
        if e[0] == FETCH and e[1] in branch_fetches:
            if ordinal in mis:
                barrier = spec[i + 1]
                assert barrier[0] == FETCH
                assert patched.instructions[(barrier[1] - fetch_addr(0)) // 8].opcode is Opcode.NOSPEC_V1
                i += 1
            ordinal += 1
        i += 1
    assert filtered == arch
