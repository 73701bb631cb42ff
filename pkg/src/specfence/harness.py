"""Batch drivers: soundness fuzzing and corpus statistics."""

from __future__ import annotations

import csv
import io
import json
import random
import statistics
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .fuzzgen import GenConfig, random_inputs, random_program
from .isa import AsmError, Program, emit_asm, parse_asm, validate_structure
from .patcher import apply_patches
from .specsim import Leak, SecretFilling, differential_leak_check, enumerate_schedules
from .verifier import (
    DefenseMode,
    DirectiveKind,
    VerificationResult,
    VerifierConfig,
    verify,
)

CSV_COLUMNS = ("name", "insns", "mode", "verdict", "category", "v1", "v4", "masks", "barrier_fraction")
MODE_ORDER = (DefenseMode.NONE, DefenseMode.STL, DefenseMode.FULL_REJECT, DefenseMode.VERIFENCE)


@dataclass(frozen=True)
class FuzzConfig:
    seed: int = 1
    program_count: int = 100
    max_snippets: int = 10
    max_branches: int = 3
    max_stores: int = 2
    max_window: int = 16
    filling_count: int = 2
    input_count: int = 3
    schedule_cap: int = 4096

    def __post_init__(self) -> None:
        if self.program_count < 0:
            raise ValueError("program_count must be non-negative")
        for name in ("max_snippets", "max_branches", "max_stores", "max_window", "input_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.filling_count < 2:
            raise ValueError("filling_count must be at least 2")

    def fillings(self) -> list[SecretFilling]:
        return [SecretFilling(self.seed * 7919 + k + 1) for k in range(self.filling_count)]


@dataclass
class FuzzCase:
    name: str
    program: Program
    result: VerificationResult
    patched: Program | None = None
    leak: Leak | None = None
    schedules: int = 0


def fuzz_program(index: int, cfg: FuzzConfig) -> Program:
    rng = random.Random(cfg.seed * 1_000_003 + index)
    return random_program(rng, GenConfig(max_snippets=cfg.max_snippets), name=f"fuzz{index:05d}")


def check_program(p: Program, cfg: FuzzConfig, vcfg: VerifierConfig, input_seed: int = 0) -> FuzzCase:
    """Verify, patch, and leak-check one program over the enumerated schedule space."""
    res = verify(p, vcfg)
    case = FuzzCase(p.name, p, res)
    if not res.accepted:
        return case
    patched, _ = apply_patches(p, res.patches)
    case.patched = patched
    scheds = enumerate_schedules(patched, cfg.max_branches, cfg.max_stores, cfg.max_window, cfg.schedule_cap)
    inputs = random_inputs(patched, random.Random(input_seed), cfg.input_count)
    case.schedules = len(scheds)
    verdict = differential_leak_check(patched, inputs, scheds, cfg.fillings())
    if verdict:
        case.leak = verdict
    return case


def _fuzz_task(args) -> FuzzCase:
    index, cfg, vcfg = args
    return check_program(fuzz_program(index, cfg), cfg, vcfg, input_seed=cfg.seed * 31 + index)


@dataclass
class FuzzSummary:
    programs: int = 0
    accepted: int = 0
    rejected: Counter = field(default_factory=Counter)
    leak_checked: int = 0
    schedules: int = 0
    counterexamples: list[FuzzCase] = field(default_factory=list)

    def add(self, case: FuzzCase) -> None:
        self.programs += 1
        if case.result.accepted:
            self.accepted += 1
            self.leak_checked += 1
            self.schedules += case.schedules
        else:
            self.rejected[case.result.category.value] += 1
        if case.leak is not None:
            self.counterexamples.append(case)

    def lines(self) -> list[str]:
        out = [
            f"programs: {self.programs}",
            f"accepted: {self.accepted}",
            f"rejected: {sum(self.rejected.values())}",
        ]
        out += [f"  {cat}: {n}" for cat, n in sorted(self.rejected.items())]
        out += [
            f"leak_checked: {self.leak_checked}",
            f"schedules: {self.schedules}",
            f"counterexamples: {len(self.counterexamples)}",
        ]
        return out


def run_fuzz(
    cfg: FuzzConfig,
    vcfg: VerifierConfig | None = None,
    extra: list[Program] = (),
    jobs: int = 1,
) -> FuzzSummary:
    """Fuzz ``cfg.program_count`` generated programs plus any ``extra`` ones."""
    vcfg = vcfg or VerifierConfig()
    summary = FuzzSummary()
    tasks = [(i, cfg, vcfg) for i in range(cfg.program_count)]
    if jobs > 1 and tasks:
        with ProcessPoolExecutor(jobs) as pool:
            cases = list(pool.map(_fuzz_task, tasks, chunksize=16))
    else:
        cases = [_fuzz_task(t) for t in tasks]
    cases += [check_program(p, cfg, vcfg, input_seed=cfg.seed) for p in extra]
    for c in cases:
        summary.add(c)
    return summary


def write_counterexample(case: FuzzCase, cfg: FuzzConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{case.name}.s").write_text(emit_asm(case.program) + "\n")
    (out_dir / f"{case.name}.patched.s").write_text(emit_asm(case.patched) + "\n")
    leak = case.leak
    witness = {
        "program": case.name,
        "schedule": str(leak.schedule),
        "ctx": leak.input.ctx.hex(),
        "maps": {str(k): v.hex() for k, v in leak.input.maps},
        "filling_seeds": [f.seed for f in leak.fillings],
        "first_difference": leak.first_difference(),
        "patches": [d.to_dict() for d in case.result.patches],
    }
    path = out_dir / f"{case.name}.witness.json"
    path.write_text(json.dumps(witness, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# corpus statistics


@dataclass(frozen=True)
class CorpusRow:
    name: str
    insns: int
    mode: str
    verdict: str
    category: str
    v1: int
    v4: int
    masks: int
    barrier_fraction: float | None

    def as_csv(self) -> list:
        frac = "" if self.barrier_fraction is None else f"{self.barrier_fraction:.4f}"
        return [self.name, self.insns, self.mode, self.verdict, self.category, self.v1, self.v4, self.masks, frac]


def barrier_fraction(insns: int, res: VerificationResult) -> float:
    barriers = sum(d.kind is not DirectiveKind.MASK_INDEX for d in res.patches)
    return barriers / (insns + len(res.patches))


def load_program(path: Path) -> Program:
    p = parse_asm(path.read_text(), name=path.stem)
    errs = validate_structure(p)
    if errs:
        raise ValueError("; ".join(map(str, errs)))
    return p


def corpus_rows(path: Path, vcfg: VerifierConfig) -> list[CorpusRow]:
    name = path.stem
    try:
        p = load_program(path)
    except (AsmError, ValueError):
        return [CorpusRow(name, 0, m.value, "PARSE_ERROR", "", 0, 0, 0, None) for m in MODE_ORDER]
    rows = []
    for m in MODE_ORDER:
        res = verify(p, replace(vcfg, mode=m))
        rows.append(CorpusRow(
            name, len(p), m.value, res.verdict, res.category.value if res.category else "",
            res.stats.v1_count, res.stats.v4_count, res.stats.mask_count,
            barrier_fraction(len(p), res) if res.accepted else None,
        ))
    return rows


def analyze_corpus(directory: Path, vcfg: VerifierConfig | None = None) -> list[CorpusRow]:
    vcfg = vcfg or VerifierConfig()
    rows = []
    for path in sorted(directory.glob("*.s")):
        rows += corpus_rows(path, vcfg)
    return rows


def rows_to_csv(rows: list[CorpusRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.as_csv())
    return buf.getvalue()


def aggregate_lines(rows: list[CorpusRow]) -> list[str]:
    out = []
    for m in MODE_ORDER:
        mine = [r for r in rows if r.mode == m.value]
        rejected = Counter(r.category for r in mine if r.verdict == "REJECT")
        parse = sum(r.verdict == "PARSE_ERROR" for r in mine)
        fracs = [r.barrier_fraction for r in mine if r.barrier_fraction is not None]
        line = f"{m.value}: accepted={len(fracs)} rejected={sum(rejected.values())}"
        if parse:
            line += f" parse_errors={parse}"
        if rejected:
            line += " (" + ", ".join(f"{c}={n}" for c, n in sorted(rejected.items())) + ")"
        if fracs:
            line += f" barrier_fraction median={statistics.median(fracs):.4f} mean={statistics.fmean(fracs):.4f}"
        out.append(line)
    return out
