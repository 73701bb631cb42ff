"""Command-line frontend: ``specfence verify|patch|run|fuzz|corpus``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .harness import (
    FuzzConfig,
    aggregate_lines,
    analyze_corpus,
    load_program,
    rows_to_csv,
    run_fuzz,
    write_counterexample,
)
from .isa import AsmError, Program, emit_asm
from .patcher import apply_patches
from .specsim import (
    ProgramInput,
    SecretFilling,
    parse_schedule,
    run_concrete,
    secret_accesses,
)
from .verifier import DefenseMode, VerificationResult, VerifierConfig, verify

EXIT_OK = 0
EXIT_REJECTED = 1
EXIT_INPUT = 2
EXIT_LEAK = 3


class InputError(Exception):
    pass


def _load(path: str) -> Program:
    try:
        return load_program(Path(path))
    except OSError as e:
        raise InputError(f"{path}: {e.strerror}") from None
    except (AsmError, ValueError) as e:
        raise InputError(f"{path}: {e}") from None


def _int(text: str) -> int:
    return int(text, 0)


def _verifier_config(args) -> VerifierConfig:
    try:
        return VerifierConfig(
            mode=DefenseMode(args.mode),
            insn_budget=args.insn_budget,
            total_budget=args.total_budget,
            limit_factor=args.limit_factor,
        )
    except ValueError as e:
        raise InputError(str(e)) from None


def _report(p: Program, mode: DefenseMode, res: VerificationResult) -> list[str]:
    lines = [
        f"program: {p.name} ({len(p)} insns)",
        f"mode: {mode.value}",
        f"verdict: {res.verdict}",
        f"category: {res.category.value if res.category else '-'}",
    ]
    if not res.accepted:
        lines.append(f"reject_pc: {res.reject_pc}")
        lines.append(f"detail: {res.detail}")
    lines.append(f"patches: {len(res.patches)}")
    for d in res.patches:
        extra = f" map={d.map_id} reg=r{d.reg}" if d.map_id is not None else ""
        lines.append(f"  {d.index:4d} {d.kind.name} {d.placement.value}{extra}")
    lines.append("stats: " + " ".join(f"{k}={v}" for k, v in vars(res.stats).items()))
    return lines


def cmd_verify(args) -> int:
    p = _load(args.path)
    cfg = _verifier_config(args)
    res = verify(p, cfg)
    print("\n".join(_report(p, cfg.mode, res)))
    if args.out:
        report = {"program": p.name, "insns": len(p), "mode": cfg.mode.value, **res.to_dict()}
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_OK if res.accepted else EXIT_REJECTED


def cmd_patch(args) -> int:
    p = _load(args.path)
    cfg = _verifier_config(args)
    res = verify(p, cfg)
    if not res.accepted:
        print(f"rejected: {res.category.value}: {res.detail}", file=sys.stderr)
        return EXIT_REJECTED
    patched, _ = apply_patches(p, res.patches)
    text = emit_asm(patched) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _parse_input(args, p: Program) -> tuple[ProgramInput, SecretFilling]:
    try:
        words = [_int(w) for w in args.ctx.split(",") if w.strip()] if args.ctx else []
        maps = {}
        for spec in args.map:
            mid, _, hexdata = spec.partition("=")
            maps[int(mid)] = bytes.fromhex(hexdata)
        overrides = {}
        for spec in args.secret:
            addr, _, val = spec.partition("=")
            overrides[_int(addr)] = _int(val) & 0xFF
    except ValueError as e:
        raise InputError(f"malformed input: {e}") from None
    filling = SecretFilling(args.filling_seed).with_bytes(overrides)
    return ProgramInput.from_words(words, maps), filling


def cmd_run(args) -> int:
    p = _load(args.path)
    inp, filling = _parse_input(args, p)
    try:
        sched = parse_schedule(args.schedule)
        if args.window is not None and "window=" not in args.schedule:
            sched = replace(sched, window=args.window)
    except ValueError as e:
        raise InputError(f"malformed schedule: {e}") from None
    trace = run_concrete(p, inp, filling, sched)
    result = trace.result if trace.faulted else f"{trace.result:#x}"
    print(f"result: {result}")
    print(f"schedule: {sched}")
    print(f"transient_insns: {trace.transient_insns}")
    secrets = secret_accesses(p, trace)
    print("secret_accesses: " + (" ".join(f"{a:#x}" for a in secrets) if secrets else "none"))
    if args.trace:
        print(trace.dump())
    return EXIT_OK


def cmd_fuzz(args) -> int:
    try:
        cfg = FuzzConfig(
            seed=args.seed,
            program_count=args.count,
            max_snippets=args.max_snippets,
            max_branches=args.max_branches,
            max_stores=args.max_stores,
            max_window=args.window,
            filling_count=args.fillings,
            input_count=args.inputs,
        )
    except ValueError as e:
        raise InputError(str(e)) from None
    vcfg = _verifier_config(args)
    extra = [_load(path) for path in args.extra]
    summary = run_fuzz(cfg, vcfg, extra, jobs=args.jobs)
    print(f"mode: {vcfg.mode.value} seed: {cfg.seed}")
    print("\n".join(summary.lines()))
    if summary.counterexamples:
        out_dir = Path(args.out or "fuzz-failures")
        for case in summary.counterexamples:
            path = write_counterexample(case, cfg, out_dir)
            print(f"counterexample: {case.name} schedule=[{case.leak.schedule}] -> {path}")
        return EXIT_LEAK
    return EXIT_OK


def cmd_corpus(args) -> int:
    d = Path(args.dir)
    if not d.is_dir():
        raise InputError(f"{d}: not a directory")
    rows = analyze_corpus(d, _verifier_config(args))
    text = rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print("\n".join(aggregate_lines(rows)), file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def _add_verifier_flags(sp: argparse.ArgumentParser, mode: str = "verifence") -> None:
    sp.add_argument("--mode", choices=[m.value for m in DefenseMode], default=mode)
    sp.add_argument("--limit-factor", type=int, default=4, help="speculative budget multiplier")
    sp.add_argument("--insn-budget", type=int, default=10_000, help="per-path instruction budget")
    sp.add_argument("--total-budget", type=int, default=1_000_000, help="total instruction budget")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="specfence", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("verify", help="verify a program and list patch directives")
    sp.add_argument("path")
    _add_verifier_flags(sp)
    sp.add_argument("--out", help="write a JSON report here")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("patch", help="write the patched program as assembly")
    sp.add_argument("path")
    _add_verifier_flags(sp)
    sp.add_argument("--out", help="output file (default: stdout)")
    sp.set_defaults(func=cmd_patch)

    sp = sub.add_parser("run", help="run a program concretely under a schedule")
    sp.add_argument("path")
    sp.add_argument("--ctx", default="", help="comma-separated 64-bit ctx words")
    sp.add_argument("--map", action="append", default=[], metavar="ID=HEX", help="map contents")
    sp.add_argument("--secret", action="append", default=[], metavar="ADDR=BYTE", help="pin a secret byte")
    sp.add_argument("--filling-seed", type=int, default=1)
    sp.add_argument("--schedule", default="", help="e.g. 'mispredict=0,2 bypass=1 window=16'")
    sp.add_argument("--window", type=int, help="window when the schedule does not give one")
    sp.add_argument("--trace", action="store_true", help="dump the leakage trace")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("fuzz", help="soundness fuzzing against the leakage oracle")
    _add_verifier_flags(sp)
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--count", type=int, default=100)
    sp.add_argument("--max-snippets", type=int, default=10)
    sp.add_argument("--max-branches", type=int, default=3)
    sp.add_argument("--max-stores", type=int, default=2)
    sp.add_argument("--window", type=int, default=16)
    sp.add_argument("--fillings", type=int, default=2)
    sp.add_argument("--inputs", type=int, default=3)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--extra", action="append", default=[], metavar="PATH", help="also check this program")
    sp.add_argument("--out", help="failure directory (default: fuzz-failures)")
    sp.set_defaults(func=cmd_fuzz)

    sp = sub.add_parser("corpus", help="verify every .s file under all modes and emit CSV")
    sp.add_argument("dir")
    _add_verifier_flags(sp)
    sp.add_argument("--out", help="CSV path (default: stdout)")
    sp.set_defaults(func=cmd_corpus)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
