"""Bytecode verifier with fence-or-verify Spectre defenses.

The verifier explores every architectural path of a small BPF-like program,
then every mispredicted path, and either rejects the program or inserts
speculation barriers and index masks where transient execution is unsafe.
"""

from .isa import (
    Instruction,
    MapDecl,
    Opcode,
    Program,
    emit_asm,
    parse_asm,
    validate_structure,
)
from .patcher import apply_patches, lower_barriers
from .specsim import (
    ProgramInput,
    Schedule,
    SecretFilling,
    differential_leak_check,
    enumerate_schedules,
    run_concrete,
)
from .verifier import (
    Category,
    DefenseMode,
    DirectiveKind,
    PatchDirective,
    VerificationResult,
    VerifierConfig,
    verify,
)

__all__ = [
    "Category", "DefenseMode", "DirectiveKind", "Instruction", "MapDecl", "Opcode", "PatchDirective",
    "Program", "ProgramInput", "Schedule", "SecretFilling", "VerificationResult", "VerifierConfig",
    "apply_patches", "differential_leak_check", "emit_asm", "enumerate_schedules", "lower_barriers",
    "parse_asm", "run_concrete", "validate_structure", "verify",
]
