"""Path-exploration verifier with four defense modes.

Verification runs in two phases. The architectural phase walks every path
from the entry state (depth-first, taken direction first) and records stack
store observations, variable map-index sites and every conditional branch it
passes. The speculative phase then replays each recorded branch in the
mispredicted direction. Under ``FULL_REJECT`` any unsafe speculative behavior
rejects the program; under ``VERIFENCE`` it becomes a ``nospec_v1`` in front
of the offending instruction and the speculative path is dropped.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

from .absdomain import (
    AbstractState,
    Continue,
    Exit,
    PtrMap,
    PtrStack,
    Scalar,
    Unsafe,
    UnsafeKind,
    abstract_step,
    type_kind,
)
from .isa import (
    BARRIER_OPS,
    BRANCH_OPS,
    STACK_SIZE,
    AluOp,
    Instruction,
    Opcode,
    Program,
    validate_structure,
)

log = logging.getLogger(__name__)


class DefenseMode(enum.Enum):
    NONE = "none"
    STL = "stl"
    FULL_REJECT = "full-reject"
    VERIFENCE = "verifence"

    @property
    def speculative(self) -> bool:
        return self in (DefenseMode.FULL_REJECT, DefenseMode.VERIFENCE)

    @property
    def stl(self) -> bool:
        return self is not DefenseMode.NONE


class Category(enum.Enum):
    TYPES = "TYPES"
    VARIABLE_STACK_ACCESS = "VARIABLE_STACK_ACCESS"
    BREAKOUT = "BREAKOUT"
    TOO_COMPLEX = "TOO_COMPLEX"


# higher wins when several paths fail
_PRECEDENCE = {
    Category.VARIABLE_STACK_ACCESS: 3,
    Category.TYPES: 2,
    Category.BREAKOUT: 1,
    Category.TOO_COMPLEX: 0,
}

_UNSAFE_CATEGORY = {
    UnsafeKind.TYPE_VIOLATION: Category.TYPES,
    UnsafeKind.BREAKOUT: Category.BREAKOUT,
    UnsafeKind.UNINIT_READ: Category.BREAKOUT,
    UnsafeKind.VARIABLE_STACK_ACCESS: Category.VARIABLE_STACK_ACCESS,
}


@dataclass(frozen=True)
class VerifierConfig:
    mode: DefenseMode = DefenseMode.VERIFENCE
    insn_budget: int = 10_000
    total_budget: int = 1_000_000
    limit_factor: int = 4
    premature_fence_threshold: float = 0.9

    def __post_init__(self) -> None:
        if self.insn_budget <= 0 or self.total_budget <= 0:
            raise ValueError("budgets must be positive")
        if not 0 < self.premature_fence_threshold <= 1:
            raise ValueError("premature_fence_threshold must be in (0, 1]")
        if self.limit_factor < 1:
            raise ValueError("limit_factor must be >= 1")

    @property
    def factor(self) -> int:
        return self.limit_factor if self.mode.speculative else 1

    @property
    def path_limit(self) -> int:
        return self.insn_budget * self.factor

    @property
    def total_limit(self) -> int:
        return self.total_budget * self.factor


class DirectiveKind(enum.IntEnum):
    NOSPEC_V1 = 0
    NOSPEC_V4 = 1
    MASK_INDEX = 2


class Placement(enum.Enum):
    BEFORE = "before"
    AFTER = "after"


@dataclass(frozen=True)
class PatchDirective:
    index: int
    kind: DirectiveKind
    placement: Placement
    map_id: int | None = None
    reg: int | None = None

    @classmethod
    def v1(cls, index: int) -> PatchDirective:
        return cls(index, DirectiveKind.NOSPEC_V1, Placement.BEFORE)

    @classmethod
    def v4(cls, index: int) -> PatchDirective:
        return cls(index, DirectiveKind.NOSPEC_V4, Placement.AFTER)

    @classmethod
    def mask(cls, index: int, map_id: int, reg: int) -> PatchDirective:
        return cls(index, DirectiveKind.MASK_INDEX, Placement.BEFORE, map_id, reg)

    def sort_key(self) -> tuple[int, int]:
        return self.index, int(self.kind)

    def to_dict(self) -> dict:
        d = {"index": self.index, "kind": self.kind.name, "placement": self.placement.value}
        if self.kind is DirectiveKind.MASK_INDEX:
            d.update(map_id=self.map_id, reg=self.reg)
        return d


@dataclass
class Stats:
    paths_explored: int = 0
    spec_paths_explored: int = 0
    insns_simulated: int = 0
    spec_insns_simulated: int = 0
    v1_count: int = 0
    v4_count: int = 0
    mask_count: int = 0
    premature_v1_count: int = 0


@dataclass
class VerificationResult:
    verdict: str  # "ACCEPT" or "REJECT"
    category: Category | None = None
    patches: list[PatchDirective] = field(default_factory=list)
    stats: Stats = field(default_factory=Stats)
    detail: str = ""
    reject_pc: int | None = None

    @property
    def accepted(self) -> bool:
        return self.verdict == "ACCEPT"

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "category": self.category.value if self.category else None,
            "detail": self.detail,
            "reject_pc": self.reject_pc,
            "patches": [d.to_dict() for d in self.patches],
            "stats": vars(self.stats).copy(),
        }


class Budget:
    """Instruction counter shared by every path of one verification run."""

    def __init__(self, limit: int, threshold: float = 1.0):
        self.limit = limit
        self.fence_at = threshold * limit
        self.used = 0

    def charge(self, n: int) -> None:
        self.used += n

    @property
    def exhausted(self) -> bool:
        return self.used >= self.limit

    @property
    def past_threshold(self) -> bool:
        return self.used >= self.fence_at


# ---------------------------------------------------------------------------
# stepping helpers


MaskSites = dict  # insn index -> (map_id, reg, padded_size)


def _step(s: AbstractState, insn: Instruction, p: Program, masks: MaskSites):
    """abstract_step plus an implicit index mask at planned sites; returns (outcome, cost)."""
    site = masks.get(s.pc)
    if site is None:
        return abstract_step(s, insn, p), 1
    _, reg, padded = site
    and_insn = Instruction(Opcode.ALU_IMM, dst=reg, alu_op=AluOp.AND, imm=padded - 1)
    out = abstract_step(s, and_insn, p)
    if not isinstance(out, Continue):
        return out, 1
    return abstract_step(replace(out.states[0], pc=s.pc), insn, p), 2


def _stl_observation(s: AbstractState, insn: Instruction) -> tuple[str, str] | None:
    if insn.opcode not in (Opcode.STORE_REG, Opcode.STORE_IMM):
        return None
    base = s.regs[insn.dst]
    if not isinstance(base, PtrStack):
        return None
    addr = base.off + insn.off
    if addr < -STACK_SIZE or addr + insn.size > 0 or addr % insn.size:
        return None
    rel = addr + STACK_SIZE
    bm = ((1 << insn.size) - 1) << (rel % 8)
    slot = s.stack[rel // 8]
    old = "uninit" if slot.init & bm != bm else slot.describe()
    new = "scalar" if insn.opcode is Opcode.STORE_IMM else type_kind(s.regs[insn.src])
    return old, new


def _mask_observation(s: AbstractState, insn: Instruction) -> tuple | None:
    if insn.opcode is not Opcode.ALU_REG or insn.alu_op is not AluOp.ADD:
        return None
    d, v = s.regs[insn.dst], s.regs[insn.src]
    dst = ("map", d.map_id) if isinstance(d, PtrMap) else (type_kind(d),)
    if isinstance(v, Scalar):
        src = "const" if v.info.is_const else "var"
    else:
        src = type_kind(v)
    return dst, src


def _jump_targets(p: Program) -> set[int]:
    return {insn.jump_target(i) for i, insn in enumerate(p.instructions) if insn.opcode in BRANCH_OPS}


# ---------------------------------------------------------------------------
# architectural phase


@dataclass
class _ArchRun:
    budget: Budget
    stl_obs: dict = field(default_factory=dict)
    mask_obs: dict = field(default_factory=dict)
    branch_points: list = field(default_factory=list)  # (state, mispredicted_pc)
    failures: list = field(default_factory=list)  # (category, pc, detail)
    paths: int = 0
    insns: int = 0


def _explore_arch(p: Program, cfg: VerifierConfig, masks: MaskSites) -> _ArchRun:
    run = _ArchRun(Budget(cfg.total_limit, cfg.premature_fence_threshold))
    stack = [AbstractState.entry()]
    run.paths = 1
    while stack:
        s = stack.pop()
        insn = p.instructions[s.pc]
        if run.budget.exhausted or s.budget_used >= cfg.path_limit:
            run.failures.append((Category.TOO_COMPLEX, s.pc, "instruction budget exhausted on architectural path"))
            break
        if (ob := _mask_observation(s, insn)) is not None:
            run.mask_obs.setdefault(s.pc, set()).add(ob)
        stl = _stl_observation(s, insn)
        out, cost = _step(s, insn, p, masks)
        if insn.opcode not in BARRIER_OPS:
            run.budget.charge(cost)
            run.insns += cost
        if isinstance(out, Unsafe):
            cat = _UNSAFE_CATEGORY[out.kind]
            run.failures.append((cat, s.pc, out.detail))
            if cat is Category.VARIABLE_STACK_ACCESS:
                break
            continue
        if isinstance(out, Exit):
            continue
        if stl is not None:
            run.stl_obs.setdefault(s.pc, set()).add(stl)
        if insn.opcode in (Opcode.JCOND_IMM, Opcode.JCOND_REG):
            taken, fall = insn.jump_target(s.pc), s.pc + 1
            feasible = {st.pc for st in out.states}
            spawned: list[int] = []
            for d in (taken, fall):
                other = fall if d == taken else taken
                if d in feasible and other not in spawned:
                    spawned.append(other)
            for mpc in spawned:
                run.branch_points.append((s, mpc))
        run.paths += len(out.states) - 1
        stack.extend(reversed(out.states))
    return run


# ---------------------------------------------------------------------------
# speculative phase


@dataclass
class SpecResult:
    unsafe_sites: list[int] = field(default_factory=list)
    premature_sites: list[int] = field(default_factory=list)
    rejection: Category | None = None
    reject_pc: int | None = None
    detail: str = ""
    paths: int = 0
    insns: int = 0


def explore_speculative(
    branch_state: AbstractState,
    mispredicted_pc: int,
    p: Program,
    cfg: VerifierConfig,
    budget: Budget,
    *,
    masks: MaskSites | None = None,
    stl_obs: dict | None = None,
) -> SpecResult:
    """Verify every transient continuation of one mispredicted branch.

    The mispredicted direction starts from the unrefined branch state. Inner
    branches fork both ways without refinement. A path ends at exit, at any
    barrier, or when the shared budget crosses the premature-fence threshold.
    """
    masks = masks or {}
    res = SpecResult(paths=1)
    start = replace(
        branch_state, pc=mispredicted_pc, speculative=True, budget_used=branch_state.budget_used + 1
    )
    fence_mode = cfg.mode is DefenseMode.VERIFENCE
    sites: dict[int, None] = {}
    premature: dict[int, None] = {}
    stack = [start]
    while stack:
        s = stack.pop()
        insn = p.instructions[s.pc]
        if insn.opcode in BARRIER_OPS:
            continue
        if budget.past_threshold or s.budget_used >= cfg.path_limit:
            if fence_mode:
                premature.setdefault(s.pc)
                continue
            res.rejection, res.reject_pc = Category.TOO_COMPLEX, s.pc
            res.detail = "speculative exploration exceeded the complexity limit"
            break
        stl = _stl_observation(s, insn)
        out, cost = _step(s, insn, p, masks)
        budget.charge(cost)
        res.insns += cost
        if isinstance(out, Unsafe):
            cat = _UNSAFE_CATEGORY[out.kind]
            if fence_mode and cat is not Category.VARIABLE_STACK_ACCESS:
                sites.setdefault(s.pc)
                continue
            if res.rejection is None or _PRECEDENCE[cat] > _PRECEDENCE[res.rejection]:
                res.rejection, res.reject_pc = cat, s.pc
                res.detail = f"speculative path: {out.detail}"
            if cat is Category.VARIABLE_STACK_ACCESS:
                break
            continue
        if isinstance(out, Exit):
            continue
        if stl is not None and stl_obs is not None:
            stl_obs.setdefault(s.pc, set()).add(stl)
        res.paths += len(out.states) - 1
        stack.extend(reversed(out.states))
    res.unsafe_sites = list(sites)
    res.premature_sites = list(premature)
    return res


# ---------------------------------------------------------------------------
# barrier and mask planning


def run_stl_pass(p: Program, path_states: dict) -> list[PatchDirective]:
    """nospec_v4 after every stack store except scalar-over-scalar ones."""
    out = []
    for i in sorted(path_states):
        obs = path_states[i]
        if obs and all(o == ("scalar", "scalar") for o in obs):
            continue
        nxt = i + 1
        if nxt < len(p) and p.instructions[nxt].opcode is Opcode.NOSPEC_V4:
            continue
        out.append(PatchDirective.v4(i))
    return out


def _already_masked(p: Program, i: int, reg: int, padded: int, targets: set[int]) -> bool:
    if i == 0 or i in targets:
        return False
    prev = p.instructions[i - 1]
    return (
        prev.opcode is Opcode.ALU_IMM
        and prev.alu_op is AluOp.AND
        and prev.dst == reg
        and prev.imm == padded - 1
    )


def plan_index_masks(p: Program, path_states: dict) -> list[PatchDirective]:
    """Index masks for ``map_ptr += scalar`` sites with a non-constant scalar.

    A site qualifies only if every architectural visit adds a scalar to a
    pointer into the same map, so the in-place mask never changes an
    architectural value.
    """
    targets = _jump_targets(p)
    out = []
    for i in sorted(path_states):
        obs = path_states[i]
        dsts = {d for d, _ in obs}
        srcs = {s for _, s in obs}
        if len(dsts) != 1 or next(iter(dsts))[0] != "map":
            continue
        if "var" not in srcs or not srcs <= {"var", "const"}:
            continue
        map_id = next(iter(dsts))[1]
        reg = p.instructions[i].src
        padded = p.map_decl(map_id).padded_size
        if _already_masked(p, i, reg, padded, targets):
            continue
        out.append(PatchDirective.mask(i, map_id, reg))
    return out


def _mask_sites(p: Program, directives: list[PatchDirective]) -> MaskSites:
    return {d.index: (d.map_id, d.reg, p.map_decl(d.map_id).padded_size) for d in directives}


# ---------------------------------------------------------------------------
# entry point


def _reject(cat: Category, pc: int | None, detail: str, stats: Stats) -> VerificationResult:
    return VerificationResult("REJECT", cat, [], stats, detail, pc)


def _pick(failures: list) -> tuple:
    best = failures[0]
    for f in failures[1:]:
        if _PRECEDENCE[f[0]] > _PRECEDENCE[best[0]]:
            best = f
    return best


def verify(p: Program, cfg: VerifierConfig | None = None) -> VerificationResult:
    """Verify ``p`` and compute the patch directives required by ``cfg.mode``."""
    cfg = cfg or VerifierConfig()
    errs = validate_structure(p)
    if errs:
        raise ValueError("structurally invalid program: " + "; ".join(map(str, errs)))

    masks: MaskSites = {}
    mask_dirs: dict[int, PatchDirective] = {}
    while True:
        arch = _explore_arch(p, cfg, masks)
        if arch.failures or not cfg.mode.speculative:
            break
        grown = False
        for d in plan_index_masks(p, arch.mask_obs):
            if d.index not in mask_dirs:
                mask_dirs[d.index] = d
                grown = True
        if not grown:
            break
        masks = _mask_sites(p, list(mask_dirs.values()))

    stats = Stats(paths_explored=arch.paths, insns_simulated=arch.insns)
    if arch.failures:
        cat, pc, detail = _pick(arch.failures)
        return _reject(cat, pc, detail, stats)

    stl_obs = {k: set(v) for k, v in arch.stl_obs.items()}
    v1: dict[int, None] = {}
    premature: dict[int, None] = {}
    if cfg.mode.speculative:
        failures = []
        # last recorded first, as a worklist verifier pops its most recent push
        for state, mpc in reversed(arch.branch_points):
            r = explore_speculative(state, mpc, p, cfg, arch.budget, masks=masks, stl_obs=stl_obs)
            stats.spec_paths_explored += r.paths
            stats.spec_insns_simulated += r.insns
            for site in r.unsafe_sites:
                v1.setdefault(site)
            for site in r.premature_sites:
                premature.setdefault(site)
            if r.rejection is not None:
                failures.append((r.rejection, r.reject_pc, r.detail))
                if r.rejection in (Category.VARIABLE_STACK_ACCESS, Category.TOO_COMPLEX):
                    break
        if failures:
            cat, pc, detail = _pick(failures)
            return _reject(cat, pc, detail, stats)

    patches: list[PatchDirective] = []
    for site in dict.fromkeys([*v1, *premature]):
        patches.append(PatchDirective.v1(site))
    if cfg.mode.stl:
        patches.extend(run_stl_pass(p, stl_obs))
    patches.extend(mask_dirs.values())
    patches = sorted(set(patches), key=PatchDirective.sort_key)
    stats.v1_count = sum(d.kind is DirectiveKind.NOSPEC_V1 for d in patches)
    stats.v4_count = sum(d.kind is DirectiveKind.NOSPEC_V4 for d in patches)
    stats.mask_count = sum(d.kind is DirectiveKind.MASK_INDEX for d in patches)
    stats.premature_v1_count = len([s for s in premature if s not in v1])
    log.debug("verified %s: %d patches", p.name, len(patches))
    return VerificationResult("ACCEPT", None, patches, stats)
