"""Defense policies consulted by the core at issue and decode time.

Three modes: unprotected (no gating), dom (delay-on-miss: shadowed loads
execute only on an L1 hit, with replacement effects deferred to commit),
and dom_plus_invarspec (dom plus invariance lifting: once every safe-set
member of an instruction reaches its outcome-safe point, the gate is
bypassed for it).

OSP here requires the member to have actually produced its result. An
instruction whose operands are determined but not yet computed is
OSP-eligible, not OSP; a branch in particular reaches OSP no earlier than
its resolution. Lifting keyed on anything weaker would reopen the leak
that the conservative safe-set filter exists to close.

Mitigations are orthogonal toggles. conservative_invariance and
path_balancing act at analysis time (the policy only records them and,
for balancing, demands a certificate). operand_independent_fill acts at
decode: a REP whose counter is still in flight expands to a fixed
predicted count instead of stalling for the bypassed value, and a
mismatch discovered at verification squashes and re-expands.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Mapping, Protocol

from .analysis import BalanceError, SafeSet, analyze_all_branches
from .isa import REP_OPCODES, Opcode, Program

if TYPE_CHECKING:
    from .cache import CacheState


class DefenseMode(Enum):
    UNPROTECTED = "unprotected"
    DOM = "dom"
    DOM_PLUS_INVARSPEC = "dom_plus_invarspec"


class Mitigation(Enum):
    CONSERVATIVE_INVARIANCE = "conservative_invariance"
    PATH_BALANCING = "path_balancing"
    OPERAND_INDEPENDENT_FILL = "operand_independent_fill"


class DomDecision(Enum):
    EXECUTE_HIT_DEFERRED = "execute_hit_deferred"
    DELAY = "delay"


class FillDecision(Enum):
    DISPATCH = "dispatch"
    DISPATCH_PREDICTED = "dispatch_predicted"
    BLOCK = "block"


@dataclass(frozen=True)
class BalanceCertificate:
    """Witness that every branch in a program has equal-length directions."""

    path_lengths: tuple[tuple[int, int], ...]  # (branch id, uops per side)


def certify_balanced(
    program: Program, branches: Iterable[int] | None = None
) -> BalanceCertificate:
    """Check branches for equal fixed-length paths; raise otherwise.

    With `branches` given, only those are certified (the usual case: the
    secret-selected branch after a balance_paths rewrite). Default is all.
    """
    wanted = None if branches is None else set(branches)
    lengths: list[tuple[int, int]] = []
    for branch, profile in sorted(analyze_all_branches(program).items()):
        if wanted is not None and branch not in wanted:
            continue
        if profile.variable or profile.min_uops != profile.max_uops:
            raise BalanceError(
                f"branch {branch}: paths are {profile.min_uops}/{profile.max_uops} uops"
                f"{' (variable)' if profile.variable else ''}; run balance_paths first"
            )
        lengths.append((branch, profile.min_uops))
    return BalanceCertificate(tuple(lengths))


@dataclass(frozen=True)
class DefensePolicy:
    mode: DefenseMode = DefenseMode.UNPROTECTED
    mitigations: frozenset[Mitigation] = frozenset()
    safe_sets: Mapping[int, SafeSet] | None = None
    rep_predicted_count: int = 8
    balance_certificate: BalanceCertificate | None = None

    def __post_init__(self) -> None:
        if self.mode is DefenseMode.DOM_PLUS_INVARSPEC and self.safe_sets is None:
            raise ValueError("dom_plus_invarspec requires safe_sets")
        if (
            Mitigation.PATH_BALANCING in self.mitigations
            and self.balance_certificate is None
        ):
            raise ValueError("path_balancing requires a balance certificate")
        if self.rep_predicted_count < 1:
            raise ValueError("rep_predicted_count must be positive")

    @property
    def gates_loads(self) -> bool:
        return self.mode is not DefenseMode.UNPROTECTED

    @property
    def lifts_invariant(self) -> bool:
        return self.mode is DefenseMode.DOM_PLUS_INVARSPEC

    @property
    def predicted_fill(self) -> bool:
        return Mitigation.OPERAND_INDEPENDENT_FILL in self.mitigations

    def members(self, instr: int) -> frozenset[int]:
        if self.safe_sets is None:
            return frozenset()
        ss = self.safe_sets.get(instr)
        return ss.members if ss is not None else frozenset()


class RobEntryView(Protocol):
    """What the gates need to know about an in-flight entry.

    Callers pass the live ROB as a list ordered oldest-first; rob_seq is
    the global dispatch sequence number that order follows.
    """

    instr: int
    rob_seq: int
    shadow: int | None
    complete: bool
    osp: bool
    address: int | None
    producers: tuple["RobEntryView", ...]


@dataclass
class InvarianceTag:
    instr: int
    esp_reached: bool
    cycle_reached: int | None


def dom_gate(entry: RobEntryView, cache: "CacheState") -> DomDecision:
    """Delay-on-miss decision for a shadowed load: hit runs with deferred
    effects, miss waits for the shadow to clear."""
    if entry.address is not None and cache.resident(entry.address):
        return DomDecision.EXECUTE_HIT_DEFERRED
    return DomDecision.DELAY


def osp_reached(
    entry: RobEntryView,
    rob: Iterable[RobEntryView],
    safe_sets: Mapping[int, SafeSet] | None,
) -> bool:
    """True once the entry's result exists and can no longer change.

    complete and unshadowed is the base case. A shadowed complete entry
    qualifies when every older in-flight instance of its safe-set members
    and every value producer has itself reached OSP; a member with no
    in-flight instance is settled (committed or off-path). The flag is
    sticky: squash removes the entry outright, so it never reverts.
    """
    if entry.osp:
        return True
    if not entry.complete:
        return False
    if entry.shadow is None:
        entry.osp = True
        return True
    members = frozenset()
    if safe_sets is not None:
        ss = safe_sets.get(entry.instr)
        if ss is not None:
            members = ss.members
    if members:
        for other in rob:
            if other.rob_seq >= entry.rob_seq:
                break
            if other.instr in members and not osp_reached(other, rob, safe_sets):
                return False
    for producer in entry.producers:
        if not osp_reached(producer, rob, safe_sets):
            return False
    entry.osp = True
    return True


def esp_check(
    entry: RobEntryView,
    safe_sets: Mapping[int, SafeSet] | None,
    rob: Iterable[RobEntryView],
    cycle: int,
) -> InvarianceTag:
    """Execution-safe point: every safe-set member instance at OSP.

    An empty safe set reaches ESP immediately; the gate bypass this
    enables for bound-to-commit instructions is the lever the whole
    contention channel rests on.
    """
    members = frozenset()
    if safe_sets is not None:
        ss = safe_sets.get(entry.instr)
        if ss is not None:
            members = ss.members
    if not members:
        return InvarianceTag(entry.instr, True, cycle)
    for other in rob:
        if other.rob_seq >= entry.rob_seq:
            break
        if other.instr in members and not osp_reached(other, rob, safe_sets):
            return InvarianceTag(entry.instr, False, None)
    return InvarianceTag(entry.instr, True, cycle)


class UopView(Protocol):
    """Decode-time view of a candidate micro-op: position and owner opcode."""

    seq: int
    opcode: Opcode


def gate_rob_fill(
    uop: UopView, secret_tainted: bool, policy: DefensePolicy
) -> FillDecision:
    """Decode-side gate for REP expansion under operand_independent_fill.

    A tainted REP (counter producer still in flight) emits exactly
    rep_predicted_count predicted micro-ops; the rest are blocked until
    verification. Everything else dispatches normally.
    """
    if uop.opcode not in REP_OPCODES or not secret_tainted:
        return FillDecision.DISPATCH
    if not policy.predicted_fill:
        return FillDecision.DISPATCH
    if uop.seq < policy.rep_predicted_count:
        return FillDecision.DISPATCH_PREDICTED
    return FillDecision.BLOCK


__all__ = [
    "BalanceCertificate",
    "DefenseMode",
    "DefensePolicy",
    "DomDecision",
    "FillDecision",
    "InvarianceTag",
    "Mitigation",
    "certify_balanced",
    "dom_gate",
    "esp_check",
    "gate_rob_fill",
    "osp_reached",
]
