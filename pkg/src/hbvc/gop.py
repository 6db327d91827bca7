"""Hierarchical GOP coding schedule.

A GOP of size 2^K is coded by recursive bisection: level 1 codes the
midpoint between the two keyframes, each level-k step spawns two
level-(k+1) steps over its half-intervals, and steps are ordered
level-major then left-to-right.
"""

from __future__ import annotations

from dataclasses import dataclass


PAST_TO_FUTURE = "past_to_future"
FUTURE_TO_PAST = "future_to_past"


class PlanError(Exception):
    pass


@dataclass(frozen=True)
class InheritedFlow:
    """Reference-to-reference flow reused from a previously coded step.

    direction is the orientation of the reused flow between the step's own
    references; source_target is the earlier target whose decoded flow it is.
    """

    direction: str
    source_target: int


@dataclass(frozen=True)
class CodingStep:
    target: int
    past_ref: int
    future_ref: int
    level: int
    inherited_flow: InheritedFlow | None = None


@dataclass(frozen=True)
class CodingPlan:
    gop_size: int
    levels: int
    keyframes: tuple[int, int]
    steps: tuple[CodingStep, ...]


def build_plan(gop_size: int) -> CodingPlan:
    """Build the bisection schedule for one GOP with keyframes 0 and gop_size."""
    if gop_size < 2 or gop_size & (gop_size - 1) != 0:
        raise PlanError(f"gop_size must be a power of two >= 2, got {gop_size}")
    levels = gop_size.bit_length() - 1
    steps: list[CodingStep] = []
    intervals = [(0, gop_size, None)]
    level = 1
    while intervals:
        next_intervals = []
        for a, b, inherited in intervals:
            if b - a < 2:
                continue
            m = (a + b) // 2
            steps.append(CodingStep(m, a, b, level, inherited))
            # Left child reuses the decoded flow m->a (its future_ref is m);
            # right child reuses m->b (its past_ref is m).
            next_intervals.append((a, m, InheritedFlow(FUTURE_TO_PAST, m)))
            next_intervals.append((m, b, InheritedFlow(PAST_TO_FUTURE, m)))
        intervals = next_intervals
        level += 1
    return CodingPlan(gop_size, levels, (0, gop_size), tuple(steps))


def validate_plan(plan: CodingPlan) -> list[str]:
    """Check all plan invariants; returns every violation found (empty = ok)."""
    violations = []
    if len(plan.steps) != plan.gop_size - 1:
        violations.append(
            f"expected {plan.gop_size - 1} steps, found {len(plan.steps)}"
        )
    decoded = set(plan.keyframes)
    seen_targets: dict[int, int] = {}
    for i, s in enumerate(plan.steps):
        if not (s.past_ref < s.target < s.future_ref):
            violations.append(f"step {i}: references do not bracket target {s.target}")
        if 2 * s.target != s.past_ref + s.future_ref:
            violations.append(f"step {i}: target {s.target} is not the reference midpoint")
        expected_dist = plan.gop_size // (2 ** (s.level - 1))
        if s.future_ref - s.past_ref != expected_dist:
            violations.append(
                f"step {i}: level {s.level} reference distance "
                f"{s.future_ref - s.past_ref}, expected {expected_dist}"
            )
        if s.level == 1 and s.inherited_flow is not None:
            violations.append(f"step {i}: level-1 step must not inherit flow")
        for ref in (s.past_ref, s.future_ref):
            if ref not in decoded:
                violations.append(f"step {i}: reference {ref} not decoded before use")
        seen_targets[s.target] = seen_targets.get(s.target, 0) + 1
        decoded.add(s.target)
    for t, count in seen_targets.items():
        if count != 1:
            violations.append(f"target {t} coded {count} times")
    interior = set(range(1, plan.gop_size))
    missing = interior - set(seen_targets)
    for t in sorted(missing):
        violations.append(f"interior frame {t} never coded")
    return violations


def format_plan(plan: CodingPlan) -> str:
    """Human-readable plan listing for debugging."""
    lines = [
        f"GOP size {plan.gop_size}, {plan.levels} levels, "
        f"keyframes {plan.keyframes[0]} and {plan.keyframes[1]}"
    ]
    for s in plan.steps:
        inh = "fresh both directions" if s.inherited_flow is None else (
            f"inherit {s.inherited_flow.direction} from target {s.inherited_flow.source_target}"
        )
        lines.append(
            f"  L{s.level}: code {s.target} from ({s.past_ref}, {s.future_ref})  [{inh}]"
        )
    return "\n".join(lines)


def plan_sequence(num_frames: int, gop_size: int) -> list[tuple[int, CodingPlan | None]]:
    """Split a sequence into GOPs; returns (start_index, plan) pairs.

    Consecutive GOPs share their boundary frame. A tail shorter than a GOP
    is coded as the largest fitting power-of-two GOP, recursively; a single
    trailing frame becomes a lone keyframe (plan None).
    """
    if num_frames < 1:
        raise PlanError("empty sequence")
    out: list[tuple[int, CodingPlan | None]] = []
    start = 0
    if num_frames == 1:
        return [(0, None)]
    while start < num_frames - 1:
        remaining = num_frames - 1 - start
        g = gop_size
        while g > remaining:
            g //= 2
        if g < 2:
            # single trailing frame: lone keyframe (the leading frame too,
            # when no GOP precedes it to cover it)
            if start == 0:
                out.append((0, None))
            out.append((start + 1, None))
            start += 1
        else:
            out.append((start, build_plan(g)))
            start += g
    return out
