"""Anticipatory decision loop over an annotated event stream.

Each timestep: fold the clip's visible annotations into a Markov memory
(new memory depends only on the previous memory and the current clip),
regenerate candidate plans, score them with f = g + lambda * u, and ask
whether the accumulated evidence is sufficient. Insufficient evidence
means Wait plus tool calls aimed at the next clip; sufficient evidence
means Respond, and the stream end forces a response no matter what.
Every backend failure resolves to Wait/NoTool, never a crash and never a
spurious Respond.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from enum import Enum

from ..errors import (ConfigurationError, OrderingError, PlanningError,
                      ProtocolError, UsageError)
from ..scenario import (PLAN_MODES, ClipSpec, ObjectSpec, QuestionSpec,
                        Scenario, TrajectoryEvent, WatchTarget)

log = logging.getLogger(__name__)

MEMORY_MAX_LINES = 16


# ----------------------------------------------------------------------
# state types
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ObservedEvent:
    t: int
    kind: str
    payload: str
    via_tool: str | None = None


@dataclass(frozen=True)
class ClipView:
    """What the agent gets to see of one clip without tools."""

    timestamp: int
    events: tuple[ObservedEvent, ...]


@dataclass(frozen=True)
class MemoryState:
    t: int
    summary: str
    token_count: int


def initial_memory() -> MemoryState:
    return MemoryState(t=0, summary="", token_count=0)


def update_memory(prev: MemoryState, clip_view: ClipView) -> MemoryState:
    """Fold one clip into memory. Pure; depends on (prev, clip_view) only.

    Lines beyond MEMORY_MAX_LINES fall off the front (compaction). An
    empty clip carries the summary forward and just advances time.
    """
    if clip_view.timestamp != prev.t + 1:
        raise OrderingError(
            f"clip at t={clip_view.timestamp} cannot follow memory at t={prev.t}")
    lines = prev.summary.splitlines() if prev.summary else []
    lines += [f"[t{e.t}] {e.kind}: {e.payload}" for e in clip_view.events]
    summary = "\n".join(lines[-MEMORY_MAX_LINES:])
    return MemoryState(t=clip_view.timestamp, summary=summary,
                       token_count=len(summary.split()))


@dataclass(frozen=True)
class AgentState:
    memory: MemoryState
    timestep: int = 0
    observation: str = ""
    observed_kinds: frozenset[str] = frozenset()
    observed_events: tuple[ObservedEvent, ...] = ()


def initial_state() -> AgentState:
    return AgentState(memory=initial_memory())


def update_state(state: AgentState, clip_view: ClipView) -> AgentState:
    """Advance along the clip path: memory update plus base observations."""
    memory = update_memory(state.memory, clip_view)
    observation = "; ".join(f"{e.kind}: {e.payload}" for e in clip_view.events)
    return AgentState(
        memory=memory,
        timestep=clip_view.timestamp,
        observation=observation or "nothing new",
        observed_kinds=state.observed_kinds | {e.kind for e in clip_view.events},
        observed_events=state.observed_events + clip_view.events,
    )


# ----------------------------------------------------------------------
# tools
# ----------------------------------------------------------------------

class ToolKind(str, Enum):
    NO_TOOL = "no_tool"
    ZOOM_IN = "zoom_in"
    OBJECT_TRACTION = "object_traction"
    DETAILED_CAPTION = "detailed_caption"


def validate_bbox(bbox) -> tuple[float, float, float, float]:
    try:
        x0, y0, x1, y1 = (float(v) for v in bbox)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bbox must be 4 numbers, got {bbox!r}") from exc
    if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
        raise ConfigurationError(
            f"bbox must satisfy 0 <= min < max <= 1, got {bbox!r}")
    return (x0, y0, x1, y1)


@dataclass(frozen=True)
class ToolCall:
    kind: ToolKind
    bbox: tuple[float, float, float, float] | None = None
    objects: tuple[ObjectSpec, ...] = ()

    def __post_init__(self) -> None:
        if self.kind in (ToolKind.ZOOM_IN, ToolKind.DETAILED_CAPTION):
            if self.bbox is None:
                raise ConfigurationError(f"{self.kind.value} needs a bbox")
            object.__setattr__(self, "bbox", validate_bbox(self.bbox))
        elif self.kind == ToolKind.OBJECT_TRACTION:
            if not self.objects:
                raise ConfigurationError("object_traction needs named boxes")
            for obj in self.objects:
                validate_bbox(obj.bbox)
        else:
            if self.bbox is not None or self.objects:
                raise ConfigurationError("no_tool takes no arguments")

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind.value}
        if self.bbox is not None:
            out["bbox"] = list(self.bbox)
        if self.objects:
            out["objects"] = {o.name: list(o.bbox) for o in self.objects}
        return out


@dataclass(frozen=True)
class ToolResult:
    call: ToolCall
    revealed: tuple[ObservedEvent, ...] = ()
    count: int | None = None
    caption: str | None = None


def _contains(outer, inner) -> bool:
    return (outer[0] <= inner[0] and outer[1] <= inner[1]
            and inner[2] <= outer[2] and inner[3] <= outer[3])


def visible_events(clip: ClipSpec) -> tuple[ObservedEvent, ...]:
    """Events the agent sees with no tool aimed at the clip."""
    return tuple(ObservedEvent(t=e.t, kind=e.kind, payload=e.payload)
                 for e in clip.events if e.gated_by_tool is None)


def execute_tools(clip: ClipSpec, calls: list[ToolCall]) -> tuple[ToolResult, ...]:
    """Apply pending calls to the clip they were aimed at (scripted world)."""
    results = []
    for call in calls:
        if call.kind == ToolKind.NO_TOOL:
            results.append(ToolResult(call=call))
        elif call.kind in (ToolKind.ZOOM_IN, ToolKind.DETAILED_CAPTION):
            gate = ("zoom_in" if call.kind == ToolKind.ZOOM_IN
                    else "detailed_caption")
            revealed = tuple(
                ObservedEvent(t=e.t, kind=e.kind, payload=e.payload, via_tool=gate)
                for e in clip.events
                if e.gated_by_tool == gate and e.region is not None
                and _contains(call.bbox, e.region))
            caption = "; ".join(e.payload for e in revealed) or None
            results.append(ToolResult(call=call, revealed=revealed,
                                      caption=caption if
                                      call.kind == ToolKind.DETAILED_CAPTION else None))
        else:
            present = {o.name for o in clip.objects}
            count = sum(1 for o in call.objects if o.name in present)
            results.append(ToolResult(call=call, count=count))
    return tuple(results)


def apply_tool_results(state: AgentState,
                       results: tuple[ToolResult, ...]) -> AgentState:
    """Advance along the tool path: merge results, bump the timestep.

    Empty results advance the timestep and change nothing else. Results
    whose shape does not match their call kind raise ProtocolError.
    """
    revealed: list[ObservedEvent] = []
    notes: list[str] = []
    for result in results:
        if not isinstance(result, ToolResult) or not isinstance(result.call, ToolCall):
            raise ProtocolError(f"not a tool result: {result!r}")
        if result.count is not None and result.call.kind != ToolKind.OBJECT_TRACTION:
            raise ProtocolError(f"count result for {result.call.kind.value}")
        if result.revealed and result.call.kind not in (
                ToolKind.ZOOM_IN, ToolKind.DETAILED_CAPTION):
            raise ProtocolError(f"revealed events for {result.call.kind.value}")
        revealed.extend(result.revealed)
        if result.count is not None:
            names = ",".join(o.name for o in result.call.objects)
            notes.append(f"count[{names}]={result.count}")
        if result.caption is not None:
            notes.append(f"caption: {result.caption}")
    if not revealed and not notes:
        return replace(state, timestep=state.timestep + 1)
    observation = "; ".join(
        [f"{e.kind}: {e.payload}" for e in revealed] + notes)
    merged = state.observation
    observation = f"{merged}; {observation}" if merged else observation
    return AgentState(
        memory=state.memory,
        timestep=state.timestep + 1,
        observation=observation,
        observed_kinds=state.observed_kinds | {e.kind for e in revealed},
        observed_events=state.observed_events + tuple(revealed),
    )


# ----------------------------------------------------------------------
# plans and decisions
# ----------------------------------------------------------------------

class PlanMode(str, Enum):
    REACTIVE = "reactive"
    PROACTIVE = "proactive"
    SPECULATIVE = "speculative"


_MODE_PRIORITY = {PlanMode.REACTIVE: 0, PlanMode.PROACTIVE: 1,
                  PlanMode.SPECULATIVE: 2}


@dataclass
class Plan:
    mode: PlanMode
    trajectory: tuple[TrajectoryEvent, ...]
    g: float
    u: float
    watch_targets: tuple[WatchTarget, ...] = ()
    text: str = ""
    f: float | None = None

    def __post_init__(self) -> None:
        for label, value in (("g", self.g), ("u", self.u)):
            if not 0.0 <= value <= 5.0:
                raise ConfigurationError(f"{label} score {value} outside [0, 5]")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value, "g": self.g, "u": self.u, "f": self.f,
            "trajectory": [{"t": e.t, "kind": e.kind, "description": e.description}
                           for e in self.trajectory],
        }


def score_plan(plan: Plan, lam: float) -> float:
    """f = g + lambda * u; stores the score on the plan and returns it."""
    if lam < 0:
        raise ConfigurationError(f"lambda must be >= 0, got {lam}")
    plan.f = plan.g + lam * plan.u
    return plan.f


def select_plan(plans: list[Plan], lam: float) -> Plan:
    """Argmax of f; ties prefer reactive over proactive over speculative."""
    if not plans:
        raise PlanningError("no plans to select from")
    for plan in plans:
        score_plan(plan, lam)
    best = max(range(len(plans)),
               key=lambda i: (plans[i].f, -_MODE_PRIORITY[plans[i].mode], -i))
    return plans[best]


@dataclass(frozen=True)
class DecisionOutcome:
    decision: str                 # "wait" | "respond"
    answer: str | None = None
    decided_at: int | None = None
    forced: bool = False


def answer_for(question: QuestionSpec, state: AgentState) -> str:
    """Evaluate the scenario's answer rule on everything observed so far."""
    rule = question.answer_rule
    if rule.type == "count":
        return str(sum(1 for e in state.observed_events if e.kind == rule.kind))
    hits = [e for e in state.observed_events if e.kind in rule.kinds]
    return hits[-1].payload if hits else "unknown"


def decide(question: QuestionSpec, state: AgentState, best_plan: Plan,
           backend) -> DecisionOutcome:
    """Respond when the backend judges the evidence sufficient, else wait."""
    if backend.sufficient(question, state, best_plan):
        return DecisionOutcome(decision="respond",
                               answer=answer_for(question, state),
                               decided_at=state.timestep)
    return DecisionOutcome(decision="wait")


def select_tools(state: AgentState, best_plan: Plan | None,
                 question: QuestionSpec, backend) -> list[ToolCall]:
    """Tool calls for the next clip; a target-less plan yields [NoTool]."""
    if best_plan is None:
        return [ToolCall(kind=ToolKind.NO_TOOL)]
    return backend.select_tools(state, best_plan, question)


def scripted_tool_mapping(best_plan: Plan) -> list[ToolCall]:
    """Watch targets map one-to-one onto tool calls."""
    calls = []
    for target in best_plan.watch_targets:
        if target.kind == "region":
            calls.append(ToolCall(kind=ToolKind.ZOOM_IN, bbox=target.region))
        elif target.kind == "caption":
            calls.append(ToolCall(kind=ToolKind.DETAILED_CAPTION, bbox=target.region))
        else:
            calls.append(ToolCall(kind=ToolKind.OBJECT_TRACTION,
                                  objects=target.objects))
    return calls or [ToolCall(kind=ToolKind.NO_TOOL)]


# ----------------------------------------------------------------------
# stream driver
# ----------------------------------------------------------------------

@dataclass
class StepRecord:
    t: int
    memory: MemoryState
    visible_events: tuple[ObservedEvent, ...]
    tool_results: tuple[ToolResult, ...] = ()
    plans: list[Plan] = field(default_factory=list)
    best_mode: str | None = None
    decision: str | None = None
    tools_issued: list[ToolCall] = field(default_factory=list)
    planning_failed: bool = False
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "memory": {"t": self.memory.t, "summary": self.memory.summary,
                       "token_count": self.memory.token_count},
            "visible_events": [
                {"t": e.t, "kind": e.kind, "payload": e.payload,
                 "via_tool": e.via_tool} for e in self.visible_events],
            "tool_results": [
                {"call": r.call.to_dict(),
                 "revealed": [e.kind for e in r.revealed],
                 "count": r.count, "caption": r.caption}
                for r in self.tool_results],
            "plans": [p.to_dict() for p in self.plans],
            "best_mode": self.best_mode,
            "decision": self.decision,
            "tools_issued": [c.to_dict() for c in self.tools_issued],
            "planning_failed": self.planning_failed,
        }


@dataclass
class Transcript:
    scenario: str
    backend: str
    lam: float
    k: int
    baseline: bool
    steps: list[StepRecord] = field(default_factory=list)
    answer: str | None = None
    decided_at: int | None = None
    forced: bool = False
    ground_truth: str | None = None

    @property
    def correct(self) -> bool:
        return self.answer == self.ground_truth

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario, "backend": self.backend,
            "lambda": self.lam, "k": self.k, "baseline": self.baseline,
            "steps": [s.to_dict() for s in self.steps],
            "answer": self.answer, "decided_at": self.decided_at,
            "forced": self.forced, "ground_truth": self.ground_truth,
            "correct": self.correct,
        }


def run_stream(scenario: Scenario, backend, *, lam: float = 1.0, k: int = 3,
               baseline: bool = False) -> Transcript:
    """Drive the loop over every clip; exactly one response by the horizon."""
    if lam < 0:
        raise ConfigurationError(f"lambda must be >= 0, got {lam}")
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    question = scenario.question
    horizon = scenario.horizon
    transcript = Transcript(scenario=scenario.name,
                            backend=getattr(backend, "name", "none"),
                            lam=lam, k=k, baseline=baseline,
                            ground_truth=question.ground_truth)
    state = initial_state()
    pending: list[ToolCall] = []
    prior_best: Plan | None = None
    answered = False

    for clip in scenario.clips:
        started = time.perf_counter()
        t = clip.timestamp
        live_calls = [c for c in pending if c.kind != ToolKind.NO_TOOL]
        results = execute_tools(clip, live_calls)
        state = apply_tool_results(state, results)
        base_view = ClipView(timestamp=t, events=visible_events(clip))
        state = update_state(state, base_view)
        assert state.timestep == state.memory.t == t
        record = StepRecord(t=t, memory=state.memory,
                            visible_events=base_view.events,
                            tool_results=results)
        pending = []

        active = t >= question.asked_at and not answered
        if active:
            if baseline:
                outcome = _baseline_decide(question, state, t, horizon)
            else:
                outcome, record.plans, best, record.planning_failed = _planned_step(
                    question, state, backend, lam, k, prior_best, t, horizon)
                if best is not None:
                    prior_best = best
                    record.best_mode = best.mode.value
            record.decision = outcome.decision
            if outcome.decision == "respond":
                answered = True
                transcript.answer = outcome.answer
                transcript.decided_at = outcome.decided_at
                transcript.forced = outcome.forced
            elif not baseline:
                best = prior_best if record.plans else None
                try:
                    record.tools_issued = select_tools(state, best, question, backend)
                except PlanningError as exc:
                    log.warning("tool selection failed at t=%d: %s", t, exc)
                    record.tools_issued = [ToolCall(kind=ToolKind.NO_TOOL)]
                pending = record.tools_issued
        record.wall_time_s = time.perf_counter() - started
        transcript.steps.append(record)

    if not answered:
        raise UsageError(
            f"stream ended at t={horizon} without a response; "
            f"question was asked at t={question.asked_at}")
    return transcript


def _baseline_decide(question: QuestionSpec, state: AgentState, t: int,
                     horizon: int) -> DecisionOutcome:
    """No planning: answer the moment anything rule-relevant shows up."""
    relevant = question.answer_rule.relevant_kinds()
    if any(e.kind in relevant for e in state.observed_events):
        return DecisionOutcome(decision="respond",
                               answer=answer_for(question, state), decided_at=t)
    if t == horizon:
        return DecisionOutcome(decision="respond",
                               answer=answer_for(question, state),
                               decided_at=t, forced=True)
    return DecisionOutcome(decision="wait")


def _planned_step(question: QuestionSpec, state: AgentState, backend,
                  lam: float, k: int, prior_best: Plan | None, t: int,
                  horizon: int):
    """One planned decision; backend failures degrade to waiting."""
    plans: list[Plan] = []
    best: Plan | None = None
    failed = False
    outcome = DecisionOutcome(decision="wait")
    try:
        plans = backend.generate_plans(state, question, k=k, lam=lam,
                                       prior_best=prior_best)
        best = select_plan(plans, lam)
    except PlanningError as exc:
        log.warning("planning failed at t=%d: %s", t, exc)
        failed = True
        plans = []
    if best is not None:
        try:
            outcome = decide(question, state, best, backend)
        except PlanningError as exc:
            log.warning("decision backend failed at t=%d: %s", t, exc)
            failed = True
            outcome = DecisionOutcome(decision="wait")
    if t == horizon and outcome.decision != "respond":
        outcome = DecisionOutcome(decision="respond",
                                  answer=answer_for(question, state),
                                  decided_at=t, forced=True)
    return outcome, plans, best, failed
