"""Planner backends: scripted (scenario-driven) and HTTP (remote model).

The scripted backend realizes plans from the scenario's declared candidate
futures and judges sufficiency by required-evidence containment, which
keeps whole runs deterministic. The HTTP backend fills the shipped prompt
templates and talks to a completion endpoint configured through
STREAMAGENT_LLM_ENDPOINT and STREAMAGENT_LLM_KEY (optionally
STREAMAGENT_LLM_MODEL); it retries twice and then raises PlanningError,
which the loop treats as Wait. Memory updates stay deterministic under
every backend; the incremental-memory template is rendered here for
deployments that caption clips remotely.
"""

from __future__ import annotations

import ast
import json
import logging
import os
import re
from importlib import resources

import requests

from ..errors import ConfigurationError, PlanningError
from ..scenario import PLAN_MODES, ObjectSpec, QuestionSpec
from .loop import (AgentState, Plan, PlanMode, ToolCall, ToolKind,
                   scripted_tool_mapping)

log = logging.getLogger(__name__)

ENDPOINT_VAR = "STREAMAGENT_LLM_ENDPOINT"
KEY_VAR = "STREAMAGENT_LLM_KEY"
MODEL_VAR = "STREAMAGENT_LLM_MODEL"

RETRIES = 2

_MODE_GUIDANCE = {
    PlanMode.REACTIVE: "Planning mode: reactive. Ground the plan in what the "
                       "memory already shows.",
    PlanMode.PROACTIVE: "Planning mode: proactive. Anticipate the decisive "
                        "upcoming development and plan to watch for it.",
    PlanMode.SPECULATIVE: "Planning mode: speculative. Explore a less likely "
                          "but high-value continuation.",
}


def load_template(name: str) -> str:
    """Read one of the shipped prompt templates by file stem."""
    return (resources.files("streamkv.agent.prompts")
            .joinpath(f"{name}.txt").read_text(encoding="utf-8"))


# ----------------------------------------------------------------------
# completion parsing
# ----------------------------------------------------------------------

_SCORE_STEP1 = re.compile(
    r"Current State Analysis \(Step 1\) Score:\s*\[?\s*([0-5](?:\.\d+)?)\s*/\s*5")
_SCORE_STEP2 = re.compile(
    r"Future Planning \(Step 2\) Score:\s*\[?\s*([0-5](?:\.\d+)?)\s*/\s*5")
_PLAN_BLOCK = re.compile(r"Evaluation of Plan\s+(\d+)")


def parse_evaluation_scores(text: str) -> list[tuple[float, float]]:
    """Per-plan (g, u) pairs from a heuristic-evaluation completion.

    Blocks are split on "Evaluation of Plan N"; each must contain both
    rubric lines, e.g. "Current State Analysis (Step 1) Score: [4/5]".
    """
    marks = list(_PLAN_BLOCK.finditer(text))
    if not marks:
        # single-plan completions sometimes skip the block header
        m1 = _SCORE_STEP1.search(text)
        m2 = _SCORE_STEP2.search(text)
        if m1 and m2:
            return [(float(m1.group(1)), float(m2.group(1)))]
        raise PlanningError("evaluation has no 'Evaluation of Plan N' blocks")
    pairs = []
    for i, mark in enumerate(marks):
        end = marks[i + 1].start() if i + 1 < len(marks) else len(text)
        block = text[mark.start():end]
        m1 = _SCORE_STEP1.search(block)
        m2 = _SCORE_STEP2.search(block)
        if not m1 or not m2:
            raise PlanningError(
                f"evaluation block {i + 1} is missing a rubric score line")
        pairs.append((float(m1.group(1)), float(m2.group(1))))
    return pairs


_SENTINEL = re.compile(r"\b(yes|no)\b\W*$", re.IGNORECASE)


def parse_trigger_sentinel(text: str) -> bool | None:
    """Trailing yes/no of a trigger completion; None when unparseable."""
    m = _SENTINEL.search(text.strip())
    if not m:
        return None
    return m.group(1).lower() == "yes"


_TOOL_NAMES = {
    "no tool": ToolKind.NO_TOOL,
    "zoom in": ToolKind.ZOOM_IN,
    "object traction": ToolKind.OBJECT_TRACTION,
    "object tracing": ToolKind.OBJECT_TRACTION,
    "detailed caption": ToolKind.DETAILED_CAPTION,
}


def parse_action_plan(text: str) -> ToolCall:
    """Tool call out of an action-plan completion.

    Expects a JSON-ish object {'Action': {...}} (single quotes accepted).
    Anything malformed degrades to NoTool with a warning, never an error.
    """
    no_tool = ToolCall(kind=ToolKind.NO_TOOL)
    start = text.find("{")
    if start < 0:
        log.warning("action plan has no JSON object; using NoTool")
        return no_tool
    snippet = text[start:text.rfind("}") + 1]
    obj = None
    for parser in (json.loads, ast.literal_eval):
        try:
            obj = parser(snippet)
            break
        except (ValueError, SyntaxError):
            continue
    if not isinstance(obj, dict):
        log.warning("action plan JSON did not parse; using NoTool")
        return no_tool
    action = obj.get("Action", obj)
    if isinstance(action, str):
        try:
            action = ast.literal_eval(action)
        except (ValueError, SyntaxError):
            log.warning("action command did not parse; using NoTool")
            return no_tool
    if not isinstance(action, dict):
        log.warning("action command is not an object; using NoTool")
        return no_tool
    name = str(action.get("tool_name", "")).strip().lower()
    kind = _TOOL_NAMES.get(name)
    if kind is None:
        log.warning("unknown tool name %r; using NoTool", name)
        return no_tool
    try:
        if kind in (ToolKind.ZOOM_IN, ToolKind.DETAILED_CAPTION):
            return ToolCall(kind=kind, bbox=tuple(action["bbox"]))
        if kind == ToolKind.OBJECT_TRACTION:
            boxes = action.get("object bbox", action.get("objects", {}))
            if isinstance(boxes, str):
                boxes = ast.literal_eval(boxes)
            objects = tuple(ObjectSpec(name=str(n), bbox=tuple(b))
                            for n, b in dict(boxes).items())
            return ToolCall(kind=kind, objects=objects)
        return no_tool
    except (ConfigurationError, KeyError, TypeError, ValueError) as exc:
        log.warning("tool arguments invalid (%s); using NoTool", exc)
        return no_tool


# ----------------------------------------------------------------------
# scripted backend
# ----------------------------------------------------------------------

class ScriptedPlanner:
    """Plans, sufficiency, and tools all driven by the scenario file."""

    name = "scripted"

    def __init__(self, scenario):
        self.scenario = scenario

    def _declared_modes(self, question: QuestionSpec) -> list[PlanMode]:
        return [PlanMode(m) for m in PLAN_MODES if m in question.candidate_futures]

    def generate_plans(self, state: AgentState, question: QuestionSpec, *,
                       k: int = 3, lam: float = 1.0,
                       prior_best: Plan | None = None) -> list[Plan]:
        modes = self._declared_modes(question)
        if not modes:
            raise PlanningError("scenario declares no candidate futures")
        picks = list(modes)
        extra = k - 3
        i = 0
        while extra > 0:
            picks.append(modes[i % len(modes)])
            i += 1
            extra -= 1
        plans = []
        for mode in picks:
            fut = question.candidate_futures[mode.value]
            plans.append(Plan(mode=mode, trajectory=fut.trajectory,
                              g=fut.g, u=fut.u, watch_targets=fut.watch_targets))
        return plans

    def sufficient(self, question: QuestionSpec, state: AgentState,
                   best_plan: Plan) -> bool:
        return set(question.required_evidence_events) <= set(state.observed_kinds)

    def select_tools(self, state: AgentState, best_plan: Plan,
                     question: QuestionSpec) -> list[ToolCall]:
        return scripted_tool_mapping(best_plan)


class FailingPlanner:
    """Backend that always fails; exists to exercise the fail-safe path."""

    name = "failing"

    def generate_plans(self, *args, **kwargs):
        raise PlanningError("backend unavailable")

    def sufficient(self, *args, **kwargs):
        raise PlanningError("backend unavailable")

    def select_tools(self, *args, **kwargs):
        raise PlanningError("backend unavailable")


# ----------------------------------------------------------------------
# HTTP backend
# ----------------------------------------------------------------------

class HttpPlanner:
    """Remote completion backend speaking {model, prompt, max_tokens}."""

    name = "http"

    def __init__(self, endpoint: str | None = None, key: str | None = None,
                 model: str | None = None, max_tokens: int = 512,
                 timeout: float = 10.0, session=None):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_VAR)
        self.key = key or os.environ.get(KEY_VAR)
        self.model = model or os.environ.get(MODEL_VAR, "planner-small")
        if not self.endpoint:
            raise ConfigurationError(f"{ENDPOINT_VAR} is not set")
        if not self.key:
            raise ConfigurationError(f"{KEY_VAR} is not set")
        self.max_tokens = max_tokens
        self.timeout = timeout
        self.session = session or requests.Session()
        self._templates = {name: load_template(name) for name in
                           ("incremental_memory", "future_plan",
                            "heuristic_evaluation", "trigger", "action_plan")}

    def complete(self, prompt: str) -> str:
        payload = {"model": self.model, "prompt": prompt,
                   "max_tokens": self.max_tokens}
        headers = {"Authorization": f"Bearer {self.key}"}
        last = None
        for attempt in range(1 + RETRIES):
            try:
                resp = self.session.post(self.endpoint, json=payload,
                                         headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                completion = resp.json().get("completion")
                if not isinstance(completion, str):
                    raise PlanningError("response lacks a text 'completion' field")
                return completion
            except (requests.RequestException, ValueError) as exc:
                last = exc
                log.warning("completion attempt %d failed: %s", attempt + 1, exc)
        raise PlanningError(f"endpoint failed after {1 + RETRIES} attempts: {last}")

    def incremental_memory_prompt(self, memory_summary: str) -> str:
        return self._templates["incremental_memory"].format(memory=memory_summary)

    def generate_plans(self, state: AgentState, question: QuestionSpec, *,
                       k: int = 3, lam: float = 1.0,
                       prior_best: Plan | None = None) -> list[Plan]:
        modes = [PlanMode(m) for m in PLAN_MODES]
        picks = list(modes)
        extra = k - 3
        i = 0
        while extra > 0:
            picks.append(modes[i % len(modes)])
            i += 1
            extra -= 1
        base = self._templates["future_plan"].format(
            question=question.text, memory=state.memory.summary)
        plan_texts = []
        for mode in picks:
            prompt = f"{base}\n\n{_MODE_GUIDANCE[mode]}"
            if prior_best is not None:
                prompt += f"\n\nPrior best plan:\n{prior_best.text or prior_best.mode.value}"
            plan_texts.append((mode, self.complete(prompt)))

        plan_list = "\n\n".join(f"Plan {i + 1} ({mode.value}):\n{text}"
                                for i, (mode, text) in enumerate(plan_texts))
        evaluation = self.complete(self._templates["heuristic_evaluation"].format(
            question=question.text, memory=state.memory.summary,
            plan_list=plan_list))
        pairs = parse_evaluation_scores(evaluation)
        if len(pairs) < len(plan_texts):
            raise PlanningError(
                f"evaluation scored {len(pairs)} plans, expected {len(plan_texts)}")
        plans = []
        for (mode, text), (g, u) in zip(plan_texts, pairs):
            if not (0.0 <= g <= 5.0 and 0.0 <= u <= 5.0):
                raise PlanningError(f"rubric scores ({g}, {u}) outside [0, 5]")
            plans.append(Plan(mode=mode, trajectory=(), g=g, u=u, text=text))
        return plans

    def sufficient(self, question: QuestionSpec, state: AgentState,
                   best_plan: Plan) -> bool:
        completion = self.complete(self._templates["trigger"].format(
            question=question.text, plan=best_plan.text or best_plan.mode.value,
            memory=state.memory.summary))
        verdict = parse_trigger_sentinel(completion)
        if verdict is None:
            log.warning("trigger completion had no yes/no sentinel; waiting")
            return False
        return verdict

    def select_tools(self, state: AgentState, best_plan: Plan,
                     question: QuestionSpec) -> list[ToolCall]:
        completion = self.complete(self._templates["action_plan"].format(
            question=question.text, plan=best_plan.text or best_plan.mode.value,
            memory=state.memory.summary))
        return [parse_action_plan(completion)]
