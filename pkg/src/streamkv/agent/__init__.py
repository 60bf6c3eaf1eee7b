"""Anticipatory agent loop: state, plans, tools, and planner backends."""

from .loop import (AgentState, ClipView, DecisionOutcome, MemoryState,
                   ObservedEvent, Plan, PlanMode, StepRecord, ToolCall,
                   ToolKind, ToolResult, Transcript, answer_for,
                   apply_tool_results, decide, execute_tools, initial_memory,
                   initial_state, run_stream, score_plan, select_plan,
                   select_tools, update_memory, update_state, visible_events)
from .backends import (FailingPlanner, HttpPlanner, ScriptedPlanner,
                       load_template, parse_action_plan,
                       parse_evaluation_scores, parse_trigger_sentinel)

__all__ = [
    "AgentState", "ClipView", "DecisionOutcome", "MemoryState",
    "ObservedEvent", "Plan", "PlanMode", "StepRecord", "ToolCall", "ToolKind",
    "ToolResult", "Transcript", "answer_for", "apply_tool_results", "decide",
    "execute_tools", "initial_memory", "initial_state", "run_stream",
    "score_plan", "select_plan", "select_tools", "update_memory",
    "update_state", "visible_events", "FailingPlanner", "HttpPlanner",
    "ScriptedPlanner", "load_template", "parse_action_plan",
    "parse_evaluation_scores", "parse_trigger_sentinel",
]
