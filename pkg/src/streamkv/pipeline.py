"""End-to-end composition: agent decisions plus the KV engine per step.

The agent transcript is computed by the loop alone (decisions never
depend on cache knobs). The engine pass then replays the stream clip by
clip: prefill, offload under the budget, and, once the question is live,
a full recall against the store. Per-step metrics combine both sides.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

from .agent.loop import Transcript, run_stream
from .model import ModelConfig, init_weights
from .prefill import prefill_clip
from .recall import RecallConfig, answer_attention, recall
from .scenario import Scenario, generate_stream, make_question_block
from .store import TieredKVStore, TierPolicy


@dataclass
class StepMetrics:
    step: int
    selected_frames: list[int]
    recalled_entries: int
    hot_bytes: int
    cold_bytes: int
    cold_reads: int
    decision: str
    wall_time_s: float

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "selected_frames": list(self.selected_frames),
            "recalled_entries": self.recalled_entries,
            "hot_bytes": self.hot_bytes,
            "cold_bytes": self.cold_bytes,
            "cold_reads": self.cold_reads,
            "decision": self.decision,
            "wall_time_s": self.wall_time_s,
        }


def engine_pass(scenario: Scenario, cold_dir, *, chunk_size: int,
                hot_budget_bytes: int, rc: RecallConfig,
                transcript: Transcript | None = None,
                config: ModelConfig | None = None,
                compute_answers: bool = False):
    """Stream every clip through the store; recall once the question is live.

    Returns (metrics rows, store). Decisions are copied from the
    transcript when one is given.
    """
    cfg = config or scenario.config
    weights = init_weights(cfg)
    store = TieredKVStore(cfg, cold_dir=cold_dir)
    policy = TierPolicy(hot_budget_bytes=hot_budget_bytes)
    question_block = make_question_block(scenario, weights)
    clips = generate_stream(scenario)
    decisions = {}
    if transcript is not None:
        decisions = {step.t: step.decision or "inactive"
                     for step in transcript.steps}
    rows: list[StepMetrics] = []
    for clip in clips:
        started = time.perf_counter()
        prefill_clip(store, clip, chunk_size, weights, cfg)
        store.maybe_offload(policy)
        selected = [0] * cfg.n_layers
        entries = 0
        reads_before = store.cold_reads
        if clip.timestamp >= scenario.question.asked_at:
            result = recall(store, question_block, weights, cfg, rc)
            selected = list(result.selected_counts())
            entries = result.recalled_entries()
            if compute_answers:
                answer_attention(result, question_block, weights, cfg)
        usage = store.usage_report()
        rows.append(StepMetrics(
            step=clip.timestamp,
            selected_frames=selected,
            recalled_entries=entries,
            hot_bytes=usage.hot_bytes,
            cold_bytes=usage.cold_bytes,
            cold_reads=store.cold_reads - reads_before,
            decision=decisions.get(clip.timestamp, "inactive"),
            wall_time_s=time.perf_counter() - started,
        ))
    return rows, store


def simulate(scenario: Scenario, backend, cold_dir, *, lam: float = 1.0,
             k: int = 3, baseline: bool = False, chunk_size: int = 4,
             hot_budget_bytes: int = 4096,
             rc: RecallConfig | None = None):
    """Agent loop plus engine pass; returns (transcript, metrics rows)."""
    transcript = run_stream(scenario, backend, lam=lam, k=k, baseline=baseline)
    rows, _ = engine_pass(scenario, cold_dir, chunk_size=chunk_size,
                          hot_budget_bytes=hot_budget_bytes,
                          rc=rc or RecallConfig(), transcript=transcript,
                          compute_answers=True)
    for row, step in zip(rows, transcript.steps):
        row.wall_time_s += step.wall_time_s
    return transcript, rows
