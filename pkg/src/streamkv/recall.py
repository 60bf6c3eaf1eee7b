"""Margin-based selective recall and the answering attention pass.

Scoring runs entirely on the hot per-frame mean-key index: for query head
h and frame j, S[h, j] = (qbar_h . kbar_{j, g(h)}) / sqrt(d_head), where
g(h) is h's kv head. A frame survives for head h when it is within alpha
of that head's best frame; a layer keeps the union over heads, capped at
max_frames by max-over-heads score with ties going to older frames. Only
the surviving frames are fetched (this is where cold reads happen), and
the question then attends causally over [recalled KV, question].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ShapeError, UsageError
from .model import (ModelConfig, ProjectionWeights, TokenBlock, attend,
                    project_qkv)
from .store import TieredKVStore


@dataclass(frozen=True)
class RecallConfig:
    """alpha >= 0 (math.inf recalls everything), max_frames >= 1."""

    alpha: float = 3.0
    max_frames: int = 256

    def __post_init__(self) -> None:
        if not (self.alpha >= 0.0):
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if self.max_frames < 1:
            raise ConfigurationError(
                f"max_frames must be >= 1, got {self.max_frames}")


@dataclass(frozen=True)
class QueryDescriptor:
    """Mean projected query per (layer, head): (n_layers, n_heads, d_head)."""

    heads: np.ndarray

    def __post_init__(self) -> None:
        if self.heads.ndim != 3:
            raise ShapeError(f"descriptor must be 3-d, got {self.heads.shape}")


@dataclass
class LayerRecall:
    frame_ids: tuple[int, ...]
    scores: np.ndarray        # (n_heads, n_frames) over all stored frames
    keys: np.ndarray          # (m, n_kv_heads, d_head)
    values: np.ndarray
    positions: np.ndarray


@dataclass
class RecallResult:
    layers: list[LayerRecall] = field(default_factory=list)

    def selected_counts(self) -> tuple[int, ...]:
        return tuple(len(layer.frame_ids) for layer in self.layers)

    def recalled_entries(self) -> int:
        return sum(layer.keys.shape[0] for layer in self.layers)


def query_descriptor(question: TokenBlock, weights: ProjectionWeights,
                     config: ModelConfig) -> QueryDescriptor:
    """Average the question's projected queries, per layer and head."""
    if len(question) == 0:
        raise UsageError("question block is empty")
    heads = np.empty((config.n_layers, config.n_heads, config.d_head),
                     dtype=np.float32)
    for layer in range(config.n_layers):
        q, _, _ = project_qkv(question, layer, weights, config)
        heads[layer] = q.mean(axis=0)
    return QueryDescriptor(heads=heads)


def score_frames(store: TieredKVStore, layer: int, head: int,
                 qd: QueryDescriptor) -> np.ndarray:
    """Scores for every committed frame, temporal order, hot index only."""
    config = store.config
    kv_head = config.kv_head_of(head)
    _, means = store.descriptors(layer)
    if means.shape[0] == 0:
        return np.empty((0,), dtype=np.float32)
    qbar = qd.heads[layer, head]
    return (means[:, kv_head, :] @ qbar / np.sqrt(config.d_head)).astype(np.float32)


def score_all_heads(store: TieredKVStore, layer: int,
                    qd: QueryDescriptor) -> np.ndarray:
    """(n_heads, n_frames) score matrix for one layer."""
    return np.stack([score_frames(store, layer, head, qd)
                     for head in range(store.config.n_heads)])


def select_frames(scores_by_head: np.ndarray, config: RecallConfig) -> list[int]:
    """Frame indices selected for one layer, in temporal order.

    Per head: keep frames within alpha of that head's maximum. Layer
    selection is the union over heads; if it exceeds max_frames, keep the
    top max_frames by max-over-heads score, ties toward older frames.
    """
    scores = np.asarray(scores_by_head, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError(f"scores must be (n_heads, n_frames), got {scores.shape}")
    n_frames = scores.shape[1]
    if n_frames == 0:
        return []
    selected: set[int] = set()
    for head_scores in scores:
        best = head_scores.max()
        if math.isinf(config.alpha):
            selected.update(range(n_frames))
            break
        for j in range(n_frames):
            if best - head_scores[j] <= config.alpha:
                selected.add(j)
    if len(selected) > config.max_frames:
        by_max = scores.max(axis=0)
        # sort by (-score, index): ties fall to the older frame
        ranked = sorted(selected, key=lambda j: (-by_max[j], j))
        selected = set(ranked[:config.max_frames])
    return sorted(selected)


def recall(store: TieredKVStore, question: TokenBlock,
           weights: ProjectionWeights, config: ModelConfig,
           rc: RecallConfig) -> RecallResult:
    """Score, select, and fetch per layer. Fetching may read cold files."""
    qd = query_descriptor(question, weights, config)
    result = RecallResult()
    all_ids = store.frame_ids()
    for layer in range(config.n_layers):
        scores = score_all_heads(store, layer, qd)
        picked = select_frames(scores, rc)
        frame_ids = tuple(all_ids[j] for j in picked)
        keys, values, positions = store.fetch(layer, frame_ids)
        result.layers.append(LayerRecall(
            frame_ids=frame_ids, scores=scores,
            keys=keys, values=values, positions=positions))
    return result


def answer_attention(result: RecallResult, question: TokenBlock,
                     weights: ProjectionWeights,
                     config: ModelConfig) -> np.ndarray:
    """Question tokens attend causally over [recalled KV, question].

    Recalled entries are context only; nothing here writes back to the
    store. Returns (n_layers, n_question, n_heads, d_head) float32. With
    nothing recalled this is plain self-attention over the question.
    """
    if len(result.layers) != config.n_layers:
        raise ShapeError(
            f"result has {len(result.layers)} layers, config says {config.n_layers}")
    n_q = len(question)
    out = np.empty((config.n_layers, n_q, config.n_heads, config.d_head),
                   dtype=np.float32)
    for layer, rec in enumerate(result.layers):
        q, k_q, v_q = project_qkv(question, layer, weights, config)
        base = int(rec.positions[-1]) + 1 if rec.positions.size else 0
        q_positions = np.arange(base, base + n_q, dtype=np.int64)
        keys = np.concatenate([rec.keys, k_q]) if rec.keys.size else k_q
        values = np.concatenate([rec.values, v_q]) if rec.values.size else v_q
        k_positions = np.concatenate([rec.positions, q_positions])
        out[layer] = attend(q, keys, values, causal=True,
                            q_positions=q_positions, k_positions=k_positions)
    return out
