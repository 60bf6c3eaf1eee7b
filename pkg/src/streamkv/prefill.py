"""Chunked prefill: stream a clip through the stack chunk by chunk.

Each chunk is projected once per layer; its attention runs causally
against everything already cached (prior clips from the store, earlier
chunks of this clip, then the chunk itself). Attention outputs exist only
to validate the pipeline; what survives is the chunk's K/V.

The attention over history is computed blockwise with an online softmax,
so transient working buffers scale with the chunk, never with the stream.
A WorkBufferMonitor can be threaded through to count those allocations;
its peak is what the transient-allocation property test pins down.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import OrderingError, ShapeError, UsageError
from .model import ModelConfig, ProjectionWeights, TokenBlock, project_qkv
from .store import TieredKVStore


@dataclass(frozen=True)
class Clip:
    """One stream slice: a clip id, a timestamp, and whole frames."""

    clip_id: int
    timestamp: int
    frames: tuple[TokenBlock, ...]

    def __post_init__(self) -> None:
        last = None
        for i, frame in enumerate(self.frames):
            if len(frame) == 0:
                raise ShapeError(f"frame {i} of clip {self.clip_id} is empty")
            if last is not None and frame.positions[0] <= last:
                raise OrderingError(
                    f"frame {i} of clip {self.clip_id} regresses in position")
            last = int(frame.positions[-1])

    @property
    def n_tokens(self) -> int:
        return sum(len(f) for f in self.frames)

    def token_block(self) -> TokenBlock:
        if not self.frames:
            raise UsageError(f"clip {self.clip_id} has no frames")
        return TokenBlock(
            tokens=np.concatenate([f.tokens for f in self.frames]),
            positions=np.concatenate([f.positions for f in self.frames]))


@dataclass(frozen=True)
class ChunkPlan:
    chunk_size: int
    ranges: tuple[tuple[int, int], ...]


def split_into_chunks(clip: Clip, chunk_size: int) -> ChunkPlan:
    """Cover the clip's tokens with ceil(n / chunk_size) chunks in order.

    The last chunk may be shorter; nothing is padded.
    """
    if chunk_size < 1:
        raise UsageError(f"chunk_size must be >= 1, got {chunk_size}")
    n = clip.n_tokens
    ranges = tuple((start, min(start + chunk_size, n))
                   for start in range(0, n, chunk_size))
    assert len(ranges) == math.ceil(n / chunk_size) if n else not ranges
    return ChunkPlan(chunk_size=chunk_size, ranges=ranges)


class WorkBufferMonitor:
    """Counts transient working-buffer allocations on the prefill path."""

    def __init__(self) -> None:
        self.live_bytes = 0
        self.peak_bytes = 0
        self.events: list[tuple[str, int]] = []

    @contextmanager
    def transient(self, name: str, nbytes: int):
        self.events.append((name, int(nbytes)))
        self.live_bytes += int(nbytes)
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        try:
            yield
        finally:
            self.live_bytes -= int(nbytes)


_NULL_MONITOR = WorkBufferMonitor()


@dataclass
class PrefillState:
    """Bookkeeping for one clip mid-prefill.

    l_p counts positions cached before this clip; l_c counts positions of
    this clip already prefilled. chunk_keys/chunk_values accumulate the
    clip's per-layer K/V until the clip commits to the store.
    """

    store: TieredKVStore
    clip: Clip
    l_p: int
    l_c: int = 0
    chunk_keys: list[list[np.ndarray]] = field(default_factory=list)
    chunk_values: list[list[np.ndarray]] = field(default_factory=list)
    chunk_positions: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.chunk_keys:
            n_layers = self.store.config.n_layers
            self.chunk_keys = [[] for _ in range(n_layers)]
            self.chunk_values = [[] for _ in range(n_layers)]

    def kv_length(self, layer: int) -> int:
        got = sum(k.shape[0] for k in self.chunk_keys[layer])
        if got != self.l_c:
            raise OrderingError(
                f"layer {layer} holds {got} positions, expected {self.l_c}")
        return self.l_p + self.l_c


def _attend_streaming(q: np.ndarray, q_positions: np.ndarray, blocks,
                      monitor: WorkBufferMonitor) -> np.ndarray:
    """Causal attention of q over an iterator of (keys, values, positions).

    Online softmax: one pass over key blocks, carrying a running max,
    denominator, and weighted accumulator per (query, head).
    """
    n_q, n_heads, d_head = q.shape
    scale = 1.0 / np.sqrt(d_head)
    f8 = 8
    with monitor.transient("acc", n_q * n_heads * d_head * f8), \
            monitor.transient("stats", 2 * n_q * n_heads * f8):
        acc = np.zeros((n_q, n_heads, d_head), dtype=np.float64)
        m = np.full((n_q, n_heads), -np.inf, dtype=np.float64)
        denom = np.zeros((n_q, n_heads), dtype=np.float64)
        for keys, values, k_positions in blocks:
            n_k = keys.shape[0]
            if n_k == 0:
                continue
            n_kv = keys.shape[1]
            group = n_heads // n_kv
            with monitor.transient("scores", n_q * n_heads * n_k * f8):
                # grouped matmul: query head h reads kv head h // group
                qg = q.transpose(1, 0, 2).reshape(n_kv, group * n_q, d_head)
                scores = (qg @ keys.transpose(1, 2, 0)) \
                    .reshape(n_heads, n_q, n_k).transpose(1, 0, 2) \
                    .astype(np.float64) * scale
                mask = k_positions[None, :] > q_positions[:, None]
                scores = np.where(mask[:, None, :], -np.inf, scores)
                block_max = scores.max(axis=2)
                new_m = np.maximum(m, block_max)
                # fully-masked-so-far rows keep -inf; exp handles them as 0
                shift_old = np.exp(np.where(np.isinf(m) & np.isinf(new_m), 0.0, m - new_m))
                e = np.exp(scores - np.where(np.isinf(new_m), 0.0, new_m)[:, :, None])
                e = np.where(mask[:, None, :], 0.0, e)
                eg = e.transpose(1, 0, 2).reshape(n_kv, group * n_q, n_k)
                upd = (eg @ values.transpose(1, 0, 2).astype(np.float64)) \
                    .reshape(n_heads, n_q, d_head).transpose(1, 0, 2)
                acc = acc * shift_old[:, :, None] + upd
                denom = denom * shift_old + e.sum(axis=2)
                m = new_m
        if np.any(denom == 0.0):
            raise UsageError("some query attends to nothing; check causal positions")
        return (acc / denom[:, :, None]).astype(np.float32)


def prefill_chunk(state: PrefillState, chunk: TokenBlock,
                  weights: ProjectionWeights, config: ModelConfig,
                  monitor: WorkBufferMonitor | None = None) -> PrefillState:
    """Project one chunk and attend it against everything cached so far."""
    if len(chunk) == 0:
        raise UsageError("empty chunk")
    expected_start = state.store.next_position + state.l_c
    if int(chunk.positions[0]) != expected_start:
        raise OrderingError(
            f"chunk starts at {int(chunk.positions[0])}, expected {expected_start}")
    mon = monitor or _NULL_MONITOR
    n = len(chunk)
    f4 = 4
    outputs = np.empty((config.n_layers, n, config.n_heads, config.d_head),
                       dtype=np.float32)
    for layer in range(config.n_layers):
        with mon.transient("qkv", n * (config.n_heads + 2 * config.n_kv_heads)
                           * config.d_head * f4):
            q, k, v = project_qkv(chunk, layer, weights, config)

            def blocks():
                yield from state.store.iter_layer_blocks(layer)
                for bk, bv, bp in zip(state.chunk_keys[layer],
                                      state.chunk_values[layer],
                                      state.chunk_positions):
                    yield bk, bv, bp
                yield k, v, chunk.positions

            outputs[layer] = _attend_streaming(q, chunk.positions, blocks(), mon)
            state.chunk_keys[layer].append(k)
            state.chunk_values[layer].append(v)
    state.chunk_positions.append(chunk.positions.copy())
    state.l_c += n
    state.outputs.append(outputs)
    for layer in range(config.n_layers):
        state.kv_length(layer)
    return state


def prefill_clip(store: TieredKVStore, clip: Clip, chunk_size: int,
                 weights: ProjectionWeights, config: ModelConfig,
                 monitor: WorkBufferMonitor | None = None) -> TieredKVStore:
    """Prefill a whole clip chunk by chunk and commit its KV to the store.

    Empty clips leave the store unchanged. Per-frame mean-key descriptors
    are registered eagerly at commit, so scoring works immediately.
    """
    if clip.n_tokens == 0:
        return store
    block = clip.token_block()
    if int(block.positions[0]) != store.next_position:
        raise OrderingError(
            f"clip {clip.clip_id} starts at {int(block.positions[0])}, "
            f"store expects {store.next_position}")
    if len(block) > 1 and not np.all(np.diff(block.positions) == 1):
        raise OrderingError(f"clip {clip.clip_id} has position gaps")
    store.begin_clip(clip.clip_id)
    try:
        state = PrefillState(store=store, clip=clip, l_p=store.next_position)
        plan = split_into_chunks(clip, chunk_size)
        for start, end in plan.ranges:
            prefill_chunk(state, block.slice(start, end), weights, config, monitor)

        layer_keys = [np.concatenate(state.chunk_keys[layer])
                      for layer in range(config.n_layers)]
        layer_values = [np.concatenate(state.chunk_values[layer])
                        for layer in range(config.n_layers)]
        next_frame = max(store.frame_ids(), default=-1) + 1
        cursor = 0
        for frame in clip.frames:
            fid = next_frame
            next_frame += 1
            start_pos = int(frame.positions[0])
            store.register_frame(fid, clip.clip_id, start_pos, start_pos + len(frame))
            for layer in range(config.n_layers):
                store.append_kv(
                    layer, fid,
                    np.ascontiguousarray(layer_keys[layer][cursor:cursor + len(frame)]),
                    np.ascontiguousarray(layer_values[layer][cursor:cursor + len(frame)]))
            cursor += len(frame)
    except Exception:
        store.abort_clip(clip.clip_id)
        raise
    store.commit_clip(clip.clip_id)
    return store
