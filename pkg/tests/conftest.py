"""Shared builders: random configs, random streams, brute-force oracles,
and a randomized scenario generator for the loop safety suite."""

from __future__ import annotations

import math
from importlib import resources

import numpy as np

from streamkv.model import ModelConfig, ProjectionWeights, TokenBlock, init_weights
from streamkv.prefill import Clip, prefill_clip
from streamkv.store import TieredKVStore

SCENARIO_NAMES = ("football", "painting_vs_wall", "repetition_count",
                  "immediate_evidence")


def scenario_path(name: str) -> str:
    return str(resources.files("streamkv").joinpath("scenarios", f"{name}.json"))


def random_model_config(rng: np.random.Generator, max_layers: int = 4) -> ModelConfig:
    n_layers = int(rng.integers(1, max_layers + 1))
    d_head = int(rng.choice([2, 4, 8]))
    n_kv_heads = int(rng.choice([1, 2]))
    group = int(rng.choice([1, 2, 4]))
    n_heads = n_kv_heads * group
    return ModelConfig(
        n_layers=n_layers,
        d_model=n_heads * d_head,    # <= 64 for every combination above
        n_heads=n_heads,
        n_kv_heads=n_kv_heads,
        d_head=d_head,
        tokens_per_frame=int(rng.integers(1, 5)),
        seed=int(rng.integers(0, 2**31)),
    )


def make_clip(rng, config: ModelConfig, clip_id: int, timestamp: int,
              n_frames: int, start_position: int,
              frame_constant: bool = False) -> Clip:
    frames = []
    pos = start_position
    for _ in range(n_frames):
        if frame_constant:
            row = rng.standard_normal(config.d_model).astype(np.float32)
            tokens = np.tile(row, (config.tokens_per_frame, 1))
        else:
            tokens = rng.standard_normal(
                (config.tokens_per_frame, config.d_model)).astype(np.float32)
        positions = np.arange(pos, pos + config.tokens_per_frame, dtype=np.int64)
        frames.append(TokenBlock(tokens=tokens, positions=positions))
        pos += config.tokens_per_frame
    return Clip(clip_id=clip_id, timestamp=timestamp, frames=tuple(frames))


def random_clips(rng, config: ModelConfig, n_clips: int | None = None,
                 max_frames: int = 3, frame_constant: bool = False) -> list[Clip]:
    n_clips = n_clips or int(rng.integers(1, 5))
    clips = []
    pos = 0
    for i in range(n_clips):
        clip = make_clip(rng, config, i + 1, i + 1,
                         int(rng.integers(1, max_frames + 1)), pos,
                         frame_constant=frame_constant)
        clips.append(clip)
        pos += clip.n_tokens
    return clips


def prefill_stream(clips, chunk_size: int, weights: ProjectionWeights,
                   config: ModelConfig, cold_dir=None) -> TieredKVStore:
    store = TieredKVStore(config, cold_dir=cold_dir)
    for clip in clips:
        prefill_clip(store, clip, chunk_size, weights, config)
    return store


def stream_tokens(clips) -> np.ndarray:
    return np.concatenate([f.tokens for c in clips for f in c.frames])


def projection_oracle(tokens: np.ndarray, layer: int,
                      weights: ProjectionWeights, config: ModelConfig):
    """KV a monolithic prefill must produce: one matmul, no chunking."""
    n = tokens.shape[0]
    k = (tokens @ weights.w_k[layer]).reshape(n, config.n_kv_heads, config.d_head)
    v = (tokens @ weights.w_v[layer]).reshape(n, config.n_kv_heads, config.d_head)
    return k, v


def attention_oracle(q, k, v, q_positions, k_positions):
    """Per-element causal GQA in plain python loops and math.exp."""
    n_q, n_heads, d_head = q.shape
    n_k, n_kv, _ = k.shape
    group = n_heads // n_kv
    out = np.zeros((n_q, n_heads, d_head), dtype=np.float64)
    for i in range(n_q):
        for h in range(n_heads):
            g = h // group
            scores = []
            for j in range(n_k):
                if k_positions[j] > q_positions[i]:
                    scores.append(None)
                    continue
                s = 0.0
                for d in range(d_head):
                    s += float(q[i, h, d]) * float(k[j, g, d])
                scores.append(s / math.sqrt(d_head))
            finite = [s for s in scores if s is not None]
            top = max(finite)
            weights_row = [math.exp(s - top) if s is not None else 0.0
                           for s in scores]
            z = sum(weights_row)
            for j in range(n_k):
                w = weights_row[j] / z
                for d in range(d_head):
                    out[i, h, d] += w * float(v[j, g, d])
    return out.astype(np.float32)


def select_frames_oracle(scores_by_head, alpha: float, max_frames: int) -> list[int]:
    """Set-builder form of the margin rule, union, cap, temporal order."""
    scores = np.asarray(scores_by_head, dtype=np.float64)
    n_frames = scores.shape[1]
    if n_frames == 0:
        return []
    union: set[int] = set()
    for h in range(scores.shape[0]):
        best = max(scores[h])
        for j in range(n_frames):
            if math.isinf(alpha) or best - scores[h][j] <= alpha:
                union.add(j)
    if len(union) > max_frames:
        by_max = [max(scores[h][j] for h in range(scores.shape[0]))
                  for j in range(n_frames)]
        ranked = sorted(union, key=lambda j: (-by_max[j], j))
        union = set(ranked[:max_frames])
    return sorted(union)


# ----------------------------------------------------------------------
# randomized scenario documents for the agent safety suite
# ----------------------------------------------------------------------

_KINDS = ["goal", "whistle", "rep", "sign", "hint", "crash", "wave", "flag"]


def _rand_bbox(rng) -> list[float]:
    x0 = float(rng.uniform(0.0, 0.4))
    y0 = float(rng.uniform(0.0, 0.4))
    return [round(x0, 3), round(y0, 3),
            round(x0 + float(rng.uniform(0.2, 0.55)), 3),
            round(y0 + float(rng.uniform(0.2, 0.55)), 3)]


def random_scenario_doc(rng: np.random.Generator) -> dict:
    """Small random but valid scenario; evidence may or may not ever show."""
    n_clips = int(rng.integers(2, 6))
    kinds = list(rng.choice(_KINDS, size=3, replace=False))
    clips = []
    declared = []
    for i in range(n_clips):
        events = []
        for _ in range(int(rng.integers(0, 3))):
            kind = str(rng.choice(kinds))
            ev = {"t": i + 1, "kind": kind, "payload": f"{kind} happened",
                  "frame": int(rng.integers(0, 2))}
            if rng.random() < 0.3:
                ev["region"] = _rand_bbox(rng)
                ev["gated_by_tool"] = str(rng.choice(["zoom_in", "detailed_caption"]))
            events.append(ev)
            declared.append(ev["kind"])
        clip = {"clip_id": i + 1, "n_frames": 2,
                "token_seed": int(rng.integers(0, 10_000))}
        if events:
            clip["events"] = events
        if rng.random() < 0.4:
            clip["objects"] = {f"obj{j}": _rand_bbox(rng)
                               for j in range(int(rng.integers(1, 3)))}
        clips.append(clip)

    target = str(rng.choice(declared)) if declared else kinds[0]
    if target not in declared:
        # guarantee the required kind is declared somewhere
        clips[0].setdefault("events", []).append(
            {"t": 1, "kind": target, "payload": f"{target} happened", "frame": 0})
    required = [target] if rng.random() < 0.8 else []

    futures = {}
    for mode in ("reactive", "proactive", "speculative"):
        if mode != "reactive" and rng.random() < 0.3:
            continue
        fut = {"trajectory": [{"t": int(rng.integers(1, n_clips + 1)),
                               "kind": target, "description": f"expect {target}"}],
               "g": float(rng.integers(0, 6)), "u": float(rng.integers(0, 6))}
        wt = rng.random()
        if wt < 0.3:
            fut["watch_targets"] = [{"kind": "region", "region": _rand_bbox(rng)}]
        elif wt < 0.5:
            fut["watch_targets"] = [{"kind": "count",
                                     "objects": {"obj0": _rand_bbox(rng)}}]
        elif wt < 0.6:
            fut["watch_targets"] = [{"kind": "caption", "region": _rand_bbox(rng)}]
        futures[mode] = fut

    rule = ({"type": "count", "kind": target} if rng.random() < 0.5
            else {"type": "last_payload", "kinds": [target]})
    return {
        "schema": 1,
        "name": f"fuzz-{int(rng.integers(0, 10**9))}",
        "config": {"seed": int(rng.integers(0, 10_000))},
        "clips": clips,
        "question": {
            "text": "what happened?",
            "asked_at": int(rng.integers(1, n_clips + 1)),
            "required_evidence_events": required,
            "ground_truth": "n/a",
            "answer_rule": rule,
            "candidate_futures": futures,
        },
    }
