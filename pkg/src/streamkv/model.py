"""Toy grouped-query attention stack over raw token vectors.

Deliberately minimal so every downstream number can be checked by hand:
no layer norm, no residual stream, no MLP, no positional encoding, and
each layer projects from the raw tokens, so layers are independent.
Q carries n_heads heads while K/V carry n_kv_heads; query head h reads
kv head h // (n_heads // n_kv_heads). Arrays are float32 at rest; the
softmax runs in float64 internally so weight ratios are trustworthy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ShapeError, UsageError


@dataclass(frozen=True)
class ModelConfig:
    """Geometry of the toy stack.

    Invariants: d_model == n_heads * d_head, n_heads divisible by
    n_kv_heads, every field at least 1.
    """

    n_layers: int = 2
    d_model: int = 16
    n_heads: int = 4
    n_kv_heads: int = 2
    d_head: int = 4
    tokens_per_frame: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("n_layers", "d_model", "n_heads", "n_kv_heads", "d_head",
                     "tokens_per_frame"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigurationError(
                f"d_model must equal n_heads * d_head "
                f"({self.d_model} != {self.n_heads} * {self.d_head})")
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigurationError(
                f"n_heads must be divisible by n_kv_heads "
                f"({self.n_heads} % {self.n_kv_heads} != 0)")

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    def kv_head_of(self, head: int) -> int:
        """Kv head serving the given query head."""
        if not 0 <= head < self.n_heads:
            raise UsageError(f"head {head} out of range [0, {self.n_heads})")
        return head // self.group_size


@dataclass(frozen=True)
class ProjectionWeights:
    """Per-layer Q/K/V projection matrices.

    w_q: (n_layers, d_model, n_heads * d_head)
    w_k, w_v: (n_layers, d_model, n_kv_heads * d_head)
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self) -> None:
        for name, arr in (("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v)):
            if arr.ndim != 3:
                raise ShapeError(f"{name} must be 3-d, got shape {arr.shape}")
            if arr.dtype != np.float32:
                raise ShapeError(f"{name} must be float32, got {arr.dtype}")
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"{name} contains non-finite values")

    @property
    def n_layers(self) -> int:
        return self.w_q.shape[0]


def init_weights(config: ModelConfig) -> ProjectionWeights:
    """Draw deterministic projections for the config.

    Scheme (fixed, regeneration is bitwise identical): numpy default_rng
    seeded with config.seed, standard normal draws scaled by
    1 / sqrt(d_model), drawn layer by layer in the order Q, K, V.
    """
    rng = np.random.default_rng(config.seed)
    scale = 1.0 / np.sqrt(config.d_model)
    q_cols = config.n_heads * config.d_head
    kv_cols = config.n_kv_heads * config.d_head
    w_q = np.empty((config.n_layers, config.d_model, q_cols), dtype=np.float32)
    w_k = np.empty((config.n_layers, config.d_model, kv_cols), dtype=np.float32)
    w_v = np.empty((config.n_layers, config.d_model, kv_cols), dtype=np.float32)
    for layer in range(config.n_layers):
        w_q[layer] = (rng.standard_normal((config.d_model, q_cols)) * scale).astype(np.float32)
        w_k[layer] = (rng.standard_normal((config.d_model, kv_cols)) * scale).astype(np.float32)
        w_v[layer] = (rng.standard_normal((config.d_model, kv_cols)) * scale).astype(np.float32)
    return ProjectionWeights(w_q=w_q, w_k=w_k, w_v=w_v)


@dataclass(frozen=True)
class TokenBlock:
    """A run of token vectors with strictly increasing stream positions.

    tokens: (n, d_model) float32; positions: (n,) int64.
    """

    tokens: np.ndarray
    positions: np.ndarray

    def __post_init__(self) -> None:
        if self.tokens.ndim != 2:
            raise ShapeError(f"tokens must be 2-d, got shape {self.tokens.shape}")
        if self.tokens.dtype != np.float32:
            raise ShapeError(f"tokens must be float32, got {self.tokens.dtype}")
        if self.positions.ndim != 1 or self.positions.shape[0] != self.tokens.shape[0]:
            raise ShapeError(
                f"positions shape {self.positions.shape} does not match "
                f"{self.tokens.shape[0]} tokens")
        if len(self.positions) > 1 and not np.all(np.diff(self.positions) > 0):
            raise ShapeError("positions must be strictly increasing")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def d_model(self) -> int:
        return self.tokens.shape[1]

    def slice(self, start: int, end: int) -> "TokenBlock":
        return TokenBlock(tokens=self.tokens[start:end], positions=self.positions[start:end])


def make_block(tokens: np.ndarray, start_position: int = 0) -> TokenBlock:
    """Wrap a raw (n, d_model) array with consecutive positions."""
    arr = np.asarray(tokens, dtype=np.float32)
    pos = np.arange(start_position, start_position + arr.shape[0], dtype=np.int64)
    return TokenBlock(tokens=arr, positions=pos)


def project_qkv(block: TokenBlock, layer: int,
                weights: ProjectionWeights,
                config: ModelConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project a block through one layer.

    Returns (q, k, v) with shapes (n, n_heads, d_head) and twice
    (n, n_kv_heads, d_head), all float32.
    """
    if len(block) == 0:
        raise UsageError("cannot project an empty block")
    if not 0 <= layer < weights.n_layers:
        raise UsageError(f"layer {layer} out of range [0, {weights.n_layers})")
    if block.d_model != config.d_model:
        raise ShapeError(f"block has d_model {block.d_model}, config says {config.d_model}")
    n = len(block)
    q = (block.tokens @ weights.w_q[layer]).reshape(n, config.n_heads, config.d_head)
    k = (block.tokens @ weights.w_k[layer]).reshape(n, config.n_kv_heads, config.d_head)
    v = (block.tokens @ weights.w_v[layer]).reshape(n, config.n_kv_heads, config.d_head)
    return q, k, v


def softmax(scores: np.ndarray) -> np.ndarray:
    """Stable softmax over a 1-d score vector, computed in float64."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise UsageError(f"softmax needs a non-empty 1-d vector, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise UsageError("softmax scores must be finite")
    shifted = s - s.max()
    e = np.exp(shifted)
    return e / e.sum()


def attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, *,
           causal: bool = True,
           q_positions: np.ndarray | None = None,
           k_positions: np.ndarray | None = None) -> np.ndarray:
    """Grouped-query scaled dot-product attention.

    Args:
        q: (n_q, n_heads, d_head) queries.
        k, v: (n_k, n_kv_heads, d_head) keys and values.
        causal: mask key positions greater than the query position.
        q_positions, k_positions: stream positions used for the causal
            mask. Defaults treat the queries as the suffix of the keys.

    Returns:
        (n_q, n_heads, d_head) float32 outputs.
    """
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError("q, k, v must be 3-d (tokens, heads, d_head)")
    if k.shape != v.shape:
        raise ShapeError(f"k {k.shape} and v {v.shape} must match")
    if q.shape[2] != k.shape[2]:
        raise ShapeError(f"d_head mismatch: q {q.shape[2]}, k {k.shape[2]}")
    n_q, n_heads, d_head = q.shape
    n_k, n_kv_heads, _ = k.shape
    if n_heads % n_kv_heads != 0:
        raise ShapeError(f"n_heads {n_heads} not divisible by n_kv_heads {n_kv_heads}")
    if n_k == 0:
        raise UsageError("attention needs at least one key")
    if q_positions is None:
        q_positions = np.arange(n_k - n_q, n_k, dtype=np.int64)
    if k_positions is None:
        k_positions = np.arange(n_k, dtype=np.int64)
    if q_positions.shape != (n_q,) or k_positions.shape != (n_k,):
        raise ShapeError("position arrays must match token counts")

    group = n_heads // n_kv_heads
    scale = 1.0 / np.sqrt(d_head)
    out = np.empty((n_q, n_heads, d_head), dtype=np.float32)
    future = k_positions[None, :] > q_positions[:, None] if causal else None
    if causal and bool(np.any(np.all(future, axis=1))):
        raise UsageError("some query has every key masked; no visible context")
    for h in range(n_heads):
        g = h // group
        scores = (q[:, h, :] @ k[:, g, :].T).astype(np.float64) * scale
        if causal:
            scores = np.where(future, -np.inf, scores)
        shifted = scores - scores.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        weights = e / e.sum(axis=1, keepdims=True)
        out[:, h, :] = (weights @ v[:, g, :].astype(np.float64)).astype(np.float32)
    return out
