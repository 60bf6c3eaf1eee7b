"""Closed-form activation and cache memory accounting.

Pure integer arithmetic (Python ints never overflow) over half-precision
scalars: every formula multiplies element counts by BYTES_PER_SCALAR = 2.
The engine itself computes in float32; these formulas describe the
full-scale deployment the presets mirror, not this process.

Conventions: batch b, stream length s (tokens), d_model and d_ff describe
the MLP path, n_heads/n_kv_heads/d_head the attention path, n_layers the
cache depth, visual_tokens + question_tokens the cached sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .errors import ConfigurationError, UsageError

BYTES_PER_SCALAR = 2
GB = 10**9
GIB = 2**30


@dataclass(frozen=True)
class AccountingInput:
    b: int
    s: int
    d_model: int
    d_ff: int
    n_heads: int
    n_kv_heads: int
    d_head: int
    n_layers: int
    visual_tokens: int
    question_tokens: int
    chunk_size: int

    def __post_init__(self) -> None:
        # counts may be zero (degenerate geometries are well-defined);
        # only the chunk divisor must be positive
        for name in ("b", "s", "d_model", "d_ff", "n_heads", "n_kv_heads",
                     "d_head", "n_layers", "visual_tokens", "question_tokens"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.chunk_size < 1:
            raise ConfigurationError(
                f"chunk_size must be >= 1, got {self.chunk_size}")


# Qwen-7B-class geometry over a one-hour stream at 2 fps, 128 tokens/frame.
QWEN7B_1H = AccountingInput(
    b=1, s=921_600,
    d_model=4096, d_ff=14_336,
    n_heads=28, n_kv_heads=4, d_head=128,
    n_layers=28,
    visual_tokens=921_600, question_tokens=256,
    chunk_size=4096,
)

PRESETS = {"qwen7b-1h": QWEN7B_1H}


def attention_activation_bytes(inp: AccountingInput, s: int | None = None) -> int:
    """Transient X/Q plus K/V activations for one attention pass."""
    n = inp.s if s is None else s
    elements = (2 * inp.b * n * inp.n_heads * inp.d_head
                + 2 * inp.b * n * inp.n_kv_heads * inp.d_head)
    return elements * BYTES_PER_SCALAR


def mlp_activation_bytes(inp: AccountingInput, s: int | None = None) -> int:
    """Gated-MLP activations: two d_model-wide and three d_ff-wide tensors."""
    n = inp.s if s is None else s
    return inp.b * n * (2 * inp.d_model + 3 * inp.d_ff) * BYTES_PER_SCALAR


def kv_cache_bytes(inp: AccountingInput) -> int:
    """Whole-stream K and V cache across layers for visual plus question tokens."""
    tokens = inp.visual_tokens + inp.question_tokens
    return 2 * inp.n_layers * tokens * inp.n_kv_heads * inp.d_head * BYTES_PER_SCALAR


def chunk_reduction_factor(s: int, chunk_size: int) -> int:
    """How many chunks cover the stream; equals the peak-memory divisor."""
    if chunk_size < 1:
        raise UsageError(f"chunk_size must be >= 1, got {chunk_size}")
    if s < 0:
        raise UsageError(f"s must be >= 0, got {s}")
    return math.ceil(s / chunk_size)


def _sized(n_bytes: int) -> dict:
    return {
        "bytes": n_bytes,
        "gb": round(n_bytes / GB, 3),
        "gib": round(n_bytes / GIB, 3),
    }


def report(inp: AccountingInput) -> dict:
    """Full accounting report; every derived number is exact in `bytes`."""
    factor = chunk_reduction_factor(inp.s, inp.chunk_size)
    return {
        "input": {
            "b": inp.b, "s": inp.s, "d_model": inp.d_model, "d_ff": inp.d_ff,
            "n_heads": inp.n_heads, "n_kv_heads": inp.n_kv_heads,
            "d_head": inp.d_head, "n_layers": inp.n_layers,
            "visual_tokens": inp.visual_tokens,
            "question_tokens": inp.question_tokens,
            "chunk_size": inp.chunk_size,
            "bytes_per_scalar": BYTES_PER_SCALAR,
        },
        "attention_activation": _sized(attention_activation_bytes(inp)),
        "attention_activation_chunked": _sized(
            attention_activation_bytes(inp, s=inp.chunk_size)),
        "mlp_activation": _sized(mlp_activation_bytes(inp)),
        "mlp_activation_chunked": _sized(mlp_activation_bytes(inp, s=inp.chunk_size)),
        "kv_cache": _sized(kv_cache_bytes(inp)),
        "chunk_reduction_factor": factor,
    }


def preset(name: str, **overrides) -> AccountingInput:
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    base = PRESETS[name]
    return replace(base, **overrides) if overrides else base
