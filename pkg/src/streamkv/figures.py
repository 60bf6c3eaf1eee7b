"""Figure rendering for the report paths (bench and mem-report).

Figures are written next to the delimited output; the CSV/JSON stays the
machine-readable artifact, these are for eyeballs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams.update({
    "figure.dpi": 120,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_selected_vs_alpha(rows: list[dict], out_dir: Path) -> Path:
    """Final-step selected-frame count per layer as alpha widens."""
    finals: dict[tuple[float, int], list[int]] = {}
    for row in rows:
        key = (row["alpha"], row["step"])
        finals[key] = row["selected_frames"]
    last_step = max(step for _, step in finals)
    alphas = sorted({alpha for alpha, _ in finals})
    n_layers = len(next(iter(finals.values())))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for layer in range(n_layers):
        counts = [finals[(alpha, last_step)][layer] for alpha in alphas]
        ax.plot(alphas, counts, marker="o", label=f"layer {layer}")
    ax.set_xlabel("alpha")
    ax.set_ylabel(f"selected frames at step {last_step}")
    ax.set_title("recall widens monotonically with alpha")
    ax.legend()
    return _save(fig, out_dir / "selected_vs_alpha.png")


def render_tier_usage(rows: list[dict], out_dir: Path) -> Path:
    """Hot/cold bytes over the stream for the widest-alpha sweep."""
    alpha = max(row["alpha"] for row in rows)
    series = [row for row in rows if row["alpha"] == alpha]
    steps = [row["step"] for row in series]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, [row["hot_bytes"] for row in series], marker="o", label="hot")
    ax.plot(steps, [row["cold_bytes"] for row in series], marker="s", label="cold")
    ax.set_xlabel("stream position (clip)")
    ax.set_ylabel("bytes")
    ax.set_title(f"tier usage over the stream (alpha={alpha})")
    ax.legend()
    return _save(fig, out_dir / "tier_usage.png")


def render_accounting(report: dict, out_dir: Path) -> Path:
    """Full-stream vs chunked activation bytes plus the cache line."""
    labels = ["attention\nactivation", "mlp\nactivation", "kv cache"]
    full = [report["attention_activation"]["bytes"],
            report["mlp_activation"]["bytes"],
            report["kv_cache"]["bytes"]]
    chunked = [report["attention_activation_chunked"]["bytes"],
               report["mlp_activation_chunked"]["bytes"],
               report["kv_cache"]["bytes"]]
    x = range(len(labels))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar([i - 0.2 for i in x], full, width=0.4, label="full stream")
    ax.bar([i + 0.2 for i in x], chunked, width=0.4, label="per chunk")
    ax.set_xticks(list(x), labels)
    ax.set_yscale("log")
    ax.set_ylabel("bytes (log)")
    ax.set_title("activation and cache footprint")
    ax.legend()
    return _save(fig, out_dir / "mem_report.png")
