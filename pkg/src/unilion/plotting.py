"""Figures written next to the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_bench(rows: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    for kind, marker in (("scan", "o"), ("attention", "s")):
        sel = sorted((r for r in rows if r["kind"] == kind), key=lambda r: r["T"])
        if sel:
            ax.loglog([r["T"] for r in sel], [r["seconds"] for r in sel], marker=marker,
                      label=f"{kind} ({sel[0]['operator']})")
    ax.set_xlabel("sequence length T")
    ax.set_ylabel("best wall time [s]")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_losses(records: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [r["step"] for r in records]
    ax.plot(steps, [r["total"] for r in records], label="total", linewidth=2)
    for key in ("det", "occ", "map", "mot", "plan"):
        if records and key in records[0]:
            ax.plot(steps, [r[key] for r in records], label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
