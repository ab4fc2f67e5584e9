"""Figure rendering for cost reports and training logs.

Figures are rendered with matplotlib straight to SVG next to the JSON/CSV
artifacts.  Output is a pure function of the input document: a fixed hash
salt and stripped metadata keep the SVG bytes reproducible, and every
composition-bar segment carries a ``gid`` so the geometry can be read back
out of the file.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "kernelshrink"

# stable shape -> color assignment, cheap shapes cool, expensive warm
_PALETTE = ["#b2182b", "#ef8a62", "#fddbc7", "#d1e5f0", "#67a9cf", "#2166ac",
            "#762a83", "#1b7837", "#b8e186", "#de77ae", "#8c510a", "#35978f"]


def segment_gid(layer: str, shape: str) -> str:
    return f"seg__{layer}__{shape}"


def composition_figure(report: dict):
    """Stacked bars of per-layer sub-kernel composition.

    One bar per layer with chosen shapes; segment heights are the fraction
    of the layer's channels using that shape, so segments of a bar sum to
    the full bar height.
    """
    layers = [row for row in report.get("layers", [])
              if row.get("shape_counts") and row.get("replaceable")]
    if not layers:
        raise ValueError("report has no replaceable layers to plot")

    all_shapes = []
    for row in layers:
        for s in row["shape_counts"]:
            if s not in all_shapes:
                all_shapes.append(s)
    all_shapes.sort(key=lambda s: (-_volume(s), s))
    colors = {s: _PALETTE[i % len(_PALETTE)] for i, s in enumerate(all_shapes)}

    fig, ax = plt.subplots(figsize=(max(4.0, 1.0 + 0.8 * len(layers)), 3.6))
    for x, row in enumerate(layers):
        total = sum(row["shape_counts"].values())
        bottom = 0.0
        for s in all_shapes:
            count = row["shape_counts"].get(s, 0)
            if count == 0:
                continue
            frac = count / total
            bars = ax.bar(x, frac, bottom=bottom, width=0.7, color=colors[s],
                          edgecolor="white", linewidth=0.5)
            bars[0].set_gid(segment_gid(row["name"], s))
            bottom += frac
    ax.set_xticks(range(len(layers)))
    ax.set_xticklabels([row["name"] for row in layers], rotation=30, ha="right")
    ax.set_ylabel("channel fraction")
    ax.set_ylim(0, 1)
    handles = [plt.Rectangle((0, 0), 1, 1, color=colors[s]) for s in all_shapes]
    ax.legend(handles, all_shapes, loc="center left", bbox_to_anchor=(1.01, 0.5),
              fontsize=8, frameon=False)
    fig.tight_layout()
    return fig


def _volume(shape_str: str) -> int:
    out = 1
    for p in shape_str.split("x"):
        out *= int(p)
    return out


def loss_figure(rows: list[dict]):
    """Training-curve plot from log rows (iteration, loss[, penalty])."""
    if not rows:
        raise ValueError("empty training log")
    it = [float(r["iteration"]) for r in rows]
    loss = [float(r["loss"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(it, loss, lw=0.9, color="#2166ac", label="task loss")
    if "penalty" in rows[0]:
        pen = [float(r["penalty"]) for r in rows]
        if any(p != 0 for p in pen):
            ax2 = ax.twinx()
            ax2.plot(it, pen, lw=0.9, color="#b2182b", label="penalty")
            ax2.set_ylabel("penalty")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    fig.tight_layout()
    return fig


def save_svg(fig, path):
    """Write deterministic SVG bytes (no timestamps, fixed hash salt)."""
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def read_csv_rows(path) -> list[dict]:
    with open(path) as f:
        header = f.readline().strip().split(",")
        rows = []
        for line in f:
            if not line.strip():
                continue
            rows.append(dict(zip(header, line.strip().split(","))))
    return rows
