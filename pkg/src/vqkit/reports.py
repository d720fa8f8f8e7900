"""Report rendering: delimited tables plus figure files.

Everything here is presentation-only.  Numbers are produced by the other
modules; this one writes them out as CSV and renders matching matplotlib
figures next to the CSV so a run directory is self-describing.
"""

from __future__ import annotations

import csv
import os
from typing import Dict, List, Optional, Sequence

import numpy as np

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)


def _ensure_dir(path: str) -> None:
    os.makedirs(path, exist_ok=True)


def write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    """Write one delimited table. Values are emitted via repr-free str()."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow(list(row))


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Comma-delimited text block for stdout; same shape as the CSV files."""
    lines = [",".join(str(h) for h in header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# calibration loss curves


def loss_curve_rows(log: List[dict]) -> List[List]:
    rows = []
    for rec in log:
        rows.append(
            [rec["iter"], rec["L_d"], rec["L_r"], rec["L"], rec["frozen"]]
        )
    return rows


def write_loss_curves(log: List[dict], out_dir: str, stem: str = "loss_curve") -> Dict[str, str]:
    """Emit loss-per-iteration CSV and a two-panel figure.

    Returns {"csv": path, "png": path}.
    """
    _ensure_dir(out_dir)
    csv_path = os.path.join(out_dir, stem + ".csv")
    png_path = os.path.join(out_dir, stem + ".png")
    write_csv(csv_path, ["iter", "L_d", "L_r", "L", "frozen"], loss_curve_rows(log))

    iters = [rec["iter"] for rec in log]
    fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(7.0, 6.0), sharex=True)
    if log:
        ax0.plot(iters, [rec["L_d"] for rec in log], label="data loss", lw=1.2)
        ax0.plot(iters, [rec["L_r"] for rec in log], label="ratio loss", lw=1.2)
        ax0.plot(iters, [rec["L"] for rec in log], label="total", lw=1.0, ls="--")
        ax0.set_yscale("log")
        ax1.plot(iters, [rec["frozen"] for rec in log], color="tab:red", lw=1.2)
    ax0.set_ylabel("loss")
    ax0.legend(loc="best", fontsize=8)
    ax0.grid(alpha=0.3)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("frozen layers")
    ax1.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"csv": csv_path, "png": png_path}


# ---------------------------------------------------------------------------
# candidate position histogram (which ranked candidate each sub-vector kept)


def position_rows(per_layer: Dict[str, np.ndarray]) -> List[List]:
    rows = []
    for name in sorted(per_layer):
        props = per_layer[name]
        for pos, p in enumerate(props, start=1):
            rows.append([name, pos, float(p)])
    return rows


def pooled_positions(per_layer: Dict[str, np.ndarray], counts: Dict[str, int]) -> np.ndarray:
    """Sub-vector-count weighted average of per-layer proportions."""
    names = sorted(per_layer)
    if not names:
        raise ValueError("no layers to pool")
    n = per_layer[names[0]].shape[0]
    total = np.zeros(n, dtype=np.float64)
    weight = 0
    for name in names:
        c = counts[name]
        total += per_layer[name] * c
        weight += c
    return total / weight


def write_position_histogram(
    per_layer: Dict[str, np.ndarray],
    counts: Dict[str, int],
    out_dir: str,
    stem: str = "candidate_positions",
) -> Dict[str, str]:
    """CSV of per-layer proportions plus a bar chart of the pooled histogram."""
    _ensure_dir(out_dir)
    csv_path = os.path.join(out_dir, stem + ".csv")
    png_path = os.path.join(out_dir, stem + ".png")
    write_csv(csv_path, ["layer", "position", "proportion"], position_rows(per_layer))

    pooled = pooled_positions(per_layer, counts)
    positions = np.arange(1, pooled.shape[0] + 1)
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    ax.bar(positions, pooled, color="tab:blue", width=0.6)
    for name in sorted(per_layer):
        ax.plot(positions, per_layer[name], "o", ms=3, alpha=0.35, color="gray")
    ax.set_xticks(list(positions))
    ax.set_xlabel("candidate position (1 = nearest)")
    ax.set_ylabel("proportion of sub-vectors")
    ax.set_ylim(0.0, 1.0)
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"csv": csv_path, "png": png_path}


# ---------------------------------------------------------------------------
# gradient cosine-similarity histograms


def grad_cosine_rows(
    before: Dict[str, np.ndarray], after: Dict[str, np.ndarray]
) -> List[List]:
    rows = []
    for name in sorted(before):
        for v in before[name]:
            rows.append([name, "before", float(v)])
        for v in after.get(name, ()):
            rows.append([name, "after", float(v)])
    return rows


def write_grad_cosine_histogram(
    before: Dict[str, np.ndarray],
    after: Dict[str, np.ndarray],
    out_dir: str,
    stem: str = "grad_cosine",
    bins: int = 24,
) -> Dict[str, str]:
    """Overlaid histograms of per-codeword gradient cosine similarity."""
    _ensure_dir(out_dir)
    csv_path = os.path.join(out_dir, stem + ".csv")
    png_path = os.path.join(out_dir, stem + ".png")
    write_csv(csv_path, ["layer", "stage", "cosine"], grad_cosine_rows(before, after))

    pool_b = np.concatenate([before[n] for n in sorted(before)]) if before else np.zeros(0)
    pool_a = np.concatenate([after[n] for n in sorted(after)]) if after else np.zeros(0)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    if pool_b.size:
        ax.hist(pool_b, bins=edges, alpha=0.55, label="before", color="tab:orange")
    if pool_a.size:
        ax.hist(pool_a, bins=edges, alpha=0.55, label="after", color="tab:green")
    ax.set_xlabel("mean pairwise gradient cosine per codeword")
    ax.set_ylabel("codewords")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"csv": csv_path, "png": png_path}


# ---------------------------------------------------------------------------
# storage summary


def storage_rows(layer_stats: List[dict]) -> List[List]:
    """layer_stats: dicts with name, k, d, codebook_mb, assignment_mb, bits, mse."""
    rows = []
    for st in layer_stats:
        rows.append(
            [
                st["name"],
                "%dx%d" % (st["k"], st["d"]) if st["k"] else "",
                "%.6f" % st["codebook_mb"],
                "%.6f" % st["assignment_mb"],
                "%.4f" % st["bits"],
                "%.8e" % st["mse"] if st["mse"] is not None else "",
            ]
        )
    return rows


STORAGE_HEADER = ("layer", "kxd", "codebook_mb", "assignment_mb", "bits_per_weight", "mse")


def write_storage_table(
    layer_stats: List[dict], out_dir: str, stem: str = "storage"
) -> Dict[str, str]:
    _ensure_dir(out_dir)
    csv_path = os.path.join(out_dir, stem + ".csv")
    write_csv(csv_path, STORAGE_HEADER, storage_rows(layer_stats))
    return {"csv": csv_path}
