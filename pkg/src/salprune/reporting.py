"""Run artifacts: step-trace metrics files, explanation figures, and the
cross-run comparison table."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_metrics(path: str | Path, records: list[dict]) -> None:
    """One JSON record per line, stable key order; safe to diff bytewise."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def write_json(path: str | Path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def denormalize(x: torch.Tensor, mean: torch.Tensor, std: torch.Tensor) -> np.ndarray:
    """(C, H, W) normalized tensor -> (H, W, C) array clipped to [0, 1]."""
    img = x * std.view(-1, 1, 1) + mean.view(-1, 1, 1)
    img = img.permute(1, 2, 0).numpy()
    lo, hi = img.min(), img.max()
    if hi > 1.0 or lo < 0.0:
        img = (img - lo) / max(hi - lo, 1e-8)
    return np.clip(img, 0.0, 1.0)


def explanation_figure(path: str | Path, image: np.ndarray, grid: np.ndarray,
                       hard: np.ndarray, masked: np.ndarray, title: str = "") -> None:
    """Four panels: original, keep-probability heat map, hardened mask,
    masked input. Lossless raster output."""
    fig, axes = plt.subplots(1, 4, figsize=(8, 2.3))
    panels = [(image, None), (grid, "viridis"), (hard, "gray"), (masked, None)]
    names = ["input", "keep probability", "hard mask", "masked input"]
    for ax, (panel, cmap), name in zip(axes, panels, names):
        if cmap is None:
            ax.imshow(panel)
        else:
            ax.imshow(panel, cmap=cmap, vmin=0.0, vmax=1.0)
        ax.set_title(name, fontsize=8)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", dpi=120)
    plt.close(fig)


def collect_report_rows(run_dir: str | Path) -> list[dict]:
    """Gather per-run results from finetune summaries under ``run_dir``."""
    rows = []
    for summary in sorted(Path(run_dir).rglob("finetune_summary.json")):
        try:
            payload = json.loads(summary.read_text())
            rows.append({
                "run": str(summary.parent.relative_to(run_dir)) or ".",
                "baseline_acc": payload["baseline_acc"],
                "pruned_acc": payload["finetuned_acc"],
                "delta_acc": payload["delta_acc"],
                "pruned_flops_pct": payload["pruned_flops_pct"],
                "complete": True,
            })
        except (KeyError, json.JSONDecodeError):
            rows.append({"run": str(summary.parent), "complete": False})
    return rows


def format_report_table(rows: list[dict]) -> str:
    header = f"{'run':<28} {'baseline':>9} {'pruned':>9} {'d-acc':>8} {'pruned-flops%':>14}"
    lines = [header, "-" * len(header)]
    for r in rows:
        if not r.get("complete"):
            lines.append(f"{r['run']:<28} {'(incomplete)':>9}")
            continue
        lines.append(
            f"{r['run']:<28} {r['baseline_acc']*100:>8.2f}% {r['pruned_acc']*100:>8.2f}% "
            f"{r['delta_acc']*100:>+7.2f}% {r['pruned_flops_pct']:>13.2f}%"
        )
    return "\n".join(lines)
