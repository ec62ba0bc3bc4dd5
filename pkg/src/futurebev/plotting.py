"""Batch rendering of flow fields and instance maps to image files.

Flow fields are drawn with direction mapped to hue and magnitude mapped
to opacity, so a stationary background fades to white while moving
regions show their heading as color.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import hsv_to_rgb  # noqa: E402


def flow_to_rgb(flow: np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """Turn one backward-flow field (2, H, W) into an (H, W, 3) image.

    Direction becomes hue; magnitude becomes opacity against white, with
    full opacity at ``max_magnitude`` (default: the field's own maximum).
    """
    fx, fy = flow[0], flow[1]
    magnitude = np.hypot(fx, fy)
    if max_magnitude is None:
        max_magnitude = float(magnitude.max())
    alpha = np.clip(magnitude / max(max_magnitude, 1e-9), 0.0, 1.0)
    hue = (np.arctan2(fy, fx) / (2.0 * np.pi)) % 1.0
    hsv = np.stack([hue, np.ones_like(hue), np.ones_like(hue)], axis=-1)
    rgb = hsv_to_rgb(hsv)
    return rgb * alpha[..., None] + (1.0 - alpha[..., None])


def save_flow_maps(flows: np.ndarray, path: str | Path, title: str = "backward flow") -> None:
    """Render each future step's flow field (T, 2, H, W) side by side."""
    t = flows.shape[0]
    peak = float(np.hypot(flows[:, 0], flows[:, 1]).max())
    fig, axes = plt.subplots(1, t, figsize=(3 * t, 3.4), squeeze=False)
    for i in range(t):
        ax = axes[0, i]
        ax.imshow(flow_to_rgb(flows[i], peak))
        ax.set_title(f"t+{i + 1}")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _id_colors(ids: np.ndarray) -> dict[int, np.ndarray]:
    cmap = plt.get_cmap("tab20")
    return {
        int(v): np.asarray(cmap(k % 20)[:3])
        for k, v in enumerate(sorted(int(i) for i in ids if i > 0))
    }


def instance_map_to_rgb(id_map: np.ndarray, colors: dict[int, np.ndarray]) -> np.ndarray:
    """Color one (H, W) instance-id map; background white."""
    out = np.ones((*id_map.shape, 3))
    for value, color in colors.items():
        out[id_map == value] = color
    return out


def save_instance_maps(
    id_maps: np.ndarray,
    path: str | Path,
    title: str = "instances",
    reference_ids: np.ndarray | None = None,
) -> None:
    """Render a sequence of instance-id maps (T, H, W), colors stable over time."""
    ids = reference_ids if reference_ids is not None else np.unique(id_maps)
    colors = _id_colors(np.asarray(ids))
    t = id_maps.shape[0]
    fig, axes = plt.subplots(1, t, figsize=(3 * t, 3.4), squeeze=False)
    for i in range(t):
        ax = axes[0, i]
        ax.imshow(instance_map_to_rgb(id_maps[i], colors))
        ax.set_title("now" if i == 0 else f"t+{i}")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_comparison(
    gt_maps: np.ndarray,
    pred_maps: np.ndarray,
    path: str | Path,
) -> None:
    """Two-row figure: ground truth on top, decoded prediction below.

    The two id spaces are unrelated, so each row gets its own colors.
    """
    t = gt_maps.shape[0]
    gt_colors = _id_colors(np.unique(gt_maps))
    pred_colors = _id_colors(np.unique(pred_maps))
    fig, axes = plt.subplots(2, t, figsize=(3 * t, 6.4), squeeze=False)
    for i in range(t):
        axes[0, i].imshow(instance_map_to_rgb(gt_maps[i], gt_colors))
        axes[0, i].set_title("now" if i == 0 else f"t+{i}")
        axes[1, i].imshow(instance_map_to_rgb(pred_maps[i], pred_colors))
        for row in (0, 1):
            axes[row, i].set_xticks([])
            axes[row, i].set_yticks([])
    axes[0, 0].set_ylabel("ground truth")
    axes[1, 0].set_ylabel("prediction")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
