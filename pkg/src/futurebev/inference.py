"""Turning raw network outputs into per-cell instance id maps.

Each query gets an objectness score (its maximum foreground-class
probability).  Score-weighted mask probabilities are compared across
queries per cell: a cell is assigned to the strongest query if that fused
value clears the threshold, with ties resolved to the lower query index.
The winning query's index (offset by one; zero is background) is the
instance id, and because the same query produces the masks of every
frame, ids are temporally consistent by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import Config
from .matching import decode_box_vector
from .model import ModelOutput


@dataclass
class DecodedSample:
    id_maps: np.ndarray       # (t_out + 1, H, W) int32; query index + 1, 0 = background
    scores: np.ndarray        # (M,) float64 per-query objectness
    boxes: list[dict]         # decoded current-frame boxes, one per query


def decode_instances(
    class_logits: torch.Tensor,
    mask_logits: torch.Tensor,
    num_classes: int,
    mask_threshold: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Decode one sample.

    Args:
        class_logits: (M, num_classes + 1) final-layer logits.
        mask_logits: (M, t_out + 1, H, W).
        mask_threshold: cells whose best fused probability is not strictly
            above this stay background.

    Returns:
        (id_maps, scores): (t_out + 1, H, W) int32 and (M,) float64.
    """
    probs = class_logits.detach().softmax(-1).cpu().numpy()
    scores = probs[:, :num_classes].max(axis=-1)  # (M,)
    masks = torch.sigmoid(mask_logits.detach()).cpu().numpy()  # (M, T, H, W)
    fused = scores[:, None, None, None] * masks
    best = np.argmax(fused, axis=0)  # ties -> first (lowest) query index
    value = np.take_along_axis(fused, best[None], axis=0)[0]
    id_maps = np.where(value > mask_threshold, best.astype(np.int32) + 1, 0).astype(np.int32)
    return id_maps, scores.astype(np.float64)


def decode_sample(output: ModelOutput, batch_index: int, cfg: Config) -> DecodedSample:
    """Decode one batch element of a model forward pass."""
    id_maps, scores = decode_instances(
        output.class_logits[-1, batch_index],
        output.mask_logits[batch_index],
        cfg.model.num_classes,
        cfg.infer.mask_threshold,
    )
    grid = cfg.world.grid
    boxes = []
    box_vecs = output.boxes[-1, batch_index].detach().cpu().numpy()
    for m in range(box_vecs.shape[0]):
        box = decode_box_vector(
            box_vecs[m], grid.height, grid.width, grid.resolution, cfg.world.dt
        )
        box["score"] = float(scores[m])
        boxes.append(box)
    return DecodedSample(id_maps=id_maps, scores=scores, boxes=boxes)
