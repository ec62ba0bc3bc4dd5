"""Hungarian matching, matching costs, and the training loss.

Each ground-truth instance is assigned to exactly one query by a single
Hungarian matching whose cost combines a detection part (focal-style
classification cost plus L1 box cost on the current frame) and a
segmentation part (Dice cost summed over the current and all future
frames).  The same assignment is then reused for every frame and every
supervised decoder layer, which is what ties one query to one object over
the whole prediction horizon.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import Config
from .dataset import Sample
from .decoder import (
    BOX_COS_YAW,
    BOX_CX,
    BOX_CY,
    BOX_DIM,
    BOX_LOG_L,
    BOX_LOG_W,
    BOX_SIN_YAW,
    BOX_VX,
    BOX_VY,
    BOX_Z,
)
from .world import STATE_SPEED, STATE_X, STATE_Y, STATE_YAW


def hungarian(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost one-to-one assignment for a rectangular cost matrix.

    Implements the shortest-augmenting-path algorithm with dual variables
    (the classic O(n^3) Jonker-Volgenant scheme), assigning every row when
    rows <= cols and every column otherwise.  Returns (row_ind, col_ind)
    sorted by row index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    if cost.shape[0] == 0 or cost.shape[1] == 0:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
    transposed = cost.shape[1] < cost.shape[0]
    if transposed:
        cost = cost.T
    nr, nc = cost.shape

    u = np.zeros(nr)                      # row duals
    v = np.zeros(nc)                      # column duals
    col4row = np.full(nr, -1, dtype=np.intp)
    row4col = np.full(nc, -1, dtype=np.intp)

    for cur_row in range(nr):
        # Dijkstra-style search for the cheapest augmenting path that
        # starts at the unassigned row ``cur_row``.
        shortest = np.full(nc, np.inf)
        predecessor = np.full(nc, -1, dtype=np.intp)
        scanned_rows = np.zeros(nr, dtype=bool)
        scanned_cols = np.zeros(nc, dtype=bool)
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            scanned_rows[i] = True
            reduced = min_val + cost[i] - u[i] - v
            better = ~scanned_cols & (reduced < shortest)
            shortest[better] = reduced[better]
            predecessor[better] = i
            masked = np.where(scanned_cols, np.inf, shortest)
            j = int(np.argmin(masked))
            min_val = masked[j]
            scanned_cols[j] = True
            if row4col[j] == -1:
                sink = j
            else:
                i = row4col[j]
        # Dual updates keep reduced costs non-negative for future searches.
        u[cur_row] += min_val
        rows_hit = scanned_rows.copy()
        rows_hit[cur_row] = False
        for r in np.nonzero(rows_hit)[0]:
            u[r] += min_val - shortest[col4row[r]]
        for j in np.nonzero(scanned_cols)[0]:
            v[j] -= min_val - shortest[j]
        # Flip assignments along the augmenting path back to cur_row.
        j = sink
        while True:
            i = predecessor[j]
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur_row:
                break

    rows = np.arange(nr, dtype=np.intp)
    cols = col4row
    if transposed:
        rows, cols = cols, rows
        order = np.argsort(rows)
        rows, cols = rows[order], cols[order]
    return rows, cols


def encode_box_targets(sample: Sample, agent_indices: np.ndarray, grid_height: int,
                       grid_width: int, resolution: float, dt: float) -> np.ndarray:
    """Encode ground-truth boxes into the 9-value regression layout.

    Centers are normalized to [0, 1] over the grid extent; sizes are log
    of extent normalized by the grid width; yaw enters as (sin, cos);
    velocity is grid-widths per frame.  The height slot stays zero in this
    flat world.
    """
    extent_x = grid_width * resolution
    extent_y = grid_height * resolution
    out = np.zeros((len(agent_indices), BOX_DIM), dtype=np.float64)
    for row, idx in enumerate(agent_indices):
        st = sample.agent_states[idx]
        length, width = sample.agent_dims[idx]
        out[row, BOX_CX] = st[STATE_X] / extent_x + 0.5
        out[row, BOX_CY] = st[STATE_Y] / extent_y + 0.5
        out[row, BOX_Z] = 0.0
        out[row, BOX_LOG_L] = np.log(length / extent_x)
        out[row, BOX_LOG_W] = np.log(width / extent_x)
        out[row, BOX_SIN_YAW] = np.sin(st[STATE_YAW])
        out[row, BOX_COS_YAW] = np.cos(st[STATE_YAW])
        vx = st[STATE_SPEED] * np.cos(st[STATE_YAW])
        vy = st[STATE_SPEED] * np.sin(st[STATE_YAW])
        out[row, BOX_VX] = vx * dt / extent_x
        out[row, BOX_VY] = vy * dt / extent_x
    return out


def decode_box_vector(vec: np.ndarray, grid_height: int, grid_width: int,
                      resolution: float, dt: float) -> dict[str, float]:
    """Invert :func:`encode_box_targets` for one 9-vector.

    Returns center/size in meters, yaw in radians and velocity in m/s.
    """
    extent_x = grid_width * resolution
    extent_y = grid_height * resolution
    yaw = float(np.arctan2(vec[BOX_SIN_YAW], vec[BOX_COS_YAW]))
    return {
        "x": float((vec[BOX_CX] - 0.5) * extent_x),
        "y": float((vec[BOX_CY] - 0.5) * extent_y),
        "length": float(np.exp(vec[BOX_LOG_L]) * extent_x),
        "width": float(np.exp(vec[BOX_LOG_W]) * extent_x),
        "yaw": yaw,
        "vx": float(vec[BOX_VX] * extent_x / dt),
        "vy": float(vec[BOX_VY] * extent_x / dt),
    }


@dataclass
class MatchTargets:
    """Per-sample ground truth in tensor form."""

    labels: torch.Tensor      # (N,) int64 class ids (all zero: single class)
    boxes: torch.Tensor       # (N, 9) float32 encoded boxes
    masks: torch.Tensor       # (N, t_out + 1, H, W) float32 {0, 1}
    flow: torch.Tensor        # (t_out, 2, H, W) float32
    flow_valid: torch.Tensor  # (t_out, H, W) float32 {0, 1}
    agent_ids: torch.Tensor   # (N,) int64, world-level instance ids

    @property
    def num_instances(self) -> int:
        return int(self.labels.shape[0])


def build_targets(sample: Sample, cfg: Config) -> MatchTargets:
    """Turn one dataset sample into matching/loss targets.

    Ground-truth instances are the agents visible at the current frame;
    their masks cover the current and all future frames (possibly empty in
    later frames once an agent leaves the grid).
    """
    grid = cfg.world.grid
    present = sample.present_agent_indices()
    ids_seq = sample.target_instance_ids()  # (t_out + 1, H, W)
    masks = np.stack(
        [
            (ids_seq == int(sample.agent_ids[idx])).astype(np.float32)
            for idx in present
        ],
        axis=0,
    ) if len(present) else np.zeros((0, *ids_seq.shape), dtype=np.float32)
    boxes = encode_box_targets(
        sample, present, grid.height, grid.width, grid.resolution, cfg.world.dt
    )
    return MatchTargets(
        labels=torch.zeros(len(present), dtype=torch.int64),
        boxes=torch.from_numpy(boxes).float(),
        masks=torch.from_numpy(masks),
        flow=torch.from_numpy(np.ascontiguousarray(sample.flow)).float(),
        flow_valid=torch.from_numpy(sample.flow_valid.astype(np.float32)),
        agent_ids=torch.from_numpy(
            sample.agent_ids[present].astype(np.int64) if len(present) else np.zeros(0, np.int64)
        ),
    )


def focal_class_cost(probs: torch.Tensor, labels: torch.Tensor, alpha: float,
                     gamma: float) -> torch.Tensor:
    """(M, num_gt) focal-weighted cost of predicting each gt class.

    Cost of pairing query q with gt g is alpha * (1 - p)^gamma * (-log p)
    with p the query's probability for g's class.
    """
    p = probs[:, labels].clamp_min(1e-8)  # (M, num_gt)
    return alpha * (1.0 - p).pow(gamma) * (-p.log())


def dice_cost_matrix(mask_logits: torch.Tensor, gt_masks: torch.Tensor,
                     eps: float) -> torch.Tensor:
    """(M, N) Dice cost between every query mask and every gt mask.

    ``mask_logits`` is (M, T, H, W); ``gt_masks`` is (N, T, H, W); the cost
    is the Dice loss summed over the T frames.
    """
    m = mask_logits.shape[0]
    n = gt_masks.shape[0]
    t = mask_logits.shape[1]
    probs = mask_logits.sigmoid().reshape(m, t, -1)
    gts = gt_masks.reshape(n, t, -1)
    inter = torch.einsum("mtc,ntc->mnt", probs, gts)
    totals = probs.sum(-1)[:, None, :] + gts.sum(-1)[None, :, :]
    dice = 1.0 - (2.0 * inter + eps) / (totals + eps)
    return dice.sum(-1)


def dice_loss(probs: torch.Tensor, gts: torch.Tensor, eps: float) -> torch.Tensor:
    """Dice loss per (pair, frame): inputs (P, T, H, W) -> (P, T)."""
    p = probs.flatten(2)
    g = gts.flatten(2)
    inter = (p * g).sum(-1)
    return 1.0 - (2.0 * inter + eps) / (p.sum(-1) + g.sum(-1) + eps)


@torch.no_grad()
def match_instances(
    class_logits: torch.Tensor,
    boxes: torch.Tensor,
    mask_logits: torch.Tensor,
    targets: MatchTargets,
    cfg: Config,
) -> tuple[np.ndarray, np.ndarray]:
    """Assign ground-truth instances to queries for one sample.

    Args:
        class_logits: (M, num_classes + 1) final-layer logits.
        boxes: (M, 9) final-layer box predictions.
        mask_logits: (M, t_out + 1, H, W).
        targets: ground truth for the sample.

    Returns:
        (gt_indices, query_indices) arrays of equal length.
    """
    n = targets.num_instances
    if n == 0:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
    lc = cfg.loss
    probs = class_logits.softmax(-1)
    cost = lc.weight_class * focal_class_cost(
        probs, targets.labels, lc.focal_alpha, lc.focal_gamma
    )
    if cfg.model.use_box_head:
        cost = cost + lc.weight_box * torch.cdist(boxes, targets.boxes, p=1)
    if lc.mask_match_frames != "none":
        if lc.mask_match_frames == "current":
            ml = mask_logits[:, :1]
            gm = targets.masks[:, :1]
        else:
            ml = mask_logits
            gm = targets.masks
        cost = cost + lc.weight_dice * dice_cost_matrix(ml, gm, lc.dice_eps)
    gt_idx, query_idx = hungarian(cost.T.cpu().numpy())
    return gt_idx, query_idx


def focal_classification_loss(
    class_logits: torch.Tensor,
    matched_queries: np.ndarray,
    matched_labels: torch.Tensor,
    alpha: float,
    gamma: float,
    background_index: int,
) -> torch.Tensor:
    """Softmax focal loss over all queries of one sample.

    Matched queries take their ground-truth class, everyone else the
    background class; foreground terms are weighted by alpha, background
    by (1 - alpha).  Returns the sum over queries.
    """
    m = class_logits.shape[0]
    target = torch.full((m,), background_index, dtype=torch.int64,
                        device=class_logits.device)
    if len(matched_queries):
        target[torch.from_numpy(np.asarray(matched_queries))] = matched_labels
    logp = F.log_softmax(class_logits, dim=-1)
    pt = logp.gather(1, target[:, None]).squeeze(1).exp()
    weight = torch.where(
        target == background_index,
        torch.full_like(pt, 1.0 - alpha),
        torch.full_like(pt, alpha),
    )
    loss = -weight * (1.0 - pt).pow(gamma) * pt.clamp_min(1e-8).log()
    return loss.sum()


def compute_loss(
    output,
    targets: list[MatchTargets],
    cfg: Config,
) -> tuple[torch.Tensor, dict[str, float], list[tuple[np.ndarray, np.ndarray]]]:
    """Full training loss for a batch.

    ``output`` is a :class:`futurebev.model.ModelOutput`.  Matching runs
    once per sample on the final decoder layer; with aux supervision the
    same assignment also trains every intermediate layer's class/box
    heads.  Returns (total, per-term breakdown averaged over the batch,
    per-sample assignments).
    """
    lc = cfg.loss
    num_layers = output.class_logits.shape[0]
    layer_range = range(num_layers) if lc.aux_supervision else [num_layers - 1]
    device = output.class_logits.device
    background = cfg.model.num_classes

    total_cls = torch.zeros((), device=device)
    total_box = torch.zeros((), device=device)
    total_dice = torch.zeros((), device=device)
    total_mask_l1 = torch.zeros((), device=device)
    total_flow = torch.zeros((), device=device)
    assignments = []
    batch = len(targets)
    num_matched_total = 0

    for b, tgt in enumerate(targets):
        gt_idx, query_idx = match_instances(
            output.class_logits[-1, b], output.boxes[-1, b],
            output.mask_logits[b], tgt, cfg,
        )
        assignments.append((gt_idx, query_idx))
        num_matched = len(gt_idx)
        num_matched_total += num_matched
        denom = max(num_matched, 1)
        matched_labels = tgt.labels[torch.from_numpy(np.asarray(gt_idx))] if num_matched else tgt.labels[:0]

        for layer in layer_range:
            total_cls = total_cls + focal_classification_loss(
                output.class_logits[layer, b], query_idx, matched_labels,
                lc.focal_alpha, lc.focal_gamma, background,
            ) / denom
            if cfg.model.use_box_head and num_matched:
                pred_boxes = output.boxes[layer, b][torch.from_numpy(np.asarray(query_idx))]
                gt_boxes = tgt.boxes[torch.from_numpy(np.asarray(gt_idx))]
                total_box = total_box + F.l1_loss(
                    pred_boxes, gt_boxes, reduction="sum"
                ) / denom

        if num_matched:
            pred_masks = output.mask_logits[b][torch.from_numpy(np.asarray(query_idx))]
            gt_masks = tgt.masks[torch.from_numpy(np.asarray(gt_idx))]
            probs = pred_masks.sigmoid()
            dice = dice_loss(probs, gt_masks, lc.dice_eps)  # (num_matched, T+1)
            total_dice = total_dice + dice.sum() / denom
            total_mask_l1 = total_mask_l1 + (probs - gt_masks).abs().mean(dim=(2, 3)).sum() / denom

        if output.flows is not None:
            valid = tgt.flow_valid[:, None]  # (t_out, 1, H, W)
            diff = F.smooth_l1_loss(
                output.flows[b], tgt.flow, beta=lc.smooth_l1_beta, reduction="none"
            )
            denom_cells = valid.sum().clamp_min(1.0) * 2.0
            total_flow = total_flow + (diff * valid).sum() / denom_cells

    scale = 1.0 / max(batch, 1)
    breakdown_t = {
        "class": total_cls * scale,
        "box": total_box * scale,
        "dice": total_dice * scale,
        "mask_l1": total_mask_l1 * scale,
        "flow": total_flow * scale,
    }
    total = (
        lc.weight_class * breakdown_t["class"]
        + lc.weight_box * breakdown_t["box"]
        + lc.weight_dice * breakdown_t["dice"]
        + lc.weight_mask_l1 * breakdown_t["mask_l1"]
        + lc.weight_flow * breakdown_t["flow"]
    )
    breakdown = {k: float(v.detach()) for k, v in breakdown_t.items()}
    breakdown["total"] = float(total.detach())
    breakdown["num_matched"] = float(num_matched_total)
    return total, breakdown, assignments
