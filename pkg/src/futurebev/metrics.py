"""Evaluation metrics: foreground IoU, video panoptic quality, box quality.

All raster metrics are computed inside a square region of interest around
the ego vehicle ("near" = 30 m x 30 m, "far" = 100 m x 100 m, clamped to
the grid, so on small grids "far" degenerates to the whole map).  The
panoptic metric matches predicted to ground-truth segments per frame by
strict mask IoU > 0.5 and additionally demands temporally consistent ids:
once a ground-truth instance has been associated with a predicted id, any
later match to a different id is counted as both a false positive and a
false negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import GridConfig

# Region-of-interest half extents (meters); None means the full grid.
ROI_HALF_EXTENTS: dict[str, float] = {"near": 15.0, "far": 50.0}

_PAIR_OFFSET = 1 << 20  # combines (gt, pred) ids into one integer label


def roi_bounds(grid: GridConfig, half_extent_m: float | None) -> tuple[slice, slice]:
    """Row/column slices of cells whose centers lie inside the ROI square."""
    if half_extent_m is None:
        return slice(0, grid.height), slice(0, grid.width)
    half_rows = int(np.floor(half_extent_m / grid.resolution + 0.5))
    half_cols = half_rows
    r0 = max(grid.height // 2 - half_rows, 0)
    r1 = min(grid.height // 2 + half_rows, grid.height)
    c0 = max(grid.width // 2 - half_cols, 0)
    c1 = min(grid.width // 2 + half_cols, grid.width)
    return slice(r0, r1), slice(c0, c1)


def crop_roi(seq: np.ndarray, grid: GridConfig, half_extent_m: float | None) -> np.ndarray:
    """Crop a (..., H, W) array to the ROI."""
    rows, cols = roi_bounds(grid, half_extent_m)
    return seq[..., rows, cols]


@dataclass
class ForegroundIouAccumulator:
    """Aggregated binary IoU over every frame of every sequence added."""

    intersection: int = 0
    union: int = 0

    def add_sequence(self, pred_ids: np.ndarray, gt_ids: np.ndarray) -> None:
        pred_fg = pred_ids > 0
        gt_fg = gt_ids > 0
        self.intersection += int(np.count_nonzero(pred_fg & gt_fg))
        self.union += int(np.count_nonzero(pred_fg | gt_fg))

    def iou(self) -> float:
        return self.intersection / self.union if self.union else 0.0


def frame_segment_matches(pred: np.ndarray, gt: np.ndarray) -> tuple[dict, list, list]:
    """Match segments of one frame by IoU > 0.5.

    Returns (matches, gt_ids, pred_ids) where ``matches`` maps
    gt_id -> (pred_id, iou).  Because segments are disjoint, IoU > 0.5
    pairs are automatically one-to-one.
    """
    gt_areas = {int(v): int(c) for v, c in zip(*np.unique(gt[gt > 0], return_counts=True))}
    pred_areas = {int(v): int(c) for v, c in zip(*np.unique(pred[pred > 0], return_counts=True))}
    both = (gt > 0) & (pred > 0)
    combo = gt[both].astype(np.int64) * _PAIR_OFFSET + pred[both].astype(np.int64)
    matches: dict[int, tuple[int, float]] = {}
    for value, count in zip(*np.unique(combo, return_counts=True)):
        g = int(value // _PAIR_OFFSET)
        p = int(value % _PAIR_OFFSET)
        union = gt_areas[g] + pred_areas[p] - int(count)
        iou = int(count) / union
        if iou > 0.5:
            matches[g] = (p, iou)
    return matches, sorted(gt_areas), sorted(pred_areas)


@dataclass
class VideoPanopticAccumulator:
    """Per-frame panoptic statistics with cross-frame id consistency."""

    num_frames: int
    tp: np.ndarray = field(init=False)
    fp: np.ndarray = field(init=False)
    fn: np.ndarray = field(init=False)
    iou_sum: np.ndarray = field(init=False)
    consistent_tracks: int = 0   # gt instances whose matches never switched id
    tracked_instances: int = 0   # gt instances matched in at least one frame

    def __post_init__(self):
        self.tp = np.zeros(self.num_frames, dtype=np.int64)
        self.fp = np.zeros(self.num_frames, dtype=np.int64)
        self.fn = np.zeros(self.num_frames, dtype=np.int64)
        self.iou_sum = np.zeros(self.num_frames, dtype=np.float64)

    def add_sequence(self, pred_ids: np.ndarray, gt_ids: np.ndarray) -> None:
        """Add one (num_frames, H, W) prediction/ground-truth pair."""
        if pred_ids.shape != gt_ids.shape or pred_ids.shape[0] != self.num_frames:
            raise ValueError(
                f"expected two ({self.num_frames}, H, W) sequences, got "
                f"{pred_ids.shape} vs {gt_ids.shape}"
            )
        gt_partner: dict[int, int] = {}
        pred_partner: dict[int, int] = {}
        switched: set[int] = set()
        seen_gt: set[int] = set()
        for t in range(self.num_frames):
            matches, gt_present, pred_present = frame_segment_matches(
                pred_ids[t], gt_ids[t]
            )
            tp_t = 0
            for g, (p, iou) in matches.items():
                seen_gt.add(g)
                expected_p = gt_partner.get(g)
                expected_g = pred_partner.get(p)
                ok = (expected_p is None or expected_p == p) and (
                    expected_g is None or expected_g == g
                )
                if ok:
                    gt_partner.setdefault(g, p)
                    pred_partner.setdefault(p, g)
                    tp_t += 1
                    self.iou_sum[t] += iou
                else:
                    switched.add(g)
            self.tp[t] += tp_t
            self.fn[t] += len(gt_present) - tp_t
            self.fp[t] += len(pred_present) - tp_t
        self.tracked_instances += len(seen_gt)
        self.consistent_tracks += len(seen_gt - switched)

    def frame_scores(self) -> np.ndarray:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        out = np.zeros(self.num_frames)
        nz = denom > 0
        out[nz] = self.iou_sum[nz] / denom[nz]
        return out

    def vpq(self) -> float:
        """Mean of the per-frame panoptic scores."""
        return float(self.frame_scores().mean()) if self.num_frames else 0.0

    def id_consistency(self) -> float:
        """Fraction of matched gt instances that never switched predicted id."""
        if self.tracked_instances == 0:
            return 0.0
        return self.consistent_tracks / self.tracked_instances


def targets_to_id_maps(masks: np.ndarray, agent_ids: np.ndarray) -> np.ndarray:
    """Compose per-instance masks (N, T, H, W) into id maps (T, H, W)."""
    n, t, h, w = masks.shape
    out = np.zeros((t, h, w), dtype=np.int32)
    for i in range(n):
        out[masks[i] > 0.5] = int(agent_ids[i])
    return out


# ---------------------------------------------------------------------------
# Box-level diagnostics (current frame only).


def rotated_rectangle(x: float, y: float, length: float, width: float, yaw: float):
    """Shapely polygon of an oriented rectangle."""
    from shapely.geometry import Polygon

    c, s = np.cos(yaw), np.sin(yaw)
    pts = []
    for du, dv in ((length / 2, width / 2), (length / 2, -width / 2),
                   (-length / 2, -width / 2), (-length / 2, width / 2)):
        pts.append((x + c * du - s * dv, y + s * du + c * dv))
    return Polygon(pts)


def rotated_iou(a: dict, b: dict) -> float:
    pa = rotated_rectangle(a["x"], a["y"], a["length"], a["width"], a["yaw"])
    pb = rotated_rectangle(b["x"], b["y"], b["length"], b["width"], b["yaw"])
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    return inter / union if union > 0 else 0.0


def box_average_precision(
    predictions: list[dict],
    ground_truths: list[list[dict]],
    iou_threshold: float = 0.5,
) -> tuple[float, float]:
    """Average precision and mean velocity error for decoded boxes.

    ``predictions`` holds dicts with keys of :func:`decode_box_vector`
    plus ``score`` and ``sample`` (index into ``ground_truths``).  AP is
    area under the precision-recall curve with greedy score-ordered
    matching; velocity error is the mean L2 error over true positives.
    """
    total_gt = sum(len(g) for g in ground_truths)
    if total_gt == 0:
        return 0.0, float("nan")
    order = sorted(range(len(predictions)), key=lambda i: -predictions[i]["score"])
    used: list[set[int]] = [set() for _ in ground_truths]
    tps = np.zeros(len(order))
    vel_errors = []
    for rank, idx in enumerate(order):
        pred = predictions[idx]
        gts = ground_truths[pred["sample"]]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if j in used[pred["sample"]]:
                continue
            iou = rotated_iou(pred, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_iou >= iou_threshold:
            used[pred["sample"]].add(best_j)
            tps[rank] = 1.0
            gt = gts[best_j]
            vel_errors.append(
                float(np.hypot(pred["vx"] - gt["vx"], pred["vy"] - gt["vy"]))
            )
    cum_tp = np.cumsum(tps)
    recall = cum_tp / total_gt
    precision = cum_tp / (np.arange(len(order)) + 1)
    # Area under the (monotonically smoothed) precision-recall curve.
    ap = 0.0
    prev_r = 0.0
    for i in range(len(order)):
        if tps[i]:
            ap += (recall[i] - prev_r) * precision[i]
            prev_r = recall[i]
    vel = float(np.mean(vel_errors)) if vel_errors else float("nan")
    return float(ap), vel
