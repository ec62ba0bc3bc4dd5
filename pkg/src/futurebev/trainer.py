"""Training and evaluation loops.

Training is deterministic end to end: weights are initialized from the
configured seed, batch order is derived from (seed, epoch), and
checkpoints capture model, optimizer, scheduler and RNG state so that an
interrupted run resumed from its last checkpoint reproduces the
uninterrupted run bit for bit.
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np
import torch
import yaml

from . import dataset as ds
from .config import Config, config_from_dict, config_hash, config_to_dict
from .container import load_arrays, save_arrays
from .errors import DataError, TrainingDivergedError
from .inference import decode_sample
from .matching import MatchTargets, build_targets, compute_loss
from .metrics import (
    ForegroundIouAccumulator,
    ROI_HALF_EXTENTS,
    VideoPanopticAccumulator,
    box_average_precision,
    crop_roi,
    targets_to_id_maps,
)
from .model import FutureBevModel, build_model
from .world import STATE_SPEED, STATE_X, STATE_Y, STATE_YAW

CHECKPOINT_LAST = "checkpoint_last.npz"
CHECKPOINT_BEST = "checkpoint_best.npz"
CHECKPOINT_DIVERGED = "checkpoint_diverged.npz"


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(
    path: str | Path,
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer,
    scheduler,
    cfg: Config,
    epoch: int,
    best_metric: float,
) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        arrays[f"model/{name}"] = tensor.detach().cpu().numpy()
    optim_sd = optimizer.state_dict()
    for pid, state in optim_sd["state"].items():
        for key, value in state.items():
            arrays[f"optim/{pid}/{key}"] = (
                value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
            )
    meta = {
        "config": config_to_dict(cfg),
        "epoch": epoch,
        "best_metric": float(best_metric),
        "param_groups": [
            {k: list(v) if isinstance(v, tuple) else v
             for k, v in group.items() if k != "params"}
            for group in optim_sd["param_groups"]
        ],
        "param_group_sizes": [len(g["params"]) for g in optim_sd["param_groups"]],
        "scheduler": dict(scheduler.state_dict()),
    }
    arrays["meta/yaml"] = np.frombuffer(
        yaml.safe_dump(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    ).copy()
    arrays["meta/torch_rng"] = torch.get_rng_state().numpy()
    save_arrays(path, arrays)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns (meta dict, raw arrays)."""
    arrays = load_arrays(path)
    if "meta/yaml" not in arrays:
        raise DataError(f"checkpoint {path} has no metadata entry")
    meta = yaml.safe_load(arrays["meta/yaml"].tobytes().decode("utf-8"))
    return meta, arrays


def model_from_checkpoint(path: str | Path) -> tuple[FutureBevModel, Config, dict]:
    meta, arrays = load_checkpoint(path)
    cfg = config_from_dict(meta["config"])
    model = build_model(cfg)
    state = {
        name[len("model/"):]: torch.from_numpy(arr.copy())
        for name, arr in arrays.items()
        if name.startswith("model/")
    }
    model.load_state_dict(state)
    return model, cfg, meta


def _restore_optimizer(optimizer, meta, arrays) -> None:
    state: dict[int, dict] = {}
    for name, arr in arrays.items():
        if not name.startswith("optim/"):
            continue
        _, pid, key = name.split("/", 2)
        state.setdefault(int(pid), {})[key] = torch.from_numpy(arr.copy())
    groups = []
    start = 0
    for group_meta, size in zip(meta["param_groups"], meta["param_group_sizes"]):
        group = dict(group_meta)
        group["params"] = list(range(start, start + size))
        groups.append(group)
        start += size
    optimizer.load_state_dict({"state": state, "param_groups": groups})


# ---------------------------------------------------------------------------
# Data plumbing


def load_training_set(cfg: Config, root: str | Path) -> list[tuple[torch.Tensor, MatchTargets]]:
    items = []
    for path in ds.split_paths(root, "train"):
        sample = ds.load_sample(path)
        rasters = torch.from_numpy(sample.input_rasters())
        items.append((rasters, build_targets(sample, cfg)))
    return items


def batch_order(seed: int, epoch: int, count: int, batch_size: int) -> list[list[int]]:
    perm = np.random.default_rng([seed, epoch]).permutation(count)
    return [perm[i:i + batch_size].tolist() for i in range(0, count, batch_size)]


# ---------------------------------------------------------------------------
# Evaluation


def evaluate_model(
    model: torch.nn.Module,
    cfg: Config,
    sample_paths: list[Path],
    max_scenarios: int = 0,
) -> dict:
    """Run the model over held-out scenarios and compute all metrics."""
    model.eval()
    grid = cfg.world.grid
    t_frames = cfg.world.t_out + 1
    iou_acc = {roi: ForegroundIouAccumulator() for roi in ROI_HALF_EXTENTS}
    vpq_acc = {roi: VideoPanopticAccumulator(t_frames) for roi in ROI_HALF_EXTENTS}
    box_preds: list[dict] = []
    box_gts: list[list[dict]] = []
    if max_scenarios:
        sample_paths = sample_paths[:max_scenarios]
    with torch.no_grad():
        for sample_index, path in enumerate(sample_paths):
            sample = ds.load_sample(path)
            targets = build_targets(sample, cfg)
            rasters = torch.from_numpy(sample.input_rasters()).unsqueeze(0)
            output = model(rasters)
            decoded = decode_sample(output, 0, cfg)
            gt_maps = targets_to_id_maps(
                targets.masks.numpy(), targets.agent_ids.numpy()
            )
            for roi, extent in ROI_HALF_EXTENTS.items():
                pred_crop = crop_roi(decoded.id_maps, grid, extent)
                gt_crop = crop_roi(gt_maps, grid, extent)
                iou_acc[roi].add_sequence(pred_crop, gt_crop)
                vpq_acc[roi].add_sequence(pred_crop, gt_crop)
            # Box diagnostics on the current frame, with a fixed score cut
            # to keep the AP sweep small.
            gts = []
            for i in range(targets.num_instances):
                idx = int(sample.present_agent_indices()[i])
                st = sample.agent_states[idx]
                gts.append({
                    "x": float(st[STATE_X]), "y": float(st[STATE_Y]),
                    "length": float(sample.agent_dims[idx][0]),
                    "width": float(sample.agent_dims[idx][1]),
                    "yaw": float(st[STATE_YAW]),
                    "vx": float(st[STATE_SPEED] * np.cos(st[STATE_YAW])),
                    "vy": float(st[STATE_SPEED] * np.sin(st[STATE_YAW])),
                })
            box_gts.append(gts)
            for box in decoded.boxes:
                if box["score"] > 0.05:
                    entry = dict(box)
                    entry["sample"] = sample_index
                    box_preds.append(entry)
    ap, vel_err = box_average_precision(box_preds, box_gts)
    report = {
        "num_scenarios": len(sample_paths),
        "iou": {roi: round(acc.iou(), 6) for roi, acc in iou_acc.items()},
        "vpq": {roi: round(acc.vpq(), 6) for roi, acc in vpq_acc.items()},
        "vpq_per_frame": {
            roi: [round(v, 6) for v in acc.frame_scores().tolist()]
            for roi, acc in vpq_acc.items()
        },
        "id_consistency": {
            roi: round(acc.id_consistency(), 6) for roi, acc in vpq_acc.items()
        },
        "box_ap": round(ap, 6),
        "velocity_error": None if np.isnan(vel_err) else round(vel_err, 6),
    }
    model.train()
    return report


def baseline_metrics(cfg: Config, sample_paths: list[Path], max_scenarios: int = 0) -> dict:
    """Copy-current-frame baseline: persist the current ground-truth
    segmentation unchanged through every future frame."""
    grid = cfg.world.grid
    t_frames = cfg.world.t_out + 1
    iou_acc = {roi: ForegroundIouAccumulator() for roi in ROI_HALF_EXTENTS}
    vpq_acc = {roi: VideoPanopticAccumulator(t_frames) for roi in ROI_HALF_EXTENTS}
    if max_scenarios:
        sample_paths = sample_paths[:max_scenarios]
    for path in sample_paths:
        sample = ds.load_sample(path)
        targets = build_targets(sample, cfg)
        gt_maps = targets_to_id_maps(targets.masks.numpy(), targets.agent_ids.numpy())
        pred = np.repeat(gt_maps[:1], t_frames, axis=0)
        for roi, extent in ROI_HALF_EXTENTS.items():
            iou_acc[roi].add_sequence(
                crop_roi(pred, grid, extent), crop_roi(gt_maps, grid, extent)
            )
            vpq_acc[roi].add_sequence(
                crop_roi(pred, grid, extent), crop_roi(gt_maps, grid, extent)
            )
    return {
        "num_scenarios": len(sample_paths),
        "iou": {roi: round(acc.iou(), 6) for roi, acc in iou_acc.items()},
        "vpq": {roi: round(acc.vpq(), 6) for roi, acc in vpq_acc.items()},
        "id_consistency": {
            roi: round(acc.id_consistency(), 6) for roi, acc in vpq_acc.items()
        },
    }


# ---------------------------------------------------------------------------
# Training


def train(
    cfg: Config,
    data_root: str | Path,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
    stop_after: int | None = None,
    log=print,
) -> dict:
    """Train a model; returns a summary dict with final metrics.

    Writes ``config.yaml``, ``checkpoint_last.npz``, ``checkpoint_best.npz``
    (best far-ROI VPQ seen at a periodic evaluation), ``train_log.yaml``
    and ``metrics.yaml`` into ``out_dir``.

    ``stop_after`` interrupts the run once that many epochs have completed
    (counting from zero, not from a resume point); the run can then be
    continued with ``resume_from`` and must reproduce an uninterrupted run
    exactly.
    """
    torch.set_num_threads(max(torch.get_num_threads(), 1))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = ds.load_manifest(data_root)
    ds.check_dataset_compatible(cfg, manifest)

    torch.manual_seed(cfg.train.seed)
    model = build_model(cfg)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.train.lr, weight_decay=cfg.train.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=max(cfg.train.epochs, 1)
    )
    start_epoch = 0
    best_metric = float("-inf")
    if resume_from is not None:
        meta, arrays = load_checkpoint(resume_from)
        resumed_cfg = config_from_dict(meta["config"])
        if config_hash(resumed_cfg) != config_hash(cfg):
            raise DataError("checkpoint config does not match the requested config")
        state = {
            name[len("model/"):]: torch.from_numpy(arr.copy())
            for name, arr in arrays.items()
            if name.startswith("model/")
        }
        model.load_state_dict(state)
        _restore_optimizer(optimizer, meta, arrays)
        scheduler.load_state_dict(meta["scheduler"])
        torch.set_rng_state(torch.from_numpy(arrays["meta/torch_rng"].copy()))
        start_epoch = int(meta["epoch"]) + 1
        best_metric = float(meta["best_metric"])

    with open(out_dir / "config.yaml", "w") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=True)

    training_set = load_training_set(cfg, data_root)
    eval_paths = ds.split_paths(data_root, "eval")
    history: list[dict] = []
    start_time = time.time()

    for epoch in range(start_epoch, cfg.train.epochs):
        epoch_losses: dict[str, float] = {}
        num_batches = 0
        for batch_idx in batch_order(
            cfg.train.seed, epoch, len(training_set), cfg.train.batch_size
        ):
            rasters = torch.stack([training_set[i][0] for i in batch_idx])
            targets = [training_set[i][1] for i in batch_idx]
            def diverged(detail: str):
                save_checkpoint(
                    out_dir / CHECKPOINT_DIVERGED, model, optimizer, scheduler,
                    cfg, epoch, best_metric,
                )
                return TrainingDivergedError(
                    f"{detail} at epoch {epoch}; state dumped to "
                    f"{out_dir / CHECKPOINT_DIVERGED}"
                )

            output = model(rasters)
            if not torch.isfinite(output.class_logits).all():
                raise diverged("non-finite network output")
            loss, breakdown, _ = compute_loss(output, targets, cfg)
            if not torch.isfinite(loss):
                raise diverged(f"non-finite loss (breakdown: {breakdown})")
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.train.grad_clip)
            optimizer.step()
            for key, value in breakdown.items():
                epoch_losses[key] = epoch_losses.get(key, 0.0) + value
            num_batches += 1
        scheduler.step()
        mean_losses = {k: round(v / max(num_batches, 1), 6) for k, v in epoch_losses.items()}
        entry = {"epoch": epoch, "losses": mean_losses,
                 "lr": round(scheduler.get_last_lr()[0], 8),
                 "seconds": round(time.time() - start_time, 1)}

        do_eval = (
            cfg.train.eval_interval > 0
            and (epoch + 1) % cfg.train.eval_interval == 0
        ) or epoch == cfg.train.epochs - 1
        if do_eval:
            report = evaluate_model(
                model, cfg, eval_paths, cfg.train.num_eval_scenarios
            )
            entry["eval"] = {"iou": report["iou"], "vpq": report["vpq"]}
            metric = report["vpq"]["far"]
            if metric > best_metric:
                best_metric = metric
                save_checkpoint(
                    out_dir / CHECKPOINT_BEST, model, optimizer, scheduler,
                    cfg, epoch, best_metric,
                )
        history.append(entry)
        log(f"epoch {epoch}: loss={mean_losses.get('total')} "
            + (f"vpq_far={entry['eval']['vpq']['far']}" if "eval" in entry else ""))
        save_checkpoint(
            out_dir / CHECKPOINT_LAST, model, optimizer, scheduler, cfg, epoch, best_metric
        )
        with open(out_dir / "train_log.yaml", "w") as f:
            yaml.safe_dump(history, f, sort_keys=True)
        if stop_after is not None and epoch + 1 >= stop_after:
            return {"interrupted_at": epoch, "epochs": cfg.train.epochs}

    final_report = evaluate_model(model, cfg, eval_paths)
    base_report = baseline_metrics(cfg, eval_paths)
    summary = {
        "final": final_report,
        "baseline": base_report,
        "best_vpq_far": round(best_metric, 6) if best_metric > float("-inf") else None,
        "epochs": cfg.train.epochs,
        "seconds": round(time.time() - start_time, 1),
    }
    with open(out_dir / "metrics.yaml", "w") as f:
        yaml.safe_dump(summary, f, sort_keys=True)
    return summary
