"""Command line entry points.

Subcommands: gen-data, train, eval, infer, plot, ablate.  Every command
accepts ``--preset`` or ``--config FILE`` plus repeated ``--set key=value``
overrides, prints the resolved configuration it runs with, and keeps all
outputs inside its ``--out`` directory.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (diverged training).  Failures print a single ``error: ...`` line
to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import dataset as ds
from . import plotting, trainer
from .config import (
    Config,
    apply_override,
    build_config,
    config_hash,
    config_to_dict,
)
from .container import save_arrays
from .errors import ConfigError, DataError, TrainingDivergedError
from .inference import decode_sample
from .matching import build_targets
from .metrics import targets_to_id_maps
from .model import build_model


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", default="desk",
                        help="named configuration preset (default: desk)")
    parser.add_argument("--config", default=None, metavar="FILE",
                        help="configuration file (mutually exclusive with --preset)")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config entry (repeatable)")


def _resolve_config(args: argparse.Namespace) -> Config:
    cfg = build_config(args.preset, args.config, args.overrides)
    print(f"resolved config (hash {config_hash(cfg)}):")
    print(yaml.safe_dump(config_to_dict(cfg), sort_keys=True).rstrip())
    return cfg


def _load_checkpoint_config(args: argparse.Namespace):
    """Model + config from a checkpoint, with overrides applied on top."""
    model, cfg, meta = trainer.model_from_checkpoint(args.checkpoint)
    if args.overrides:
        for assignment in args.overrides:
            apply_override(cfg, assignment)
        rebuilt = build_model(cfg)
        try:
            rebuilt.load_state_dict(model.state_dict())
        except RuntimeError as exc:
            raise DataError(
                f"checkpoint {args.checkpoint} is incompatible with the "
                f"overridden config: {exc}"
            ) from exc
        model = rebuilt
    print(f"resolved config (hash {config_hash(cfg)}):")
    print(yaml.safe_dump(config_to_dict(cfg), sort_keys=True).rstrip())
    return model, cfg, meta


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    manifest = ds.build_dataset(cfg, args.out, force=args.force)
    digest = hashlib.sha256(
        yaml.safe_dump(manifest, sort_keys=True).encode("utf-8")
    ).hexdigest()[:16]
    print(f"dataset at {args.out}: "
          f"{manifest['splits']['train']['count']} train / "
          f"{manifest['splits']['eval']['count']} eval, "
          f"manifest hash {digest}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    summary = trainer.train(cfg, args.data, args.out, resume_from=args.resume)
    final = summary["final"]
    print(f"done: iou(far)={final['iou']['far']} vpq(far)={final['vpq']['far']} "
          f"id_consistency(far)={final['id_consistency']['far']}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    if args.checkpoint:
        model, cfg, _ = _load_checkpoint_config(args)
    else:
        # Fresh initialization: useful as an untrained reference point.
        cfg = _resolve_config(args)
        torch.manual_seed(cfg.train.seed)
        model = build_model(cfg)
    manifest = ds.load_manifest(args.data)
    ds.check_dataset_compatible(cfg, manifest)
    paths = ds.split_paths(args.data, args.split)
    report = trainer.evaluate_model(model, cfg, paths, args.limit)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = yaml.safe_dump(report, sort_keys=True)
    (out / "metrics.yaml").write_text(text)
    print(text.rstrip())
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    model, cfg, _ = _load_checkpoint_config(args)
    manifest = ds.load_manifest(args.data)
    ds.check_dataset_compatible(cfg, manifest)
    paths = ds.split_paths(args.data, args.split)
    if not 0 <= args.index < len(paths):
        raise DataError(
            f"sample index {args.index} out of range for split "
            f"{args.split!r} with {len(paths)} samples"
        )
    sample = ds.load_sample(paths[args.index])
    model.eval()
    with torch.no_grad():
        output = model(torch.from_numpy(sample.input_rasters()).unsqueeze(0))
    decoded = decode_sample(output, 0, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result_path = out / f"instances_{args.split}_{args.index}.npz"
    save_arrays(result_path, {
        "id_maps": decoded.id_maps,
        "scores": decoded.scores,
    })
    targets = build_targets(sample, cfg)
    gt_maps = targets_to_id_maps(targets.masks.numpy(), targets.agent_ids.numpy())
    image_path = out / f"instances_{args.split}_{args.index}.png"
    plotting.save_comparison(gt_maps, decoded.id_maps, image_path)
    kept = np.unique(decoded.id_maps)
    print(f"wrote {result_path} and {image_path} "
          f"({len(kept[kept > 0])} decoded instances)")
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    if args.checkpoint:
        model, cfg, _ = _load_checkpoint_config(args)
    else:
        model = None
        cfg = _resolve_config(args)
    manifest = ds.load_manifest(args.data)
    ds.check_dataset_compatible(cfg, manifest)
    paths = ds.split_paths(args.data, args.split)
    if not 0 <= args.index < len(paths):
        raise DataError(
            f"sample index {args.index} out of range for split "
            f"{args.split!r} with {len(paths)} samples"
        )
    sample = ds.load_sample(paths[args.index])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{args.split}_{args.index}"
    written = []

    flow_path = out / f"flow_gt_{stem}.png"
    plotting.save_flow_maps(sample.flow, flow_path, title="backward flow (ground truth)")
    written.append(flow_path)

    targets = build_targets(sample, cfg)
    gt_maps = targets_to_id_maps(targets.masks.numpy(), targets.agent_ids.numpy())
    gt_path = out / f"instances_gt_{stem}.png"
    plotting.save_instance_maps(gt_maps, gt_path, title="instances (ground truth)")
    written.append(gt_path)

    if model is not None:
        model.eval()
        with torch.no_grad():
            output = model(torch.from_numpy(sample.input_rasters()).unsqueeze(0))
        if output.flows is not None:
            pred_flow_path = out / f"flow_pred_{stem}.png"
            plotting.save_flow_maps(
                output.flows[0].numpy(), pred_flow_path,
                title="backward flow (predicted)",
            )
            written.append(pred_flow_path)
        decoded = decode_sample(output, 0, cfg)
        cmp_path = out / f"comparison_{stem}.png"
        plotting.save_comparison(gt_maps, decoded.id_maps, cmp_path)
        written.append(cmp_path)

    print("wrote " + ", ".join(str(p) for p in written))
    return 0


def _parse_axes(specs: list[str]) -> list[tuple[str, list[str]]]:
    axes = []
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"--vary must look like key=value1,value2, got {spec!r}")
        key, raw = spec.split("=", 1)
        values = [v for v in raw.split(",") if v]
        if len(values) < 2:
            raise ConfigError(f"--vary axis {key!r} needs at least two values")
        axes.append((key.strip(), values))
    return axes


def cmd_ablate(args: argparse.Namespace) -> int:
    axes = _parse_axes(args.vary)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for combo in itertools.product(*(values for _, values in axes)):
        assignments = [f"{key}={value}" for (key, _), value in zip(axes, combo)]
        label = ",".join(assignments)
        print(f"=== variant {label} ===")
        cfg = build_config(args.preset, args.config, args.overrides + assignments)
        run_dir = out / label.replace("=", "-").replace(",", "_").replace(".", "_")
        summary = trainer.train(cfg, args.data, run_dir)
        final = summary["final"]
        rows.append({
            "variant": label,
            "iou_far": final["iou"]["far"],
            "vpq_near": final["vpq"]["near"],
            "vpq_far": final["vpq"]["far"],
            "id_consistency_far": final["id_consistency"]["far"],
        })
    reference = rows[0]["vpq_far"]
    for row in rows:
        row["vpq_far_delta"] = round(row["vpq_far"] - reference, 6)
    with open(out / "ablation.yaml", "w") as f:
        yaml.safe_dump(rows, f, sort_keys=True)
    columns = ["variant", "iou_far", "vpq_near", "vpq_far", "vpq_far_delta",
               "id_consistency_far"]
    widths = {
        c: max(len(c), *(len(str(r[c])) for r in rows)) for c in columns
    }
    print("  ".join(c.ljust(widths[c]) for c in columns))
    for row in rows:
        print("  ".join(str(row[c]).ljust(widths[c]) for c in columns))
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="futurebev",
        description="Future BEV instance prediction on synthetic driving scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--force", action="store_true",
                   help="rebuild even if the directory holds a different config")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", default=None, metavar="CHECKPOINT",
                   help="continue from a checkpoint written by a previous run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or a fresh model)")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None,
                   help="checkpoint to evaluate; omitted = freshly initialized model")
    p.add_argument("--split", default="eval", choices=ds.SPLITS)
    p.add_argument("--limit", type=int, default=0,
                   help="cap the number of scenarios (0 = all)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="decode one sample and write its id maps")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="eval", choices=ds.SPLITS)
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("plot", help="render flow fields and instance maps")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None,
                   help="also render this model's predictions")
    p.add_argument("--split", default="eval", choices=ds.SPLITS)
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("ablate", help="train a grid of config variants and compare")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vary", action="append", required=True,
                   metavar="KEY=V1,V2[,...]",
                   help="axis of the variant grid (repeatable; grid = product)")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {_one_line(exc)}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: data: {_one_line(exc)}", file=sys.stderr)
        return 3
    except TrainingDivergedError as exc:
        print(f"error: numeric: {_one_line(exc)}", file=sys.stderr)
        return 4


def _one_line(exc: Exception) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
