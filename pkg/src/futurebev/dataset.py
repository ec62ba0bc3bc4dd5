"""On-disk dataset: generation, manifest, and sample loading.

A dataset directory looks like::

    root/
      manifest.yaml
      train/sample_00000.npz ...
      eval/sample_00000.npz ...

Each sample file is a checksummed named-array container holding the
rasterized scenario (instance ids, velocity rasters, backward flow) plus
the underlying agent states, so both raster-level and box-level targets
can be built without re-simulating.  Generation is fully deterministic:
the same config produces byte-identical files.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import world
from .config import Config, WorldConfig, config_from_dict, config_to_dict
from .container import load_arrays, save_arrays
from .errors import ConfigError, DataError

FORMAT_VERSION = 1
SPLITS = ("train", "eval")


@dataclass
class Sample:
    """One loaded scenario with rasters and agent ground truth."""

    instance_ids: np.ndarray   # (T, H, W) int32, 0 = background
    velocity: np.ndarray       # (T, 2, H, W) float32, grid cells / frame
    flow: np.ndarray           # (T_out, 2, H, W) float32, backward flow of future frames
    flow_valid: np.ndarray     # (T_out, H, W) uint8
    agent_ids: np.ndarray      # (N,) int32
    agent_states: np.ndarray   # (N, 5) float64 at the current frame
    agent_dims: np.ndarray     # (N, 2) float64 (length, width) meters
    t_in: int
    t_out: int

    @property
    def num_frames(self) -> int:
        return self.t_in + 1 + self.t_out

    @property
    def current_index(self) -> int:
        return self.t_in

    def occupancy(self) -> np.ndarray:
        return (self.instance_ids > 0).astype(np.float32)

    def input_rasters(self) -> np.ndarray:
        """Model input (t_in + 1, 3, H, W): occupancy + velocity, past to current."""
        upto = self.t_in + 1
        occ = self.occupancy()[:upto, None]                 # (T_in+1, 1, H, W)
        vel = self.velocity[:upto]                          # (T_in+1, 2, H, W)
        return np.concatenate([occ, vel], axis=1).astype(np.float32)

    def target_instance_ids(self) -> np.ndarray:
        """Instance maps for current + future frames, (t_out + 1, H, W)."""
        return self.instance_ids[self.t_in:]

    def present_agent_indices(self) -> np.ndarray:
        """Indices of agents occupying at least one cell at the current frame."""
        ids_now = set(np.unique(self.instance_ids[self.t_in]).tolist()) - {0}
        return np.array(
            [i for i, a in enumerate(self.agent_ids) if int(a) in ids_now], dtype=np.int64
        )


def scenario_to_arrays(sc: world.Scenario, rigid_flow: bool = True) -> dict[str, np.ndarray]:
    """Rasterize a scenario into the arrays stored per sample."""
    ids = np.stack(
        [world.rasterize_instances(sc, t) for t in range(sc.num_frames)], axis=0
    ).astype(np.int32)
    vel = np.stack(
        [world.rasterize_velocity(sc, t, ids=ids[t]) for t in range(sc.num_frames)], axis=0
    ).astype(np.float32)
    flows = []
    valids = []
    for k in range(sc.t_out):
        frame = sc.current_index + 1 + k
        f, v = world.backward_flow(sc, frame, rigid=rigid_flow, ids=ids[frame])
        flows.append(f.astype(np.float32))
        valids.append(v.astype(np.uint8))
    return {
        "instance_ids": ids,
        "velocity": vel,
        "flow": np.stack(flows, axis=0) if flows else np.zeros((0, 2, *ids.shape[1:]), np.float32),
        "flow_valid": np.stack(valids, axis=0) if valids else np.zeros((0, *ids.shape[1:]), np.uint8),
        "agent_ids": sc.agent_ids.astype(np.int32),
        "agent_states": sc.states[sc.current_index].astype(np.float64),
        "agent_dims": sc.dims.astype(np.float64),
        "meta": np.array([sc.t_in, sc.t_out], dtype=np.int64),
    }


def arrays_to_sample(arrays: dict[str, np.ndarray]) -> Sample:
    t_in, t_out = (int(v) for v in arrays["meta"])
    return Sample(
        instance_ids=arrays["instance_ids"],
        velocity=arrays["velocity"],
        flow=arrays["flow"],
        flow_valid=arrays["flow_valid"],
        agent_ids=arrays["agent_ids"],
        agent_states=arrays["agent_states"],
        agent_dims=arrays["agent_dims"],
        t_in=t_in,
        t_out=t_out,
    )


def make_sample(world_cfg: WorldConfig, seed_parts: list[int]) -> Sample:
    """Generate one sample in memory (used by tests and tiny experiments)."""
    sc = world.generate_scenario(world_cfg, np.random.SeedSequence(seed_parts))
    return arrays_to_sample(scenario_to_arrays(sc, rigid_flow=world_cfg.rigid_flow))


def sample_path(root: str | Path, split: str, index: int) -> Path:
    return Path(root) / split / f"sample_{index:05d}.npz"


def _generation_config(cfg: Config) -> dict:
    """The config subset that determines dataset content."""
    full = config_to_dict(cfg)
    return {"world": full["world"], "data": full["data"]}


def split_seed_parts(cfg: Config, split: str, index: int) -> list[int]:
    return [cfg.data.seed, SPLITS.index(split), index]


def build_dataset(cfg: Config, root: str | Path, force: bool = False) -> dict:
    """Generate all samples and the manifest under ``root``.

    If a manifest already exists for the same generation config the build
    is skipped (pass ``force=True`` to regenerate).  Returns the manifest
    dictionary.
    """
    root = Path(root)
    manifest_file = root / "manifest.yaml"
    wanted = {
        "format_version": FORMAT_VERSION,
        "generation": _generation_config(cfg),
        "splits": {
            "train": {"count": cfg.data.num_train},
            "eval": {"count": cfg.data.num_eval},
        },
    }
    if manifest_file.is_file() and not force:
        existing = _read_manifest_file(manifest_file)
        if existing == wanted:
            return existing
        raise DataError(
            f"dataset at {root} was generated with a different config; "
            "use --force to regenerate or pick another directory"
        )
    counts = {"train": cfg.data.num_train, "eval": cfg.data.num_eval}
    for split in SPLITS:
        for i in range(counts[split]):
            sc = world.generate_scenario(
                cfg.world, np.random.SeedSequence(split_seed_parts(cfg, split, i))
            )
            arrays = scenario_to_arrays(sc, rigid_flow=cfg.world.rigid_flow)
            save_arrays(sample_path(root, split, i), arrays)
    root.mkdir(parents=True, exist_ok=True)
    with open(manifest_file, "w") as f:
        yaml.safe_dump(wanted, f, sort_keys=True)
    return wanted


def _read_manifest_file(path: Path) -> dict:
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise DataError(f"manifest {path} is not a mapping")
    return data


def load_manifest(root: str | Path) -> dict:
    root = Path(root)
    manifest = _read_manifest_file(root / "manifest.yaml")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(
            f"dataset {root} has format_version {manifest.get('format_version')!r}, "
            f"expected {FORMAT_VERSION}"
        )
    return manifest


def manifest_world_config(manifest: dict) -> WorldConfig:
    try:
        gen = manifest["generation"]["world"]
    except KeyError as exc:
        raise DataError("manifest is missing the generation.world section") from exc
    cfg = config_from_dict({"world": gen})
    return cfg.world  # type: ignore[union-attr]


def check_dataset_compatible(cfg: Config, manifest: dict) -> None:
    """Fail if a run config disagrees with how the dataset was generated."""
    ours = dataclasses.asdict(cfg.world)
    theirs = manifest.get("generation", {}).get("world")
    if theirs != ours:
        raise ConfigError(
            "run config world section does not match the dataset manifest; "
            "regenerate the dataset or adjust the config"
        )


def split_paths(root: str | Path, split: str) -> list[Path]:
    manifest = load_manifest(root)
    count = manifest["splits"][split]["count"]
    paths = [sample_path(root, split, i) for i in range(count)]
    missing = [p for p in paths if not p.is_file()]
    if missing:
        raise DataError(f"dataset {root} is missing {len(missing)} {split} files, e.g. {missing[0]}")
    return paths


def load_sample(path: str | Path) -> Sample:
    return arrays_to_sample(load_arrays(path))
