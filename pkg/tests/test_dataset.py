import hashlib
from pathlib import Path

import numpy as np
import pytest

from futurebev.config import build_config
from futurebev.dataset import (
    build_dataset,
    check_dataset_compatible,
    load_manifest,
    load_sample,
    make_sample,
    sample_path,
    split_paths,
)
from futurebev.errors import ConfigError, DataError


@pytest.fixture(scope="module")
def small_cfg():
    return build_config(
        "tiny", overrides=["data.num_train=3", "data.num_eval=2", "data.seed=42"]
    )


@pytest.fixture(scope="module")
def built(tmp_path_factory, small_cfg):
    root = tmp_path_factory.mktemp("data")
    manifest = build_dataset(small_cfg, root)
    return root, manifest


def _tree_digest(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def test_layout_and_counts(built, small_cfg):
    root, manifest = built
    assert manifest["splits"]["train"]["count"] == 3
    assert len(split_paths(root, "train")) == 3
    assert len(split_paths(root, "eval")) == 2


def test_sample_contents(built, small_cfg):
    root, _ = built
    s = load_sample(sample_path(root, "train", 0))
    w = small_cfg.world
    T = w.t_in + 1 + w.t_out
    H, W = w.grid.height, w.grid.width
    assert s.instance_ids.shape == (T, H, W)
    assert s.velocity.shape == (T, 2, H, W)
    assert s.flow.shape == (w.t_out, 2, H, W)
    assert s.flow_valid.shape == (w.t_out, H, W)
    assert s.input_rasters().shape == (w.t_in + 1, 3, H, W)
    assert s.target_instance_ids().shape == (w.t_out + 1, H, W)
    # Flow validity equals future-frame occupancy.
    assert np.array_equal(
        s.flow_valid.astype(bool), s.instance_ids[w.t_in + 1:] > 0
    )


def test_generation_is_bit_reproducible(tmp_path, small_cfg):
    a = tmp_path / "a"
    b = tmp_path / "b"
    build_dataset(small_cfg, a)
    build_dataset(small_cfg, b)
    da, db = _tree_digest(a), _tree_digest(b)
    assert da == db and len(da) == 6  # 5 samples + manifest


def test_rebuild_with_same_config_is_noop(built, small_cfg):
    root, _ = built
    before = _tree_digest(root)
    build_dataset(small_cfg, root)
    assert _tree_digest(root) == before


def test_rebuild_with_other_config_refuses(built, small_cfg):
    root, _ = built
    other = build_config("tiny", overrides=["data.num_train=4", "data.num_eval=2"])
    with pytest.raises(DataError, match="different config"):
        build_dataset(other, root)


def test_train_eval_splits_are_distinct(built):
    root, _ = built
    a = load_sample(sample_path(root, "train", 0))
    b = load_sample(sample_path(root, "eval", 0))
    assert a.instance_ids.shape != b.instance_ids.shape or not np.array_equal(
        a.instance_ids, b.instance_ids
    )


def test_compatibility_check(built, small_cfg):
    _, manifest = built
    check_dataset_compatible(small_cfg, manifest)
    drifted = build_config("tiny", overrides=["world.dt=0.25"])
    with pytest.raises(ConfigError):
        check_dataset_compatible(drifted, manifest)


def test_manifest_version_gate(tmp_path, small_cfg):
    root = tmp_path / "d"
    build_dataset(small_cfg, root)
    manifest_file = root / "manifest.yaml"
    manifest_file.write_text(manifest_file.read_text().replace("format_version: 1", "format_version: 99"))
    with pytest.raises(DataError, match="format_version"):
        load_manifest(root)


def test_make_sample_matches_built_file(built, small_cfg):
    root, _ = built
    on_disk = load_sample(sample_path(root, "eval", 1))
    in_memory = make_sample(small_cfg.world, [small_cfg.data.seed, 1, 1])
    assert np.array_equal(on_disk.instance_ids, in_memory.instance_ids)
    assert np.array_equal(on_disk.flow, in_memory.flow)
