import json

import numpy as np

from featadapter import formats
from featadapter.extract import ExtractorConfig, extract, merge_manifests, patch_grid


def test_patch_grid_counts_and_order():
    values = np.arange(256 * 256, dtype=float).reshape(256, 256)
    grid = patch_grid(values, 128, 64)
    assert len(grid) == 9
    assert [(r, c) for r, c, _ in grid] == [(r, c) for r in range(3) for c in range(3)]
    assert np.array_equal(grid[4][2], values[64:192, 64:192])


def test_patch_grid_pads_to_stride_multiple():
    values = np.ones((200, 200))
    grid = patch_grid(values, 128, 64)
    assert len(grid) == 9  # padded to 256
    assert all(p.shape == (128, 128) for _, _, p in grid)


def test_extract_deterministic(tmp_path, checkpoint, images_dir):
    cfg = ExtractorConfig(checkpoint=checkpoint, window=128, stride=64)
    extract(images_dir, cfg, tmp_path / "a.json", tmp_path / "pred_a")
    extract(images_dir, cfg, tmp_path / "b.json", tmp_path / "pred_b")
    blob_a = (tmp_path / "a.fgf").read_bytes()
    blob_b = (tmp_path / "b.fgf").read_bytes()
    assert blob_a == blob_b
    pa = formats.read_fragment_store(tmp_path / "pred_a")
    pb = formats.read_fragment_store(tmp_path / "pred_b")
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_extract_nine_records_per_256_image(tmp_path, checkpoint, images_dir):
    cfg = ExtractorConfig(checkpoint=checkpoint, window=128, stride=64)
    ids = extract(images_dir, cfg, tmp_path / "f.json", None)
    alpha_ids = [i for i in ids if i.startswith("alpha:")]
    assert len(alpha_ids) == 9


def test_predictions_in_unit_range(tmp_path, checkpoint, images_dir):
    cfg = ExtractorConfig(checkpoint=checkpoint, window=128, stride=64)
    extract(images_dir, cfg, tmp_path / "f.json", tmp_path / "pred")
    store = formats.read_fragment_store(tmp_path / "pred")
    for values in store.values():
        assert values.min() >= 0.0 and values.max() <= 1.0
        assert values.shape == (128, 128)


def test_merge_manifests(tmp_path, checkpoint, images_dir):
    import shutil

    other_dir = tmp_path / "other_images"
    other_dir.mkdir()
    for path in images_dir.iterdir():
        shutil.copyfile(path, other_dir / f"tgt_{path.name}")

    cfg_src = ExtractorConfig(checkpoint=checkpoint, window=128, stride=64, domain="source")
    cfg_tgt = ExtractorConfig(checkpoint=checkpoint, window=128, stride=64, domain="target")
    extract(images_dir, cfg_src, tmp_path / "src.json", None)
    extract(other_dir, cfg_tgt, tmp_path / "tgt.json", None)
    count = merge_manifests([tmp_path / "src.json", tmp_path / "tgt.json"], tmp_path / "joint.json")
    manifest = json.loads((tmp_path / "joint.json").read_text())
    assert manifest["count"] == count
    domains = {rec[1] for rec in manifest["records"]}
    assert domains == {"source", "target"}


def test_merge_rejects_duplicate_ids(tmp_path, checkpoint, images_dir):
    import pytest

    cfg = ExtractorConfig(checkpoint=checkpoint, window=128, stride=64, domain="source")
    extract(images_dir, cfg, tmp_path / "a.json", None)
    extract(images_dir, cfg, tmp_path / "b.json", None)
    with pytest.raises(ValueError, match="duplicate"):
        merge_manifests([tmp_path / "a.json", tmp_path / "b.json"], tmp_path / "joint.json")
