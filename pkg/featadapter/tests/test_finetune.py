import json
import logging

import numpy as np
import pytest
import torch

from featadapter import formats
from featadapter.finetune import FinetuneConfig, batch_loss, finetune, structural_similarity
from featadapter.model import init_checkpoint, load_checkpoint


def make_dataset(tmp_path, n_pairs, size=16, with_patches=True):
    dataset = tmp_path / "dataset"
    (dataset / "labels").mkdir(parents=True)
    if with_patches:
        (dataset / "patches").mkdir()
    rng = np.random.default_rng(1)
    rows = []
    for i in range(n_pairs):
        label = rng.uniform(0, 255, (size, size))
        formats.write_raster(dataset / f"labels/{i:06d}.fgr", label, formats.KIND_LABEL)
        row = {
            "target_id": f"tgt{i}:0:0",
            "source_id": f"src{i}:0:0",
            "score": 0.5,
            "fusion_weight": 0.5,
            "max_fused": 1.0,
            "label": f"labels/{i:06d}.fgr",
        }
        if with_patches:
            patch = rng.uniform(0, 1, (size, size))
            formats.write_raster(dataset / f"patches/{i:06d}.fgr", patch, formats.KIND_IMAGE)
            row["patch"] = f"patches/{i:06d}.fgr"
        rows.append(row)
    (dataset / "manifest.json").write_text(
        json.dumps({"format": "fragdiff-dataset", "count": n_pairs, "pairs": rows}, sort_keys=True, indent=1)
    )
    return dataset


def make_features(tmp_path, ids, d=24):
    rng = np.random.default_rng(2)
    path = tmp_path / "features_in.json"
    domains = ["target" if i.startswith("tgt") else "source" for i in ids]
    formats.write_features(path, ids, domains, rng.standard_normal((len(ids), d)).astype(np.float32))
    return path


def test_structural_similarity_identical_is_one():
    x = torch.rand(3, 8, 8)
    sim = structural_similarity(x, x)
    assert torch.allclose(sim, torch.ones(3), atol=1e-6)


def test_batch_loss_zero_for_identical():
    x = torch.rand(2, 8, 8)
    assert batch_loss(x, x, 1.0, 1.0).item() == pytest.approx(0.0, abs=1e-6)


def test_empty_dataset_is_noop_copy(tmp_path, checkpoint):
    dataset = make_dataset(tmp_path, 0)
    ids = [f"tgt{i}:0:0" for i in range(4)]
    features_in = make_features(tmp_path, ids)
    features_out = tmp_path / "features_out.json"
    code = finetune(dataset, features_in, features_out, FinetuneConfig(checkpoint=checkpoint))
    assert code == 0
    in_ids, in_domains, in_vectors = formats.read_features(features_in)
    out_ids, out_domains, out_vectors = formats.read_features(features_out)
    assert in_ids == out_ids and in_domains == out_domains
    assert np.array_equal(in_vectors, out_vectors)


def test_finetune_updates_trained_features_only(tmp_path, checkpoint):
    dataset = make_dataset(tmp_path, 3)
    ids = [f"tgt{i}:0:0" for i in range(3)] + ["bystander:0:0"]
    features_in = make_features(tmp_path, ids)
    features_out = tmp_path / "features_out.json"
    code = finetune(dataset, features_in, features_out, FinetuneConfig(checkpoint=checkpoint, epochs=2))
    assert code == 0
    in_ids, _, in_vectors = formats.read_features(features_in)
    out_ids, _, out_vectors = formats.read_features(features_out)
    assert in_ids == out_ids
    # trained patches were re-embedded, untouched records copied through
    trained = slice(0, 3)
    assert not np.array_equal(in_vectors[trained], out_vectors[trained])
    assert np.array_equal(in_vectors[3], out_vectors[3])


def test_finetune_logs_finite_loss(tmp_path, checkpoint, caplog):
    dataset = make_dataset(tmp_path, 2)
    features_in = make_features(tmp_path, [f"tgt{i}:0:0" for i in range(2)])
    with caplog.at_level(logging.INFO):
        code = finetune(dataset, features_in, tmp_path / "out.json", FinetuneConfig(checkpoint=checkpoint))
    assert code == 0
    assert "final batch loss" in caplog.text


def test_finetune_moves_last_layers_only(tmp_path, checkpoint):
    dataset = make_dataset(tmp_path, 4)
    features_in = make_features(tmp_path, [f"tgt{i}:0:0" for i in range(4)])
    checkpoint_out = tmp_path / "ck_after.pt"
    config = FinetuneConfig(checkpoint=checkpoint, epochs=3, lr=1e-3, checkpoint_out=checkpoint_out)
    assert finetune(dataset, features_in, tmp_path / "out.json", config) == 0
    before = load_checkpoint(checkpoint).state_dict()
    after = load_checkpoint(checkpoint_out).state_dict()
    last_stage = f"stages.{len(load_checkpoint(checkpoint).stages) - 1}."
    for name in before:
        same = torch.equal(before[name], after[name])
        if name.startswith("density_head") or name.startswith(last_stage):
            assert not same, f"last-layer weight {name} did not move"
        elif name.startswith(("stem", "down")) or (name.startswith("stages.") and not name.startswith(last_stage)):
            assert same, f"frozen weight {name} moved"
    # the embeddings themselves must shift, or iterating the loop is pointless
    rng = np.random.default_rng(5)
    probe = torch.from_numpy(rng.uniform(0, 1, (2, 1, 16, 16))).float()
    with torch.no_grad():
        f_before, _ = load_checkpoint(checkpoint)(probe)
        f_after, _ = load_checkpoint(checkpoint_out)(probe)
    assert not torch.allclose(f_before, f_after)


def test_dim_mismatch_fails_cleanly(tmp_path, checkpoint):
    dataset = make_dataset(tmp_path, 2)
    features_in = make_features(tmp_path, [f"tgt{i}:0:0" for i in range(2)], d=7)
    code = finetune(dataset, features_in, tmp_path / "out.json", FinetuneConfig(checkpoint=checkpoint))
    assert code == 2
