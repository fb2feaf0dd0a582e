import json

import numpy as np
from click.testing import CliRunner

from conftest import stub_command, write_config
from fragdiff.cli import main
from fragdiff.patchkit import Raster, RasterKind, write_raster


def invoke(*args):
    runner = CliRunner()
    return runner.invoke(main, [str(a) for a in args], catch_exceptions=False)


def test_patchify_and_counts(tmp_path):
    rng = np.random.default_rng(0)
    src = tmp_path / "rasters"
    src.mkdir()
    write_raster(src / "a.fgr", Raster(rng.uniform(0, 1, (256, 256)), RasterKind.DENSITY_MAP))
    out = tmp_path / "patches"
    result = invoke("patchify", "--input", src, "--window", 128, "--stride", 64, "--pad", "none", "--out", out)
    assert result.exit_code == 0, result.output
    index = json.loads((out / "index.json").read_text())
    assert len(index) == 9
    assert set(index) == {f"a:{r}:{c}" for r in range(3) for c in range(3)}


def test_patchify_rejects_too_small(tmp_path):
    src = tmp_path / "rasters"
    src.mkdir()
    write_raster(src / "tiny.fgr", Raster(np.ones((32, 32))))
    result = CliRunner().invoke(
        main, ["patchify", "--input", str(src), "--window", "128", "--stride", "64", "--pad", "none", "--out", str(tmp_path / "o")]
    )
    assert result.exit_code == 2
    assert "raster-too-small" in result.output


def test_full_cli_chain(tmp_path, synth_world):
    features = synth_world["features"]
    graph_path = tmp_path / "g.fgg"
    result = invoke("graph", "build", "--features", features, "--k", 8, "--out", graph_path)
    assert result.exit_code == 0, result.output

    scores_path = tmp_path / "s.fgs"
    result = invoke(
        "diffuse", "--graph", graph_path, "--features", features, "--alpha", 0.99,
        "--mode", "per-query", "--nn", 6, "--solver", "cg", "--out", scores_path,
    )
    assert result.exit_code == 0, result.output

    matches_path = tmp_path / "m.jsonl"
    result = invoke("align", "--scores", scores_path, "--rule", "threshold", "--lambda", 1e-8, "--out", matches_path)
    assert result.exit_code == 0, result.output
    lines = matches_path.read_text().splitlines()
    assert len(lines) == 36  # one rank-1 match per target patch
    first = json.loads(lines[0])
    assert set(first) == {"target_id", "source_id", "score"}

    dataset_dir = tmp_path / "dataset"
    result = invoke(
        "pseudolabel", "--matches", matches_path, "--gt", synth_world["gt_store"],
        "--pred", synth_world["pred_store"], "--patches", synth_world["patch_store"],
        "--wt", "auto", "--iteration", 1, "--out", dataset_dir,
    )
    assert result.exit_code == 0, result.output
    manifest = json.loads((dataset_dir / "manifest.json").read_text())
    assert manifest["count"] == 36

    report_path = tmp_path / "report.json"
    result = invoke("eval", "--pred", synth_world["pred_store"], "--gt", synth_world["eval_gt_store"], "--report", report_path)
    assert result.exit_code == 0, result.output
    report = json.loads(report_path.read_text())
    assert report["mae"] >= 0


def test_diffuse_batch_mode_without_features(tmp_path, synth_world):
    graph_path = tmp_path / "g.fgg"
    invoke("graph", "build", "--features", synth_world["features"], "--k", 8, "--out", graph_path)
    scores_path = tmp_path / "batch.fgs"
    result = invoke("diffuse", "--graph", graph_path, "--mode", "batch", "--solver", "cg", "--out", scores_path)
    assert result.exit_code == 0, result.output
    assert scores_path.exists()


def test_diffuse_checksum_guard(tmp_path, synth_world):
    graph_path = tmp_path / "g.fgg"
    invoke("graph", "build", "--features", synth_world["features"], "--k", 8, "--out", graph_path)
    # a different manifest fails the provenance check
    other = tmp_path / "other.json"
    result = invoke("features", "synth", "--n-source", 8, "--m-target", 8, "--d", 12, "--clusters", 2, "--out", other)
    assert result.exit_code == 0
    result = CliRunner().invoke(
        main, ["diffuse", "--graph", str(graph_path), "--features", str(other), "--out", str(tmp_path / "x.fgs")]
    )
    assert result.exit_code == 2
    assert "manifest-mismatch" in result.output


def test_features_validate_and_normalize(tmp_path, synth_world):
    result = invoke("features", "validate", "--manifest", synth_world["features"])
    assert result.exit_code == 0
    assert "source=36 target=36" in result.output
    out = tmp_path / "norm.json"
    result = invoke("features", "normalize", "--manifest", synth_world["features"], "--out", out)
    assert result.exit_code == 0
    result = invoke("features", "validate", "--manifest", out)
    assert result.exit_code == 0


def test_run_command(tmp_path, synth_world):
    cfg_path = write_config(tmp_path / "run.cfg", synth_world, stub_command("copy"), max_iterations=1)
    result = invoke("run", "--config", cfg_path, "--workspace", tmp_path / "ws")
    assert result.exit_code == 0, result.output
    payload = json.loads(result.output.strip().splitlines()[-1])
    assert payload["completed_iterations"] == 1
    assert (tmp_path / "ws" / "report.json").exists()
