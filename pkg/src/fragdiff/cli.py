"""fragdiff command line: patchify, features, graph, diffuse, align, pseudolabel, eval, run."""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import align as align_mod
from . import diffusion, featstore, graph as graph_mod, pipeline, synthworld
from .errors import FragdiffError
from .patchkit import PatchSet, read_raster, write_raster
from .pseudolabel import FragmentStore, build_dataset


def _fail(exc: FragdiffError) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(2)


@click.group()
@click.option("--verbose", is_flag=True, help="Enable info-level logging.")
def main(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--input", "input_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--window", default=128, show_default=True, type=int)
@click.option("--stride", default=64, show_default=True, type=int)
@click.option("--pad", default="edge", show_default=True, type=click.Choice(["edge", "none"]))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def patchify(input_dir: str, window: int, stride: int, pad: str, out_dir: str) -> None:
    """Slice every FGR1 raster in a directory into patches."""
    try:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pad_policy = None if pad == "none" else pad
        rasters = {path.stem: read_raster(path) for path in sorted(Path(input_dir).glob("*.fgr"))}
        patch_set = PatchSet.from_rasters(rasters, (window, window), (stride, stride), pad=pad_policy)
        index = {}
        for idx, patch in patch_set.patches:
            name = f"{len(index):06d}.fgr"
            write_raster(out / name, patch)
            index[idx.id] = name
        (out / "index.json").write_text(json.dumps(index, sort_keys=True, indent=1) + "\n")
        click.echo(
            f"wrote {len(patch_set)} patches from {patch_set.image_count} rasters "
            f"(max {patch_set.max_patches_per_image} per image) to {out_dir}"
        )
    except FragdiffError as exc:
        _fail(exc)


@main.group()
def features() -> None:
    """Feature set utilities."""


@features.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
def validate(manifest: str) -> None:
    """Check manifest/blob agreement, checksums and finiteness."""
    try:
        featset = featstore.load(manifest)
        n_source, m_target = featset.counts
        click.echo(f"ok: {len(featset)} records (source={n_source} target={m_target}) d={featset.d}")
    except FragdiffError as exc:
        _fail(exc)


@features.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def normalize(manifest: str, out: str) -> None:
    """Write a unit-normalized copy of a feature set."""
    try:
        featstore.save(featstore.normalize(featstore.load(manifest)), out)
        click.echo(f"normalized features written to {out}")
    except FragdiffError as exc:
        _fail(exc)


@features.command()
@click.option("--n-source", default=60, show_default=True, type=int)
@click.option("--m-target", default=60, show_default=True, type=int)
@click.option("--d", default=16, show_default=True, type=int)
@click.option("--clusters", default=3, show_default=True, type=int)
@click.option("--shift", default=0.15, show_default=True, type=float)
@click.option("--noise", default=0.05, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--world", "world_dir", default=None, type=click.Path(file_okay=False),
              help="Also build gt/pred/patch/truth stores in this directory.")
def synth(n_source, m_target, d, clusters, shift, noise, seed, out, world_dir) -> None:
    """Generate deterministic clustered two-domain features."""
    try:
        if world_dir is not None:
            paths = synthworld.build_world(
                world_dir, n_source=n_source, m_target=m_target, d=d, clusters=clusters,
                domain_shift=shift, noise=noise, seed=seed,
            )
            if Path(out).resolve() != Path(paths["features"]).resolve():
                featstore.save(featstore.load(paths["features"]), out)
            click.echo(f"world written to {world_dir}; features manifest at {out}")
        else:
            featset, labels = featstore.synth_two_domain(
                n_source, m_target, d, clusters, domain_shift=shift, noise=noise, seed=seed
            )
            featstore.save(featset, out)
            labels_path = Path(out).with_suffix(".labels.json")
            labels_path.write_text(json.dumps(labels, sort_keys=True, indent=1) + "\n")
            click.echo(f"synthesized {len(featset)} features to {out} (labels: {labels_path})")
    except FragdiffError as exc:
        _fail(exc)


@main.group()
def graph() -> None:
    """Affinity graph construction."""


@graph.command()
@click.option("--features", "manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--k", default=50, show_default=True, type=int)
@click.option("--gamma", default=3.0, show_default=True, type=float)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def build(manifest: str, k: int, gamma: float, out: str) -> None:
    """Build the mutual-kNN affinity graph from a feature manifest."""
    try:
        featset = featstore.normalize(featstore.load(manifest))
        affinity = graph_mod.build_mutual_knn(featset, k=k, gamma=gamma,
                                              feature_checksum=featstore.blob_checksum(manifest))
        graph_mod.save(affinity, out)
        isolated = len(affinity.isolated_nodes)
        click.echo(f"graph: {affinity.node_count} nodes, {affinity.entries.nnz} edges, {isolated} isolated -> {out}")
    except FragdiffError as exc:
        _fail(exc)


@main.command()
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--features", "manifest", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Feature manifest; required for per-query restart states.")
@click.option("--alpha", default=0.99, show_default=True, type=float)
@click.option("--mode", default="per-query", show_default=True, type=click.Choice(["per-query", "batch"]))
@click.option("--nn", default=10, show_default=True, type=int)
@click.option("--solver", default="cg", show_default=True, type=click.Choice(["cg", "iterate", "truncated"]))
@click.option("--truncation", default=None, type=int, help="Neighborhood size for the truncated solver (default 5k).")
@click.option("--queries", default="target", show_default=True, type=click.Choice(["target", "source"]))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def diffuse(graph_path, manifest, alpha, mode, nn, solver, truncation, queries, out) -> None:
    """Score gallery nodes by graph diffusion and write an FGS1 table."""
    try:
        affinity = graph_mod.load(graph_path)
        normalized = graph_mod.normalize(affinity)
        featset = None
        if mode == "per-query":
            if manifest is None:
                raise FragdiffError("bad-params", "per-query mode needs --features for restart states")
            featset = featstore.normalize(featstore.load(manifest))
            if affinity.feature_checksum and featstore.blob_checksum(manifest) != affinity.feature_checksum:
                raise FragdiffError("manifest-mismatch", "graph was built from a different feature blob")
        table = diffusion.retrieve(
            normalized, featset, mode=mode, solver=solver, alpha=alpha, nn=nn,
            gamma=affinity.gamma, trunc_size=truncation, query_domain=queries,
        )
        diffusion.write_scores(table, out)
        n_scores = sum(len(v) for v in table.values())
        click.echo(f"wrote {n_scores} scores for {len(table)} queries to {out}")
    except FragdiffError as exc:
        _fail(exc)


@main.command(name="align")
@click.option("--scores", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--rule", default="threshold", show_default=True, type=click.Choice(["threshold", "top-percent"]))
@click.option("--lambda", "threshold", default=align_mod.DEFAULT_THRESHOLD, show_default=True, type=float)
@click.option("--percent", default=0.10, show_default=True, type=float)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def align_cmd(scores, rule, threshold, percent, out) -> None:
    """Rank-1 match per query, then filter."""
    try:
        table = diffusion.read_scores(scores)
        pairs = align_mod.rank1_matches(table)
        kind = "absolute-threshold" if rule == "threshold" else "top-percent"
        filtered = align_mod.filter_matches(pairs, align_mod.FilterRule(kind=kind, threshold=threshold, percent=percent))
        align_mod.write_matches(filtered, out)
        click.echo(f"kept {len(filtered.pairs)}/{len(pairs)} rank-1 pairs -> {out}")
    except FragdiffError as exc:
        _fail(exc)


@main.command(name="pseudolabel")
@click.option("--matches", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--gt", "gt_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--pred", "pred_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--patches", "patches_dir", default=None, type=click.Path(exists=True, file_okay=False))
@click.option("--wt", default="auto", show_default=True)
@click.option("--iteration", default=1, show_default=True, type=int, help="Round index used when --wt auto.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def pseudolabel_cmd(matches, gt_dir, pred_dir, patches_dir, wt, iteration, out_dir) -> None:
    """Fuse matched fragments into a pseudo-label dataset."""
    try:
        pairs = align_mod.read_matches(matches)
        filtered = align_mod.FilteredMatches(pairs=pairs, rule=align_mod.FilterRule(kind="absolute-threshold", threshold=0.0))
        weight = iteration / (iteration + 1) if wt == "auto" else float(wt)
        patch_store = FragmentStore(patches_dir) if patches_dir else None
        manifest = build_dataset(
            filtered, FragmentStore(gt_dir), FragmentStore(pred_dir), weight, out_dir, patch_store=patch_store
        )
        click.echo(f"dataset with {len(pairs)} labels at {manifest.parent} (w_t={weight:.4f})")
    except FragdiffError as exc:
        _fail(exc)


@main.command(name="eval")
@click.option("--pred", "pred_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--gt", "gt_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--report", "report_path", required=True, type=click.Path(dir_okay=False))
def eval_cmd(pred_dir, gt_dir, report_path) -> None:
    """Counting MAE/RMSE of a prediction store against ground truth."""
    try:
        report = pipeline.evaluate_run(Path(pred_dir), Path(gt_dir))
        Path(report_path).write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
        click.echo(f"MAE {report['mae']:.4f}  RMSE {report['rmse']:.4f}  ({len(report['per_image'])} images)")
    except FragdiffError as exc:
        _fail(exc)


@main.command(name="run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--workspace", required=True, type=click.Path(file_okay=False))
def run_cmd(config_path, workspace) -> None:
    """Run the iterative adaptation loop described by a config file."""
    try:
        cfg = pipeline.RunConfig.from_file(config_path)
        report = pipeline.run_pipeline(cfg, workspace)
        click.echo(json.dumps(
            {"completed_iterations": report["completed_iterations"],
             "early_stopped": report["early_stopped"],
             "final_eval": report["iterations"][-1]["evaluation"] if report["iterations"] else report["baseline"]},
            sort_keys=True,
        ))
    except FragdiffError as exc:
        _fail(exc)


if __name__ == "__main__":
    main()
