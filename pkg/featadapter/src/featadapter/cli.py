"""featadapter command line: init-checkpoint, extract, merge, finetune."""
from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from .extract import ExtractorConfig, extract, merge_manifests
from .finetune import FinetuneConfig, finetune
from .model import init_checkpoint


@click.group()
@click.option("--verbose", is_flag=True)
def main(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command(name="init-checkpoint")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--d", "feature_dim", default=64, show_default=True, type=int)
@click.option("--width", default=16, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
def init_checkpoint_cmd(out, feature_dim, width, seed) -> None:
    """Create a deterministic backbone checkpoint."""
    init_checkpoint(out, feature_dim=feature_dim, width=width, seed=seed)
    click.echo(f"checkpoint written to {out} (d={feature_dim}, width={width}, seed={seed})")


@main.command(name="extract")
@click.option("--images", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--window", default=128, show_default=True, type=int)
@click.option("--stride", default=64, show_default=True, type=int)
@click.option("--domain", default="target", show_default=True, type=click.Choice(["source", "target"]))
@click.option("--out-manifest", required=True, type=click.Path(dir_okay=False))
@click.option("--out-pred", default=None, type=click.Path(file_okay=False))
def extract_cmd(images, checkpoint, window, stride, domain, out_manifest, out_pred) -> None:
    """Embed every patch of every image; optionally write density predictions."""
    config = ExtractorConfig(checkpoint=Path(checkpoint), window=window, stride=stride, domain=domain)
    try:
        ids = extract(images, config, out_manifest, out_pred)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    click.echo(f"extracted {len(ids)} patch features to {out_manifest}")


@main.command(name="merge")
@click.option("--in", "inputs", multiple=True, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def merge_cmd(inputs, out) -> None:
    """Join per-domain manifests into one set."""
    try:
        count = merge_manifests([Path(p) for p in inputs], Path(out))
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    click.echo(f"merged {count} records into {out}")


@main.command(name="finetune")
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--features-in", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--features-out", required=True, type=click.Path(dir_okay=False))
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint-out", default=None, type=click.Path(dir_okay=False))
@click.option("--lr", default=1e-6, show_default=True, type=float)
@click.option("--weight-decay", default=5e-4, show_default=True, type=float)
@click.option("--batch-size", default=16, show_default=True, type=int)
@click.option("--epochs", default=1, show_default=True, type=int)
def finetune_cmd(dataset, features_in, features_out, checkpoint, checkpoint_out, lr, weight_decay, batch_size, epochs) -> None:
    """Update head weights on a pseudo-label dataset and refresh features."""
    config = FinetuneConfig(
        checkpoint=Path(checkpoint),
        lr=lr,
        weight_decay=weight_decay,
        batch_size=batch_size,
        epochs=epochs,
        checkpoint_out=Path(checkpoint_out) if checkpoint_out else None,
    )
    code = finetune(dataset, features_in, features_out, config)
    if code == 0:
        click.echo(f"features refreshed at {features_out}")
    sys.exit(code)


if __name__ == "__main__":
    main()
