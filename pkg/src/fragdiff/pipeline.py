"""Iterative domain-adaptation driver.

Each round: build the joint graph from the current features, diffuse, pick
and filter rank-1 matches, fuse pseudo-labels into a training dataset, hand
the dataset to an external trainer command, and wait for it to write back a
refreshed feature manifest. Every artifact is journaled with a checksum so a
finished round is skipped on re-run and an interrupted one can be redone.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import shlex
import statistics
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import align, diffusion, featstore, graph, metrics
from .errors import FragdiffError
from .pseudolabel import FragmentStore, build_dataset

logger = logging.getLogger(__name__)

JOURNAL_NAME = "journal.jsonl"
LOCK_NAME = ".lock"


def parse_config_file(path: str | Path) -> dict[str, object]:
    """Flat key = value file; values are JSON scalars or bare strings."""
    out: dict[str, object] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FragdiffError("bad-config", f"expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


@dataclass
class RunConfig:
    features: Path
    gt_store: Path
    pred_store: Path
    trainer: str
    window: int = 128
    stride: int = 64
    k: int = 10
    gamma: float = featstore.DEFAULT_GAMMA
    alpha: float = 0.99
    solver: str = "cg"
    mode: str = "per-query"
    nn: int = 10
    trunc_size: Optional[int] = None
    rule: str = "absolute-threshold"
    threshold: float = align.DEFAULT_THRESHOLD
    percent: float = 0.10
    wt: str | float = "auto"
    max_iterations: int = 4
    patch_store: Optional[Path] = None
    eval_gt_store: Optional[Path] = None
    seed: int = 0
    early_stop: bool = False
    query_domain: str = featstore.TARGET

    _KNOWN = {
        "features", "gt_store", "pred_store", "trainer", "window", "stride", "k", "gamma",
        "alpha", "solver", "mode", "nn", "trunc_size", "rule", "threshold", "percent", "wt",
        "max_iterations", "patch_store", "eval_gt_store", "seed", "early_stop", "query_domain",
    }

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        raw = parse_config_file(path)
        unknown = set(raw) - cls._KNOWN
        if unknown:
            raise FragdiffError("bad-config", f"unknown config keys: {sorted(unknown)}")
        for key in ("features", "gt_store", "pred_store", "trainer"):
            if key not in raw:
                raise FragdiffError("bad-config", f"missing required config key {key!r}")

        def path_of(key: str) -> Optional[Path]:
            if key not in raw or raw[key] in ("", None):
                return None
            return (path.parent / str(raw[key])).resolve()

        cfg = cls(
            features=path_of("features"),
            gt_store=path_of("gt_store"),
            pred_store=path_of("pred_store"),
            trainer=str(raw["trainer"]),
            patch_store=path_of("patch_store"),
            eval_gt_store=path_of("eval_gt_store"),
        )
        for key in cls._KNOWN - {"features", "gt_store", "pred_store", "trainer", "patch_store", "eval_gt_store"}:
            if key in raw:
                setattr(cfg, key, raw[key])
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not 0 < self.alpha < 1:
            raise FragdiffError("bad-config", f"alpha must lie in (0, 1), got {self.alpha}")
        if self.solver not in ("cg", "iterate", "truncated"):
            raise FragdiffError("bad-config", f"unknown solver {self.solver!r}")
        if self.mode not in ("per-query", "batch"):
            raise FragdiffError("bad-config", f"unknown mode {self.mode!r}")
        if self.rule not in ("absolute-threshold", "top-percent"):
            raise FragdiffError("bad-config", f"unknown rule {self.rule!r}")
        if self.max_iterations < 0:
            raise FragdiffError("bad-config", "max_iterations must be >= 0")
        if isinstance(self.wt, str) and self.wt != "auto":
            raise FragdiffError("bad-config", f"wt must be 'auto' or a number, got {self.wt!r}")
        if not isinstance(self.wt, str) and not 0 <= float(self.wt) <= 1:
            raise FragdiffError("bad-config", "wt must lie in [0, 1]")

    def fusion_weight(self, t: int) -> float:
        if self.wt == "auto":
            return t / (t + 1)
        return float(self.wt)

    def canonical(self) -> dict:
        return {
            "features": str(self.features),
            "gt_store": str(self.gt_store),
            "pred_store": str(self.pred_store),
            "patch_store": str(self.patch_store) if self.patch_store else None,
            "eval_gt_store": str(self.eval_gt_store) if self.eval_gt_store else None,
            "trainer": self.trainer,
            "window": self.window,
            "stride": self.stride,
            "k": self.k,
            "gamma": self.gamma,
            "alpha": self.alpha,
            "solver": self.solver,
            "mode": self.mode,
            "nn": self.nn,
            "trunc_size": self.trunc_size,
            "rule": self.rule,
            "threshold": self.threshold,
            "percent": self.percent,
            "wt": self.wt,
            "max_iterations": self.max_iterations,
            "seed": self.seed,
            "early_stop": self.early_stop,
            "query_domain": self.query_domain,
        }

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.canonical(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class IterationRecord:
    t: int
    status: str
    counts: dict
    score_stats: Optional[dict]
    trainer_exit: Optional[int]
    evaluation: Optional[dict]
    artifacts: dict = field(default_factory=dict)
    config_hash: str = ""
    notes: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "t": self.t,
                "status": self.status,
                "counts": self.counts,
                "score_stats": self.score_stats,
                "trainer_exit": self.trainer_exit,
                "evaluation": self.evaluation,
                "artifacts": self.artifacts,
                "config_hash": self.config_hash,
                "notes": self.notes,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "IterationRecord":
        obj = json.loads(line)
        return cls(
            t=obj["t"],
            status=obj["status"],
            counts=obj["counts"],
            score_stats=obj["score_stats"],
            trainer_exit=obj["trainer_exit"],
            evaluation=obj["evaluation"],
            artifacts=obj["artifacts"],
            config_hash=obj["config_hash"],
            notes=obj.get("notes", []),
        )


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Workspace:
    """Owns one run directory: lock, journal, per-iteration artifact dirs."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock_fd: Optional[int] = None

    def iter_dir(self, t: int) -> Path:
        return self.root / f"iter_{t:04d}"

    @property
    def journal_path(self) -> Path:
        return self.root / JOURNAL_NAME

    def acquire_lock(self) -> None:
        try:
            self._lock_fd = os.open(self.root / LOCK_NAME, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.write(self._lock_fd, str(os.getpid()).encode())
        except FileExistsError:
            raise FragdiffError("workspace-locked", f"{self.root} is owned by another run (remove {LOCK_NAME})")

    def release_lock(self) -> None:
        if self._lock_fd is not None:
            os.close(self._lock_fd)
            (self.root / LOCK_NAME).unlink(missing_ok=True)
            self._lock_fd = None

    def append_journal(self, record: IterationRecord) -> None:
        with open(self.journal_path, "a") as fh:
            fh.write(record.to_json() + "\n")

    def read_journal(self) -> list[IterationRecord]:
        if not self.journal_path.exists():
            return []
        return [IterationRecord.from_json(line) for line in self.journal_path.read_text().splitlines() if line]

    def completed_record(self, t: int, config_hash: str) -> Optional[IterationRecord]:
        record_path = self.iter_dir(t) / "record.json"
        if record_path.exists():
            record = IterationRecord.from_json(record_path.read_text())
            if record.config_hash != config_hash:
                raise FragdiffError(
                    "config-mismatch",
                    f"iteration {t} in {self.root} belongs to config {record.config_hash}, not {config_hash}",
                )
            if record.status == "complete":
                return record
        return None


def evaluate_run(pred_dir: Path, gt_dir: Path) -> dict:
    """Counting error of a prediction store against a ground-truth store."""
    pred_store = FragmentStore(pred_dir)
    gt_store = FragmentStore(gt_dir)
    ids = gt_store.ids()
    missing = [fid for fid in ids if fid not in pred_store]
    if missing:
        raise FragdiffError("missing-fragment", f"prediction store lacks ids: {missing[:10]}")
    preds = [metrics.count(pred_store.get(fid)) for fid in ids]
    gts = [metrics.count(gt_store.get(fid)) for fid in ids]
    per_id = [{"id": fid, "pred_count": p, "gt_count": g} for fid, p, g in zip(ids, preds, gts)]
    return {"mae": metrics.mae(preds, gts), "rmse": metrics.rmse(preds, gts), "per_image": per_id}


def _features_for_iteration(cfg: RunConfig, workspace: Workspace, t: int) -> Path:
    if t == 1:
        return cfg.features
    previous = workspace.iter_dir(t - 1) / "features_out.json"
    if not previous.exists():
        raise FragdiffError("features-missing", f"iteration {t} needs features from iteration {t - 1}")
    return previous


def run_iteration(cfg: RunConfig, workspace: Workspace, t: int) -> IterationRecord:
    """Execute round t end to end; re-running a finished round is a no-op."""
    existing = workspace.completed_record(t, cfg.config_hash())
    if existing is not None:
        logger.info("iteration %d already-complete, skipping", t)
        existing.notes = list(existing.notes) + ["already-complete"]
        return existing

    features_path = _features_for_iteration(cfg, workspace, t)
    if not Path(features_path).exists():
        raise FragdiffError("features-missing", f"feature manifest {features_path} does not exist")

    it_dir = workspace.iter_dir(t)
    it_dir.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, str] = {}

    featset = featstore.normalize(featstore.load(features_path))
    n_source, m_target = featset.counts

    affinity = graph.build_mutual_knn(featset, k=cfg.k, gamma=cfg.gamma,
                                      feature_checksum=featstore.blob_checksum(features_path))
    graph_path = it_dir / "graph.fgg"
    graph.save(affinity, graph_path)
    artifacts["graph.fgg"] = _sha256_file(graph_path)
    normalized = graph.normalize(affinity)
    isolated = len(affinity.isolated_nodes)
    if isolated:
        logger.info("iteration %d: %d isolated nodes keep their initial state", t, isolated)

    scores = diffusion.retrieve(
        normalized,
        featset,
        mode=cfg.mode,
        solver=cfg.solver,
        alpha=cfg.alpha,
        nn=cfg.nn,
        gamma=cfg.gamma,
        trunc_size=cfg.trunc_size,
        query_domain=cfg.query_domain,
    )
    scores_path = it_dir / "scores.fgs"
    diffusion.write_scores(scores, scores_path)
    artifacts["scores.fgs"] = _sha256_file(scores_path)

    pairs = align.rank1_matches(scores)
    rule = align.FilterRule(kind=cfg.rule, threshold=cfg.threshold, percent=cfg.percent)
    filtered = align.filter_matches(pairs, rule)
    matches_path = it_dir / "matches.jsonl"
    align.write_matches(filtered, matches_path)
    artifacts["matches.jsonl"] = _sha256_file(matches_path)

    score_stats = None
    if pairs:
        values = [p.score for p in pairs]
        score_stats = {"min": min(values), "median": statistics.median(values), "max": max(values)}

    weight = cfg.fusion_weight(t)
    dataset_dir = it_dir / "dataset"
    patch_store = FragmentStore(cfg.patch_store) if cfg.patch_store else None
    manifest_path = build_dataset(
        filtered,
        FragmentStore(cfg.gt_store),
        FragmentStore(cfg.pred_store),
        weight,
        dataset_dir,
        patch_store=patch_store,
    )
    artifacts["dataset/manifest.json"] = _sha256_file(manifest_path)

    features_out = it_dir / "features_out.json"
    command = cfg.trainer.format(
        dataset=str(dataset_dir), features_in=str(features_path), features_out=str(features_out)
    )
    logger.info("iteration %d: invoking trainer: %s", t, command)
    proc = subprocess.run(shlex.split(command), capture_output=True, text=True)
    if proc.returncode != 0:
        record = IterationRecord(
            t=t, status="failed",
            counts={"source": n_source, "target": m_target, "matches": len(pairs),
                    "filtered": len(filtered.pairs), "labels": len(filtered.pairs)},
            score_stats=score_stats, trainer_exit=proc.returncode, evaluation=None,
            artifacts=artifacts, config_hash=cfg.config_hash(),
        )
        (it_dir / "record.json").write_text(record.to_json() + "\n")
        workspace.append_journal(record)
        raise FragdiffError("trainer-failed", f"iteration {t}: trainer exited {proc.returncode}: {proc.stderr[-500:]}")

    if not features_out.exists():
        raise FragdiffError("features-missing", f"trainer exited 0 but wrote no manifest at {features_out}")
    featstore.load(features_out)  # validate before trusting it next round
    artifacts["features_out.json"] = _sha256_file(features_out)

    evaluation = None
    if cfg.eval_gt_store is not None:
        evaluation = evaluate_run(cfg.pred_store, cfg.eval_gt_store)
        evaluation = {"mae": evaluation["mae"], "rmse": evaluation["rmse"]}

    record = IterationRecord(
        t=t, status="complete",
        counts={"source": n_source, "target": m_target, "matches": len(pairs),
                "filtered": len(filtered.pairs), "labels": len(filtered.pairs)},
        score_stats=score_stats, trainer_exit=0, evaluation=evaluation,
        artifacts=artifacts, config_hash=cfg.config_hash(),
    )
    tmp = it_dir / "record.json.tmp"
    tmp.write_text(record.to_json() + "\n")
    tmp.rename(it_dir / "record.json")
    workspace.append_journal(record)
    return record


def run_pipeline(cfg: RunConfig, workspace_dir: str | Path) -> dict:
    """Run rounds 1..max_iterations and write the final report."""
    workspace = Workspace(workspace_dir)
    workspace.acquire_lock()
    try:
        config_json = json.dumps(cfg.canonical(), sort_keys=True, indent=1) + "\n"
        existing_config = workspace.root / "config.json"
        if existing_config.exists() and existing_config.read_text() != config_json:
            raise FragdiffError(
                "config-mismatch",
                f"{workspace.root} was created by a different config; use a fresh workspace",
            )
        existing_config.write_text(config_json)
        baseline = None
        if cfg.eval_gt_store is not None:
            base = evaluate_run(cfg.pred_store, cfg.eval_gt_store)
            baseline = {"mae": base["mae"], "rmse": base["rmse"]}

        records = []
        early_stopped = False
        for t in range(1, cfg.max_iterations + 1):
            record = run_iteration(cfg, workspace, t)
            records.append(record)
            if cfg.early_stop and len(records) >= 2:
                prev, cur = records[-2].evaluation, records[-1].evaluation
                if prev and cur and cur["mae"] > prev["mae"]:
                    logger.info("early stop after iteration %d: MAE %.4f > %.4f", t, cur["mae"], prev["mae"])
                    early_stopped = True
                    break

        report = {
            "config_hash": cfg.config_hash(),
            "baseline": baseline,
            "iterations": [json.loads(r.to_json()) for r in records],
            "completed_iterations": len(records),
            "early_stopped": early_stopped,
        }
        (workspace.root / "report.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
        return report
    finally:
        workspace.release_lock()
