"""Turn diffusion score tables into filtered cross-domain patch matches."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

from .diffusion import ScoreTable
from .errors import FragdiffError

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 1e-8


@dataclass(frozen=True)
class MatchPair:
    target_id: str
    source_id: str
    score: float


@dataclass
class FilterRule:
    kind: Literal["absolute-threshold", "top-percent"]
    threshold: float = DEFAULT_THRESHOLD
    percent: float = 0.10

    def __post_init__(self):
        if self.kind == "absolute-threshold" and self.threshold < 0:
            raise FragdiffError("bad-params", "threshold must be >= 0")
        if self.kind == "top-percent" and not 0 < self.percent <= 1:
            raise FragdiffError("bad-params", "percent must lie in (0, 1]")


@dataclass
class FilteredMatches:
    pairs: list[MatchPair]
    rule: FilterRule


def rank1_matches(scores: ScoreTable) -> list[MatchPair]:
    """Best-scoring source patch per target query; ties go to the lower source id.

    Queries without any scored gallery entry are dropped (with a warning)
    rather than invented. Output is ordered by query id for reproducibility.
    """
    pairs = []
    skipped = []
    for qid in sorted(scores):
        ranked = scores[qid]
        if not ranked:
            skipped.append(qid)
            continue
        best_id, best_score = min(ranked, key=lambda pair: (-pair[1], pair[0]))
        if not math.isfinite(best_score) or best_score < 0:
            raise FragdiffError("bad-score", f"query {qid}: score {best_score} out of range")
        pairs.append(MatchPair(target_id=qid, source_id=best_id, score=best_score))
    if skipped:
        logger.warning("rank-1 selection skipped %d queries with no scores: %s", len(skipped), skipped[:5])
    return pairs


def filter_matches(pairs: list[MatchPair], rule: FilterRule) -> FilteredMatches:
    """Keep pairs per the rule, ordered by descending score (ties by target id)."""
    ordered = sorted(pairs, key=lambda p: (-p.score, p.target_id))
    if rule.kind == "absolute-threshold":
        kept = [p for p in ordered if p.score >= rule.threshold]
    elif rule.kind == "top-percent":
        kept = ordered[: math.ceil(rule.percent * len(ordered))]
    else:
        raise FragdiffError("bad-params", f"unknown filter rule {rule.kind!r}")
    if not kept:
        logger.warning("no-pairs-selected: filter %s removed all %d pairs", rule.kind, len(pairs))
    return FilteredMatches(pairs=kept, rule=rule)


def write_matches(matches: FilteredMatches, path: str | Path) -> None:
    """JSON-lines match file: one {target_id, source_id, score} object per line."""
    with open(path, "w") as fh:
        for p in matches.pairs:
            fh.write(json.dumps({"target_id": p.target_id, "source_id": p.source_id, "score": p.score}, sort_keys=True))
            fh.write("\n")


def read_matches(path: str | Path) -> list[MatchPair]:
    pairs = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        pairs.append(MatchPair(target_id=obj["target_id"], source_id=obj["source_id"], score=float(obj["score"])))
    return pairs
