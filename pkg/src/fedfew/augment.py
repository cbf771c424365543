"""Pseudo-labeling augmentation with capacity and confidence filters.

Each gated round the current global model annotates a budgeted sample of
every client's unlabeled pool. Predictions survive only above a
confidence threshold, and the whole stage is skipped when the model
scores below its own zero-shot baseline on held-out validation data.
Gold labels of unlabeled examples are consulted once, to measure
precision; they never reach a training batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .corpus import Dataset, Vocab
from .errors import ValidationError
from .metrics import evaluate, predict_distributions
from .model import ModelParams
from .partition import ClientShard, PseudoLabel
from .prompt import Pvp
from .rng import TAG_PSEUDO, derive_rng


@dataclass(frozen=True)
class AugmentConfig:
    confidence_threshold: float = 0.9
    per_client_budget: int = 100
    cumulative: bool = False
    capacity_check: bool = True
    full_scan: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValidationError("confidence_threshold must lie in [0, 1]")
        if self.per_client_budget < 1:
            raise ValidationError("per_client_budget must be positive")


@dataclass
class AugmentStats:
    scanned: int = 0
    kept: int = 0
    precision: Optional[float] = None
    scanned_precision: Optional[float] = None
    mean_confidence: Optional[float] = None

    def __post_init__(self):
        if self.kept > self.scanned:
            raise ValidationError("kept count cannot exceed scanned count")


def capacity_gate(
    params: ModelParams,
    zero_shot_accuracy: float,
    validation: Dataset,
    vocab: Vocab,
    mode: str,
    pvp: Optional[Pvp] = None,
) -> bool:
    """Open iff the model is at least as good as zero-shot on validation."""
    acc = evaluate(params, validation, vocab, mode, pvp)
    return acc >= zero_shot_accuracy


def pseudo_label(
    params: ModelParams,
    client: ClientShard,
    dataset: Dataset,
    vocab: Vocab,
    mode: str,
    pvp: Optional[Pvp],
    config: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[list[PseudoLabel], AugmentStats]:
    """Annotate a budgeted uniform sample of the client's unlabeled pool."""
    pool = sorted(client.unlabeled_ids)
    if not pool:
        raise ValidationError("client has no unlabeled examples")
    if config.full_scan or config.per_client_budget >= len(pool):
        scanned_ids = pool
    else:
        picked = rng.choice(len(pool), size=config.per_client_budget, replace=False)
        scanned_ids = sorted(pool[i] for i in picked)

    examples = [dataset.examples[i] for i in scanned_ids]
    dists = predict_distributions(params, examples, vocab, mode, pvp)

    kept: list[PseudoLabel] = []
    scanned_correct = 0
    kept_correct = 0
    for ex, dist in zip(examples, dists):
        hit = ex.gold_label is not None and dist.argmax == ex.gold_label
        scanned_correct += hit
        if dist.confidence >= config.confidence_threshold:
            kept.append(PseudoLabel(ex.id, dist.argmax, dist.confidence))
            kept_correct += hit
    stats = AugmentStats(
        scanned=len(scanned_ids),
        kept=len(kept),
        precision=kept_correct / len(kept) if kept else None,
        scanned_precision=scanned_correct / len(scanned_ids),
        mean_confidence=(
            sum(p.confidence for p in kept) / len(kept) if kept else None
        ),
    )
    return kept, stats


def _merge_cumulative(
    old: Sequence[PseudoLabel], new: Sequence[PseudoLabel]
) -> list[PseudoLabel]:
    # Highest confidence wins per example id; newer entry wins exact ties.
    best: dict[int, PseudoLabel] = {p.example_id: p for p in old}
    for p in new:
        prev = best.get(p.example_id)
        if prev is None or p.confidence >= prev.confidence:
            best[p.example_id] = p
    return [best[i] for i in sorted(best)]


def refresh_pseudo(
    shards: dict[int, ClientShard],
    participants: Sequence[int],
    params: ModelParams,
    dataset: Dataset,
    vocab: Vocab,
    mode: str,
    pvp: Optional[Pvp],
    config: AugmentConfig,
    round_index: int,
    seed: int,
) -> tuple[dict[int, ClientShard], AugmentStats]:
    """Re-annotate the given clients' pools; returns new shards and pooled stats."""
    out = {cid: shard.copy() for cid, shard in shards.items()}
    total_scanned = 0
    total_kept = 0
    kept_correct = 0.0
    scanned_correct = 0.0
    conf_sum = 0.0
    for cid in sorted(participants):
        shard = out[cid]
        if not shard.unlabeled_ids:
            continue
        rng = derive_rng(seed, TAG_PSEUDO, round_index, cid)
        kept, stats = pseudo_label(params, shard, dataset, vocab, mode, pvp, config, rng)
        shard.pseudo = (
            _merge_cumulative(shard.pseudo, kept) if config.cumulative else list(kept)
        )
        total_scanned += stats.scanned
        total_kept += stats.kept
        if stats.precision is not None:
            kept_correct += stats.precision * stats.kept
        scanned_correct += (stats.scanned_precision or 0.0) * stats.scanned
        if stats.mean_confidence is not None:
            conf_sum += stats.mean_confidence * stats.kept
    pooled = AugmentStats(
        scanned=total_scanned,
        kept=total_kept,
        precision=kept_correct / total_kept if total_kept else None,
        scanned_precision=scanned_correct / total_scanned if total_scanned else None,
        mean_confidence=conf_sum / total_kept if total_kept else None,
    )
    return out, pooled
