"""Evaluation, per-round records, seed aggregation, and CSV reporting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .corpus import Dataset, Example, Vocab
from .errors import ValidationError
from .model import ModelParams, cls_batch, cls_logits_batch
from .prompt import LabelDistribution, Pvp, score_batch

MODES = ("fedprompt", "fedcls")


def predict_distributions(
    params: ModelParams,
    examples: Sequence[Example],
    vocab: Vocab,
    mode: str,
    pvp: Optional[Pvp] = None,
    batch_size: int = 64,
) -> list[LabelDistribution]:
    """Label distributions under the given mode's scoring rule."""
    if mode == "fedprompt":
        if pvp is None:
            raise ValidationError("fedprompt scoring needs a pvp")
        return score_batch(params, pvp, examples, vocab, params.config.max_seq_len, batch_size)
    if mode != "fedcls":
        raise ValidationError(f"unknown mode {mode!r}")
    out: list[LabelDistribution] = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        batch = cls_batch(chunk, vocab, params.config.max_seq_len, labels=[0] * len(chunk))
        logits = cls_logits_batch(params, batch)
        z = logits - logits.max(-1, keepdims=True)
        e = np.exp(z)
        for row in e / e.sum(-1, keepdims=True):
            out.append(LabelDistribution(probs=row))
    return out


def evaluate(
    params: ModelParams,
    test: Dataset,
    vocab: Vocab,
    mode: str,
    pvp: Optional[Pvp] = None,
    batch_size: int = 64,
) -> float:
    """Exact fraction of argmax predictions matching gold labels."""
    if not test.examples:
        raise ValidationError("cannot evaluate on an empty dataset")
    if any(ex.gold_label is None for ex in test.examples):
        raise ValidationError("evaluation set contains unlabeled examples")
    dists = predict_distributions(params, test.examples, vocab, mode, pvp, batch_size)
    correct = sum(
        1 for ex, d in zip(test.examples, dists) if d.argmax == ex.gold_label
    )
    return correct / len(test.examples)


@dataclass
class RoundRecord:
    round: int
    mode: str
    test_accuracy: float
    participants: list[int] = field(default_factory=list)
    scanned: int = 0
    kept: int = 0
    precision: Optional[float] = None
    mean_confidence: Optional[float] = None
    gate_open: bool = False
    wall_time: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.test_accuracy <= 1.0:
            raise ValidationError("test_accuracy must lie in [0, 1]")


@dataclass
class SweepRow:
    n_labeled: int
    gamma: float
    mode: str
    mean_accuracy: float
    std_accuracy: float
    relative: Optional[float] = None
    gain: Optional[float] = None


def best_accuracy(history: Sequence[RoundRecord]) -> float:
    if not history:
        raise ValidationError("history is empty")
    return max(r.test_accuracy for r in history)


def aggregate_seeds(histories: Sequence[Sequence[RoundRecord]]) -> tuple[float, float]:
    """Mean and population standard deviation of best accuracy per seed."""
    if not histories:
        raise ValidationError("aggregate_seeds needs at least one history")
    accs = [best_accuracy(h) for h in histories]
    mean = sum(accs) / len(accs)
    var = sum((a - mean) ** 2 for a in accs) / len(accs)
    return mean, math.sqrt(var)


def relative_performance(accuracy: float, fullset_accuracy: float) -> Optional[float]:
    if fullset_accuracy == 0:
        return None
    return accuracy / fullset_accuracy


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


HISTORY_COLUMNS = [
    "seed",
    "round",
    "mode",
    "n_labeled",
    "gamma",
    "test_accuracy",
    "scanned",
    "kept",
    "precision",
    "gate_open",
    "wall_time",
]


def write_history_csv(
    history: Sequence[RoundRecord],
    path,
    seed: int,
    n_labeled: int,
    gamma: float,
) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for r in history:
            w.writerow(
                [
                    seed,
                    r.round,
                    r.mode,
                    n_labeled,
                    _fmt(float(gamma)),
                    _fmt(r.test_accuracy),
                    r.scanned,
                    r.kept,
                    _fmt(r.precision),
                    _fmt(r.gate_open),
                    _fmt(r.wall_time),
                ]
            )


def read_history_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


SUMMARY_COLUMNS = [
    "n_labeled",
    "gamma",
    "mode",
    "mean_accuracy",
    "std_accuracy",
    "relative",
    "gain",
]


def write_summary_csv(rows: Sequence[SweepRow], path) -> None:
    ordered = sorted(rows, key=lambda r: (r.n_labeled, r.gamma, r.mode))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for r in ordered:
            w.writerow(
                [
                    r.n_labeled,
                    _fmt(float(r.gamma)),
                    r.mode,
                    _fmt(r.mean_accuracy),
                    _fmt(r.std_accuracy),
                    _fmt(r.relative),
                    _fmt(r.gain),
                ]
            )
