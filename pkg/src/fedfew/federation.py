"""Round-based federated orchestration: selection, local training, FedAvg.

A session starts from pretrained global parameters, records the
zero-shot test accuracy as round 0, then repeats: sample participants
among clients that hold any effective training data, train each one
locally from the current global model, aggregate by example-count
weighted mean, evaluate, and optionally refresh pseudo labels for the
next round. Every random draw comes from a generator derived from
(seed, purpose, round, client), so a session is a pure function of its
inputs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .augment import AugmentConfig, capacity_gate, refresh_pseudo
from .corpus import Dataset, Vocab
from .errors import ValidationError
from .metrics import MODES, RoundRecord, evaluate
from .model import (
    Batch,
    ModelParams,
    cls_batch,
    init_opt_state,
    loss_and_grad,
    step,
)
from .partition import ClientShard
from .prompt import Pvp, prompt_batch
from .rng import TAG_LOCAL, TAG_SELECT, derive_rng


@dataclass(frozen=True)
class RoundConfig:
    mode: str
    learning_rate: float
    max_rounds: int
    participants_per_round: int = 5
    local_iterations: int = 1
    batch_size: int = 4
    patience: int = 10
    augmentation_enabled: bool = False
    optimizer: str = "adam"

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        if self.participants_per_round < 1:
            raise ValidationError("participants_per_round must be positive")
        if self.local_iterations < 1 or self.batch_size < 1:
            raise ValidationError("local_iterations and batch_size must be positive")
        if self.max_rounds < 0:
            raise ValidationError("max_rounds must be non-negative")
        if self.patience < 1:
            raise ValidationError("patience must be positive")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError("optimizer must be adam or sgd")


@dataclass
class SessionState:
    params: ModelParams
    zero_shot_test: float
    zero_shot_validation: float
    round_index: int = 0
    history: list[RoundRecord] = field(default_factory=list)


def select_clients(
    eligible_ids: Sequence[int], k: int, rng: np.random.Generator
) -> list[int]:
    ids = sorted(eligible_ids)
    if k > len(ids):
        raise ValidationError(f"cannot select {k} of {len(ids)} eligible clients")
    picked = rng.choice(len(ids), size=k, replace=False)
    return sorted(ids[int(i)] for i in picked)


def _effective_pairs(client: ClientShard, dataset: Dataset) -> list[tuple[int, int]]:
    """(example id, training label): gold for labeled, predicted for pseudo."""
    pairs = [(i, dataset.examples[i].gold_label) for i in sorted(client.labeled_ids)]
    pairs += [
        (p.example_id, p.label)
        for p in sorted(client.pseudo, key=lambda p: p.example_id)
    ]
    return pairs


def local_train(
    global_params: ModelParams,
    client: ClientShard,
    dataset: Dataset,
    vocab: Vocab,
    config: RoundConfig,
    pvp: Optional[Pvp],
    round_index: int,
    seed: int,
) -> tuple[ModelParams, int]:
    """Train a copy of the global model on the client's effective set."""
    pairs = _effective_pairs(client, dataset)
    if not pairs:
        raise ValidationError(f"client {client.client_id} has no effective training data")
    rng = derive_rng(seed, TAG_LOCAL, round_index, client.client_id)
    params = global_params.copy()
    opt = init_opt_state(config.optimizer, config.learning_rate, len(params.flat))
    max_len = params.config.max_seq_len
    for _ in range(config.local_iterations):
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), config.batch_size):
            chunk = [pairs[int(i)] for i in order[start : start + config.batch_size]]
            examples = [dataset.examples[i] for i, _ in chunk]
            labels = [l for _, l in chunk]
            if config.mode == "fedprompt":
                batch = prompt_batch(pvp, examples, vocab, max_len, labels=labels)
                _, grad = loss_and_grad(
                    params, batch, "prompt", verbalizer_ids=pvp.verbalizer_ids(vocab)
                )
            else:
                batch = cls_batch(examples, vocab, max_len, labels=labels)
                _, grad = loss_and_grad(params, batch, "cls")
            params, opt = step(params, opt, grad)
    return params, len(pairs)


def fedavg(updates: Sequence[tuple[ModelParams, float]]) -> ModelParams:
    """Example-count weighted mean of parameter vectors.

    Updates are folded in a canonical content order and summed relative
    to a base vector, so the result is bit-identical under input
    permutation and exactly equal to the update when all agree.
    """
    if not updates:
        raise ValidationError("fedavg needs at least one update")
    n = updates[0][0].flat.shape[0]
    for params, weight in updates:
        if params.flat.shape[0] != n:
            raise ValidationError("parameter vectors differ in length")
        if weight <= 0:
            raise ValidationError("weights must be positive")
    order = sorted(
        range(len(updates)),
        key=lambda i: (float(updates[i][1]), updates[i][0].flat.tobytes()),
    )
    base = updates[order[0]][0].flat
    total = 0.0
    acc = np.zeros(n, dtype=np.float64)
    for i in order:
        params, weight = updates[i]
        acc += float(weight) * (params.flat - base)
        total += float(weight)
    return ModelParams(updates[0][0].config, base + acc / total)


def _eligible(shards: dict[int, ClientShard]) -> list[int]:
    return sorted(cid for cid, s in shards.items() if s.effective_size() > 0)


def _unlabeled_holders(shards: dict[int, ClientShard]) -> list[int]:
    return sorted(cid for cid, s in shards.items() if s.unlabeled_ids)


def run_session(
    dataset: Dataset,
    test: Dataset,
    validation: Dataset,
    shards: dict[int, ClientShard],
    vocab: Vocab,
    params: ModelParams,
    round_config: RoundConfig,
    aug_config: AugmentConfig,
    pvp: Optional[Pvp],
    seed: int,
    measure_time: bool = False,
    on_record: Optional[Callable[[RoundRecord], None]] = None,
) -> SessionState:
    """Run one federated session; returns final state with full history.

    Timing is off by default so identical inputs give byte-identical
    history files; measure_time fills wall_time with real seconds.
    """
    round_config.validate()
    aug_config.validate()
    if round_config.mode == "fedprompt" and pvp is None:
        raise ValidationError("fedprompt sessions need a pvp")

    shards = {cid: s.copy() for cid, s in shards.items()}
    mode = round_config.mode
    zero_test = evaluate(params, test, vocab, mode, pvp)
    zero_val = evaluate(params, validation, vocab, mode, pvp)
    state = SessionState(params=params, zero_shot_test=zero_test, zero_shot_validation=zero_val)

    def emit(record: RoundRecord) -> None:
        state.history.append(record)
        if on_record is not None:
            on_record(record)

    emit(RoundRecord(round=0, mode=mode, test_accuracy=zero_test))

    best = zero_test
    stale = 0
    for r in range(1, round_config.max_rounds + 1):
        started = time.perf_counter() if measure_time else 0.0
        eligible = _eligible(shards)
        if not eligible:
            break
        k = min(round_config.participants_per_round, len(eligible))
        participants = select_clients(eligible, k, derive_rng(seed, TAG_SELECT, r))
        updates = [
            local_train(state.params, shards[cid], dataset, vocab, round_config, pvp, r, seed)
            for cid in participants
        ]
        state.params = fedavg(updates)
        state.round_index = r
        acc = evaluate(state.params, test, vocab, mode, pvp)

        scanned = kept = 0
        precision = mean_conf = None
        gate_open = False
        if round_config.augmentation_enabled:
            gate_open = (not aug_config.capacity_check) or capacity_gate(
                state.params, zero_val, validation, vocab, mode, pvp
            )
            if gate_open:
                holders = _unlabeled_holders(shards)
                if holders:
                    shards, stats = refresh_pseudo(
                        shards, holders, state.params, dataset, vocab,
                        mode, pvp, aug_config, r, seed,
                    )
                    scanned, kept = stats.scanned, stats.kept
                    precision, mean_conf = stats.precision, stats.mean_confidence

        elapsed = (time.perf_counter() - started) if measure_time else 0.0
        emit(
            RoundRecord(
                round=r,
                mode=mode,
                test_accuracy=acc,
                participants=participants,
                scanned=scanned,
                kept=kept,
                precision=precision,
                mean_confidence=mean_conf,
                gate_open=gate_open,
                wall_time=elapsed,
            )
        )
        if acc > best:
            best = acc
            stale = 0
        else:
            stale += 1
            if stale >= round_config.patience:
                break
    return state
