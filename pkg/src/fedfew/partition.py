"""Federated few-shot data partitioning.

Two stages: feature sharding spreads every training example across
clients with a per-class symmetric Dirichlet(alpha), then a Dirichlet
share vector over the xi label-holding clients decides how the n
labeled examples are revealed. Labeled examples are drawn from each
client's own shard, so label skew drags feature skew along with it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .corpus import Dataset
from .errors import AllocationError, ValidationError
from .rng import TAG_ASSIGN, TAG_FEATURES, TAG_SHARES, TAG_XI, derive_rng


@dataclass
class PartitionSpec:
    num_clients: int
    n_labeled: int
    gamma: float
    xi: int
    alpha: float = 1.0
    seed: int = 0
    select_random_xi: bool = False

    def validate(self) -> None:
        if self.num_clients < 1:
            raise ValidationError("num_clients must be >= 1")
        if self.n_labeled < 0:
            raise ValidationError("n_labeled must be >= 0")
        if self.gamma <= 0 or self.alpha <= 0:
            raise ValidationError("gamma and alpha must be > 0")
        if not (1 <= self.xi <= self.num_clients):
            raise ValidationError("xi must satisfy 1 <= xi <= num_clients")


@dataclass
class Shares:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or len(self.values) < 1:
            raise ValidationError("shares must be a non-empty vector")
        if np.any(self.values < 0) or abs(self.values.sum() - 1.0) > 1e-9:
            raise ValidationError("shares must be non-negative and sum to 1")


class PseudoLabel(NamedTuple):
    example_id: int
    label: int
    confidence: float


@dataclass
class ClientShard:
    client_id: int
    unlabeled_ids: list[int] = field(default_factory=list)
    labeled_ids: list[int] = field(default_factory=list)
    pseudo: list[PseudoLabel] = field(default_factory=list)

    def effective_size(self) -> int:
        return len(self.labeled_ids) + len(self.pseudo)

    def copy(self) -> "ClientShard":
        return ClientShard(
            client_id=self.client_id,
            unlabeled_ids=list(self.unlabeled_ids),
            labeled_ids=list(self.labeled_ids),
            pseudo=list(self.pseudo),
        )


@dataclass
class PartitionMatrix:
    counts: np.ndarray  # xi x num_classes, int

    def total(self) -> int:
        return int(self.counts.sum())


def _dirichlet(alphas: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Normalized Gamma draws, taken in log space.

    Gamma(a) equals Gamma(a + 1) * U^(1/a) in distribution, and the log
    form keeps the full dynamic range at tiny shapes where direct draws
    underflow into denormals and quantize away the skew. Degenerate
    all-underflow input still falls back to a one-hot share.
    """
    boost = rng.standard_gamma(alphas + 1.0)
    u = rng.random(len(alphas))
    with np.errstate(divide="ignore"):
        logw = np.log(boost) + np.log(u) / alphas
    top = logw.max()
    if not np.isfinite(top):
        out = np.zeros(len(alphas))
        out[int(rng.integers(len(alphas)))] = 1.0
        return out
    w = np.exp(logw - top)
    return w / w.sum()


def largest_remainder(shares: np.ndarray, n: int) -> list[int]:
    """Integer allocation of n by shares; ties go to the lower index."""
    shares = np.asarray(shares, dtype=np.float64)
    exact = shares * n
    base = np.floor(exact).astype(int)
    remainder = int(n - base.sum())
    order = sorted(range(len(shares)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:remainder]:
        base[i] += 1
    return [int(x) for x in base]


def partition_features(
    train: Dataset, num_clients: int, alpha: float, rng: np.random.Generator
) -> list[ClientShard]:
    """Assign every train example to exactly one client shard."""
    if num_clients < 1:
        raise ValidationError("num_clients must be >= 1")
    shards = [ClientShard(client_id=i) for i in range(num_clients)]
    groups: dict[Optional[int], list[int]] = {}
    for ex in train.examples:
        groups.setdefault(ex.gold_label, []).append(ex.id)
    keys = sorted(groups, key=lambda k: (k is None, k if k is not None else 0))
    for k in keys:
        ids = sorted(groups[k])
        perm = [ids[i] for i in rng.permutation(len(ids))]
        props = _dirichlet(np.full(num_clients, float(alpha)), rng)
        counts = largest_remainder(props, len(ids))
        start = 0
        for cid, cnt in enumerate(counts):
            shards[cid].unlabeled_ids.extend(perm[start : start + cnt])
            start += cnt
    for shard in shards:
        shard.unlabeled_ids.sort()
    return shards


def dirichlet_shares(gamma: float, xi: int, rng: np.random.Generator) -> Shares:
    """Labeled-quota shares z with concentration gamma over a uniform base
    measure: per-coordinate Gamma shape is gamma / xi."""
    if gamma <= 0 or xi < 1:
        raise ValidationError("gamma must be > 0 and xi >= 1")
    return Shares(values=_dirichlet(np.full(xi, float(gamma) / xi), rng))


def allocate_quotas(shares: Shares, n: int) -> list[int]:
    if n < 0:
        raise ValidationError("n must be >= 0")
    return largest_remainder(shares.values, n)


def assign_labels(
    train: Dataset,
    shards: list[ClientShard],
    quotas: list[int],
    xi_client_ids: list[int],
    rng: np.random.Generator,
) -> tuple[list[ClientShard], PartitionMatrix]:
    """Reveal quota_i labels inside each selected client's own shard.

    Quotas exceeding a client's pool are clamped and the surplus is
    re-spread by largest remainder, weighted by the remaining clients'
    spare capacity.
    """
    if len(set(xi_client_ids)) != len(xi_client_ids):
        raise ValidationError("xi_client_ids must be distinct")
    if len(quotas) != len(xi_client_ids):
        raise ValidationError("quotas and xi_client_ids must have equal length")
    by_id = {s.client_id: s for s in shards}
    caps = np.array([len(by_id[cid].unlabeled_ids) for cid in xi_client_ids], dtype=int)
    n = int(sum(quotas))
    if n > caps.sum():
        raise AllocationError(f"labeled quota {n} exceeds pool capacity {caps.sum()}")

    alloc = np.array(quotas, dtype=int)
    for _ in range(len(alloc) + 2):
        over = alloc - caps
        surplus = int(over[over > 0].sum())
        if surplus == 0:
            break
        alloc = np.minimum(alloc, caps)
        spare = (caps - alloc).astype(np.float64)
        extra = largest_remainder(spare / spare.sum(), surplus)
        alloc = alloc + np.array(extra, dtype=int)
    else:
        # Float pathologies only; fill remaining surplus greedily.
        alloc = np.minimum(alloc, caps)
        missing = n - int(alloc.sum())
        for i in np.argsort(-(caps - alloc)):
            take = min(missing, int(caps[i] - alloc[i]))
            alloc[i] += take
            missing -= take
            if missing == 0:
                break

    num_classes = train.num_classes
    matrix = np.zeros((len(xi_client_ids), num_classes), dtype=int)
    for row, (cid, quota) in enumerate(zip(xi_client_ids, alloc)):
        shard = by_id[cid]
        if quota == 0:
            continue
        pool = np.array(sorted(shard.unlabeled_ids), dtype=int)
        chosen = np.sort(rng.choice(pool, size=int(quota), replace=False))
        chosen_set = set(int(i) for i in chosen)
        shard.labeled_ids = sorted(set(shard.labeled_ids) | chosen_set)
        shard.unlabeled_ids = [i for i in shard.unlabeled_ids if i not in chosen_set]
        for ex_id in chosen_set:
            gold = train.examples[ex_id].gold_label
            if gold is not None:
                matrix[row, gold] += 1
    return shards, PartitionMatrix(counts=matrix)


def build_partition(
    train: Dataset, spec: PartitionSpec
) -> tuple[list[ClientShard], PartitionMatrix, Shares]:
    """Full pipeline: feature shards, shares, quotas, label reveal."""
    spec.validate()
    if spec.n_labeled > len(train):
        raise ValidationError("n_labeled exceeds the number of training examples")
    shards = partition_features(
        train, spec.num_clients, spec.alpha, derive_rng(spec.seed, TAG_FEATURES)
    )
    shares = dirichlet_shares(spec.gamma, spec.xi, derive_rng(spec.seed, TAG_SHARES))
    quotas = allocate_quotas(shares, spec.n_labeled)
    if spec.select_random_xi:
        rng = derive_rng(spec.seed, TAG_XI)
        xi_ids = sorted(int(i) for i in rng.choice(spec.num_clients, size=spec.xi, replace=False))
    else:
        xi_ids = list(range(spec.xi))
    shards, matrix = assign_labels(
        train, shards, quotas, xi_ids, derive_rng(spec.seed, TAG_ASSIGN)
    )
    return shards, matrix, shares


def emit_heatmap(matrix: PartitionMatrix, path) -> None:
    """CSV of integer counts, one client per row, no header."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in matrix.counts:
            fh.write(",".join(str(int(v)) for v in row) + "\n")


def read_heatmap(path) -> PartitionMatrix:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([int(v) for v in line.split(",")])
    return PartitionMatrix(counts=np.array(rows, dtype=int))


def partition_manifest(shards: list[ClientShard], matrix: PartitionMatrix, spec: PartitionSpec) -> dict:
    return {
        "spec": {
            "num_clients": spec.num_clients,
            "n_labeled": spec.n_labeled,
            "gamma": spec.gamma,
            "xi": spec.xi,
            "alpha": spec.alpha,
            "seed": spec.seed,
            "select_random_xi": spec.select_random_xi,
        },
        "matrix_total": matrix.total(),
        "clients": [
            {
                "client_id": s.client_id,
                "labeled_ids": list(s.labeled_ids),
                "unlabeled_ids": list(s.unlabeled_ids),
            }
            for s in shards
        ],
    }
