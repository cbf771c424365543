"""Deterministic RNG derivation.

Every random decision in the simulator draws from a Generator derived
from an explicit key tuple (seed, purpose tag, round, client, ...), so
runs are reproducible and independent of execution order. Generators
are never shared across tasks.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

# Purpose tags keep derived streams independent even when the other key
# components collide.
TAG_SYNTH = 1
TAG_SPLIT = 2
TAG_FEATURES = 3
TAG_SHARES = 4
TAG_ASSIGN = 5
TAG_INIT = 6
TAG_PRETRAIN = 7
TAG_SELECT = 8
TAG_LOCAL = 9
TAG_PSEUDO = 10
TAG_XI = 11


def derive_rng(*keys: int) -> np.random.Generator:
    """Build a Generator from an explicit key tuple."""
    if not keys:
        raise ValidationError("derive_rng needs at least one key")
    # SeedSequence accepts arbitrary int entropy; negatives are offset
    # into the non-negative range it requires.
    entropy = [int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
