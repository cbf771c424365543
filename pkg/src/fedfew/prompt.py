"""Pattern-verbalizer prompting.

A pattern turns an example into a cloze sequence with one mask slot; a
verbalizer names one vocabulary token per label. Classification reads
the MLM logits of the verbalizer tokens at the mask position and
softmaxes over just those.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .corpus import MASK_ID, UNK_ID, Dataset, Example, Vocab, tokenize
from .errors import ValidationError
from .model import Batch, ModelParams, mlm_logits_batch, pad_sequences

# Cloze templates from the reference tasks, field slots left abstract.
PATTERN_PRESETS = {
    "agnews": "{a} ( {mask} ) {b}",
    "mnli": '" {a} " ? {mask} , " {b} "',
    "yahoo": "[ category : ] {a} {mask} {b}",
    "yelp": "it was {mask} . {a}",
}

_PLACEHOLDER = re.compile(r"(\{mask\}|\{a\}|\{b\})")


def _parse_pattern(pattern: str) -> list[tuple[str, object]]:
    """Split a template into ("lit", text) and ("slot", name) segments."""
    segments: list[tuple[str, object]] = []
    for part in _PLACEHOLDER.split(pattern):
        if not part:
            continue
        if part in ("{mask}", "{a}", "{b}"):
            segments.append(("slot", part[1:-1]))
        else:
            if "{" in part or "}" in part:
                raise ValidationError(f"unknown placeholder in pattern {pattern!r}")
            segments.append(("lit", part))
    return segments


@dataclass(frozen=True)
class Pvp:
    """A cloze pattern plus an ordered label-to-token map."""

    pattern: str
    verbalizer: tuple[str, ...]

    def __post_init__(self):
        slots = [name for kind, name in _parse_pattern(self.pattern) if kind == "slot"]
        if slots.count("mask") != 1:
            raise ValidationError("pattern must contain exactly one {mask}")
        if slots.count("a") != 1:
            raise ValidationError("pattern must contain exactly one {a}")
        if slots.count("b") > 1:
            raise ValidationError("pattern may contain {b} at most once")
        if len(self.verbalizer) < 2:
            raise ValidationError("verbalizer needs one token per label, at least two")
        if len(set(self.verbalizer)) != len(self.verbalizer):
            raise ValidationError("verbalizer tokens must be distinct")
        for tok in self.verbalizer:
            if len(tokenize(tok)) != 1:
                raise ValidationError(f"verbalizer must be single token: {tok!r}")

    @property
    def uses_text_b(self) -> bool:
        return "{b}" in self.pattern

    def verbalizer_ids(self, vocab: Vocab) -> list[int]:
        ids = []
        for tok in self.verbalizer:
            i = vocab.id_of(tok)
            if i == UNK_ID and tokenize(tok) != [vocab.id_to_token[UNK_ID]]:
                raise ValidationError(f"verbalizer token {tok!r} is not in the vocabulary")
            ids.append(i)
        return ids


def apply_pattern(
    pvp: Pvp, example: Example, vocab: Vocab, max_seq_len: int
) -> tuple[list[int], int]:
    """Render the cloze sequence; only field text is ever truncated.

    On overflow the {b} field loses tokens from its tail first, then
    {a}. Literals and the mask survive, so a pattern whose fixed tokens
    alone exceed max_seq_len is rejected.
    """
    if pvp.uses_text_b and not example.text_b:
        raise ValidationError("pattern expects text_b but the example has none")
    segments = _parse_pattern(pvp.pattern)
    fields = {
        "a": vocab.encode(tokenize(example.text_a)),
        "b": vocab.encode(tokenize(example.text_b)) if example.text_b else [],
    }
    template_len = 1  # the mask
    for kind, val in segments:
        if kind == "lit":
            template_len += len(tokenize(val))
    if template_len > max_seq_len:
        raise ValidationError(
            f"pattern literals need {template_len} tokens, over the limit {max_seq_len}"
        )
    used = {"a": len(fields["a"]), "b": len(fields["b"]) if pvp.uses_text_b else 0}
    overflow = template_len + used["a"] + used["b"] - max_seq_len
    if overflow > 0:
        cut = min(used["b"], overflow)
        used["b"] -= cut
        overflow -= cut
        if overflow > 0:
            used["a"] = max(0, used["a"] - overflow)

    ids: list[int] = []
    mask_pos = -1
    for kind, val in segments:
        if kind == "lit":
            ids.extend(vocab.encode(tokenize(val)))
        elif val == "mask":
            mask_pos = len(ids)
            ids.append(MASK_ID)
        else:
            ids.extend(fields[val][: used[val]])
    return ids, mask_pos


@dataclass
class LabelDistribution:
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValidationError("label probabilities must sum to 1")
        if (self.probs < 0).any() or (self.probs > 1).any():
            raise ValidationError("label probabilities must lie in [0, 1]")

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.probs))

    @property
    def confidence(self) -> float:
        return float(self.probs[self.argmax])


def _restricted_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def score_batch(
    params: ModelParams,
    pvp: Pvp,
    examples: Sequence[Example],
    vocab: Vocab,
    max_seq_len: int,
    batch_size: int = 64,
) -> list[LabelDistribution]:
    vids = np.asarray(pvp.verbalizer_ids(vocab), dtype=np.int64)
    out: list[LabelDistribution] = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        rendered = [apply_pattern(pvp, ex, vocab, max_seq_len) for ex in chunk]
        tokens, attn = pad_sequences([ids for ids, _ in rendered])
        batch = Batch(
            tokens=tokens,
            attn_mask=attn,
            mask_positions=np.array([pos for _, pos in rendered]),
        )
        logits = mlm_logits_batch(params, batch)[:, vids]
        for row in _restricted_softmax(logits):
            out.append(LabelDistribution(probs=row))
    return out


def score(
    params: ModelParams, pvp: Pvp, example: Example, vocab: Vocab, max_seq_len: int
) -> LabelDistribution:
    return score_batch(params, pvp, [example], vocab, max_seq_len)[0]


def prompt_batch(
    pvp: Pvp,
    examples: Sequence[Example],
    vocab: Vocab,
    max_seq_len: int,
    labels: Optional[Sequence[int]] = None,
) -> Batch:
    """Training batch whose MLM target is the verbalizer token of each label.

    labels overrides the gold labels (pseudo-labeled data travels this
    way); by default every example must carry a gold label.
    """
    if labels is None:
        labels = [ex.gold_label for ex in examples]
        if any(l is None for l in labels):
            raise ValidationError("prompt_batch requires a label for every example")
    if len(labels) != len(examples):
        raise ValidationError("labels and examples differ in length")
    vid_of = {i: vocab.id_of(tok) for i, tok in enumerate(pvp.verbalizer)}
    rendered = [apply_pattern(pvp, ex, vocab, max_seq_len) for ex in examples]
    tokens, attn = pad_sequences([ids for ids, _ in rendered])
    return Batch(
        tokens=tokens,
        attn_mask=attn,
        mask_positions=np.array([pos for _, pos in rendered]),
        target_token_ids=np.array([vid_of[int(l)] for l in labels]),
    )


# Default template for synthetic-task runs. The literal is the trigger
# word the generator plants before class names, so the mask sits in
# exactly the slot where pretraining saw masked label words.
SYNTH_PATTERN = "{a} called {mask}"


def default_pvp(dataset: Dataset, pattern: Optional[str] = None) -> Pvp:
    """Verbalize each label by its own name."""
    return Pvp(
        pattern=pattern or SYNTH_PATTERN,
        verbalizer=tuple(dataset.label_names),
    )
