"""Dataset ingestion, synthetic task generation, vocabulary and splits.

Tokenization is lowercase whitespace splitting with punctuation broken
out into standalone tokens. That keeps verbalizers single tokens by
construction, which is the only property the prompt machinery needs.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from typing import Optional

from .errors import ValidationError
from .rng import TAG_SPLIT, TAG_SYNTH, derive_rng

MASK_TOKEN = "[MASK]"
PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
CLS_TOKEN = "[CLS]"
SPECIAL_TOKENS = (MASK_TOKEN, PAD_TOKEN, UNK_TOKEN, CLS_TOKEN)
MASK_ID, PAD_ID, UNK_ID, CLS_ID = 0, 1, 2, 3
NUM_SPECIALS = 4

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens; each punctuation mark is its own token."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Example:
    id: int
    text_a: str
    text_b: Optional[str] = None
    gold_label: Optional[int] = None
    split: str = "train"


@dataclass
class Dataset:
    examples: list[Example]
    label_names: list[str]
    provenance: str = "file"

    def __post_init__(self):
        if not self.label_names:
            raise ValidationError("label_names must be non-empty")
        if len(set(self.label_names)) != len(self.label_names):
            raise ValidationError("label_names contain duplicates")
        for i, ex in enumerate(self.examples):
            if ex.id != i:
                raise ValidationError(f"example ids must be 0..n-1 in order, got {ex.id} at {i}")
            if not ex.text_a:
                raise ValidationError(f"example {i}: text_a is empty")
            if ex.gold_label is not None and not (0 <= ex.gold_label < len(self.label_names)):
                raise ValidationError(f"example {i}: gold_label {ex.gold_label} out of range")

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    def class_counts(self) -> list[int]:
        counts = [0] * self.num_classes
        for ex in self.examples:
            if ex.gold_label is not None:
                counts[ex.gold_label] += 1
        return counts


@dataclass
class SynthSpec:
    num_classes: int
    examples_per_class: int
    keywords_per_class: int = 4
    noise_word_count: int = 8
    pair_mode: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        for name in ("examples_per_class", "keywords_per_class", "noise_word_count"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")


@dataclass
class Vocab:
    token_to_id: dict[str, int]
    id_to_token: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.id_to_token:
            self.id_to_token = [""] * len(self.token_to_id)
            for tok, i in self.token_to_id.items():
                self.id_to_token[i] = tok

    def __len__(self) -> int:
        return len(self.token_to_id)

    def encode(self, tokens: list[str]) -> list[int]:
        get = self.token_to_id.get
        return [get(t, UNK_ID) for t in tokens]

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)


def load_jsonl(path, label_names: list[str]) -> Dataset:
    """Read {"text_a": str, "text_b"?: str, "label"?: str} lines."""
    examples: list[Example] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict) or "text_a" not in obj:
                raise ValidationError(f"{path}: line {lineno}: expected object with text_a")
            text_a = obj["text_a"]
            if not isinstance(text_a, str) or not text_a:
                raise ValidationError(f"{path}: line {lineno}: text_a must be a non-empty string")
            gold = None
            if obj.get("label") is not None:
                label = obj["label"]
                if label not in label_names:
                    raise ValidationError(f"{path}: line {lineno}: unknown label {label!r}")
                gold = label_names.index(label)
            examples.append(
                Example(id=len(examples), text_a=text_a, text_b=obj.get("text_b"), gold_label=gold)
            )
    return Dataset(examples=examples, label_names=list(label_names), provenance="file")


def write_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in dataset.examples:
            obj: dict = {"text_a": ex.text_a}
            if ex.text_b is not None:
                obj["text_b"] = ex.text_b
            if ex.gold_label is not None:
                obj["label"] = dataset.label_names[ex.gold_label]
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


# Class names double as verbalizer tokens for the synthetic task.
_CLASS_NAMES = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel",
    "india", "juliet", "kilo", "lima", "mike", "november", "oscar", "papa",
    "quebec", "romeo", "sierra", "tango", "uniform", "victor", "whiskey",
    "xray", "yankee", "zulu",
]

# Pool split into per-class keyword slices; leftovers become shared noise.
_WORD_BANK = [
    "river", "stone", "harbor", "lantern", "meadow", "copper", "thunder", "violin",
    "orchard", "saddle", "mirror", "anchor", "barley", "canyon", "ember", "falcon",
    "garnet", "hollow", "ivory", "juniper", "kettle", "ledger", "marble", "nectar",
    "onyx", "parlor", "quarry", "ribbon", "spruce", "timber", "urchin", "velvet",
    "willow", "zephyr", "basket", "cinder", "drift", "engine", "fable", "glacier",
    "hamlet", "island", "jigsaw", "knoll", "lagoon", "mantle", "needle", "orbit",
    "pebble", "quill", "rudder", "shingle", "trellis", "umber", "vessel", "wharf",
    "yarrow", "zenith", "abbey", "bellows", "cobble", "dapple", "eyrie", "fjord",
    "gully", "heath", "inlet", "jetty", "kelp", "loom", "moss", "nook",
    "oriole", "prairie", "reef", "sable", "thicket", "upland", "vale", "warren",
    "acorn", "bramble", "crest", "dune", "elm", "fern", "grove", "hazel",
    "iris", "jade", "kiln", "larch", "maple", "nettle", "oak", "pine",
    "quartz", "rowan", "sage", "tarn", "umbra", "vine", "wren", "yew",
    "ash", "birch", "cedar", "dell", "espresso", "flint", "gorse", "holly",
    "ingot", "jasper", "krill", "lichen", "mica", "niche", "opal", "petal",
    "quay", "ridge", "shale", "tulip", "urn", "verge", "wicker", "yonder",
]

_NOISE_BANK = [
    "the", "a", "and", "with", "near", "over", "under", "beside", "toward",
    "quiet", "bright", "heavy", "small", "plain", "early", "late", "soft",
    "old", "new", "long", "short", "warm", "cool", "wide", "narrow",
    "walked", "stood", "turned", "waited", "looked", "moved", "stayed", "passed",
]

# Fraction of task examples drawn from the "easy" regime (primary
# keywords, which the pretraining corpus ties to the class name); the
# rest use secondary keywords whose label prior pretrains to uniform,
# so they stay near chance until gold labels teach the mapping.
_EASY_RATE = 0.3
_BRIDGE_RATE = 0.25
_TRIGGER_WORD = "called"


def synth_keywords(spec: SynthSpec) -> list[list[str]]:
    """Disjoint per-class keyword sets, deterministic in the seed."""
    rng = derive_rng(spec.seed, TAG_SYNTH, 0)
    bank = list(_WORD_BANK)
    need = spec.num_classes * spec.keywords_per_class
    extra = [f"term{i}" for i in range(max(0, need + 16 - len(bank)))]
    bank = bank + extra
    order = rng.permutation(len(bank))
    shuffled = [bank[i] for i in order]
    return [
        shuffled[c * spec.keywords_per_class : (c + 1) * spec.keywords_per_class]
        for c in range(spec.num_classes)
    ]


def _keyword_pools(spec: SynthSpec) -> tuple[list[str], list[list[str]], list[list[str]], list[str]]:
    label_names = _CLASS_NAMES[: spec.num_classes]
    keyword_sets = synth_keywords(spec)
    used = {w for ks in keyword_sets for w in ks}
    noise_pool = [
        w for w in _NOISE_BANK
        if w not in used and w not in label_names and w != _TRIGGER_WORD
    ]
    half = (spec.keywords_per_class + 1) // 2
    primary = [ks[:half] for ks in keyword_sets]
    secondary = [ks[half:] or ks[:half] for ks in keyword_sets]
    return label_names, primary, secondary, noise_pool


def _compose(rng, pool: list[str], noise_pool: list[str], noise_count: int) -> list[str]:
    k = int(rng.integers(1, len(pool) + 1))
    words = [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]
    words += [noise_pool[i] for i in rng.integers(0, len(noise_pool), size=noise_count)]
    order = rng.permutation(len(words))
    return [words[i] for i in order]


def _compose_bridge(rng, primary: list[str], secondary: list[str],
                    noise_pool: list[str], noise_count: int) -> list[str]:
    words = [primary[int(rng.integers(0, len(primary)))]]
    k = int(rng.integers(1, min(2, len(secondary)) + 1))
    words += [secondary[i] for i in rng.choice(len(secondary), size=k, replace=False)]
    words += [noise_pool[i] for i in rng.integers(0, len(noise_pool), size=noise_count)]
    order = rng.permutation(len(words))
    return [words[i] for i in order]


def synth_generate(spec: SynthSpec) -> Dataset:
    """Deterministic synthetic classification task with three regimes.

    Easy examples (rate _EASY_RATE) carry the class's primary keywords,
    which the companion pretraining corpus (synth_pretrain) ties to the
    class name, so a pretrained model solves them confidently and they
    become the natural pseudo-label supply. Bridge examples (rate
    _BRIDGE_RATE) mix one primary keyword with secondary keywords:
    still confidently solvable from the primary, so pseudo-labeling
    them carries secondary keywords into training. Hard examples carry
    only secondary keywords, whose label association pretrains to the
    uniform prior, so they need labeled or bridged supervision.
    Keyword sets split primary/secondary down the middle and stay
    disjoint across classes; task texts never contain the class name.
    """
    spec.validate()
    if spec.num_classes > len(_CLASS_NAMES):
        raise ValidationError(f"num_classes > {len(_CLASS_NAMES)} not supported")
    label_names, primary, secondary, noise_pool = _keyword_pools(spec)

    rng = derive_rng(spec.seed, TAG_SYNTH, 1)
    examples: list[Example] = []
    for c in range(spec.num_classes):
        for _ in range(spec.examples_per_class):
            draw = rng.random()
            if draw < _EASY_RATE:
                words = _compose(rng, primary[c], noise_pool, spec.noise_word_count)
            elif draw < _EASY_RATE + _BRIDGE_RATE:
                words = _compose_bridge(rng, primary[c], secondary[c], noise_pool,
                                        spec.noise_word_count)
            else:
                words = _compose(rng, secondary[c], noise_pool, spec.noise_word_count)
            text_a = " ".join(words)
            text_b = None
            if spec.pair_mode:
                text_b = " ".join(noise_pool[i] for i in rng.integers(0, len(noise_pool), size=3))
            examples.append(
                Example(id=len(examples), text_a=text_a, text_b=text_b, gold_label=c)
            )
    return Dataset(examples=examples, label_names=label_names, provenance="synthetic")


def synth_pretrain(spec: SynthSpec) -> Dataset:
    """Unlabeled pretraining corpus for the synthetic task.

    Sentences end with the trigger bigram "called <class name>", the
    exact layout a "{a} called {mask}" prompt asks about. Primary
    sentences (40%) tie a class's primary keywords to its name; bridge
    sentences (25%) add secondary keywords of a random class next to a
    primary, teaching that the primary decides the label even in mixed
    company while secondaries stay non-predictive; ambiguity sentences
    (35%) pair pure secondary keywords with a random class name, so the
    label prior without primary evidence stays uniform and
    pure-secondary task text never gets confident.
    """
    spec.validate()
    if spec.num_classes > len(_CLASS_NAMES):
        raise ValidationError(f"num_classes > {len(_CLASS_NAMES)} not supported")
    label_names, primary, secondary, noise_pool = _keyword_pools(spec)

    rng = derive_rng(spec.seed, TAG_SYNTH, 2)
    examples: list[Example] = []
    n_primary = int(spec.examples_per_class * 0.4)
    n_bridge = int(spec.examples_per_class * 0.25)
    for c in range(spec.num_classes):
        for _ in range(n_primary):
            words = _compose(rng, primary[c], noise_pool, spec.noise_word_count)
            words += [_TRIGGER_WORD, label_names[c]]
            examples.append(Example(id=len(examples), text_a=" ".join(words)))
        for _ in range(n_bridge):
            c_sec = int(rng.integers(spec.num_classes))
            words = _compose_bridge(rng, primary[c], secondary[c_sec], noise_pool,
                                    spec.noise_word_count)
            words += [_TRIGGER_WORD, label_names[c]]
            examples.append(Example(id=len(examples), text_a=" ".join(words)))
    ambiguous = spec.num_classes * (spec.examples_per_class - n_primary - n_bridge)
    for _ in range(ambiguous):
        c_kw = int(rng.integers(spec.num_classes))
        c_label = int(rng.integers(spec.num_classes))
        words = _compose(rng, secondary[c_kw], noise_pool, spec.noise_word_count)
        words += [_TRIGGER_WORD, label_names[c_label]]
        examples.append(Example(id=len(examples), text_a=" ".join(words)))
    return Dataset(examples=examples, label_names=label_names, provenance="synthetic-pretrain")


def merge_for_vocab(*datasets: Dataset) -> Dataset:
    """Flat concatenation used only to build a shared vocabulary."""
    if not datasets:
        raise ValidationError("merge_for_vocab needs at least one dataset")
    examples = []
    for ds in datasets:
        for ex in ds.examples:
            examples.append(
                Example(id=len(examples), text_a=ex.text_a, text_b=ex.text_b,
                        gold_label=ex.gold_label)
            )
    return Dataset(
        examples=examples,
        label_names=list(datasets[0].label_names),
        provenance="merged",
    )


def build_vocab(dataset: Dataset, verbalizer_tokens: list[str]) -> Vocab:
    """Specials + corpus tokens by first occurrence + verbalizer tokens.

    Corpus tokens are assigned ids before verbalizers, so permuting
    verbalizer_tokens never shifts corpus ids.
    """
    if not dataset.examples:
        raise ValidationError("cannot build vocabulary from an empty dataset")
    token_to_id: dict[str, int] = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
    for ex in dataset.examples:
        for text in (ex.text_a, ex.text_b):
            if text is None:
                continue
            for tok in tokenize(text):
                if tok not in token_to_id:
                    token_to_id[tok] = len(token_to_id)
    for raw in verbalizer_tokens:
        pieces = tokenize(raw)
        if len(pieces) != 1:
            raise ValidationError(f"verbalizer must be a single token, got {raw!r}")
        tok = pieces[0]
        if tok not in token_to_id:
            token_to_id[tok] = len(token_to_id)
    return Vocab(token_to_id=token_to_id)


def split(
    dataset: Dataset,
    test_fraction: float,
    validation_fraction: float,
    seed: int,
) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified, disjoint, exhaustive train/test/validation split.

    Per-split totals follow largest-remainder over per-class fractional
    targets, so every split lands within +/-1 of fraction*class_size per
    class while the totals are exact.
    """
    if test_fraction < 0 or validation_fraction < 0:
        raise ValidationError("split fractions must be >= 0")
    if test_fraction + validation_fraction >= 1:
        raise ValidationError("test_fraction + validation_fraction must be < 1")

    groups: dict[Optional[int], list[int]] = {}
    for ex in dataset.examples:
        groups.setdefault(ex.gold_label, []).append(ex.id)
    group_keys = sorted(groups, key=lambda k: (k is None, k if k is not None else 0))

    def per_class_counts(fraction: float) -> dict:
        targets = {k: fraction * len(groups[k]) for k in group_keys}
        base = {k: int(targets[k]) for k in group_keys}
        total = round(fraction * len(dataset))
        deficit = total - sum(base.values())
        order = sorted(group_keys, key=lambda k: (-(targets[k] - base[k]), group_keys.index(k)))
        for k in order[:deficit]:
            base[k] += 1
        if fraction > 0:
            for k in group_keys:
                if len(groups[k]) > 0 and base[k] < 1:
                    raise ValidationError(
                        f"class {k}: too few examples ({len(groups[k])}) for a non-empty split"
                    )
        return base

    n_test = per_class_counts(test_fraction)
    n_val = per_class_counts(validation_fraction)

    rng = derive_rng(seed, TAG_SPLIT)
    picked: dict[str, list[int]] = {"train": [], "test": [], "validation": []}
    for k in group_keys:
        ids = sorted(groups[k])
        perm = [ids[i] for i in rng.permutation(len(ids))]
        t, v = n_test[k], n_val[k]
        if t + v > len(ids):
            raise ValidationError(f"class {k}: fewer examples than required by the splits")
        picked["test"] += perm[:t]
        picked["validation"] += perm[t : t + v]
        picked["train"] += perm[t + v :]

    def subset(ids: list[int], name: str) -> Dataset:
        exs = [
            replace(dataset.examples[i], id=new_id, split=name)
            for new_id, i in enumerate(sorted(ids))
        ]
        return Dataset(examples=exs, label_names=list(dataset.label_names), provenance=dataset.provenance)

    return subset(picked["train"], "train"), subset(picked["test"], "test"), subset(picked["validation"], "validation")
