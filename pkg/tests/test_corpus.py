"""Dataset loading, synthetic generation, vocabulary, and splitting."""

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedfew.corpus import (
    CLS_ID,
    MASK_ID,
    PAD_ID,
    UNK_ID,
    Dataset,
    Example,
    SynthSpec,
    build_vocab,
    load_jsonl,
    merge_for_vocab,
    split,
    synth_generate,
    synth_keywords,
    synth_pretrain,
    tokenize,
    write_jsonl,
)
from fedfew.errors import ValidationError


def test_tokenize_lowercases_and_splits_punctuation():
    assert tokenize("It was great.") == ["it", "was", "great", "."]
    assert tokenize("A-B c!") == ["a", "-", "b", "c", "!"]
    assert tokenize("") == []


def test_special_ids_are_fixed_and_distinct():
    assert (MASK_ID, PAD_ID, UNK_ID, CLS_ID) == (0, 1, 2, 3)


class TestLoadJsonl:
    def test_two_line_file(self, tmp_path):
        path = tmp_path / "data.jsonl"
        path.write_text(
            json.dumps({"text_a": "good stuff", "label": "pos"})
            + "\n"
            + json.dumps({"text_a": "bad stuff", "text_b": "really", "label": "neg"})
            + "\n"
        )
        ds = load_jsonl(path, ["pos", "neg"])
        assert [ex.id for ex in ds.examples] == [0, 1]
        assert ds.examples[0].gold_label == 0
        assert ds.examples[1].gold_label == 1
        assert ds.examples[1].text_b == "really"

    def test_empty_file_gives_empty_dataset(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        ds = load_jsonl(path, ["pos", "neg"])
        assert len(ds) == 0

    def test_unknown_label_names_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(
            json.dumps({"text_a": "x y", "label": "pos"})
            + "\n"
            + json.dumps({"text_a": "y z", "label": "mystery"})
            + "\n"
        )
        with pytest.raises(ValidationError, match="line 2"):
            load_jsonl(path, ["pos", "neg"])

    def test_malformed_json_names_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"text_a": "ok", "label": "pos"}\n{not json\n')
        with pytest.raises(ValidationError, match="line 2"):
            load_jsonl(path, ["pos"])

    def test_round_trip(self, tmp_path):
        ds = Dataset(
            examples=[
                Example(id=0, text_a="alpha beta", text_b=None, gold_label=1),
                Example(id=1, text_a="gamma", text_b="delta", gold_label=None),
            ],
            label_names=["a", "b"],
        )
        path = tmp_path / "rt.jsonl"
        write_jsonl(ds, path)
        back = load_jsonl(path, ["a", "b"])
        assert [(e.text_a, e.text_b, e.gold_label) for e in back.examples] == [
            ("alpha beta", None, 1),
            ("gamma", "delta", None),
        ]


class TestDatasetInvariants:
    def test_ids_must_be_ordered(self):
        with pytest.raises(ValidationError):
            Dataset(examples=[Example(id=1, text_a="x")], label_names=["a"])

    def test_gold_label_range(self):
        with pytest.raises(ValidationError):
            Dataset(
                examples=[Example(id=0, text_a="x", gold_label=3)],
                label_names=["a", "b"],
            )

    def test_duplicate_label_names(self):
        with pytest.raises(ValidationError):
            Dataset(examples=[], label_names=["a", "a"])


class TestSynthGenerate:
    def test_size_and_balance(self):
        ds = synth_generate(SynthSpec(num_classes=4, examples_per_class=25, seed=7))
        assert len(ds) == 100
        assert ds.class_counts() == [25, 25, 25, 25]

    def test_deterministic(self, toy_spec):
        a = synth_generate(toy_spec)
        b = synth_generate(toy_spec)
        assert [(e.text_a, e.gold_label) for e in a.examples] == [
            (e.text_a, e.gold_label) for e in b.examples
        ]

    def test_every_example_mentions_its_class_keywords(self, toy_spec, toy_task):
        pools = synth_keywords(toy_spec)
        for ex in toy_task.examples:
            words = set(tokenize(ex.text_a))
            assert words & set(pools[ex.gold_label]), ex.text_a

    def test_keyword_pools_are_disjoint(self, toy_spec):
        pools = synth_keywords(toy_spec)
        seen: set[str] = set()
        for pool in pools:
            assert len(pool) == toy_spec.keywords_per_class
            assert not seen & set(pool)
            seen |= set(pool)

    def test_label_names_distinct(self, toy_task):
        assert len(set(toy_task.label_names)) == toy_task.num_classes

    def test_pair_mode_fills_text_b(self):
        ds = synth_generate(SynthSpec(num_classes=2, examples_per_class=5, pair_mode=True, seed=3))
        assert all(ex.text_b for ex in ds.examples)

    def test_rejects_too_many_classes(self):
        with pytest.raises(ValidationError):
            synth_generate(SynthSpec(num_classes=40, examples_per_class=2, seed=0))


def test_synth_pretrain_is_unlabeled_and_deterministic(toy_spec):
    pre = synth_pretrain(toy_spec)
    assert len(pre) > 0
    assert all(ex.gold_label is None for ex in pre.examples)
    again = synth_pretrain(toy_spec)
    assert [e.text_a for e in pre.examples] == [e.text_a for e in again.examples]


def test_pretrain_mentions_every_label_name(toy_spec):
    pre = synth_pretrain(toy_spec)
    task = synth_generate(toy_spec)
    seen = set()
    for ex in pre.examples:
        seen |= set(tokenize(ex.text_a))
    assert set(task.label_names) <= seen


class TestBuildVocab:
    def test_union_size_oracle(self, toy_task):
        verbalizers = list(toy_task.label_names)
        vocab = build_vocab(toy_task, verbalizers)
        distinct = set()
        for ex in toy_task.examples:
            distinct |= set(tokenize(ex.text_a))
        distinct |= set(verbalizers)
        assert len(vocab) == 4 + len(distinct)

    def test_verbalizers_present_with_nonspecial_ids(self):
        ds = Dataset(
            examples=[Example(id=0, text_a="It was great")],
            label_names=["pos", "neg"],
        )
        vocab = build_vocab(ds, ["good", "bad"])
        for tok in ("it", "was", "great", "good", "bad"):
            assert vocab.id_of(tok) >= 4

    def test_multiword_verbalizer_rejected(self):
        ds = Dataset(examples=[Example(id=0, text_a="x y")], label_names=["a"])
        with pytest.raises(ValidationError):
            build_vocab(ds, ["very good"])

    def test_corpus_ids_stable_under_verbalizer_order(self, toy_task):
        names = list(toy_task.label_names)
        a = build_vocab(toy_task, names)
        b = build_vocab(toy_task, names[::-1])
        word = tokenize(toy_task.examples[0].text_a)[0]
        assert a.id_of(word) == b.id_of(word)

    def test_unknown_token_encodes_to_unk(self, toy_task):
        vocab = build_vocab(toy_task, list(toy_task.label_names))
        assert vocab.encode(["zzzzzz"]) == [UNK_ID]

    def test_empty_corpus_rejected(self):
        ds = Dataset(examples=[], label_names=["a"])
        with pytest.raises(ValidationError):
            build_vocab(ds, ["a"])


def test_merge_for_vocab_covers_both(toy_spec, toy_task):
    pre = synth_pretrain(toy_spec)
    merged = merge_for_vocab(pre, toy_task)
    texts = {ex.text_a for ex in merged.examples}
    assert pre.examples[0].text_a in texts
    assert toy_task.examples[0].text_a in texts


class TestSplit:
    def test_sizes(self):
        ds = synth_generate(SynthSpec(num_classes=4, examples_per_class=25, seed=7))
        train, test, validation = split(ds, 0.2, 0.1, seed=0)
        assert (len(train), len(test), len(validation)) == (70, 20, 10)

    def test_stratified_within_one(self):
        ds = synth_generate(SynthSpec(num_classes=4, examples_per_class=25, seed=7))
        train, test, validation = split(ds, 0.2, 0.1, seed=0)
        for part, target in ((train, 70), (test, 20), (validation, 10)):
            counts = part.class_counts()
            assert max(counts) - min(counts) <= 1
            assert sum(counts) == target

    def test_zero_fractions_keep_everything_in_train(self, toy_task):
        train, test, validation = split(toy_task, 0.0, 0.0, seed=1)
        assert len(train) == len(toy_task)
        assert len(test) == 0 and len(validation) == 0

    def test_deterministic(self, toy_task):
        a = split(toy_task, 0.2, 0.1, seed=5)
        b = split(toy_task, 0.2, 0.1, seed=5)
        for left, right in zip(a, b):
            assert [e.text_a for e in left.examples] == [e.text_a for e in right.examples]

    def test_rejects_fractions_over_one(self, toy_task):
        with pytest.raises(ValidationError):
            split(toy_task, 0.8, 0.3, seed=0)

    @settings(max_examples=20, deadline=None)
    @given(
        tf=st.floats(0.0, 0.4),
        vf=st.floats(0.0, 0.3),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_partition_property(self, tf, vf, seed):
        ds = synth_generate(SynthSpec(num_classes=3, examples_per_class=20, seed=11))
        try:
            parts = split(ds, tf, vf, seed=seed)
        except ValidationError:
            # Tiny positive fractions that cannot give every class an example
            # are rejected rather than silently unstratified.
            return
        texts = [f"{e.text_a}|{e.gold_label}" for part in parts for e in part.examples]
        original = [f"{e.text_a}|{e.gold_label}" for e in ds.examples]
        assert sorted(texts) == sorted(original)
