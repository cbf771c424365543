"""Shared fixtures: small synthetic bundles and hand-settable models."""

import numpy as np
import pytest

from fedfew.corpus import SynthSpec, build_vocab, merge_for_vocab, split, synth_generate, synth_pretrain
from fedfew.model import ModelConfig, ModelParams, init_params
from fedfew.prompt import default_pvp


@pytest.fixture(scope="session")
def toy_spec() -> SynthSpec:
    return SynthSpec(num_classes=4, examples_per_class=25, seed=7)


@pytest.fixture(scope="session")
def toy_task(toy_spec):
    return synth_generate(toy_spec)


@pytest.fixture(scope="session")
def toy_bundle(toy_spec, toy_task):
    """Task splits, pvp, vocab, and a small untrained model that share one vocabulary."""
    pre = synth_pretrain(toy_spec)
    train, test, validation = split(toy_task, 0.2, 0.1, seed=7)
    pvp = default_pvp(toy_task)
    vocab = build_vocab(merge_for_vocab(pre, toy_task), list(pvp.verbalizer))
    config = ModelConfig(
        vocab_size=len(vocab),
        num_labels=toy_task.num_classes,
        d_model=16,
        num_layers=1,
        num_heads=2,
        d_ffn=32,
        max_seq_len=32,
    )
    params = init_params(config, seed=0)
    return {
        "task": toy_task,
        "pre": pre,
        "train": train,
        "test": test,
        "validation": validation,
        "pvp": pvp,
        "vocab": vocab,
        "config": config,
        "params": params,
    }


def zero_params(config: ModelConfig) -> ModelParams:
    """All-zero model: the trunk output is exactly zero, so mlm logits equal
    mlm_bias and cls logits equal cls.b regardless of input."""
    template = init_params(config, seed=0)
    return ModelParams(config=config, flat=np.zeros_like(template.flat))


def biased_prompt_params(config: ModelConfig, token_bias: dict[int, float]) -> ModelParams:
    params = zero_params(config)
    v = params.views()
    for token_id, value in token_bias.items():
        v["mlm_bias"][token_id] = value
    return params


def biased_cls_params(config: ModelConfig, label_bias: dict[int, float]) -> ModelParams:
    params = zero_params(config)
    v = params.views()
    for label, value in label_bias.items():
        v["cls.b"][label] = value
    return params
