"""Toy masked language model: transformer encoder in plain numpy.

Forward and backward passes are written out by hand so gradients are
exact (finite-difference checkable) and parameters live in one flat
float64 vector, which is what federated averaging wants to see. The
architecture is pre-LN with learned positional embeddings, erf-form
gelu, and the token embedding tied to the MLM output projection.
Dropout is unsupported: determinism matters more than regularization at
this scale.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy.special import erf

from .corpus import CLS_ID, MASK_ID, NUM_SPECIALS, PAD_ID, Dataset, Vocab, tokenize
from .errors import ValidationError
from .rng import TAG_INIT, TAG_PRETRAIN, derive_rng

LN_EPS = 1e-5
NEG_BIAS = -1e30
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_labels: int = 2
    d_model: int = 64
    num_layers: int = 2
    num_heads: int = 4
    d_ffn: int = 128
    max_seq_len: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.vocab_size <= NUM_SPECIALS:
            raise ValidationError("vocab_size must exceed the special tokens")
        if self.num_labels < 2:
            raise ValidationError("num_labels must be >= 2")
        if self.d_model % self.num_heads != 0:
            raise ValidationError("d_model must be divisible by num_heads")
        if self.max_seq_len < 4:
            raise ValidationError("max_seq_len must be >= 4")
        if self.dropout != 0.0:
            raise ValidationError("dropout is not supported; set it to 0")


@lru_cache(maxsize=None)
def build_manifest(config: ModelConfig) -> tuple[tuple[str, tuple[int, ...], int], ...]:
    """(name, shape, offset) for every tensor, in a fixed order."""
    d, f, V, L, C = (
        config.d_model,
        config.d_ffn,
        config.vocab_size,
        config.max_seq_len,
        config.num_labels,
    )
    entries: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (V, d)),
        ("pos_emb", (L, d)),
    ]
    for i in range(config.num_layers):
        p = f"layers.{i}."
        entries += [
            (p + "ln1.g", (d,)),
            (p + "ln1.b", (d,)),
            (p + "attn.wq", (d, d)),
            (p + "attn.bq", (d,)),
            (p + "attn.wk", (d, d)),
            (p + "attn.bk", (d,)),
            (p + "attn.wv", (d, d)),
            (p + "attn.bv", (d,)),
            (p + "attn.wo", (d, d)),
            (p + "attn.bo", (d,)),
            (p + "ln2.g", (d,)),
            (p + "ln2.b", (d,)),
            (p + "ffn.w1", (d, f)),
            (p + "ffn.b1", (f,)),
            (p + "ffn.w2", (f, d)),
            (p + "ffn.b2", (d,)),
        ]
    entries += [
        ("ln_f.g", (d,)),
        ("ln_f.b", (d,)),
        ("mlm_bias", (V,)),
        ("cls.w", (d, C)),
        ("cls.b", (C,)),
    ]
    out = []
    offset = 0
    for name, shape in entries:
        out.append((name, shape, offset))
        offset += int(np.prod(shape))
    return tuple(out)


def param_count(config: ModelConfig) -> int:
    last = build_manifest(config)[-1]
    return last[2] + int(np.prod(last[1]))


@dataclass
class ModelParams:
    config: ModelConfig
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (param_count(self.config),):
            raise ValidationError("flat vector length does not match the config manifest")

    @property
    def manifest(self):
        return build_manifest(self.config)

    def views(self) -> dict[str, np.ndarray]:
        out = {}
        for name, shape, offset in self.manifest:
            out[name] = self.flat[offset : offset + int(np.prod(shape))].reshape(shape)
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(config=self.config, flat=self.flat.copy())


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), +) weights, unit LN gains, zero biases."""
    config.validate()
    rng = derive_rng(seed, TAG_INIT)
    flat = np.zeros(param_count(config), dtype=np.float64)
    params = ModelParams(config=config, flat=flat)
    v = params.views()
    d = config.d_model
    for name, arr in v.items():
        if name.endswith((".g",)):
            arr[:] = 1.0
        elif name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")) or name == "mlm_bias":
            arr[:] = 0.0
        elif arr.ndim == 2:
            fan_in = arr.shape[0] if name not in ("tok_emb", "pos_emb") else d
            bound = 1.0 / math.sqrt(fan_in)
            arr[:] = rng.uniform(-bound, bound, size=arr.shape)
        else:
            arr[:] = 0.0
    return params


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _ln_bwd(dy, cache, g):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    m1 = dxhat.mean(-1, keepdims=True)
    m2 = (dxhat * xhat).mean(-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _forward_trunk(v, config: ModelConfig, tokens: np.ndarray, attn_mask: np.ndarray):
    """Returns final hidden states (B, L, d) and caches for backward."""
    B, L = tokens.shape
    H = config.num_heads
    d = config.d_model
    dk = d // H
    scale = 1.0 / math.sqrt(dk)

    h = v["tok_emb"][tokens] + v["pos_emb"][:L][None, :, :]
    key_bias = (1.0 - attn_mask)[:, None, None, :] * NEG_BIAS

    def split_heads(x):
        return x.reshape(B, L, H, dk).transpose(0, 2, 1, 3)

    layer_caches = []
    for i in range(config.num_layers):
        p = f"layers.{i}."
        a, c1 = _ln_fwd(h, v[p + "ln1.g"], v[p + "ln1.b"])
        q = split_heads(a @ v[p + "attn.wq"] + v[p + "attn.bq"])
        k = split_heads(a @ v[p + "attn.wk"] + v[p + "attn.bk"])
        vv = split_heads(a @ v[p + "attn.wv"] + v[p + "attn.bv"])
        scores = q @ k.transpose(0, 1, 3, 2) * scale + key_bias
        scores -= scores.max(-1, keepdims=True)
        e = np.exp(scores)
        probs = e / e.sum(-1, keepdims=True)
        ctx = (probs @ vv).transpose(0, 2, 1, 3).reshape(B, L, d)
        attn_out = ctx @ v[p + "attn.wo"] + v[p + "attn.bo"]
        h1 = h + attn_out
        a2, c2 = _ln_fwd(h1, v[p + "ln2.g"], v[p + "ln2.b"])
        f1 = a2 @ v[p + "ffn.w1"] + v[p + "ffn.b1"]
        g = _gelu(f1)
        f2 = g @ v[p + "ffn.w2"] + v[p + "ffn.b2"]
        layer_caches.append((a, c1, q, k, vv, probs, ctx, a2, c2, f1, g))
        h = h1 + f2
    hf, cf = _ln_fwd(h, v["ln_f.g"], v["ln_f.b"])
    return hf, (layer_caches, cf, tokens, attn_mask)


def _backward_trunk(v, config: ModelConfig, caches, dhf, grads):
    layer_caches, cf, tokens, attn_mask = caches
    B, L = tokens.shape
    H = config.num_heads
    d = config.d_model
    dk = d // H
    scale = 1.0 / math.sqrt(dk)

    def split_heads(x):
        return x.reshape(B, L, H, dk).transpose(0, 2, 1, 3)

    def merge_heads(x):
        return x.transpose(0, 2, 1, 3).reshape(B, L, d)

    dh, dg, db = _ln_bwd(dhf, cf, v["ln_f.g"])
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db

    for i in reversed(range(config.num_layers)):
        p = f"layers.{i}."
        a, c1, q, k, vv, probs, ctx, a2, c2, f1, g = layer_caches[i]

        # FFN branch: h_out = h1 + f2
        df2 = dh
        grads[p + "ffn.w2"] += g.reshape(-1, g.shape[-1]).T @ df2.reshape(-1, d)
        grads[p + "ffn.b2"] += df2.sum((0, 1))
        dg_act = df2 @ v[p + "ffn.w2"].T
        df1 = dg_act * _gelu_grad(f1)
        grads[p + "ffn.w1"] += a2.reshape(-1, d).T @ df1.reshape(-1, df1.shape[-1])
        grads[p + "ffn.b1"] += df1.sum((0, 1))
        da2 = df1 @ v[p + "ffn.w1"].T
        dh1_ln, dg2, db2 = _ln_bwd(da2, c2, v[p + "ln2.g"])
        grads[p + "ln2.g"] += dg2
        grads[p + "ln2.b"] += db2
        dh1 = dh + dh1_ln

        # Attention branch: h1 = h + attn_out
        dattn = dh1
        grads[p + "attn.wo"] += ctx.reshape(-1, d).T @ dattn.reshape(-1, d)
        grads[p + "attn.bo"] += dattn.sum((0, 1))
        dctx = split_heads(dattn @ v[p + "attn.wo"].T)
        dprobs = dctx @ vv.transpose(0, 1, 3, 2)
        dvv = probs.transpose(0, 1, 3, 2) @ dctx
        dscores = probs * (dprobs - (dprobs * probs).sum(-1, keepdims=True))
        dq = dscores @ k * scale
        dk_ = dscores.transpose(0, 1, 3, 2) @ q * scale
        dq_m, dk_m, dv_m = merge_heads(dq), merge_heads(dk_), merge_heads(dvv)
        a2d = a.reshape(-1, d)
        grads[p + "attn.wq"] += a2d.T @ dq_m.reshape(-1, d)
        grads[p + "attn.bq"] += dq_m.sum((0, 1))
        grads[p + "attn.wk"] += a2d.T @ dk_m.reshape(-1, d)
        grads[p + "attn.bk"] += dk_m.sum((0, 1))
        grads[p + "attn.wv"] += a2d.T @ dv_m.reshape(-1, d)
        grads[p + "attn.bv"] += dv_m.sum((0, 1))
        da = dq_m @ v[p + "attn.wq"].T + dk_m @ v[p + "attn.wk"].T + dv_m @ v[p + "attn.wv"].T
        dh_ln, dg1, db1 = _ln_bwd(da, c1, v[p + "ln1.g"])
        grads[p + "ln1.g"] += dg1
        grads[p + "ln1.b"] += db1
        dh = dh1 + dh_ln

    np.add.at(grads["tok_emb"], tokens, dh)
    grads["pos_emb"][:L] += dh.sum(0)


def _softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and dloss/dlogits over a batch."""
    B = logits.shape[0]
    z = logits - logits.max(-1, keepdims=True)
    lse = np.log(np.exp(z).sum(-1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(B), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(B), labels] -= 1.0
    return loss, dlogits / B


@dataclass
class Batch:
    tokens: np.ndarray
    attn_mask: np.ndarray
    mask_positions: Optional[np.ndarray] = None
    target_token_ids: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.attn_mask = np.asarray(self.attn_mask, dtype=np.float64)
        if self.tokens.shape != self.attn_mask.shape or self.tokens.ndim != 2:
            raise ValidationError("tokens and attn_mask must be matching 2-d arrays")
        if self.mask_positions is not None:
            self.mask_positions = np.asarray(self.mask_positions, dtype=np.int64)
            rows = np.arange(len(self.tokens))
            if np.any(self.mask_positions >= self.tokens.shape[1]) or np.any(
                self.tokens[rows, self.mask_positions] != MASK_ID
            ):
                raise ValidationError("mask_positions must point at mask tokens")

    def __len__(self) -> int:
        return self.tokens.shape[0]


def pad_sequences(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    if not seqs:
        raise ValidationError("cannot build an empty batch")
    L = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), L), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=np.float64)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return tokens, mask


def encode_cls(example, vocab: Vocab, max_seq_len: int) -> list[int]:
    """[CLS] + text tokens, text_b trimmed before text_a on overflow."""
    a = vocab.encode(tokenize(example.text_a))
    b = vocab.encode(tokenize(example.text_b)) if example.text_b else []
    budget = max_seq_len - 1
    overflow = len(a) + len(b) - budget
    if overflow > 0:
        cut_b = min(len(b), overflow)
        b = b[: len(b) - cut_b]
        overflow -= cut_b
        if overflow > 0:
            a = a[: len(a) - overflow]
    return [CLS_ID] + a + b


def cls_batch(examples, vocab: Vocab, max_seq_len: int, labels=None) -> Batch:
    if labels is None:
        labels = [ex.gold_label for ex in examples]
        if any(l is None for l in labels):
            raise ValidationError("cls_batch requires a label for every example")
    seqs = [encode_cls(ex, vocab, max_seq_len) for ex in examples]
    tokens, mask = pad_sequences(seqs)
    return Batch(tokens=tokens, attn_mask=mask, labels=np.asarray(labels, dtype=np.int64))


def _hidden_states(params: ModelParams, batch: Batch):
    v = params.views()
    hf, caches = _forward_trunk(v, params.config, batch.tokens, batch.attn_mask)
    return v, hf, caches


def mlm_logits_batch(params: ModelParams, batch: Batch) -> np.ndarray:
    if batch.mask_positions is None:
        raise ValidationError("batch has no mask positions")
    v, hf, _ = _hidden_states(params, batch)
    sel = hf[np.arange(len(batch)), batch.mask_positions]
    return sel @ v["tok_emb"].T + v["mlm_bias"]


def cls_logits_batch(params: ModelParams, batch: Batch) -> np.ndarray:
    if np.any(batch.tokens[:, 0] != CLS_ID):
        raise ValidationError("cls batches must start with the CLS token")
    v, hf, _ = _hidden_states(params, batch)
    return hf[:, 0] @ v["cls.w"] + v["cls.b"]


def mlm_logits(params: ModelParams, tokens, mask_position: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or len(tokens) > params.config.max_seq_len:
        raise ValidationError("tokens must be one sequence within max_seq_len")
    if not (0 <= mask_position < len(tokens)) or tokens[mask_position] != MASK_ID:
        raise ValidationError("mask_position must point at the mask token")
    mask = (tokens != PAD_ID).astype(np.float64)
    batch = Batch(
        tokens=tokens[None, :],
        attn_mask=mask[None, :],
        mask_positions=np.array([mask_position]),
    )
    return mlm_logits_batch(params, batch)[0]


def cls_logits(params: ModelParams, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens[0] != CLS_ID:
        raise ValidationError("tokens must be one sequence starting with CLS")
    mask = (tokens != PAD_ID).astype(np.float64)
    batch = Batch(tokens=tokens[None, :], attn_mask=mask[None, :])
    return cls_logits_batch(params, batch)[0]


def loss_and_grad(
    params: ModelParams,
    batch: Batch,
    objective: str,
    verbalizer_ids: Optional[list[int]] = None,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its exact gradient as a flat vector.

    objective "mlm" softmaxes over the full vocabulary at the masked
    position, "prompt" over the verbalizer-token logits only, "cls"
    over the label head at position 0.
    """
    config = params.config
    v, hf, caches = _hidden_states(params, batch)
    B = len(batch)
    grad_flat = np.zeros_like(params.flat)
    grads = ModelParams(config=config, flat=grad_flat).views()
    dhf = np.zeros_like(hf)

    if objective in ("mlm", "prompt"):
        if batch.mask_positions is None or batch.target_token_ids is None:
            raise ValidationError(f"objective {objective} needs mask positions and target token ids")
        rows = np.arange(B)
        sel = hf[rows, batch.mask_positions]
        if objective == "mlm":
            logits = sel @ v["tok_emb"].T + v["mlm_bias"]
            loss, dlogits = _softmax_xent(logits, batch.target_token_ids)
            dsel = dlogits @ v["tok_emb"]
            grads["tok_emb"] += dlogits.T @ sel
            grads["mlm_bias"] += dlogits.sum(0)
        else:
            if not verbalizer_ids:
                raise ValidationError("prompt objective needs verbalizer_ids")
            vids = np.asarray(verbalizer_ids, dtype=np.int64)
            pos_of = {int(t): i for i, t in enumerate(vids)}
            try:
                labels = np.array([pos_of[int(t)] for t in batch.target_token_ids])
            except KeyError as exc:
                raise ValidationError("target token id is not a verbalizer token") from exc
            emb = v["tok_emb"][vids]
            logits = sel @ emb.T + v["mlm_bias"][vids]
            loss, dlogits = _softmax_xent(logits, labels)
            dsel = dlogits @ emb
            grads["tok_emb"][vids] += dlogits.T @ sel
            grads["mlm_bias"][vids] += dlogits.sum(0)
        dhf[rows, batch.mask_positions] = dsel
    elif objective == "cls":
        if batch.labels is None:
            raise ValidationError("cls objective needs labels")
        if np.any(batch.tokens[:, 0] != CLS_ID):
            raise ValidationError("cls batches must start with the CLS token")
        sel = hf[:, 0]
        logits = sel @ v["cls.w"] + v["cls.b"]
        loss, dlogits = _softmax_xent(logits, batch.labels)
        grads["cls.w"] += sel.T @ dlogits
        grads["cls.b"] += dlogits.sum(0)
        dhf[:, 0] = dlogits @ v["cls.w"].T
    else:
        raise ValidationError(f"unknown objective {objective!r}")

    _backward_trunk(v, config, caches, dhf, grads)
    return float(loss), grad_flat


def example_losses(
    params: ModelParams,
    batch: Batch,
    objective: str,
    verbalizer_ids: Optional[list[int]] = None,
) -> np.ndarray:
    """Per-example cross-entropy, forward only."""
    v, hf, _ = _hidden_states(params, batch)
    B = len(batch)
    rows = np.arange(B)
    if objective == "mlm":
        sel = hf[rows, batch.mask_positions]
        logits = sel @ v["tok_emb"].T + v["mlm_bias"]
        labels = batch.target_token_ids
    elif objective == "prompt":
        vids = np.asarray(verbalizer_ids, dtype=np.int64)
        sel = hf[rows, batch.mask_positions]
        logits = sel @ v["tok_emb"][vids].T + v["mlm_bias"][vids]
        pos_of = {int(t): i for i, t in enumerate(vids)}
        labels = np.array([pos_of[int(t)] for t in batch.target_token_ids])
    elif objective == "cls":
        logits = hf[:, 0] @ v["cls.w"] + v["cls.b"]
        labels = batch.labels
    else:
        raise ValidationError(f"unknown objective {objective!r}")
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    return -logp[rows, labels]


@dataclass
class OptState:
    kind: str
    lr: float
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_opt_state(kind: str, lr: float, n_params: int) -> OptState:
    if kind not in ("adam", "sgd"):
        raise ValidationError(f"unknown optimizer {kind!r}")
    if kind == "adam":
        return OptState(kind=kind, lr=lr, m=np.zeros(n_params), v=np.zeros(n_params))
    return OptState(kind=kind, lr=lr)


def step(params: ModelParams, opt: OptState, grad: np.ndarray) -> tuple[ModelParams, OptState]:
    if grad.shape != params.flat.shape:
        raise ValidationError("gradient length does not match parameters")
    if opt.kind == "sgd":
        return ModelParams(params.config, params.flat - opt.lr * grad), replace(opt, t=opt.t + 1)
    t = opt.t + 1
    m = opt.beta1 * opt.m + (1 - opt.beta1) * grad
    v = opt.beta2 * opt.v + (1 - opt.beta2) * grad * grad
    mhat = m / (1 - opt.beta1**t)
    vhat = v / (1 - opt.beta2**t)
    flat = params.flat - opt.lr * mhat / (np.sqrt(vhat) + opt.eps)
    return ModelParams(params.config, flat), replace(opt, m=m, v=v, t=t)


def encode_pretrain(example, vocab: Vocab, max_seq_len: int) -> list[int]:
    """Raw text tokens, no CLS: pretraining sequences should look like
    the cloze sequences built by patterns, which carry no CLS either."""
    a = vocab.encode(tokenize(example.text_a))
    b = vocab.encode(tokenize(example.text_b)) if example.text_b else []
    overflow = len(a) + len(b) - max_seq_len
    if overflow > 0:
        cut_b = min(len(b), overflow)
        b = b[: len(b) - cut_b]
        overflow -= cut_b
        if overflow > 0:
            a = a[: len(a) - overflow]
    return a + b


def pretrain_mlm(
    params: ModelParams,
    corpus: Dataset,
    steps: int,
    config: ModelConfig,
    seed: int,
    batch_size: int = 8,
    lr: float = 1e-3,
    vocab: Optional[Vocab] = None,
    loss_hook: Optional[Callable[[float], None]] = None,
) -> ModelParams:
    """Masked-token pretraining: one random non-special mask per sequence."""
    if steps == 0:
        return params
    if vocab is None:
        raise ValidationError("pretrain_mlm needs the vocabulary")
    sequences = [encode_pretrain(ex, vocab, config.max_seq_len) for ex in corpus.examples]
    candidates = [
        [i for i, t in enumerate(seq) if t >= NUM_SPECIALS] for seq in sequences
    ]
    eligible = [i for i, c in enumerate(candidates) if c]
    if not eligible:
        raise ValidationError("no maskable tokens in the pretraining corpus")

    rng = derive_rng(seed, TAG_PRETRAIN)
    opt = init_opt_state("adam", lr, len(params.flat))
    for _ in range(steps):
        picks = rng.integers(0, len(eligible), size=batch_size)
        seqs, positions, targets = [], [], []
        for p in picks:
            idx = eligible[int(p)]
            seq = list(sequences[idx])
            pos = candidates[idx][int(rng.integers(len(candidates[idx])))]
            targets.append(seq[pos])
            seq[pos] = MASK_ID
            seqs.append(seq)
            positions.append(pos)
        tokens, mask = pad_sequences(seqs)
        batch = Batch(
            tokens=tokens,
            attn_mask=mask,
            mask_positions=np.array(positions),
            target_token_ids=np.array(targets),
        )
        loss, grad = loss_and_grad(params, batch, "mlm")
        if loss_hook is not None:
            loss_hook(float(loss))
        params, opt = step(params, opt, grad)
    return params


def save_checkpoint(params: ModelParams, path, extra: Optional[dict] = None) -> None:
    """Header = uint32 JSON length + JSON; body = float32 LE flat vector."""
    header = {"config": params.config.__dict__, **(extra or {})}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(params.flat.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        raw = fh.read(4)
        if len(raw) != 4:
            raise ValidationError(f"{path}: truncated checkpoint header")
        (length,) = struct.unpack("<I", raw)
        blob = fh.read(length)
        if len(blob) != length:
            raise ValidationError(f"{path}: truncated checkpoint header")
        try:
            header = json.loads(blob.decode("utf-8"))
            config = ModelConfig(**header.pop("config"))
        except (UnicodeDecodeError, ValueError, TypeError, KeyError) as exc:
            raise ValidationError(f"{path}: unreadable checkpoint header: {exc}") from exc
        body = fh.read()
    if len(body) % 4 != 0:
        raise ValidationError(f"{path}: truncated checkpoint body")
    flat = np.frombuffer(body, dtype="<f4").astype(np.float64)
    if flat.shape != (param_count(config),):
        raise ValidationError(f"{path}: checkpoint body does not match its config")
    return ModelParams(config=config, flat=flat), header
