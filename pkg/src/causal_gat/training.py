"""Cross-entropy training with an evidence-attention penalty, optimized by AdamW."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .corpus import Episode, Vocab
from .model import ModelParams, forward_graph
from .seeding import derive_seed

PRETRAINED_FINETUNE_LR = 2e-5   # fine-tuning rate for a pretrained model; too small from scratch


@dataclass
class TrainSpec:
    learning_rate: float = 2e-3
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    max_steps: int = 500
    causal_reg_weight: float = 0.1
    reg_positions: str = "answer"     # "answer" | "all"
    loss_positions: str = "answer"    # "answer" | "all"
    float32: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.reg_positions not in ("answer", "all") or self.loss_positions not in ("answer", "all"):
            raise ValueError("reg_positions/loss_positions must be 'answer' or 'all'")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Batch:
    ids: np.ndarray          # (B, T) inputs
    targets: np.ndarray      # (B, T) next-token ids
    loss_w: np.ndarray       # (B, T) cross-entropy weights
    evidence_mask: np.ndarray  # (B, T, T) evidence keys for each regularized query
    n_reg: int               # number of regularized query positions


def make_batch(episodes: Sequence[Episode], vocab: Vocab, loss_positions: str = "answer",
               reg_positions: str = "answer") -> Batch:
    """Right-pad to the longest sequence; position q predicts token q+1."""
    t = max(len(e.tokens) for e in episodes) - 1
    b = len(episodes)
    pad = vocab.index["<pad>"]
    ids = np.full((b, t), pad, dtype=np.int64)
    tgt = np.full((b, t), pad, dtype=np.int64)
    loss_w = np.zeros((b, t))
    pmask = np.zeros((b, t, t))
    n_reg = 0
    for i, e in enumerate(episodes):
        enc = vocab.encode(e.tokens)
        n = len(enc) - 1
        ids[i, :n] = enc[:-1]
        tgt[i, :n] = enc[1:]
        t0, t1 = e.target_span
        answer_q = range(t0 - 1, t1 - 1)
        loss_q = answer_q if loss_positions == "answer" else range(n)
        loss_w[i, list(loss_q)] = 1.0
        reg_q = answer_q if reg_positions == "answer" else range(n)
        e0, e1 = e.evidence_span
        for q in reg_q:
            pmask[i, q, e0:min(e1, q + 1)] = 1.0
            n_reg += 1
    return Batch(ids, tgt, loss_w, pmask, n_reg)


def causal_penalty(final_attention: ad.Var, batch: Batch) -> ad.Var:
    """Mean over regularized positions of head-averaged final-layer attention off the evidence span.

    Every attention row sums to one, so the off-span mass is 1 - on-span mass; mass on
    previously generated tokens counts as off-span.
    """
    h = final_attention.shape[1]
    n = max(batch.n_reg, 1)
    mask = np.broadcast_to(batch.evidence_mask[:, None], final_attention.shape).astype(final_attention.value.dtype)
    inside = ad.scale(ad.sum(ad.mul(final_attention, mask)), 1.0 / (h * n))
    return ad.sub(ad.constant_like(inside, batch.n_reg / n), inside)


def loss_graph(params: ModelParams, batch: Batch, reg_weight: float, dropout_key=None):
    """Return (tape, total loss, cross-entropy, penalty, param vars)."""
    res = forward_graph(params, batch.ids, trainable=True, dropout_key=dropout_key)
    ce = ad.cross_entropy(res.logits, batch.targets, batch.loss_w)
    pen = causal_penalty(res.attention[-1], batch)
    total = ce if reg_weight == 0 else ad.add(ce, ad.scale(pen, reg_weight))
    return res.tape, total, ce, pen, res.params


class AdamW:
    def __init__(self, params: dict[str, np.ndarray], spec: TrainSpec):
        self.spec = spec
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        s = self.spec
        self.t += 1
        c1 = 1.0 - s.beta1 ** self.t
        c2 = 1.0 - s.beta2 ** self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = s.beta1 * self.m[k] + (1 - s.beta1) * g
            self.v[k] = s.beta2 * self.v[k] + (1 - s.beta2) * g * g
            p = params[k]
            if p.ndim == 2 and s.weight_decay:
                p -= s.learning_rate * s.weight_decay * p
            p -= s.learning_rate * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + s.eps)


@dataclass
class TrainResult:
    params: ModelParams
    loss: list[float]
    cross_entropy: list[float]
    penalty: list[float]


def train(params: ModelParams, corpus: Sequence[Episode], vocab: Vocab, spec: TrainSpec,
          callback=None) -> TrainResult:
    """Deterministic minibatch training; batches walk a seeded permutation of the corpus."""
    spec.validate()
    too_long = [len(e.tokens) - 1 for e in corpus if len(e.tokens) - 1 > params.config.context_length]
    if too_long:
        raise ValueError(f"corpus sequence of length {too_long[0]} exceeds context_length")
    p = params.astype(np.float32 if spec.float32 else np.float64)
    opt = AdamW(p.tensors, spec)
    order_rng = np.random.default_rng(derive_seed(spec.seed, "train.order"))
    drop_seed = derive_seed(spec.seed, "train.dropout")
    order = order_rng.permutation(len(corpus))
    cursor = 0
    hist = TrainResult(p, [], [], [])
    names = list(p.tensors)
    for step in range(spec.max_steps):
        if cursor + spec.batch_size > len(order):
            order = order_rng.permutation(len(corpus))
            cursor = 0
        idx = order[cursor: cursor + spec.batch_size]
        cursor += spec.batch_size
        batch = make_batch([corpus[i] for i in idx], vocab, spec.loss_positions, spec.reg_positions)
        tape, total, ce, pen, pv = loss_graph(p, batch, spec.causal_reg_weight, dropout_key=(drop_seed, step))
        loss = float(total.value)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {step} (ce={float(ce.value)}, penalty={float(pen.value)})")
        grads = dict(zip(names, tape.gradient(total, [pv[k] for k in names])))
        if spec.grad_clip:
            norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
            if norm > spec.grad_clip:
                grads = {k: g * (spec.grad_clip / norm) for k, g in grads.items()}
        opt.step(p.tensors, grads)
        hist.loss.append(loss)
        hist.cross_entropy.append(float(ce.value))
        hist.penalty.append(float(pen.value))
        if callback is not None:
            callback(step, p)
    if not p.all_finite():
        raise TrainingDiverged("non-finite parameters after training")
    hist.params = p.astype(np.float64)
    return hist
