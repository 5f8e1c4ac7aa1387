"""Integrated-gradients influence of each input token on each generated token.

The integral from the baseline embeddings to the actual embeddings is
approximated by a right Riemann sum, with all path points evaluated as one
batch.  Positional embeddings stay fixed along the path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .model import ModelParams, forward_graph

DEFAULT_STEPS = 64


@dataclass
class PathIntegral:
    attributions: np.ndarray   # same shape as x, before reduction over the feature axis
    f_input: float
    f_baseline: float

    @property
    def delta(self) -> float:
        return self.f_input - self.f_baseline


def path_integral(fn: Callable[[ad.Tape, ad.Var], ad.Var], x: np.ndarray, baseline: np.ndarray,
                  steps: int, chunk: int = 256) -> PathIntegral:
    """Right-Riemann integrated gradients of a batched scalar function.

    ``fn(tape, xb)`` maps a batch of points (B, *x.shape) to a (B,) vector.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1 (got {steps})")
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if x.shape != baseline.shape:
        raise ValueError(f"baseline shape {baseline.shape} != input shape {x.shape}")
    diff = x - baseline
    total = np.zeros_like(x)
    alphas = np.arange(1, steps + 1) / steps
    expand = (slice(None),) + (None,) * x.ndim
    for start in range(0, steps, chunk):
        a = alphas[start:start + chunk]
        tape = ad.Tape()
        xb = tape.input(baseline[None] + a[expand] * diff[None])
        out = fn(tape, xb)
        (g,) = tape.gradient(ad.sum(out), [xb])
        total += g.sum(axis=0)
    tape = ad.Tape()
    ends = fn(tape, tape.constant(np.stack([baseline, x]))).value
    return PathIntegral(diff * total / steps, float(ends[1]), float(ends[0]))


def baseline_embeddings(params: ModelParams, ids: Sequence[int], kind: str = "zero") -> np.ndarray:
    d = params.config.embed_dim
    if kind == "zero":
        return np.zeros((len(ids), d))
    if kind == "pad":
        pad = params.vocab.index("<pad>") if "<pad>" in params.vocab else 0
        return np.repeat(params.tensors["tok_emb"][pad][None], len(ids), axis=0)
    raise ValueError(f"unknown baseline kind {kind!r}")


def logit_target(params: ModelParams, weights: np.ndarray) -> Callable[[ad.Tape, ad.Var], ad.Var]:
    """F = sum_v weights[v] * logit_v at the last position."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)

    def fn(tape: ad.Tape, emb: ad.Var) -> ad.Var:
        logits = forward_graph(params, embeddings=emb, tape=tape).logits
        last = ad.take(logits, (slice(None), -1))
        return ad.reshape(ad.matmul(last, w), (emb.shape[0],))

    return fn


@dataclass
class IGRow:
    full: np.ndarray       # attribution to every position of the prefix
    n_input: int
    f_input: float
    f_baseline: float

    @property
    def inputs(self) -> np.ndarray:
        return self.full[: self.n_input]

    @property
    def residual(self) -> float:
        return abs(float(self.full.sum()) - (self.f_input - self.f_baseline))


def ig_row(params: ModelParams, full_sequence: Sequence[int], n_input: int, output_index: int,
           steps: int = DEFAULT_STEPS, baseline: str = "zero", target=None) -> IGRow:
    """Attribution of every prefix token to generated token ``output_index``.

    The prefix is ``full_sequence[: n_input + output_index]``; the target scalar is
    the pre-softmax logit of the realized token ``full_sequence[n_input + output_index]``
    at the last prefix position, or ``sum_v target[v] * logit_v`` when a weight
    vector is given.
    """
    m = len(full_sequence) - n_input
    if not 0 <= output_index < m:
        raise ValueError(f"output_index {output_index} out of range for {m} generated tokens")
    ids = list(full_sequence[: n_input + output_index])
    if target is None:
        target = np.zeros(params.config.vocab_size)
        target[full_sequence[n_input + output_index]] = 1.0
    x = params.tensors["tok_emb"][ids]
    res = path_integral(logit_target(params, target), x, baseline_embeddings(params, ids, baseline), steps)
    return IGRow(res.attributions.sum(axis=-1), n_input, res.f_input, res.f_baseline)


def integrated_gradients(params: ModelParams, full_sequence: Sequence[int], n_input: int, output_index: int,
                         steps: int = DEFAULT_STEPS, baseline: str = "zero", target=None) -> np.ndarray:
    """Signed influence of each of the ``n_input`` prompt tokens on one generated token."""
    return ig_row(params, full_sequence, n_input, output_index, steps, baseline, target).inputs


def completeness_residual(params: ModelParams, full_sequence: Sequence[int], n_input: int, output_index: int,
                          steps: int = DEFAULT_STEPS, baseline: str = "zero") -> float:
    """|sum of attributions over the whole prefix - (F(x) - F(baseline))|."""
    return ig_row(params, full_sequence, n_input, output_index, steps, baseline).residual


@dataclass
class AttributionMatrix:
    values: np.ndarray                 # (m outputs, n inputs)
    baseline: str = "zero"
    steps: int = DEFAULT_STEPS
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    target: str = "realized-token logit"

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def to_json(self) -> dict:
        m, n = self.values.shape
        return {"shape": [m, n], "data": self.values.reshape(-1).tolist(), "baseline": self.baseline,
                "steps": self.steps, "residuals": np.asarray(self.residuals).tolist(), "target": self.target}

    @classmethod
    def from_json(cls, d: dict) -> "AttributionMatrix":
        m, n = d["shape"]
        return cls(np.array(d["data"], dtype=np.float64).reshape(m, n), d["baseline"], int(d["steps"]),
                   np.array(d["residuals"], dtype=np.float64), d.get("target", "realized-token logit"))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))


def attribution_matrix(params: ModelParams, full_sequence: Sequence[int], n_input: int,
                       steps: int = DEFAULT_STEPS, baseline: str = "zero") -> AttributionMatrix:
    rows = [ig_row(params, full_sequence, n_input, i, steps, baseline)
            for i in range(len(full_sequence) - n_input)]
    vals = np.array([r.inputs for r in rows]).reshape(len(rows), n_input)
    return AttributionMatrix(vals, baseline, steps, np.array([r.residual for r in rows]))
