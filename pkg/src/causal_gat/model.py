"""Tiny decoder-only transformer with recorded attention."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .seeding import derive_seed

CHECKPOINT_FORMAT = "causal-gat-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int = 256
    context_length: int = 64
    num_layers: int = 2
    num_heads: int = 4
    embed_dim: int = 64
    dropout_rate: float = 0.3
    seed: int = 0
    init_std: float = 0.02

    def validate(self) -> None:
        problems = []
        for name in ("vocab_size", "context_length", "num_layers", "num_heads", "embed_dim"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1 (got {getattr(self, name)})")
        if self.num_heads >= 1 and self.embed_dim % self.num_heads:
            problems.append(f"embed_dim ({self.embed_dim}) must be divisible by num_heads ({self.num_heads})")
        if not 0.0 <= self.dropout_rate < 1.0:
            problems.append(f"dropout_rate must lie in [0, 1) (got {self.dropout_rate})")
        if problems:
            raise ValueError("invalid ModelConfig: " + "; ".join(problems))

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, v = cfg.embed_dim, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (cfg.context_length, d),
    }
    for l in range(cfg.num_layers):
        p = f"h{l}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d), p + "attn.bk": (d,),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, 4 * d), p + "mlp.b1": (4 * d,),
            p + "mlp.w2": (4 * d, d), p + "mlp.b2": (d,),
        })
    shapes.update({"lnf.g": (d,), "lnf.b": (d,), "out.w": (d, v), "out.b": (v,)})
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    """Closed form: embeddings + per-layer blocks + final norm + output projection."""
    d, v, t, n = cfg.embed_dim, cfg.vocab_size, cfg.context_length, cfg.num_layers
    per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d)
    return v * d + t * d + n * per_layer + 2 * d + d * v + v


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    vocab: list[str] = field(default_factory=list)

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.tensors.values()))

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: a.copy() for k, a in self.tensors.items()}, list(self.vocab))

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: a.astype(dtype) for k, a in self.tensors.items()}, list(self.vocab))


def init_model(config: ModelConfig, vocab: Sequence[str] = ()) -> ModelParams:
    """Scaled normal init for weights (residual projections scaled by depth), zero biases, unit norms."""
    config.validate()
    rng = np.random.default_rng(derive_seed(config.seed, "model.init"))
    resid_std = config.init_std / np.sqrt(2 * config.num_layers)
    tensors = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".g"):
            tensors[name] = np.ones(shape)
        elif leaf.startswith("b"):
            tensors[name] = np.zeros(shape)
        else:
            std = resid_std if leaf in ("wo", "w2") else config.init_std
            tensors[name] = rng.normal(0.0, std, size=shape)
    return ModelParams(config, tensors, list(vocab))


@dataclass
class AttentionTrace:
    """Attention weights of one sequence: ``weights[layer, head, query, key]``."""

    weights: np.ndarray

    @property
    def num_layers(self) -> int:
        return self.weights.shape[0]

    @property
    def seq_len(self) -> int:
        return self.weights.shape[-1]


@dataclass
class ForwardResult:
    logits: ad.Var
    attention: list[ad.Var]          # per layer, (B, H, T, T)
    tape: ad.Tape
    params: dict[str, ad.Var]

    def traces(self) -> list[AttentionTrace]:
        w = np.stack([a.value for a in self.attention], axis=1)  # (B, L, H, T, T)
        return [AttentionTrace(w[b]) for b in range(w.shape[0])]


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def _dropout_mask(shape, rate: float, key: tuple[int, ...], dtype) -> np.ndarray:
    # counter-based: the mask is a pure function of (seed, step, site)
    bits = np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key)))).random(shape)
    return (bits >= rate).astype(dtype) / (1.0 - rate)


def check_tokens(cfg: ModelConfig, ids: np.ndarray) -> None:
    if ids.ndim != 2:
        raise ValueError(f"token batch must be 2-D (batch, seq), got shape {ids.shape}")
    if ids.shape[1] > cfg.context_length:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds context_length {cfg.context_length}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        bad = ids[(ids < 0) | (ids >= cfg.vocab_size)]
        raise ValueError(f"token id {int(bad[0])} out of range [0, {cfg.vocab_size})")


def forward_graph(
    params: ModelParams,
    tokens=None,
    *,
    embeddings=None,
    tape: ad.Tape | None = None,
    trainable: bool = False,
    dropout_key: tuple[int, int] | None = None,
    attn_bias=None,
    bias_layers: str = "final",
) -> ForwardResult:
    """Build the forward pass on a tape.

    Either ``tokens`` (B, T) or precomputed token ``embeddings`` (B, T, d) must
    be given; positional embeddings are always added.  ``attn_bias`` (B, T) is
    added to the pre-softmax attention scores of the last query position, in the
    final layer or in every layer (``bias_layers="all"``).  Dropout is active
    only when ``dropout_key`` is given.
    """
    cfg = params.config
    tape = tape or ad.Tape()
    leaf = tape.input if trainable else tape.constant
    pv = {k: leaf(a) for k, a in params.tensors.items()}

    if embeddings is None:
        ids = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        check_tokens(cfg, ids)
        x_tok = ad.embedding(pv["tok_emb"], ids)
    else:
        x_tok = embeddings if isinstance(embeddings, ad.Var) else tape.constant(embeddings)
        if x_tok.value.ndim != 3 or x_tok.shape[-1] != cfg.embed_dim:
            raise ValueError(f"embeddings must be (B, T, {cfg.embed_dim}), got {x_tok.shape}")
        if x_tok.shape[1] > cfg.context_length:
            raise ValueError(f"sequence length {x_tok.shape[1]} exceeds context_length {cfg.context_length}")
    b, t, d = x_tok.shape
    h, dh = cfg.num_heads, cfg.head_dim
    pos = np.broadcast_to(np.arange(t), (b, t))
    x = ad.add(x_tok, ad.embedding(pv["pos_emb"], pos))

    site = [0]

    def dropout(v: ad.Var) -> ad.Var:
        if dropout_key is None or cfg.dropout_rate == 0.0:
            return v
        site[0] += 1
        m = _dropout_mask(v.shape, cfg.dropout_rate, (*dropout_key, site[0]), v.value.dtype)
        return ad.mul(v, m)

    x = dropout(x)
    mask = causal_mask(t)
    bias_var = None
    if attn_bias is not None:
        bias_var = attn_bias if isinstance(attn_bias, ad.Var) else tape.constant(np.asarray(attn_bias, dtype=x.value.dtype))
    attention = []
    for l in range(cfg.num_layers):
        p = f"h{l}."
        a_in = ad.layer_norm(x, pv[p + "ln1.g"], pv[p + "ln1.b"])

        def heads(w, bias):
            y = ad.add(ad.matmul(a_in, pv[p + w]), pv[p + bias])
            return ad.transpose(ad.reshape(y, (b, t, h, dh)), (0, 2, 1, 3))

        q, k, v = heads("attn.wq", "attn.bq"), heads("attn.wk", "attn.bk"), heads("attn.wv", "attn.bv")
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        if bias_var is not None and (bias_layers == "all" or l == cfg.num_layers - 1):
            scores = ad.row_bias(scores, bias_var, row=t - 1)
        att = ad.softmax(scores, mask=mask)
        attention.append(att)
        o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, t, d))
        o = ad.add(ad.matmul(o, pv[p + "attn.wo"]), pv[p + "attn.bo"])
        x = ad.add(x, dropout(o))
        m_in = ad.layer_norm(x, pv[p + "ln2.g"], pv[p + "ln2.b"])
        hid = ad.gelu(ad.add(ad.matmul(m_in, pv[p + "mlp.w1"]), pv[p + "mlp.b1"]))
        m = ad.add(ad.matmul(hid, pv[p + "mlp.w2"]), pv[p + "mlp.b2"])
        x = ad.add(x, dropout(m))
    x = ad.layer_norm(x, pv["lnf.g"], pv["lnf.b"])
    logits = ad.add(ad.matmul(x, pv["out.w"]), pv["out.b"])
    return ForwardResult(logits, attention, tape, pv)


def forward(params: ModelParams, tokens: Sequence[int], attn_bias=None, bias_layers: str = "final"
            ) -> tuple[np.ndarray, AttentionTrace]:
    """Inference forward for a single sequence: (logits (T, V), trace)."""
    bias = None if attn_bias is None else np.asarray(attn_bias, dtype=np.float64)[None, :]
    res = forward_graph(params, np.asarray(tokens, dtype=np.int64)[None, :], attn_bias=bias, bias_layers=bias_layers)
    return res.logits.value[0], res.traces()[0]


def generate(params: ModelParams, prompt: Sequence[int], max_new_tokens: int
             ) -> tuple[list[int], list[AttentionTrace]]:
    """Greedy decoding.  Returns generated ids and one trace per decode step."""
    prompt = list(prompt)
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if len(prompt) + max_new_tokens > params.config.context_length:
        raise ValueError(
            f"prompt length {len(prompt)} + max_new_tokens {max_new_tokens} exceeds "
            f"context_length {params.config.context_length}")
    seq, out, traces = list(prompt), [], []
    for _ in range(max_new_tokens):
        logits, trace = forward(params, seq)
        nxt = int(np.argmax(logits[-1]))
        traces.append(trace)
        out.append(nxt)
        seq.append(nxt)
    return out, traces


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "vocab": list(params.vocab),
        "params": {
            k: {"shape": list(a.shape), "dtype": str(a.dtype), "data": a.reshape(-1).tolist()}
            for k, a in params.tensors.items()
        },
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def load_checkpoint(path) -> ModelParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    cfg = ModelConfig(**doc["config"])
    cfg.validate()
    tensors = {}
    expected = param_shapes(cfg)
    for k, shape in expected.items():
        entry = doc["params"][k]
        a = np.array(entry["data"], dtype=entry["dtype"]).reshape(entry["shape"])
        if a.shape != shape:
            raise ValueError(f"{path}: parameter {k} has shape {a.shape}, expected {shape}")
        tensors[k] = a
    return ModelParams(cfg, tensors, list(doc.get("vocab", [])))
