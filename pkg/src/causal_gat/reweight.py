"""Fact-anchored re-weighting of attention during decoding.

A graph attention (GAT) layer scores every node of the causal graph.  Output
tokens whose causal contribution score falls in the episode's low tail pass
their flag back to the input tokens that contributed most to them; those keys
get a suppression factor ``s = max(s_floor, f * gat)`` which enters the
final-layer attention of the generating position as an additive ``ln s``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attribution import ig_row
from .facts import EvidenceSet, FactStore, entailment_factor, retrieve
from .graph import AlphaMatrix, CausalGraph, CcsVector, aggregate_layers, build_graph, ccs
from .model import AttentionTrace, ModelParams, check_tokens, forward, forward_graph
from .seeding import derive_seed

QUERY_MARK = "Q"


# ----------------------------------------------------------------------
# graph attention layer
# ----------------------------------------------------------------------


@dataclass
class GatParams:
    W: np.ndarray            # (heads, in_features, out_features)
    a: np.ndarray            # (heads, 2 * out_features): [target half | neighbor half]
    leaky_slope: float = 0.2
    dropout: float = 0.3     # applied to coefficients during GAT training only
    seed: int = 0

    @property
    def num_heads(self) -> int:
        return self.W.shape[0]

    @property
    def in_features(self) -> int:
        return self.W.shape[1]

    @property
    def out_features(self) -> int:
        return self.W.shape[2]

    def validate(self) -> None:
        if self.W.ndim != 3:
            raise ValueError(f"W must be (heads, in, out), got shape {self.W.shape}")
        if self.a.shape != (self.num_heads, 2 * self.out_features):
            raise ValueError(f"a must have shape {(self.num_heads, 2 * self.out_features)}, got {self.a.shape}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError(f"leaky_slope must lie in (0, 1) (got {self.leaky_slope})")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1) (got {self.dropout})")

    def copy(self) -> "GatParams":
        return GatParams(self.W.copy(), self.a.copy(), self.leaky_slope, self.dropout, self.seed)

    def to_json(self) -> dict:
        return {"W": {"shape": list(self.W.shape), "data": self.W.reshape(-1).tolist()},
                "a": {"shape": list(self.a.shape), "data": self.a.reshape(-1).tolist()},
                "leaky_slope": self.leaky_slope, "dropout": self.dropout, "seed": self.seed}

    @classmethod
    def from_json(cls, d: dict) -> "GatParams":
        arr = lambda t: np.array(t["data"], dtype=np.float64).reshape(t["shape"])  # noqa: E731
        g = cls(arr(d["W"]), arr(d["a"]), float(d["leaky_slope"]), float(d["dropout"]), int(d["seed"]))
        g.validate()
        return g


def init_gat(in_features: int, out_features: int = 8, num_heads: int = 4, leaky_slope: float = 0.2,
             dropout: float = 0.3, seed: int = 0) -> GatParams:
    """Glorot-uniform W and a, drawn from a seed derived for the GAT layer."""
    rng = np.random.default_rng(derive_seed(seed, "gat.init"))
    lim_w = np.sqrt(6.0 / (in_features + out_features))
    lim_a = np.sqrt(6.0 / (2 * out_features + 1))
    g = GatParams(rng.uniform(-lim_w, lim_w, (num_heads, in_features, out_features)),
                  rng.uniform(-lim_a, lim_a, (num_heads, 2 * out_features)), leaky_slope, dropout, seed)
    g.validate()
    return g


def neighborhood_mask(num_nodes: int, edges: Sequence[tuple[int, int]], symmetric: bool = True) -> np.ndarray:
    """Boolean (N, N) matrix; entry [v, u] is True when u is in v's in-neighborhood.

    Self-loops are always present.  ``symmetric`` also treats every edge as
    pointing both ways, so input tokens see the outputs they feed.
    """
    mask = np.eye(num_nodes, dtype=bool)
    for u, v in edges:
        if not (0 <= u < num_nodes and 0 <= v < num_nodes):
            raise ValueError(f"edge ({u}, {v}) outside {num_nodes} nodes")
        mask[v, u] = True
        if symmetric:
            mask[u, v] = True
    return mask


def _gat_graph(features: ad.Var, mask: np.ndarray, W: ad.Var, a: ad.Var, slope: float,
               drop: np.ndarray | None = None):
    """Return (per-head coefficient Vars, scores Var) on the features' tape."""
    heads, _, f_out = W.shape
    coefs, outs = [], []
    for h in range(heads):
        z = ad.matmul(features, ad.take(W, h))                        # (N, F')
        a_h = ad.take(a, h)
        tgt = ad.matmul(z, ad.reshape(ad.take(a_h, slice(0, f_out)), (f_out, 1)))
        nbr = ad.matmul(z, ad.reshape(ad.take(a_h, slice(f_out, 2 * f_out)), (f_out, 1)))
        n = z.shape[0]
        e = ad.leaky_relu(ad.outer_add(ad.reshape(tgt, (n,)), ad.reshape(nbr, (n,))), slope)
        c = ad.softmax(e, mask=mask)
        coefs.append(c)
        if drop is not None:
            c = ad.mul(c, drop[h])
        outs.append(ad.matmul(c, z))                                  # (N, F')
    mean = outs[0]
    for o in outs[1:]:
        mean = ad.add(mean, o)
    pooled = ad.scale(ad.sum(mean, axis=1), 1.0 / (heads * f_out))
    return coefs, ad.sigmoid(pooled)


def _check_features(features: np.ndarray, params: GatParams) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_features:
        raise ValueError(f"node features must be (N, {params.in_features}), got {x.shape}")
    return x


def gat_coefficients(features: np.ndarray, edges: Sequence[tuple[int, int]], params: GatParams,
                     symmetric: bool = True) -> np.ndarray:
    """(heads, N, N) neighborhood softmax coefficients; row v is node v's distribution."""
    x = _check_features(features, params)
    tape = ad.Tape()
    coefs, _ = _gat_graph(tape.constant(x), neighborhood_mask(len(x), edges, symmetric),
                          tape.constant(params.W), tape.constant(params.a), params.leaky_slope)
    return np.stack([c.value for c in coefs])


def gat_scores(features: np.ndarray, edges: Sequence[tuple[int, int]], params: GatParams,
               symmetric: bool = True) -> np.ndarray:
    """Per-node score in (0, 1): sigmoid of the head- and feature-averaged aggregate."""
    x = _check_features(features, params)
    tape = ad.Tape()
    _, s = _gat_graph(tape.constant(x), neighborhood_mask(len(x), edges, symmetric),
                      tape.constant(params.W), tape.constant(params.a), params.leaky_slope)
    return s.value.copy()


# ----------------------------------------------------------------------
# plans
# ----------------------------------------------------------------------


@dataclass
class ReweightPolicy:
    tau_percentile: float = 25.0
    s_floor: float = 0.05
    combine: str = "multiplicative"
    contributor_mass: float = 0.9         # share of a flagged output's |weight| its inherited keys must cover
    top_k: int | None = None              # optional cap on the number of inherited keys
    suppress_outputs: bool = False        # also suppress low-CCS output tokens as keys
    layers: str = "final"                 # "final" | "all"
    aggregation: str = "final_layer_mean_heads"
    norm: str = "row_minmax"
    ig_steps: int = 64
    ig_baseline: str = "zero"
    refresh_every: int = 4
    retrieval_k: int = 1
    f_mode: str = "binary"
    f_min: float = 0.1

    def validate(self) -> None:
        if not 0.0 <= self.tau_percentile <= 100.0:
            raise ValueError("tau_percentile must lie in [0, 100]")
        if not 0.0 < self.s_floor <= 1.0:
            raise ValueError("s_floor must lie in (0, 1]")
        if self.combine != "multiplicative":
            raise ValueError(f"unknown combine rule {self.combine!r}")
        if not 0.0 < self.contributor_mass <= 1.0:
            raise ValueError("contributor_mass must lie in (0, 1]")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.layers not in ("final", "all"):
            raise ValueError("layers must be 'final' or 'all'")
        if self.refresh_every < 1 or self.ig_steps < 1 or self.retrieval_k < 1:
            raise ValueError("refresh_every, ig_steps and retrieval_k must be >= 1")
        if not 0.0 < self.f_min <= 1.0:
            raise ValueError("f_min must lie in (0, 1]")


@dataclass
class ReweightPlan:
    s: np.ndarray                       # one factor per key position covered by the plan
    provenance: list[dict] = field(default_factory=list)

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.s == 1.0))

    def suppressed(self) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.s < 1.0)]

    def extended(self, length: int) -> np.ndarray:
        """Factors for a row of ``length`` keys; uncovered keys are exempt (s = 1)."""
        if length < len(self.s):
            raise ValueError(f"row of {length} keys is shorter than the plan ({len(self.s)})")
        out = np.ones(length)
        out[: len(self.s)] = self.s
        return out


def identity_plan(n: int) -> ReweightPlan:
    return ReweightPlan(np.ones(n), [{"flagged": False} for _ in range(n)])


def top_contributors(weights: np.ndarray, mass: float = 0.9, cap: int | None = None) -> list[int]:
    """Fewest positions, by decreasing |weight| (earlier position on ties), covering ``mass`` of the total."""
    w = np.abs(np.asarray(weights, dtype=np.float64))
    total = w.sum()
    if total <= 0:
        return []
    picked, acc = [], 0.0
    for j in sorted(range(len(w)), key=lambda j: (-w[j], j)):
        if w[j] <= 0 or (cap is not None and len(picked) >= cap):
            break
        picked.append(j)
        acc += w[j]
        if acc >= mass * total:
            break
    return picked


def make_plan(ccs_vec: CcsVector, factors: Sequence[float], gat: Sequence[float],
              policy: ReweightPolicy | None = None, weights: np.ndarray | None = None) -> ReweightPlan:
    """Suppression factors for the nodes selected by the low-CCS flags.

    Without ``weights`` the flags apply to the nodes themselves, and ``factors``
    and ``gat`` align with the CCS vector.  With an (m, n) edge-weight matrix,
    each flagged output passes its flag to its strongest input contributors
    (see ``top_contributors``), and ``factors``/``gat`` describe the n input
    nodes (optionally followed by the m outputs when ``suppress_outputs`` is set).
    """
    policy = policy or ReweightPolicy()
    f = np.asarray(factors, dtype=np.float64)
    g = np.asarray(gat, dtype=np.float64)
    if f.shape != g.shape:
        raise ValueError(f"factor and gat vectors differ in length: {f.shape} vs {g.shape}")
    low = np.asarray(ccs_vec.low, dtype=bool)
    if weights is None:
        if len(f) != len(low):
            raise ValueError(f"expected {len(low)} node factors, got {len(f)}")
        flagged = low.copy()
        source: list[list[int]] = [[i] if low[i] else [] for i in range(len(low))]
    else:
        w = np.abs(np.asarray(weights, dtype=np.float64))
        m, n = w.shape
        if m != len(low):
            raise ValueError(f"weight matrix has {m} rows for {len(low)} outputs")
        size = n + m if policy.suppress_outputs else n
        if len(f) != size:
            raise ValueError(f"expected {size} node factors, got {len(f)}")
        flagged = np.zeros(size, dtype=bool)
        source = [[] for _ in range(size)]
        for i in np.flatnonzero(low):
            for j in top_contributors(w[i], policy.contributor_mass, policy.top_k):
                flagged[j] = True
                source[j].append(int(i))
            if policy.suppress_outputs:
                flagged[n + i] = True
                source[n + i].append(int(i))
    s = np.ones(len(f))
    s[flagged] = np.maximum(policy.s_floor, f[flagged] * g[flagged])
    prov = [{"flagged": bool(flagged[j]), "from_outputs": source[j], "f": float(f[j]), "gat": float(g[j])}
            for j in range(len(f))]
    return ReweightPlan(s, prov)


def reweight_attention(logits: np.ndarray, s: np.ndarray) -> np.ndarray:
    """softmax(logits + ln s); -inf logits (masked keys) stay at probability 0."""
    logits = np.asarray(logits, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if s.shape != logits.shape:
        raise ValueError(f"plan covers {s.shape} keys, row has {logits.shape}")
    if np.any(~(s > 0)):
        raise ValueError("suppression factors must be > 0")
    z = logits + np.log(s)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ----------------------------------------------------------------------
# decoding
# ----------------------------------------------------------------------


def query_tokens(tokens: Sequence[str]) -> list[str]:
    """Tokens after the last query mark, or the whole prompt when there is none."""
    toks = list(tokens)
    if QUERY_MARK in toks:
        return toks[len(toks) - toks[::-1].index(QUERY_MARK):]
    return toks


def node_features(params: ModelParams, ids: Sequence[int], n_input: int, ccs_norm: np.ndarray,
                  factors: np.ndarray) -> np.ndarray:
    """[token embedding | normalized CCS (1 for inputs) | f] per node."""
    emb = params.tensors["tok_emb"][list(ids)]
    c = np.concatenate([np.ones(n_input), np.asarray(ccs_norm, dtype=np.float64)])
    return np.concatenate([emb, c[:, None], np.asarray(factors, dtype=np.float64)[:, None]], axis=1)


def graph_edges(n: int, m: int) -> list[tuple[int, int]]:
    """Dense input-to-output edges x_j -> y_i as (j, n + i)."""
    return [(j, n + i) for i in range(m) for j in range(n)]


@dataclass
class StepDiagnostics:
    step: int
    ccs: list[float]              # raw CCS of outputs so far, the last one for the candidate token
    plan: list[float]             # suppression factor per input key
    candidate: str                # token the unmodified model would emit
    token: str                    # emitted token
    suppressed: list[int]         # key positions with s < 1
    ccs_token: float | None = None  # CCS of the emitted token in the finished episode graph

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class ReweightedGeneration:
    tokens: list[int]
    diagnostics: list[StepDiagnostics]
    traces: list[AttentionTrace]
    graph: CausalGraph | None = None

    def diagnostics_jsonl(self) -> str:
        return "".join(json.dumps(d.to_json(), sort_keys=True) + "\n" for d in self.diagnostics)


def _decode(params: ModelParams, ids: Sequence[int]) -> list[str]:
    vocab = params.vocab
    return [vocab[i] if vocab else str(i) for i in ids]


def episode_graph(params: ModelParams, prompt: Sequence[int], outputs: Sequence[int],
                  traces: Sequence[AttentionTrace], policy: ReweightPolicy,
                  ig_rows: dict[int, np.ndarray] | None = None) -> CausalGraph:
    """Causal graph of a finished episode with exact attribution rows for every output."""
    n = len(prompt)
    full = list(prompt) + list(outputs)
    rows = []
    for i in range(len(outputs)):
        if ig_rows is not None and i in ig_rows:
            rows.append(ig_rows[i])
        else:
            rows.append(ig_row(params, full, n, i, policy.ig_steps, policy.ig_baseline).inputs)
    alpha = np.array([aggregate_layers(tr.weights, policy.aggregation)[n - 1 + i, :n]
                      for i, tr in enumerate(traces)]).reshape(len(outputs), n)
    ig = np.array(rows).reshape(len(outputs), n)
    names = _decode(params, full)
    return build_graph(AlphaMatrix(alpha, alpha.sum(axis=1), policy.aggregation), ig, names[:n], names[n:],
                       norm=policy.norm, tau_percentile=policy.tau_percentile)


@dataclass
class StepState:
    """Everything the plan for one decode step is computed from."""
    trace: AttentionTrace
    candidate: int
    alpha: np.ndarray            # (outputs so far + 1, n)
    ig: np.ndarray               # same shape
    ccs: CcsVector
    features: np.ndarray         # (n + outputs so far + 1, in_features)
    factors: np.ndarray          # f for every node
    edges: list[tuple[int, int]]


def score_step(params: ModelParams, prompt: list[int], out: list[int], alpha_rows: list[np.ndarray],
               f_in: np.ndarray, evidence: EvidenceSet, policy: ReweightPolicy,
               ig_rows: list[np.ndarray]) -> StepState:
    """Run the plain model on prompt + out and score the candidate next token.

    ``ig_rows`` must hold one attribution row per output so far plus one for the
    candidate; an entry of ``None`` is filled in from the plain model here.
    """
    n = len(prompt)
    seq = prompt + out
    logits, trace = forward(params, seq)
    cand = int(np.argmax(logits[-1]))
    step = len(out)
    rows = list(ig_rows)
    for i, r in enumerate(rows):
        if r is None:
            tok = out[i] if i < step else cand
            rows[i] = ig_row(params, seq[: n + i] + [tok], n, i, policy.ig_steps, policy.ig_baseline).inputs
    alpha = np.array(list(alpha_rows) + [aggregate_layers(trace.weights, policy.aggregation)[-1, :n]])
    ig = np.array(rows).reshape(step + 1, n)
    vec = ccs(alpha, ig, policy.norm, policy.tau_percentile)
    f_out = np.array([entailment_factor(t, "output", evidence, policy.f_mode, policy.f_min)
                      for t in _decode(params, out + [cand])])
    factors = np.concatenate([f_in, f_out])
    feats = node_features(params, seq + [cand], n, vec.normalized, factors)
    return StepState(trace, cand, alpha, ig, vec, feats, factors, graph_edges(n, step + 1))


def plan_for_step(state: StepState, gat_score: np.ndarray, n: int, policy: ReweightPolicy) -> np.ndarray:
    """Suppression factors for the keys of the current step (inputs, then earlier outputs)."""
    step = len(state.alpha) - 1
    w = state.alpha * state.ig
    if policy.suppress_outputs:
        plan = make_plan(state.ccs, state.factors, gat_score, policy, weights=w)
        return plan.s[: n + step]          # the candidate is not a key yet
    return make_plan(state.ccs, state.factors[:n], gat_score[:n], policy, weights=w).s


def _prepare(params: ModelParams, prompt: Sequence[int], store: FactStore, policy: ReweightPolicy):
    names = _decode(params, prompt)
    evidence = retrieve(store, query_tokens(names), policy.retrieval_k)
    f_in = np.array([entailment_factor(t, "input", evidence, policy.f_mode, policy.f_min) for t in names])
    return evidence, f_in


def generate_reweighted(params: ModelParams, prompt: Sequence[int], store: FactStore, gat: GatParams,
                        max_new_tokens: int, policy: ReweightPolicy | None = None,
                        final_graph: bool = False) -> ReweightedGeneration:
    """Greedy decoding with fact-anchored suppression of low-support keys.

    Each step runs the plain model, scores the candidate token and the earlier
    outputs, and, when the plan is not the identity, re-runs the step with
    ``ln s`` added to the generating row's attention logits.  Attribution rows
    are recomputed every ``policy.refresh_every`` steps; in between, outputs
    without a row of their own reuse the most recent one.
    """
    policy = policy or ReweightPolicy()
    policy.validate()
    cfg = params.config
    prompt = list(prompt)
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if max_new_tokens < 0:
        raise ValueError("max_new_tokens must be >= 0")
    if len(prompt) + max_new_tokens > cfg.context_length:
        raise ValueError(f"prompt length {len(prompt)} + max_new_tokens {max_new_tokens} "
                         f"exceeds context_length {cfg.context_length}")
    check_tokens(cfg, np.asarray([prompt]))
    n = len(prompt)
    evidence, f_in = _prepare(params, prompt, store, policy)

    out: list[int] = []
    traces: list[AttentionTrace] = []
    alpha_rows: list[np.ndarray] = []
    exact: dict[int, np.ndarray] = {}      # rows of realized outputs
    last_row: np.ndarray | None = None
    diags: list[StepDiagnostics] = []
    for step in range(max_new_tokens):
        refresh = step % policy.refresh_every == 0 or last_row is None
        rows = [exact.get(i, None if refresh else last_row) for i in range(step)]
        rows.append(None if refresh else last_row)
        state = score_step(params, prompt, out, alpha_rows, f_in, evidence, policy, rows)
        for i in range(step):
            if refresh:
                exact[i] = state.ig[i]
        last_row = state.ig[-1]
        g = gat_scores(state.features, state.edges, gat)
        s_keys = plan_for_step(state, g, n, policy)
        seq = prompt + out
        if np.all(s_keys == 1.0):
            token, used = state.candidate, state.trace
        else:
            bias = np.zeros(len(seq))
            bias[: len(s_keys)] = np.log(s_keys)
            logits2, used = forward(params, seq, attn_bias=bias, bias_layers=policy.layers)
            token = int(np.argmax(logits2[-1]))
        if token == state.candidate and refresh:
            exact[step] = state.ig[-1]
        diags.append(StepDiagnostics(step, [float(x) for x in state.ccs.raw], [float(x) for x in s_keys],
                                     _decode(params, [state.candidate])[0], _decode(params, [token])[0],
                                     [int(j) for j in np.flatnonzero(s_keys < 1.0)]))
        out.append(token)
        traces.append(used)
        alpha_rows.append(aggregate_layers(used.weights, policy.aggregation)[-1, :n])
    graph = None
    if final_graph:
        graph = episode_graph(params, prompt, out, traces, policy, exact)
        for d, node in zip(diags, graph.output_nodes()):
            d.ccs_token = node.ccs
    return ReweightedGeneration(out, diags, traces, graph)


# ----------------------------------------------------------------------
# optional end-to-end GAT training
# ----------------------------------------------------------------------


@dataclass
class GatTrainSpec:
    steps: int = 0
    learning_rate: float = 1e-2
    seed: int = 0


def _expand_bias(bias: ad.Var, length: int) -> ad.Var:
    """(1, n) key biases -> (1, length), zero for the keys past n."""
    n = bias.shape[1]
    if n == length:
        return bias
    expand = np.zeros((n, length))
    expand[np.arange(n), np.arange(n)] = 1.0
    return ad.matmul(bias, expand)


def gat_step_loss(params: ModelParams, gat: GatParams, state: StepState, prompt: list[int], out: list[int],
                  gold: int, policy: ReweightPolicy, drop: np.ndarray | None = None):
    """Cross-entropy of ``gold`` after re-weighting one step; returns (tape, loss, W, a) or None.

    The keys to suppress are chosen exactly as during decoding; the factors
    ``max(s_floor, f * gat)`` of the chosen keys stay differentiable in W and a.
    None is returned when the step's plan suppresses nothing.
    """
    n = len(prompt)
    seq = prompt + out
    g0 = gat_scores(state.features, state.edges, gat)
    sel = (plan_for_step(state, g0, n, policy) < 1.0).astype(np.float64)
    if not sel.any():
        return None
    tape = ad.Tape()
    W, a = tape.input(gat.W), tape.input(gat.a)
    mask = neighborhood_mask(len(state.features), state.edges)
    _, score = _gat_graph(tape.constant(state.features), mask, W, a, gat.leaky_slope, drop)
    k = len(sel)
    s = ad.clamp_min(ad.mul(ad.take(score, slice(0, k)), tape.constant(state.factors[:k])), policy.s_floor)
    bias = _expand_bias(ad.reshape(ad.mul(ad.log(s), tape.constant(sel)), (1, k)), len(seq))
    res = forward_graph(params, [seq], tape=tape, attn_bias=bias, bias_layers=policy.layers)
    last = ad.take(res.logits, (slice(None), slice(len(seq) - 1, len(seq))))
    loss = ad.cross_entropy(last, np.array([[gold]]))
    return tape, loss, W, a


def train_gat(params: ModelParams, gat: GatParams, episodes, vocab_index: dict[str, int], store: FactStore,
              policy: ReweightPolicy | None = None, spec: GatTrainSpec | None = None) -> tuple[GatParams, list[float]]:
    """Fit W and a so that re-weighting at the answer step raises the gold token's probability.

    The base model stays frozen.  Each step teacher-forces one episode up to its
    answer and takes an Adam step on the re-weighted cross-entropy; steps whose
    plan suppresses nothing are skipped.
    """
    policy = policy or ReweightPolicy()
    spec = spec or GatTrainSpec()
    out_gat = gat.copy()
    if spec.steps == 0 or not episodes:
        return out_gat, []
    rng = np.random.default_rng(derive_seed(spec.seed, "gat.train"))
    m = [np.zeros_like(out_gat.W), np.zeros_like(out_gat.a)]
    v = [np.zeros_like(out_gat.W), np.zeros_like(out_gat.a)]
    history = []
    t = 0
    for _ in range(spec.steps):
        ep = episodes[int(rng.integers(len(episodes)))]
        prompt = [vocab_index[x] for x in ep.prompt]
        target = [vocab_index[x] for x in ep.target]
        out, gold = target[:-1], target[-1]
        evidence, f_in = _prepare(params, prompt, store, policy)
        alpha_rows = []
        for i in range(len(out)):
            _, tr = forward(params, prompt + out[:i])
            alpha_rows.append(aggregate_layers(tr.weights, policy.aggregation)[-1, :len(prompt)])
        state = score_step(params, prompt, out, alpha_rows, f_in, evidence, policy, [None] * (len(out) + 1))
        drop = None
        if out_gat.dropout > 0:
            size = len(state.features)
            drop = (rng.random((out_gat.num_heads, size, size)) >= out_gat.dropout) / (1.0 - out_gat.dropout)
        got = gat_step_loss(params, out_gat, state, prompt, out, gold, policy, drop)
        if got is None:
            continue
        tape, loss, W, a = got
        grads = tape.gradient(loss, [W, a])
        t += 1
        for k, (p, g) in enumerate(zip((out_gat.W, out_gat.a), grads)):
            m[k] = 0.9 * m[k] + 0.1 * g
            v[k] = 0.999 * v[k] + 0.001 * g * g
            p -= spec.learning_rate * (m[k] / (1 - 0.9 ** t)) / (np.sqrt(v[k] / (1 - 0.999 ** t)) + 1e-8)
        history.append(float(loss.value))
    return out_gat, history
