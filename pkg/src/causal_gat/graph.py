"""Token-level causal graph and the causal contribution score.

For generated token ``i`` and prompt token ``j`` the edge weight is
``alpha[i, j] * ig[i, j]``; the score of output ``i`` sums
``alpha[i, j] * |ig[i, j]|`` over the prompt tokens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attribution import AttributionMatrix
from .model import AttentionTrace

GRAPH_VERSION = 1
POLICIES = ("final_layer_mean_heads", "all_layers_mean", "rollout")
NORMS = ("none", "row_minmax")


@dataclass
class AlphaMatrix:
    values: np.ndarray          # (m, n), unrenormalized
    row_mass: np.ndarray        # (m,), attention mass of each row that landed on prompt tokens
    policy: str = "final_layer_mean_heads"

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def aggregate_layers(weights: np.ndarray, policy: str) -> np.ndarray:
    """Collapse a (layers, heads, T, T) trace to one (T, T) matrix."""
    if policy not in POLICIES:
        raise ValueError(f"unknown aggregation policy {policy!r}")
    per_layer = weights.mean(axis=1)
    if policy == "final_layer_mean_heads":
        return per_layer[-1]
    if policy == "all_layers_mean":
        return per_layer.mean(axis=0)
    # rollout: product of head-averaged layer matrices, last layer leftmost
    out = per_layer[0]
    for layer in per_layer[1:]:
        out = layer @ out
    return out


def aggregate_attention(traces: Sequence[AttentionTrace], n_input: int,
                        policy: str = "final_layer_mean_heads") -> AlphaMatrix:
    """Row ``i`` is taken from step ``i``'s trace at the position that generated output ``i``."""
    rows = []
    for i, tr in enumerate(traces):
        pos = n_input - 1 + i
        if tr.seq_len <= pos:
            raise ValueError(f"trace for step {i} has length {tr.seq_len}, needs > {pos}")
        rows.append(aggregate_layers(tr.weights, policy)[pos, :n_input])
    vals = np.array(rows, dtype=np.float64).reshape(len(rows), n_input)
    return AlphaMatrix(vals, vals.sum(axis=1), policy)


@dataclass
class CcsVector:
    raw: np.ndarray
    normalized: np.ndarray
    low: np.ndarray
    norm: str = "row_minmax"
    tau_percentile: float = 25.0

    def __len__(self) -> int:
        return len(self.raw)


def normalize(raw: np.ndarray, norm: str) -> np.ndarray:
    if norm not in NORMS:
        raise ValueError(f"unknown normalization {norm!r}")
    raw = np.asarray(raw, dtype=np.float64)
    if norm == "none" or raw.size == 0:
        return raw.copy()
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.ones_like(raw)
    return (raw - lo) / (hi - lo)


def low_flags(normalized: np.ndarray, tau_percentile: float) -> np.ndarray:
    """Strictly below the tau-th percentile of the episode's normalized scores."""
    if normalized.size == 0:
        return np.zeros(0, dtype=bool)
    return normalized < np.percentile(normalized, tau_percentile)


def ccs(alpha, attributions, norm: str = "row_minmax", tau_percentile: float = 25.0,
        renormalize_mass: bool = False) -> CcsVector:
    """Causal contribution score per generated token.

    ``renormalize_mass`` divides each row by its prompt attention mass (off by default).
    """
    a = alpha.values if isinstance(alpha, AlphaMatrix) else np.asarray(alpha, dtype=np.float64)
    ig = attributions.values if isinstance(attributions, AttributionMatrix) else np.asarray(attributions, dtype=np.float64)
    if a.shape != ig.shape:
        raise ValueError(f"alpha shape {a.shape} != attribution shape {ig.shape}")
    raw = (a * np.abs(ig)).sum(axis=1)
    if renormalize_mass:
        mass = a.sum(axis=1)
        raw = np.divide(raw, mass, out=np.zeros_like(raw), where=mass > 0)
    normed = normalize(raw, norm)
    return CcsVector(raw, normed, low_flags(normed, tau_percentile), norm, float(tau_percentile))


@dataclass
class GraphNode:
    id: str
    token: str
    pos: int
    role: str                     # "input" | "output"
    ccs: float | None = None
    ccs_norm: float | None = None
    low_ccs: bool | None = None
    f: float | None = None

    def to_json(self) -> dict:
        d = {"id": self.id, "token": self.token, "pos": self.pos, "role": self.role}
        for k in ("ccs", "ccs_norm", "low_ccs", "f"):
            v = getattr(self, k)
            if v is not None:
                d[k] = v
        return d


@dataclass
class GraphEdge:
    src: str
    dst: str
    alpha: float
    ig: float
    weight: float

    def to_json(self) -> dict:
        return {"src": self.src, "dst": self.dst, "alpha": self.alpha, "ig": self.ig, "weight": self.weight}


@dataclass
class CausalGraph:
    tokens_in: list[str]
    tokens_out: list[str]
    nodes: list[GraphNode]
    edges: list[GraphEdge]
    policy: dict = field(default_factory=dict)

    @property
    def n_input(self) -> int:
        return len(self.tokens_in)

    def output_nodes(self) -> list[GraphNode]:
        return [n for n in self.nodes if n.role == "output"]

    def ccs_vector(self) -> CcsVector:
        outs = self.output_nodes()
        return CcsVector(np.array([n.ccs for n in outs], dtype=np.float64),
                         np.array([n.ccs_norm for n in outs], dtype=np.float64),
                         np.array([bool(n.low_ccs) for n in outs], dtype=bool),
                         self.policy.get("norm", "row_minmax"), float(self.policy.get("tau_percentile", 25.0)))

    def set_factors(self, factors: Sequence[float]) -> None:
        if len(factors) != len(self.nodes):
            raise ValueError(f"expected {len(self.nodes)} factors, got {len(factors)}")
        for node, f in zip(self.nodes, factors):
            node.f = float(f)

    def weight_matrix(self) -> np.ndarray:
        """Dense (m, n) input-to-output weights; pruned edges read as 0."""
        w = np.zeros((len(self.tokens_out), self.n_input))
        for e in self.edges:
            if e.src.startswith("x") and e.dst.startswith("y"):
                w[int(e.dst[1:]), int(e.src[1:])] = e.weight
        return w


def build_graph(alpha, attributions, tokens_in: Sequence[str], tokens_out: Sequence[str],
                prune_below: float = 0.0, include_output_edges: bool = False,
                output_alpha=None, output_ig=None, norm: str = "row_minmax",
                tau_percentile: float = 25.0) -> CausalGraph:
    """Nodes for every prompt and generated token, edges x_j -> y_i weighted alpha*ig.

    Edges with |weight| < ``prune_below`` are dropped; scores are computed before
    pruning.  Output-to-output edges need (m, m) ``output_alpha``/``output_ig``
    whose entry [i, k] (k < i) describes y_k -> y_i.
    """
    if prune_below < 0:
        raise ValueError("prune_below must be >= 0")
    a = alpha.values if isinstance(alpha, AlphaMatrix) else np.asarray(alpha, dtype=np.float64)
    ig = attributions.values if isinstance(attributions, AttributionMatrix) else np.asarray(attributions, dtype=np.float64)
    m, n = len(tokens_out), len(tokens_in)
    if a.shape != (m, n) or ig.shape != (m, n):
        raise ValueError(f"expected ({m}, {n}) matrices, got alpha {a.shape} and ig {ig.shape}")
    scores = ccs(a, ig, norm, tau_percentile)
    nodes = [GraphNode(f"x{j}", tok, j, "input") for j, tok in enumerate(tokens_in)]
    for i, tok in enumerate(tokens_out):
        nodes.append(GraphNode(f"y{i}", tok, n + i, "output", float(scores.raw[i]),
                               float(scores.normalized[i]), bool(scores.low[i])))
    w = a * ig
    edges = [GraphEdge(f"x{j}", f"y{i}", float(a[i, j]), float(ig[i, j]), float(w[i, j]))
             for i in range(m) for j in range(n) if abs(w[i, j]) >= prune_below]
    if include_output_edges:
        if output_alpha is None or output_ig is None:
            raise ValueError("include_output_edges needs output_alpha and output_ig")
        oa, oi = np.asarray(output_alpha, dtype=np.float64), np.asarray(output_ig, dtype=np.float64)
        if oa.shape != (m, m) or oi.shape != (m, m):
            raise ValueError(f"output matrices must be ({m}, {m})")
        for i in range(m):
            for k in range(i):
                wk = oa[i, k] * oi[i, k]
                if abs(wk) >= prune_below:
                    edges.append(GraphEdge(f"y{k}", f"y{i}", float(oa[i, k]), float(oi[i, k]), float(wk)))
    policy = {"aggregation": alpha.policy if isinstance(alpha, AlphaMatrix) else "given",
              "norm": norm, "tau_percentile": float(tau_percentile), "prune_below": float(prune_below),
              "include_output_edges": bool(include_output_edges)}
    return CausalGraph(list(tokens_in), list(tokens_out), nodes, edges, policy)


# ----------------------------------------------------------------------
# exports
# ----------------------------------------------------------------------


def _dot_escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace('"', '\\"')


def _dot_str(s: str) -> str:
    return '"' + _dot_escape(s) + '"'


def export_dot(graph: CausalGraph) -> str:
    """Graphviz digraph; pen width scales with |weight| relative to the largest edge."""
    lines = ["digraph causal_graph {", "  rankdir=LR;", '  node [fontname="Helvetica"];']
    for node in sorted(graph.nodes, key=lambda nd: (nd.pos, nd.id)):
        label = _dot_escape(f"{node.token}@{node.pos}")
        attrs = ["shape=box"] if node.role == "input" else ["shape=ellipse"]
        if node.role == "output" and node.ccs is not None:
            label += f"\\nccs={node.ccs:.6g}"
            if node.low_ccs:
                attrs.append("style=filled")
                attrs.append('fillcolor="#f4cccc"')
        attrs.insert(0, f'label="{label}"')
        lines.append(f"  {_dot_str(node.id)} [{', '.join(attrs)}];")
    top = max((abs(e.weight) for e in graph.edges), default=0.0)
    for e in graph.edges:
        width = 0.5 + 4.5 * abs(e.weight) / top if top > 0 else 0.5
        color = "black" if e.weight >= 0 else "red"
        lines.append(f"  {_dot_str(e.src)} -> {_dot_str(e.dst)} "
                     f"[penwidth={width:.4f}, color={color}, label=\"{e.weight:.4g}\"];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def graph_to_json(graph: CausalGraph) -> dict:
    return {
        "version": GRAPH_VERSION,
        "tokens_in": list(graph.tokens_in),
        "tokens_out": list(graph.tokens_out),
        "policy": dict(graph.policy),
        "nodes": [n.to_json() for n in graph.nodes],
        "edges": [e.to_json() for e in graph.edges],
    }


def export_json(graph: CausalGraph) -> str:
    return json.dumps(graph_to_json(graph), indent=1, sort_keys=True) + "\n"


def import_json(text: str) -> CausalGraph:
    doc = json.loads(text)
    if doc.get("version") != GRAPH_VERSION:
        raise ValueError(f"unsupported graph version {doc.get('version')}")
    nodes = [GraphNode(**n) for n in doc["nodes"]]
    edges = [GraphEdge(**e) for e in doc["edges"]]
    return CausalGraph(list(doc["tokens_in"]), list(doc["tokens_out"]), nodes, edges, dict(doc["policy"]))
