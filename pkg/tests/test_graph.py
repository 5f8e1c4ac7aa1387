import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_gat.graph import (AlphaMatrix, aggregate_attention, aggregate_layers, build_graph, ccs, export_dot,
                              export_json, import_json)
from causal_gat.model import AttentionTrace

import oracles

GOLDEN = Path(__file__).parent / "golden"


def _random_trace(rng, layers, heads, t):
    w = rng.random((layers, heads, t, t)) * np.tril(np.ones((t, t)))
    return AttentionTrace(w / w.sum(axis=-1, keepdims=True))


def test_single_layer_single_head_passes_rows_through():
    rng = np.random.default_rng(0)
    traces = [_random_trace(rng, 1, 1, 4 + i) for i in range(2)]
    alpha = aggregate_attention(traces, 4)
    for i, tr in enumerate(traces):
        assert np.array_equal(alpha.values[i], tr.weights[0, 0, 3 + i, :4])
    assert np.allclose(alpha.row_mass, alpha.values.sum(axis=1))


def test_mean_over_heads():
    w = np.zeros((1, 2, 2, 2))
    w[0, 0, 1] = [1.0, 0.0]
    w[0, 1, 1] = [0.0, 1.0]
    w[0, :, 0, 0] = 1.0
    alpha = aggregate_attention([AttentionTrace(w)], 2)
    assert alpha.values.tolist() == [[0.5, 0.5]]


def test_all_layers_mean_matches_triple_loop():
    rng = np.random.default_rng(1)
    n = 5
    traces = [_random_trace(rng, 3, 4, n + i) for i in range(3)]
    alpha = aggregate_attention(traces, n, "all_layers_mean")
    for i, tr in enumerate(traces):
        ref = oracles.all_layers_mean(tr.weights, n - 1 + i, n)
        assert np.max(np.abs(alpha.values[i] - ref)) <= 1e-12


def test_rollout_with_one_layer_degenerates():
    rng = np.random.default_rng(2)
    tr = _random_trace(rng, 1, 3, 6)
    assert np.array_equal(aggregate_layers(tr.weights, "rollout"), aggregate_layers(tr.weights, "final_layer_mean_heads"))


def test_rollout_rows_stay_stochastic():
    rng = np.random.default_rng(3)
    tr = _random_trace(rng, 3, 2, 6)
    r = aggregate_layers(tr.weights, "rollout")
    assert np.allclose(r.sum(axis=1), 1.0, atol=1e-12)


def test_short_trace_rejected():
    rng = np.random.default_rng(4)
    with pytest.raises(ValueError):
        aggregate_attention([_random_trace(rng, 1, 1, 3)], 4)


def test_ccs_direct_arithmetic():
    v = ccs(np.array([[0.5, 0.5]]), np.array([[0.2, 0.4]]), norm="none")
    assert v.raw[0] == pytest.approx(0.3, abs=1e-15)


def test_ccs_negative_attribution_uses_magnitude():
    v = ccs(np.array([[0.5, 0.5]]), np.array([[-0.2, 0.4]]), norm="none")
    assert v.raw[0] == pytest.approx(0.3, abs=1e-15)


def test_ccs_zero_alpha_row():
    v = ccs(np.zeros((2, 3)), np.random.default_rng(0).normal(size=(2, 3)), norm="none")
    assert np.all(v.raw == 0.0)


def test_ccs_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        ccs(np.zeros((2, 3)), np.zeros((3, 2)))


def test_ccs_random_5x8_double_loop():
    rng = np.random.default_rng(5)
    a, i = rng.random((5, 8)), rng.normal(size=(5, 8))
    ref = oracles.ccs_double_loop(a.tolist(), i.tolist())
    assert np.max(np.abs(ccs(a, i).raw - np.array(ref))) <= 1e-12


def test_row_minmax_constant_row_maps_to_one():
    v = ccs(np.ones((3, 2)), np.ones((3, 2)))
    assert np.all(v.normalized == 1.0) and not v.low.any()


def test_low_flag_is_bottom_quartile():
    a = np.ones((4, 1))
    i = np.array([[1.0], [2.0], [3.0], [4.0]])
    v = ccs(a, i)
    assert v.normalized.tolist() == pytest.approx([0.0, 1 / 3, 2 / 3, 1.0])
    assert v.low.tolist() == [True, False, False, False]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(1e-3, 10.0))
def test_monotone_in_attribution_magnitude(seed, bump):
    rng = np.random.default_rng(seed)
    a, ig = rng.random((3, 5)), rng.normal(size=(3, 5))
    i, j = rng.integers(3), rng.integers(5)
    ig2 = ig.copy()
    ig2[i, j] = np.sign(ig[i, j] or 1.0) * (abs(ig[i, j]) + bump)
    assert ccs(a, ig2, "none").raw[i] >= ccs(a, ig, "none").raw[i]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([0.5, 2.0, 4.0, 0.25]))
def test_scale_covariance(seed, c):
    # powers of two keep the scaling exact in binary floating point
    rng = np.random.default_rng(seed)
    a, ig = rng.random((4, 6)), rng.normal(size=(4, 6))
    base, scaled = ccs(a, ig), ccs(a, c * ig)
    assert np.array_equal(scaled.raw, c * base.raw)
    assert np.array_equal(scaled.normalized, base.normalized)


def test_build_graph_dense_and_pruned():
    rng = np.random.default_rng(6)
    a, ig = rng.random((2, 3)), rng.normal(size=(2, 3))
    dense = build_graph(a, ig, ["a", "b", "c"], ["d", "e"], prune_below=0.0)
    assert len(dense.nodes) == 5 and len(dense.edges) == 6
    empty = build_graph(a, ig, ["a", "b", "c"], ["d", "e"], prune_below=float("inf"))
    assert empty.edges == []
    assert np.array_equal(empty.ccs_vector().raw, dense.ccs_vector().raw)


def test_edge_weights_equal_alpha_times_ig():
    a = np.array([[0.25, 0.75], [0.5, 0.125]])
    ig = np.array([[0.4, -2.0], [1.5, 0.0625]])
    g = build_graph(a, ig, ["p", "q"], ["r", "s"])
    assert np.array_equal(g.weight_matrix(), a * ig)
    ref = oracles.ccs_double_loop(a.tolist(), ig.tolist())
    assert np.array_equal(g.ccs_vector().raw, np.array(ref))


def test_graph_scores_equal_ccs():
    rng = np.random.default_rng(7)
    a, ig = rng.random((4, 5)), rng.normal(size=(4, 5))
    g = build_graph(AlphaMatrix(a, a.sum(1)), ig, list("abcde"), list("wxyz"))
    v = ccs(a, ig)
    assert np.array_equal(g.ccs_vector().raw, v.raw)
    assert np.array_equal(g.ccs_vector().low, v.low)


def test_output_edges_flag():
    a, ig = np.ones((2, 1)), np.ones((2, 1))
    g = build_graph(a, ig, ["a"], ["b", "c"], include_output_edges=True,
                    output_alpha=np.array([[0, 0], [0.5, 0]]), output_ig=np.array([[0, 0], [2.0, 0]]))
    assert [(e.src, e.dst, e.weight) for e in g.edges][-1] == ("y0", "y1", 1.0)


def test_dot_with_no_outputs():
    g = build_graph(np.zeros((0, 3)), np.zeros((0, 3)), ["a", "b", "c"], [])
    dot = export_dot(g)
    assert dot.count("shape=box") == 3 and "->" not in dot


def _fixture_graph():
    a = np.array([[0.5, 0.25, 0.125], [0.0625, 0.5, 0.25]])
    ig = np.array([[0.8, -0.4, 0.1], [0.3, 0.6, -1.2]])
    return build_graph(a, ig, ["F", "r1", "s2"], ["v3", "v4"])


def test_dot_is_deterministic():
    assert export_dot(_fixture_graph()) == export_dot(_fixture_graph())


def test_dot_golden_file():
    assert export_dot(_fixture_graph()).encode() == (GOLDEN / "graph_3in_2out.dot").read_bytes()


def test_json_schema_fields():
    doc = json.loads(export_json(_fixture_graph()))
    assert set(doc) == {"version", "tokens_in", "tokens_out", "policy", "nodes", "edges"}
    assert set(doc["nodes"][0]) == {"id", "token", "pos", "role"}
    assert set(doc["nodes"][-1]) == {"id", "token", "pos", "role", "ccs", "ccs_norm", "low_ccs"}
    assert set(doc["edges"][0]) == {"src", "dst", "alpha", "ig", "weight"}


def test_two_node_fixture_document():
    g = build_graph(np.array([[0.5]]), np.array([[-0.4]]), ["a"], ["b"])
    expected = {
        "version": 1,
        "tokens_in": ["a"],
        "tokens_out": ["b"],
        "policy": {"aggregation": "given", "norm": "row_minmax", "tau_percentile": 25.0,
                   "prune_below": 0.0, "include_output_edges": False},
        "nodes": [
            {"id": "x0", "token": "a", "pos": 0, "role": "input"},
            {"id": "y0", "token": "b", "pos": 1, "role": "output", "ccs": 0.2, "ccs_norm": 1.0, "low_ccs": False},
        ],
        "edges": [{"src": "x0", "dst": "y0", "alpha": 0.5, "ig": -0.4, "weight": -0.2}],
    }
    assert json.loads(export_json(g)) == expected


def test_import_rejects_unknown_version():
    doc = json.loads(export_json(_fixture_graph()))
    doc["version"] = 99
    with pytest.raises(ValueError, match="version"):
        import_json(json.dumps(doc))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 6), st.integers(0, 4), st.floats(0, 0.5))
def test_json_round_trip_random_graphs(seed, n, m, prune):
    rng = np.random.default_rng(seed)
    g = build_graph(rng.random((m, n)), rng.normal(size=(m, n)), [f"i{k}" for k in range(n)],
                    [f'o"{k}' for k in range(m)], prune_below=prune)
    if n:
        g.set_factors(rng.uniform(0.1, 1.0, size=n + m))
    back = import_json(export_json(g))
    assert back == g
    assert export_json(back) == export_json(g)
