"""Independent loop-based reference implementations used as test oracles.

Everything here is written with explicit Python loops over scalars or short
vectors so that it shares no code path with the vectorized package.
"""

from __future__ import annotations

import math

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: float) -> float:
    return 0.5 * x * (1.0 + math.tanh(GELU_C * (x + 0.044715 * x ** 3)))


def layer_norm(vec, g, b, eps=1e-5):
    d = len(vec)
    mu = sum(vec) / d
    var = sum((v - mu) ** 2 for v in vec) / d
    return [(vec[i] - mu) / math.sqrt(var + eps) * g[i] + b[i] for i in range(d)]


def vecmat(vec, mat):
    rows, cols = mat.shape
    return [sum(vec[r] * mat[r, c] for r in range(rows)) for c in range(cols)]


def softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def mlp2(x, w1, b1, w2, b2):
    """Two dense layers with a ReLU in between, one sample at a time."""
    out = np.zeros((x.shape[0], w2.shape[1]))
    for n in range(x.shape[0]):
        hidden = []
        for j in range(w1.shape[1]):
            acc = b1[j]
            for i in range(w1.shape[0]):
                acc += x[n, i] * w1[i, j]
            hidden.append(max(acc, 0.0))
        for k in range(w2.shape[1]):
            acc = b2[k]
            for j in range(w2.shape[0]):
                acc += hidden[j] * w2[j, k]
            out[n, k] = acc
    return out


def transformer_logits(params, tokens):
    """Per-position, per-head loop implementation of the decoder forward pass.

    Returns (logits (T, V), attention (L, H, T, T)).
    """
    cfg = params.config
    p = params.tensors
    t_len, d, nh = len(tokens), cfg.embed_dim, cfg.num_heads
    dh = d // nh
    x = [[p["tok_emb"][tok, i] + p["pos_emb"][pos, i] for i in range(d)] for pos, tok in enumerate(tokens)]
    att_all = np.zeros((cfg.num_layers, nh, t_len, t_len))
    for layer in range(cfg.num_layers):
        pre = f"h{layer}."
        a_in = [layer_norm(x[t], p[pre + "ln1.g"], p[pre + "ln1.b"]) for t in range(t_len)]
        q = [[a + b for a, b in zip(vecmat(a_in[t], p[pre + "attn.wq"]), p[pre + "attn.bq"])] for t in range(t_len)]
        k = [[a + b for a, b in zip(vecmat(a_in[t], p[pre + "attn.wk"]), p[pre + "attn.bk"])] for t in range(t_len)]
        v = [[a + b for a, b in zip(vecmat(a_in[t], p[pre + "attn.wv"]), p[pre + "attn.bv"])] for t in range(t_len)]
        concat = [[0.0] * d for _ in range(t_len)]
        for h in range(nh):
            lo = h * dh
            for qi in range(t_len):
                scores = []
                for kj in range(qi + 1):
                    s = sum(q[qi][lo + c] * k[kj][lo + c] for c in range(dh)) / math.sqrt(dh)
                    scores.append(s)
                w = softmax(scores)
                for kj, wk in enumerate(w):
                    att_all[layer, h, qi, kj] = wk
                for c in range(dh):
                    concat[qi][lo + c] = sum(w[kj] * v[kj][lo + c] for kj in range(qi + 1))
        for t in range(t_len):
            o = vecmat(concat[t], p[pre + "attn.wo"])
            x[t] = [x[t][i] + o[i] + p[pre + "attn.bo"][i] for i in range(d)]
            m_in = layer_norm(x[t], p[pre + "ln2.g"], p[pre + "ln2.b"])
            hid = [gelu(a + b) for a, b in zip(vecmat(m_in, p[pre + "mlp.w1"]), p[pre + "mlp.b1"])]
            m = vecmat(hid, p[pre + "mlp.w2"])
            x[t] = [x[t][i] + m[i] + p[pre + "mlp.b2"][i] for i in range(d)]
    logits = np.zeros((t_len, cfg.vocab_size))
    for t in range(t_len):
        xf = layer_norm(x[t], p["lnf.g"], p["lnf.b"])
        row = vecmat(xf, p["out.w"])
        for c in range(cfg.vocab_size):
            logits[t, c] = row[c] + p["out.b"][c]
    return logits, att_all


def ccs_double_loop(alpha, ig):
    m, n = len(alpha), len(alpha[0]) if len(alpha) else 0
    out = []
    for i in range(m):
        acc = 0.0
        for j in range(n):
            acc += alpha[i][j] * abs(ig[i][j])
        out.append(acc)
    return out


def all_layers_mean(weights, pos, n_input):
    """Mean over layers and heads of one attention row, restricted to prompt columns."""
    n_layers, n_heads = weights.shape[0], weights.shape[1]
    row = []
    for j in range(n_input):
        acc = 0.0
        for layer in range(n_layers):
            for h in range(n_heads):
                acc += weights[layer, h, pos, j]
        row.append(acc / (n_layers * n_heads))
    return row


def gat_coefficients(x, edges, W, a, slope, symmetric=True):
    """Brute-force per-neighborhood softmax: (H, N, N) with zeros outside neighborhoods."""
    n = len(x)
    neigh = {v: {v} for v in range(n)}
    for u, v in edges:
        neigh[v].add(u)
        if symmetric:
            neigh[u].add(v)
    heads, _, f_out = W.shape
    out = np.zeros((heads, n, n))
    for h in range(heads):
        z = [vecmat(list(x[i]), W[h]) for i in range(n)]
        for v in range(n):
            logits = {}
            for u in sorted(neigh[v]):
                e = sum(a[h, c] * z[v][c] for c in range(f_out)) + sum(a[h, f_out + c] * z[u][c] for c in range(f_out))
                logits[u] = e if e > 0 else slope * e
            m = max(logits.values())
            denom = sum(math.exp(e - m) for e in logits.values())
            for u, e in logits.items():
                out[h, v, u] = math.exp(e - m) / denom
    return out


def renormalized(logits, s):
    p = softmax(list(logits))
    q = [pi * si for pi, si in zip(p, s)]
    tot = sum(q)
    return [qi / tot for qi in q]


def linear_scan_retrieve(facts, query, k):
    """Score every fact by distinct query tokens in {subject, relation}; stable sort."""
    qs = set(query)
    scored = []
    for idx, f in enumerate(facts):
        score = len(qs & {f.subject, f.relation})
        if score > 0:
            scored.append((-score, idx, f))
    scored.sort(key=lambda t: (t[0], t[1]))
    return [f for _, _, f in scored[:k]], [float(-s) for s, _, _ in scored[:k]]
