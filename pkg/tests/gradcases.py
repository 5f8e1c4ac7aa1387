"""Random finite-difference cases for every autodiff primitive and the micro model.

A case is ``(fn, x)`` where ``fn(tape, xvar)`` returns a scalar Var.  Each
primitive's output is contracted with a fixed random weight tensor so that
every output element contributes to the checked scalar.  Binary primitives
alternate which operand is differentiated.
"""

from __future__ import annotations

import numpy as np

from causal_gat import autodiff as ad
from causal_gat.model import ModelParams, forward_graph, init_model
from causal_gat.training import Batch, loss_graph


def _readout(tape, y, rng):
    r = tape.constant(rng.normal(size=y.shape))
    return ad.sum(ad.mul(y, r))


def _away_from(rng, shape, kink, gap=0.01):
    x = rng.normal(size=shape)
    push = np.where(x >= kink, 2 * gap, -2 * gap)
    return np.where(np.abs(x - kink) < gap, kink + push, x)


def _binary_case(op, shape_a, shape_b, rng, k):
    a, b = rng.normal(size=shape_a), rng.normal(size=shape_b)
    seed = int(rng.integers(2 ** 31))

    def fn(tape, x):
        other = tape.constant(b if k % 2 == 0 else a)
        y = op(x, other) if k % 2 == 0 else op(other, x)
        return _readout(tape, y, np.random.default_rng(seed))

    return fn, (a if k % 2 == 0 else b)


def _unary_case(make, x, rng):
    seed = int(rng.integers(2 ** 31))

    def fn(tape, xv):
        return _readout(tape, make(tape, xv), np.random.default_rng(seed))

    return fn, x


def primitive_case(name: str, rng: np.random.Generator, k: int):
    """Build the k-th random case for primitive ``name``."""
    if name == "add":
        if k % 4 < 2:
            return _binary_case(ad.add, (3, 4), (3, 4), rng, k)
        return _binary_case(ad.add, (2, 3, 4), (4,), rng, k)      # bias broadcast
    if name == "sub":
        return _binary_case(ad.sub, (3, 4), (3, 4), rng, k)
    if name == "mul":
        return _binary_case(ad.mul, (2, 5), (2, 5), rng, k)
    if name == "matmul":
        if k % 4 < 2:
            return _binary_case(ad.matmul, (2, 3, 4), (4, 5), rng, k)
        return _binary_case(ad.matmul, (2, 3, 4), (2, 4, 2), rng, k)
    if name == "outer_add":
        return _binary_case(ad.outer_add, (4,), (5,), rng, k)
    if name == "scale":
        c = float(rng.normal())
        return _unary_case(lambda t, x: ad.scale(x, c), rng.normal(size=(3, 4)), rng)
    if name == "transpose":
        perm = tuple(rng.permutation(3))
        return _unary_case(lambda t, x: ad.transpose(x, perm), rng.normal(size=(2, 3, 4)), rng)
    if name == "reshape":
        return _unary_case(lambda t, x: ad.reshape(x, (4, 6)), rng.normal(size=(2, 3, 4)), rng)
    if name == "softmax":
        mask = np.tril(np.ones((4, 4), dtype=bool))
        use = k % 2 == 1
        return _unary_case(lambda t, x: ad.softmax(x, mask=mask if use else None), 2 * rng.normal(size=(3, 4, 4)), rng)
    if name == "layer_norm":
        g, b = rng.normal(size=5), rng.normal(size=5)
        x0 = rng.normal(size=(3, 5))
        which = k % 3
        if which == 0:
            return _unary_case(lambda t, x: ad.layer_norm(x, t.constant(g), t.constant(b)), x0, rng)
        if which == 1:
            return _unary_case(lambda t, x: ad.layer_norm(t.constant(x0), x, t.constant(b)), g, rng)
        return _unary_case(lambda t, x: ad.layer_norm(t.constant(x0), t.constant(g), x), b, rng)
    if name == "embedding":
        ids = rng.integers(6, size=(2, 5))
        return _unary_case(lambda t, x: ad.embedding(x, ids), rng.normal(size=(6, 3)), rng)
    if name == "gelu":
        return _unary_case(lambda t, x: ad.gelu(x), 2 * rng.normal(size=(3, 4)), rng)
    if name == "relu":
        return _unary_case(lambda t, x: ad.relu(x), _away_from(rng, (3, 4), 0.0), rng)
    if name == "leaky_relu":
        slope = float(rng.uniform(0.01, 0.5))
        return _unary_case(lambda t, x: ad.leaky_relu(x, slope), _away_from(rng, (3, 4), 0.0), rng)
    if name == "sigmoid":
        return _unary_case(lambda t, x: ad.sigmoid(x), 2 * rng.normal(size=(3, 4)), rng)
    if name == "log":
        return _unary_case(lambda t, x: ad.log(x), rng.uniform(0.5, 3.0, size=(3, 4)), rng)
    if name == "clamp_min":
        floor = float(rng.normal())
        return _unary_case(lambda t, x: ad.clamp_min(x, floor), _away_from(rng, (3, 4), floor), rng)
    if name == "cross_entropy":
        tg = rng.integers(5, size=(2, 3))
        w = rng.uniform(0.1, 1.0, size=(2, 3)) if k % 2 else None
        return (lambda t, x: ad.cross_entropy(x, tg, w)), 2 * rng.normal(size=(2, 3, 5))
    if name == "sum":
        axis = [None, 0, 1, 2][k % 4]
        return _unary_case(lambda t, x: ad.sum(x, axis=axis), rng.normal(size=(2, 3, 4)), rng)
    if name == "take":
        key = [(slice(None), 1), (0, slice(1, 3)), (slice(None), -1)][k % 3]
        return _unary_case(lambda t, x: ad.take(x, key), rng.normal(size=(3, 4)), rng)
    if name == "row_bias":
        s0, b0 = rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(2, 4))
        if k % 2 == 0:
            return _unary_case(lambda t, x: ad.row_bias(x, t.constant(b0), row=3), s0, rng)
        return _unary_case(lambda t, x: ad.row_bias(t.constant(s0), x, row=3), b0, rng)
    raise KeyError(name)


# ----------------------------------------------------------------------
# micro transformer, total training loss w.r.t. all parameters
# ----------------------------------------------------------------------


def micro_loss_case(seed: int, cfg_factory):
    """Random 1-layer micro model, batch and evidence mask; returns (flat params, loss_fn, grad)."""
    rng = np.random.default_rng(seed)
    cfg = cfg_factory(seed=seed)
    params = init_model(cfg)
    b, t = 2, int(rng.integers(3, cfg.context_length + 1))
    ids = rng.integers(cfg.vocab_size, size=(b, t))
    tgt = rng.integers(cfg.vocab_size, size=(b, t))
    w = rng.uniform(0.1, 1.0, size=(b, t))
    pmask = np.zeros((b, t, t))
    q = int(rng.integers(1, t))
    pmask[:, q, : q + 1] = rng.integers(2, size=(b, q + 1))
    batch = Batch(ids, tgt, w, pmask, b)
    lam = float(rng.uniform(0.0, 1.0))
    names = list(params.tensors)
    flat = np.concatenate([params.tensors[k].ravel() for k in names])

    def unflat(v):
        out, o = {}, 0
        for k in names:
            n = params.tensors[k].size
            out[k] = v[o:o + n].reshape(params.tensors[k].shape)
            o += n
        return ModelParams(cfg, out)

    def loss(v):
        _, total, *_ = loss_graph(unflat(v), batch, lam)
        return float(total.value)

    tape, total, _, _, pv = loss_graph(params, batch, lam)
    grads = tape.gradient(total, [pv[k] for k in names])
    grad = np.concatenate([g.ravel() for g in grads])
    return flat, loss, grad, rng


def micro_logit_fn(params, ids, position, token):
    """Scalar logit of ``token`` at ``position`` as a function of the token embeddings."""
    def fn(tape, emb):
        logits = forward_graph(params, embeddings=ad.reshape(emb, (1, *emb.shape)), tape=tape).logits
        return ad.take(logits, (0, position, token))
    return fn
