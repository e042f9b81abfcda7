"""Sequence-based graph embedder.

Every node is represented by a short node sequence (its degree-sorted
neighbourhood or a biased random walk). The raw embeddings of the sequence go
through one single-head self-attention layer with a residual connection and
are pooled into a single vector for the centre node.
"""

import struct

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .layers import init_linear, linear
from .numerics import (
    AdamState,
    Tensor,
    adam_step,
    evaluate_with_gradients,
    make_rng,
    safe_log,
    sigmoid,
    softmax,
    take_rows,
    tanh,
    tensor,
)

PAD = -1


# -- node representatives ---------------------------------------------------------------


def build_repr(graph, v, m=16, key="degree"):
    """Centre node followed by up to ``m - 1`` neighbours.

    ``key="degree"`` sorts neighbours by ``|deg(u) - deg(v)|``;
    ``key="jaccard"`` by decreasing Jaccard index of neighbour sets;
    ``key="weight"`` by decreasing edge weight. Ties go to the smaller node id.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    nb = graph.neighbors(v)
    if nb.size == 0 or m == 1:
        return np.array([v], dtype=np.int64)
    if key == "degree":
        deg = graph.degree()
        k = np.abs(deg[nb] - deg[v]).astype(np.float64)
    elif key == "jaccard":
        own = set(nb.tolist()) | {v}
        k = np.array([-_jaccard(own, set(graph.neighbors(u).tolist()) | {u}) for u in nb])
    elif key == "weight":
        k = -graph.neighbor_weights(v)
    else:
        raise ValueError(f"unknown sorting key {key!r}")
    order = np.lexsort((nb, k))
    return np.concatenate([[v], nb[order][: m - 1]]).astype(np.int64)


def _jaccard(a, b):
    return len(a & b) / len(a | b)


def build_reprs(graph, m=16, key="degree"):
    """``(n, m)`` array of representatives, padded with ``-1``."""
    out = np.full((graph.n_nodes, m), PAD, dtype=np.int64)
    for v in range(graph.n_nodes):
        r = build_repr(graph, v, m, key)
        out[v, : r.size] = r
    return out


def sample_walk(graph, v, length, p=1.0, q=1.0, rng=None):
    """Second-order biased walk of up to ``length`` nodes starting at ``v``.

    Unnormalised transition weight from ``cur`` (having come from ``prev``)
    to ``x`` is ``w / p`` if ``x == prev``, ``w`` if ``x`` neighbours
    ``prev`` and ``w / q`` otherwise. Stops early at nodes without
    out-neighbours.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = make_rng(0, "walk") if rng is None else rng
    walk = [int(v)]
    prev_nb = None
    while len(walk) < length:
        cur = walk[-1]
        nb = graph.neighbors(cur)
        if nb.size == 0:
            break
        w = graph.neighbor_weights(cur).astype(np.float64)
        if len(walk) > 1:
            prev = walk[-2]
            bias = np.where(nb == prev, 1.0 / p, np.where(np.isin(nb, prev_nb), 1.0, 1.0 / q))
            w = w * bias
        prev_nb = nb
        walk.append(int(nb[rng.choice(nb.size, p=w / w.sum())]))
    return np.array(walk, dtype=np.int64)


def sample_walks(graph, length, walks_per_node=1, p=1.0, q=1.0, seed=0):
    """Walks from every node; node ``v``'s ``r``-th walk uses its own derived stream."""
    n = graph.n_nodes
    out = np.full((n * walks_per_node, length), PAD, dtype=np.int64)
    for r in range(walks_per_node):
        for v in range(n):
            w = sample_walk(graph, v, length, p, q, make_rng(seed, f"walk/{r}/{v}"))
            out[r * n + v, : w.size] = w
    return out


def save_walks(walks, path):
    """Binary walk cache: ``<u4 count, <u4 length``, then ``<u4`` node ids (pad = 0xFFFFFFFF)."""
    walks = np.asarray(walks, dtype=np.int64)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", walks.shape[0], walks.shape[1]))
        fh.write(np.where(walks < 0, 0xFFFFFFFF, walks).astype("<u4").tobytes())


def load_walks(path):
    with open(path, "rb") as fh:
        count, length = struct.unpack("<II", fh.read(8))
        body = np.frombuffer(fh.read(), dtype="<u4")
    if body.size != count * length:
        raise ValueError(f"{path}: expected {count * length} ids, found {body.size}")
    out = body.astype(np.int64).reshape(count, length)
    out[out == 0xFFFFFFFF] = PAD
    return out


# -- attention encoder --------------------------------------------------------------------


def init_embedder(d_raw, d_model=64, d_out=64, m=16, pooling="mean", seed=0):
    """Parameter dict for :func:`embed_sequence`."""
    if pooling not in ("mean", "attention"):
        raise ValueError(f"unknown pooling {pooling!r}")
    rng = make_rng(seed, "embedder-init")
    params = {
        "input": init_linear(rng, d_raw, d_model),
        "pos": tensor(rng.normal(scale=0.1, size=(m, d_model)), requires_grad=True),
        "query": init_linear(rng, d_model, d_model, bias=False),
        "key": init_linear(rng, d_model, d_model, bias=False),
        "value": init_linear(rng, d_model, d_model, bias=False),
        "output": init_linear(rng, d_model, d_out),
    }
    if pooling == "attention":
        params["pool"] = {
            "layer": init_linear(rng, d_model, d_model),
            "w2": tensor(rng.normal(scale=0.1, size=d_model), requires_grad=True),
        }
    return params


def embed_sequence(seqs, raw, params, use_position=True):
    """Embed a batch of padded sequences (``-1`` = padding) into ``(B, d_out)``.

    ``raw`` is the ``(n, d_raw)`` raw-embedding tensor indexed by node id.
    """
    seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
    raw = raw if isinstance(raw, Tensor) else tensor(raw)
    d_out = params["output"]["W"].shape[1]
    if seqs.shape[0] == 0:
        return tensor(np.zeros((0, d_out)))
    valid = seqs != PAD
    if not valid[:, 0].all():
        raise ValueError("every sequence needs its centre node in position 0")
    if seqs.max() >= raw.shape[0]:
        raise ValueError(f"node {int(seqs.max())} has no raw embedding")
    B, L = seqs.shape
    H = linear(take_rows(raw, np.where(valid, seqs, 0)), params["input"])  # (B, L, dm)
    if use_position:
        H = H + params["pos"][:L]
    dm = H.shape[-1]
    Q, K, V = linear(H, params["query"]), linear(H, params["key"]), linear(H, params["value"])
    scores = (Q @ K.T) * (1.0 / np.sqrt(dm))  # (B, L, L)
    att = softmax(scores, mask=valid[:, None, :])
    H = H + att @ V
    w = valid.astype(np.float64)
    if "pool" in params:
        s = tanh(linear(H, params["pool"]["layer"])) @ params["pool"]["w2"]  # (B, L)
        a = softmax(s, mask=valid)
    else:
        a = tensor(w / w.sum(axis=1, keepdims=True))
    pooled = (H * a.reshape(B, L, 1)).sum(axis=1)
    return linear(pooled, params["output"])


def embed_rounds(reprs, raw, params, rounds=1, use_position=True):
    """Apply the encoder ``rounds`` times, feeding each round's output back as raw input.

    Each extra round widens the receptive field by one hop; it needs
    ``d_out == d_raw`` since the same parameters are reused.
    """
    X = raw
    for r in range(rounds):
        if r and X.shape[1] != params["input"]["W"].shape[0]:
            raise ValueError("multi-round embedding needs d_out == d_raw")
        X = embed_sequence(reprs, X, params, use_position)
    return X


# -- skip-gram objective ---------------------------------------------------------------------


def context_pairs(walks, window):
    """(centre, context) position pairs within ``window`` along each walk."""
    walks = np.asarray(walks, dtype=np.int64)
    pairs = []
    for off in range(1, window + 1):
        a, b = walks[:, :-off], walks[:, off:]
        ok = (a != PAD) & (b != PAD)
        pairs.append(np.stack([a[ok], b[ok]], axis=1))
        pairs.append(np.stack([b[ok], a[ok]], axis=1))
    return np.concatenate(pairs, axis=0) if pairs else np.zeros((0, 2), dtype=np.int64)


def skipgram_loss(walks, window, num_negatives, X, rng=None, negatives=None):
    """Mean over (centre, context) pairs of
    ``-ln s(x_c . x_o) - sum_neg ln(1 - s(x_c . x_n))``.

    Negatives are uniform node ids (``num_negatives`` per pair) unless given
    as an array of shape ``(pairs, num_negatives)``.
    """
    X = X if isinstance(X, Tensor) else tensor(X)
    pairs = context_pairs(walks, window)
    if pairs.shape[0] == 0:
        return tensor(0.0)
    xc = take_rows(X, pairs[:, 0])
    loss = -safe_log(sigmoid((xc * take_rows(X, pairs[:, 1])).sum(axis=1)))
    if num_negatives:
        if negatives is None:
            negatives = rng.integers(0, X.shape[0], size=(pairs.shape[0], num_negatives))
        xn = take_rows(X, negatives)  # (P, neg, d)
        dots = (xn * xc.reshape(pairs.shape[0], 1, -1)).sum(axis=2)
        loss = loss - safe_log(1.0 - sigmoid(dots)).sum(axis=1)
    return loss.mean()


class SequenceEmbedder(TransformerMixin, BaseEstimator):
    """Unsupervised sequence embedder trained with the skip-gram objective.

    ``fit`` takes a graph; ``transform`` returns the ``(n, d_out)`` embedding
    matrix. Raw inputs are the graph's numeric attributes when present plus
    a trainable free table of width ``free_dim``.
    """

    def __init__(self, d_model=64, d_out=64, m=16, free_dim=16, pooling="mean", repr_key="degree",
                 walk_length=10, window=3, num_negatives=5, epochs=20, lr=1e-2, random_state=0):
        self.d_model = d_model
        self.d_out = d_out
        self.m = m
        self.free_dim = free_dim
        self.pooling = pooling
        self.repr_key = repr_key
        self.walk_length = walk_length
        self.window = window
        self.num_negatives = num_negatives
        self.epochs = epochs
        self.lr = lr
        self.random_state = random_state

    def fit(self, graph, y=None):
        from .graph import AttributeEncoderConfig, encode_attributes

        numeric = 0 if graph.attributes is None else graph.attributes.shape[1]
        cfg = AttributeEncoderConfig(numeric_dim=numeric, free_dim=self.free_dim)
        self.raw_ = encode_attributes(graph, cfg, make_rng(self.random_state, "free-table"))
        raw = self.raw_.matrix()
        self.params_ = init_embedder(raw.shape[1], self.d_model, self.d_out, self.m, self.pooling,
                                     self.random_state)
        self.reprs_ = build_reprs(graph, self.m, self.repr_key)
        flat = _flat(self.params_)
        if self.raw_.free.shape[1]:
            flat["raw.free"] = self.raw_.free
        state = AdamState.for_params(flat, lr=self.lr)
        self.loss_history_ = []
        for e in range(self.epochs):
            walks = sample_walks(graph, self.walk_length, seed=self.random_state * 7919 + e)
            rng = make_rng(self.random_state, f"skipgram/{e}")

            def loss():
                X = embed_sequence(self.reprs_, self.raw_.matrix(), self.params_)
                return skipgram_loss(walks, self.window, self.num_negatives, X, rng)

            val, grads = evaluate_with_gradients(loss, flat)
            adam_step(flat, grads, state)
            self.loss_history_.append(val)
        return self

    def transform(self, graph=None):
        return embed_sequence(self.reprs_, self.raw_.matrix(), self.params_).data


def _flat(params, prefix=""):
    from .layers import flatten_params

    return flatten_params(params, prefix)
