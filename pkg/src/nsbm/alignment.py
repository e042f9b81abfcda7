"""Graph alignment head: projections ``L1``/``L2``, a relaxed selection matrix,
community-first batch training and nearest-neighbour matching."""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .community import ALPHA, sample_batch
from .layers import flatten_params, init_linear, linear
from .numerics import (
    AdamState,
    Tensor,
    adam_step,
    evaluate_with_gradients,
    l2_norm,
    make_rng,
    safe_log,
    sigmoid,
    softmax,
    take_rows,
    tensor,
)


@dataclass
class AlignmentModel:
    """Projections into a shared space; ``tied`` makes ``L2`` the very same layer as ``L1``."""

    L1: dict
    L2: dict
    alpha: float = ALPHA
    tied: bool = False
    loss_history: list = field(default_factory=list)

    @classmethod
    def create(cls, d1, d2=None, d_out=None, alpha=ALPHA, tied=False, identity=True, seed=0):
        d2 = d1 if d2 is None else d2
        d_out = d1 if d_out is None else d_out
        rng = make_rng(seed, "alignment-init")
        if tied and d1 != d2:
            raise ValueError("tied projections need equal input widths")
        L1 = init_linear(rng, d1, d_out, identity=identity and d1 == d_out)
        L2 = L1 if tied else init_linear(rng, d2, d_out, identity=identity and d2 == d_out)
        return cls(L1, L2, alpha, tied)

    def params(self):
        groups = {"L1": self.L1} if self.tied else {"L1": self.L1, "L2": self.L2}
        return flatten_params(groups)

    def project(self, X1=None, X2=None):
        """``(L1(X1), L2(X2))`` as arrays; either side may be ``None``."""
        Y1 = None if X1 is None else linear(tensor(np.asarray(X1, dtype=np.float64)), self.L1).data
        Y2 = None if X2 is None else linear(tensor(np.asarray(X2, dtype=np.float64)), self.L2).data
        return Y1, Y2


def _t(x):
    return x if isinstance(x, Tensor) else tensor(np.asarray(x, dtype=np.float64))


def _unit_rows(Y):
    return Y * (1.0 / (l2_norm(Y, axis=1, keepdims=True) + 1e-12))


def alignment_scores(X1, X2, model):
    """Row-stochastic ``softmax_j(alpha * cos(L1 x1_i, L2 x2_j))``, shape ``(n1, n2)``."""
    X1, X2 = _t(X1), _t(X2)
    if X1.shape[0] == 0 or X2.shape[0] == 0:
        raise ValueError("both embedding sets must be nonempty")
    Y1, Y2 = _unit_rows(linear(X1, model.L1)), _unit_rows(linear(X2, model.L2))
    return softmax((Y1 @ Y2.T) * model.alpha)


def alignment_loss(X1, X2, P, model, entropy_weight=1.0):
    """Mean squared row distance ``|L1 x1_i - (P L2 X2)_i|^2`` plus mean row entropy of ``P``."""
    X1, X2, P = _t(X1), _t(X2), _t(P)
    diff = linear(X1, model.L1) - P @ linear(X2, model.L2)
    dist = (diff * diff).sum(axis=1).mean()
    ent = -(P * safe_log(P)).sum(axis=1).mean()
    return dist + ent * entropy_weight


def pair_classification_loss(X1, X2, pairs, negatives, model):
    """Negative-sampling loss on known pairs: ``-ln s(pos) - ln(1 - s(neg))`` averaged.

    ``s`` is the sigmoid of the scaled cosine between projected rows;
    ``negatives`` holds ``(row in X1, row in X2)`` non-matches.
    """
    X1, X2 = _t(X1), _t(X2)
    Y1, Y2 = _unit_rows(linear(X1, model.L1)), _unit_rows(linear(X2, model.L2))

    def score(p):
        p = np.asarray(p, dtype=np.int64).reshape(-1, 2)
        return (take_rows(Y1, p[:, 0]) * take_rows(Y2, p[:, 1])).sum(axis=1) * model.alpha

    terms = -safe_log(sigmoid(score(pairs))).sum()
    n = len(pairs)
    if len(negatives):
        terms = terms - safe_log(1.0 - sigmoid(score(negatives))).sum()
        n += len(negatives)
    return terms * (1.0 / max(n, 1))


# -- training ----------------------------------------------------------------------------------


@dataclass
class AlignmentSide:
    """What alignment needs from one graph's trained framework."""

    X: np.ndarray
    assignments: np.ndarray
    communities: np.ndarray  # (K, d) community embeddings, empty ones dropped
    community_ids: np.ndarray

    @classmethod
    def from_model(cls, model, graph=None):
        """Embeddings, hard labels and community vectors from a fitted NSBM.

        ``graph=None`` uses the model's training graph.
        """
        X = model.transform(graph)
        labels = model.predict(graph)
        ce = model.community_embeddings(graph=graph)
        keep = np.flatnonzero(~ce.empty)
        vecs = np.stack([ce.vectors[k].data for k in keep]) if keep.size else np.zeros((0, X.shape[1]))
        return cls(X, labels.astype(np.int64), vecs, keep)


def _top_matches(model, side1, side2, c):
    """For each G1 community id: the ``c`` closest G2 community ids (projected Euclidean distance)."""
    if side1.communities.shape[0] == 0 or side2.communities.shape[0] == 0:
        return {}
    Y1, Y2 = model.project(side1.communities, side2.communities)
    d = ((Y1[:, None, :] - Y2[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d, axis=1, kind="stable")[:, :c]
    return {int(side1.community_ids[i]): side2.community_ids[order[i]] for i in range(len(Y1))}


def train_alignment(side1, side2, epochs=10, c=3, batch_size=256, labels=None, lr=1e-2, num_negatives=5,
                    entropy_weight=1.0, tied=False, alpha=ALPHA, seed=0, model=None, callback=None):
    """Train alignment projections between two graphs' frameworks.

    Each batch samples ``c`` G1 communities and ``batch_size`` of their nodes,
    ranks G2 communities by projected community-embedding distance, draws
    ``batch_size`` G2 nodes from the top ``c`` matches of the sampled
    communities and applies :func:`alignment_loss` between the two node sets.
    Every epoch ends with one batch of community embeddings only. ``labels``
    (pairs ``(g1, g2)``) add :func:`pair_classification_loss` for the labeled
    G1 nodes in a batch. The frameworks themselves stay fixed.
    """
    if model is None:
        model = AlignmentModel.create(side1.X.shape[1], side2.X.shape[1], alpha=alpha, tied=tied, seed=seed)
    params = model.params()
    opt = AdamState.for_params(params, lr=lr)
    truth = {}
    if labels is not None:
        truth = {int(a): int(b) for a, b in np.asarray(labels, dtype=np.int64).reshape(-1, 2)}
    n1, n2 = side1.X.shape[0], side2.X.shape[0]
    steps = max(1, math.ceil(n1 / batch_size))
    for e in range(epochs):
        rng = make_rng(seed, f"alignment/{e}")
        for s in range(steps):
            nodes1, comms = sample_batch(side1.assignments, c, batch_size, rng)
            top = _top_matches(model, side1, side2, c)
            cand = np.unique(np.concatenate([top.get(int(k), np.zeros(0, np.int64)) for k in comms] or [[]]))
            pool = np.flatnonzero(np.isin(side2.assignments, cand)) if cand.size else np.arange(n2)
            if pool.size == 0:
                pool = np.arange(n2)
            nodes2 = np.sort(rng.choice(pool, size=min(batch_size, pool.size), replace=False))
            pairs, negs = [], []
            if truth:
                full = np.arange(n2)
                for r, v in enumerate(nodes1):
                    if int(v) in truth:
                        pairs.append((r, truth[int(v)]))
                        neg = rng.choice(full, size=num_negatives)
                        negs.extend((r, int(u)) for u in neg if int(u) != truth[int(v)])

            def fn():
                X1, X2 = side1.X[nodes1], side2.X[nodes2]
                loss = alignment_loss(X1, X2, alignment_scores(X1, X2, model), model, entropy_weight)
                if pairs:
                    loss = loss + pair_classification_loss(side1.X[nodes1], side2.X, pairs, negs, model)
                return loss

            value, grads = evaluate_with_gradients(fn, params)
            adam_step(params, grads, opt)
            rec = {"epoch": e, "step": s, "kind": "nodes", "loss": float(value)}
            model.loss_history.append(rec)
            if callback is not None:
                callback(rec)
        if side1.communities.shape[0] and side2.communities.shape[0]:
            C1, C2 = side1.communities, side2.communities

            def cfn():
                return alignment_loss(C1, C2, alignment_scores(C1, C2, model), model, entropy_weight)

            value, grads = evaluate_with_gradients(cfn, params)
            adam_step(params, grads, opt)
            rec = {"epoch": e, "step": steps, "kind": "communities", "loss": float(value)}
            model.loss_history.append(rec)
            if callback is not None:
                callback(rec)
    return model


# -- matching ----------------------------------------------------------------------------------


@dataclass
class Matching:
    """Top-k G2 candidates per G1 node, nearest first; ``scores`` are negative distances."""

    candidates: np.ndarray
    scores: np.ndarray

    @property
    def top1(self):
        return self.candidates[:, 0]

    def as_pairs(self):
        return [(v, int(self.candidates[v, 0]), float(self.scores[v, 0])) for v in range(len(self.candidates))]


def _nearest(Y1, Y2, k, method):
    if method == "kdtree":
        # ask for one extra neighbour so ties at the k-th distance resolve by id below
        kk = min(k + 1, Y2.shape[0])
        d, idx = cKDTree(Y2).query(Y1, k=kk)
        d, idx = d.reshape(len(Y1), kk), idx.reshape(len(Y1), kk)
    elif method == "scan":
        d = np.sqrt(np.maximum(((Y1 * Y1).sum(1)[:, None] - 2 * Y1 @ Y2.T + (Y2 * Y2).sum(1)[None, :]), 0.0))
        idx = np.broadcast_to(np.arange(Y2.shape[0]), d.shape)
    else:
        raise ValueError(f"unknown search method {method!r}")
    order = np.lexsort((idx, np.round(d, 12)), axis=1)[:, :k]
    return np.take_along_axis(idx, order, 1), np.take_along_axis(d, order, 1)


def match_nodes(X1, X2, model, k=1, method="kdtree"):
    """Exact Euclidean nearest neighbours of ``L1(X1)`` rows among ``L2(X2)`` rows.

    Ties break by smaller G2 id; ``k`` is truncated to ``|V2|``.
    """
    Y1, Y2 = model.project(X1, X2)
    k = max(1, min(int(k), Y2.shape[0]))
    idx, d = _nearest(Y1, Y2, k, method)
    return Matching(idx.astype(np.int64), -d)


def alignment_accuracy_topk(matching, truth, k=1):
    """Fraction of truth pairs whose G2 node is among the first ``k`` candidates."""
    truth = np.asarray(truth, dtype=np.int64).reshape(-1, 2)
    cand = matching.candidates[:, :k]
    return float(np.mean([b in cand[a] for a, b in truth]))


# -- files ----------------------------------------------------------------------------------------


def save_matching(matching, path, names1=None, names2=None):
    """TSV ``g1_node  g2_node  score`` (top-1 per G1 node)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for v, u, sc in matching.as_pairs():
            w.writerow([names1[v] if names1 is not None else v, names2[u] if names2 is not None else u,
                        repr(round(sc, 12))])


def load_alignment(path):
    """Ground-truth TSV ``g1_node  g2_node`` -> ``(m, 2)`` int array."""
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) < 2:
                raise ValueError(f"line {i}: expected two tab-separated node ids")
            rows.append((int(row[0]), int(row[1])))
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def save_alignment(truth, path):
    with open(path, "w") as fh:
        for a, b in np.asarray(truth, dtype=np.int64).reshape(-1, 2):
            fh.write(f"{a}\t{b}\n")
