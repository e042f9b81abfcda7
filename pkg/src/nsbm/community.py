"""Differentiable SBM community detection: membership, similarity, losses,
community embeddings and the assignment/batch bookkeeping used for training.

Shapes: ``X`` is ``(n, d)``, ``Z`` is ``(n, K)`` or ``(n, K + 1)`` when the
pseudo-community (last column) is enabled. All logs are ``ln(x + 1e-12)``.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .layers import linear
from .numerics import (
    EPS,
    Tensor,
    concat,
    cosine_similarity,
    exact_sum,
    safe_log,
    sigmoid,
    softmax,
    take_rows,
    tanh,
    tensor,
)

ALPHA = 16.0
THETA_Z = 0.1


def _t(x):
    return x if isinstance(x, Tensor) else tensor(x)


# -- membership and similarity ------------------------------------------------------


def membership(X, layer):
    """Soft membership ``Z = softmax(X W + b)``.

    The number of columns is fixed by the layer: ``K + 1`` when it was built
    with a pseudo-community column.
    """
    return softmax(linear(_t(X), layer))


def community_similarity(Z, X, A, n_communities=None, normalize=False, detach_kernel=False):
    """``C = Z^T (X X^T + A A^T) Z`` over one batch.

    ``n_communities`` drops trailing columns of ``Z`` (the pseudo-community).
    With ``normalize=True`` the attribute kernel uses unit-length rows and
    negative similarities are clipped to zero, which keeps ``C`` nonnegative.
    ``detach_kernel=True`` treats the node kernel as constant so gradients
    reach ``X`` only through ``Z``; otherwise the loss can grow simply by
    inflating all pairwise similarities at once.
    """
    Z, X = _t(Z), _t(X)
    if detach_kernel:
        X = tensor(X.data)
    if n_communities is not None and n_communities < Z.shape[1]:
        Z = Z[:, :n_communities]
    A = np.asarray(A.toarray() if hasattr(A, "toarray") else A, dtype=np.float64)
    if normalize:
        norms = ((X * X).sum(axis=1, keepdims=True) + EPS) ** 0.5
        Xn = X / norms
        S = Xn @ Xn.T
        S = S * (S.data > 0)
    else:
        S = X @ X.T
    S = S + A @ A.T
    return Z.T @ S @ Z


def sbm_loss(C, sizes):
    """Negated matrix-form approximate SBM log-likelihood.

    ``-[sum C ln C - sum_i ln(n_i) rowsum_i - sum_j colsum_j ln(n_j)]``
    with ``0 ln 0 = 0`` (through the epsilon guard). Sums are correctly
    rounded, so relabeling communities leaves the value bit-identical.
    """
    C, sizes = _t(C), _t(sizes)
    ln_n = safe_log(sizes)
    ll = (exact_sum(C * safe_log(C)) - exact_sum(ln_n * exact_sum(C, axis=1))
          - exact_sum(exact_sum(C, axis=0) * ln_n))
    return -ll


def scaled_cosine(x1, x2, alpha=ALPHA):
    """``alpha * cos(x1, x2)``; 0 when either vector is zero."""
    return cosine_similarity(_t(x1), _t(x2)) * alpha


def sample_negatives(n, count, rng, adjacency=None, exclude_self=True, max_tries=50):
    """Uniform node pairs ``(i, j)`` from ``0..n-1`` that are not edges.

    ``adjacency`` is a dense or sparse ``n x n`` matrix (or None). Pairs are
    redrawn up to ``max_tries`` times; stubborn ones are kept as drawn.
    """
    pairs = rng.integers(0, n, size=(count, 2))
    if adjacency is None and not exclude_self:
        return pairs
    dense = None if adjacency is None else np.asarray(adjacency.toarray() if hasattr(adjacency, "toarray") else adjacency)
    for _ in range(max_tries):
        bad = np.zeros(count, dtype=bool)
        if exclude_self:
            bad |= pairs[:, 0] == pairs[:, 1]
        if dense is not None:
            bad |= dense[pairs[:, 0], pairs[:, 1]] != 0
        if not bad.any() or n < 2:
            break
        pairs[bad] = rng.integers(0, n, size=(int(bad.sum()), 2))
    return pairs


def link_loss(X, positive_pairs, layer1, layer2, negatives=None, num_negatives=5, rng=None,
              adjacency=None, weights=None, alpha=ALPHA):
    """Negative-sampling link prediction loss with scaled-cosine scores.

    Score of a pair is ``sigmoid(alpha * cos(L1 x_i, L2 x_j))``. Edges
    contribute ``-w ln s`` (``w`` = edge weight over the batch maximum, 1 for
    unweighted graphs); each sampled non-edge contributes ``-ln(1 - s)``. The
    mean is taken over all terms. Pass ``negatives`` explicitly for a fixed
    loss (e.g. gradient checks); otherwise ``num_negatives`` per positive are
    drawn with ``rng`` avoiding ``adjacency``.
    """
    X = _t(X)
    pos = np.asarray(positive_pairs, dtype=np.int64).reshape(-1, 2)
    if negatives is None:
        negatives = sample_negatives(X.shape[0], num_negatives * len(pos), rng, adjacency)
    neg = np.asarray(negatives, dtype=np.int64).reshape(-1, 2)
    H1, H2 = linear(X, layer1), linear(X, layer2)
    terms = []
    if len(pos):
        s = sigmoid(scaled_cosine(take_rows(H1, pos[:, 0]), take_rows(H2, pos[:, 1]), alpha))
        t = -safe_log(s)
        if weights is not None:
            w = np.asarray(weights, dtype=np.float64)
            t = t * (w / w.max() if w.max() > 0 else w)
        terms.append(t)
    if len(neg):
        s = sigmoid(scaled_cosine(take_rows(H1, neg[:, 0]), take_rows(H2, neg[:, 1]), alpha))
        terms.append(-safe_log(1.0 - s))
    if not terms:
        return tensor(0.0)
    return concat(terms, axis=0).mean()


def entropy_loss(Z):
    """Mean row entropy of ``Z`` (all columns, pseudo included); row sums are order-independent."""
    Z = _t(Z)
    return -exact_sum(Z * safe_log(Z), axis=1).mean()


def label_loss(Z, labels):
    """Mean negative log-probability of the true communities.

    ``labels`` maps node row -> list of community indices (or is a sequence
    aligned with the rows, ``None``/empty meaning unlabeled). Multi-label
    rows average over their labels.
    """
    Z = _t(Z)
    items = labels.items() if isinstance(labels, dict) else enumerate(labels)
    rows, cols, wts = [], [], []
    for r, labs in items:
        if labs is None:
            continue
        labs = [labs] if np.isscalar(labs) else list(labs)
        for lab in labs:
            if not 0 <= int(lab) < Z.shape[1]:
                raise ValueError(f"label {lab} of row {r} out of range for {Z.shape[1]} columns")
            rows.append(int(r))
            cols.append(int(lab))
            wts.append(1.0 / len(labs))
    if not rows:
        return tensor(0.0)
    n_labeled = sum(wts)
    picked = Z[np.array(rows), np.array(cols)]
    return -(safe_log(picked) * np.array(wts)).sum() / n_labeled


@dataclass
class LossBreakdown:
    sbm: Tensor
    entropy: Tensor
    link: Tensor
    labels: Tensor = None
    total: Tensor = None

    def __post_init__(self):
        if self.total is None:
            parts = [self.sbm, self.entropy, self.link]
            if self.labels is not None:
                parts.append(self.labels)
            total = parts[0]
            for p in parts[1:]:
                total = total + p
            self.total = total

    def as_dict(self):
        out = {k: getattr(self, k) for k in ("sbm", "entropy", "link", "labels", "total")}
        return {k: (None if v is None else float(v.item())) for k, v in out.items()}


def joint_loss(Z, X, A, positive_pairs, link_layers, n_communities, negatives=None, rng=None,
               num_negatives=5, labels=None, loss_weights=None, alpha=ALPHA,
               normalize_similarity=False, edge_weights=None, detach_kernel=False, kernel_X=None):
    """Joint loss ``sbm + entropy + link (+ labels)`` over one batch.

    The sbm term is divided by the batch size. ``loss_weights`` (dict with
    keys ``sbm``, ``entropy``, ``link``, ``labels``) scales terms; default 1.
    ``kernel_X`` replaces ``X`` inside the similarity kernel (e.g. raw
    attributes instead of learned embeddings).
    """
    lw = {"sbm": 1.0, "entropy": 1.0, "link": 1.0, "labels": 1.0}
    lw.update(loss_weights or {})
    Z, X = _t(Z), _t(X)
    n = Z.shape[0]
    KX = X if kernel_X is None else kernel_X
    C = community_similarity(Z, KX, A, n_communities, normalize_similarity, detach_kernel)
    sizes = Z[:, :n_communities].sum(axis=0)
    sbm = sbm_loss(C, sizes) * (lw["sbm"] / max(n, 1))
    ent = entropy_loss(Z) * lw["entropy"]
    link = link_loss(X, positive_pairs, link_layers[0], link_layers[1], negatives, num_negatives, rng,
                     A, edge_weights, alpha) * lw["link"]
    lab = None
    if labels is not None:
        lab = label_loss(Z, labels) * lw["labels"]
    return LossBreakdown(sbm, ent, link, lab)


# -- community embeddings ------------------------------------------------------------


@dataclass
class CommunityEmbeddings:
    theta: float
    members: list
    weights: list
    vectors: list
    attention: list
    empty: np.ndarray = field(default=None)

    def matrix(self):
        """``(K, d)`` tensor of community vectors (zero rows for empty communities)."""
        return concat([v.reshape(1, -1) for v in self.vectors], axis=0)


def attention_scores(Xk, layer, w2):
    """Unnormalised attention ``w2^T tanh(Xk W + b)``, one score per row."""
    return tanh(linear(Xk, layer)) @ w2


def community_embeddings(Z, X, params, theta=THETA_Z, n_communities=None):
    """Attention-pooled community vectors from clipped memberships.

    Members of community k are rows with ``Z[v, k] >= theta``; their rows of
    ``X`` are scaled by ``Z[v, k]`` and pooled with softmax attention
    ``softmax(w2^T tanh(L(X_k)))``. ``params`` holds ``{"layer": {...}, "w2": tensor}``.
    """
    if not 0 <= theta < 1:
        raise ValueError("theta must lie in [0, 1)")
    Z, X = _t(Z), _t(X)
    K = Z.shape[1] if n_communities is None else n_communities
    members, weights, vectors, attn, empty = [], [], [], [], []
    for k in range(K):
        idx = np.flatnonzero(Z.data[:, k] >= theta)
        members.append(idx)
        if idx.size == 0:
            weights.append(np.zeros(0))
            vectors.append(tensor(np.zeros(X.shape[1])))
            attn.append(np.zeros(0))
            empty.append(True)
            continue
        zk = Z[idx, k]
        Xk = take_rows(X, idx) * zk.reshape(-1, 1)
        a = softmax(attention_scores(Xk, params["layer"], params["w2"]))
        vectors.append(a @ Xk)
        weights.append(zk.data.copy())
        attn.append(a.data.copy())
        empty.append(False)
    return CommunityEmbeddings(theta, members, weights, vectors, attn, np.array(empty))


# -- assignments and batches ----------------------------------------------------------


def init_assignment(graph, K, pseudo=True, absorb_fraction=0.5):
    """Degree-based seeded growth of ``K`` initial communities.

    Each round takes the highest-degree unassigned node (lowest id on ties)
    as seed, absorbs its unassigned neighbours, then repeatedly absorbs any
    unassigned frontier node that sends at least ``absorb_fraction`` of its
    edge weight into the growing community. Seeds must have an edge. Left
    over nodes get index ``K`` (pseudo) or, without pseudo, are dealt
    round-robin to the currently smallest communities.
    """
    n = graph.n_nodes
    adj = graph.adjacency().tocsr()
    if graph.directed:
        adj = (adj + adj.T).tocsr()
    strength = np.asarray(adj.sum(axis=1)).ravel()
    degree = np.diff(adj.indptr)
    z = np.full(n, -1, dtype=np.int64)
    for k in range(K):
        free = np.flatnonzero(z < 0)
        if free.size == 0:
            break
        seed = free[np.lexsort((free, -degree[free]))[0]]
        if degree[seed] == 0:
            break
        z[seed] = k
        nb = adj.indices[adj.indptr[seed] : adj.indptr[seed + 1]]
        z[nb[z[nb] < 0]] = k
        while True:
            inside = (z == k).astype(np.float64)
            into = adj @ inside
            frac = np.divide(into, strength, out=np.zeros(n), where=strength > 0)
            cand = np.flatnonzero((z < 0) & (into > 0) & (frac >= absorb_fraction))
            if cand.size == 0:
                break
            z[cand] = k
    left = np.flatnonzero(z < 0)
    if pseudo:
        z[left] = K
    else:
        sizes = np.bincount(z[z >= 0], minlength=K)
        for v in left:
            k = int(np.argmin(sizes))
            z[v] = k
            sizes[k] += 1
    return z


def sample_batch(assignments, c, batch_size, rng):
    """Sample ``c`` nonempty groups uniformly, then up to ``batch_size`` nodes from their union.

    Groups are the distinct assignment values (the pseudo-community counts
    as a group). Returns sorted node ids and the sampled group ids.
    """
    if c < 1:
        raise ValueError("c must be >= 1")
    assignments = np.asarray(assignments)
    groups = np.unique(assignments)
    chosen = np.sort(rng.choice(groups, size=min(c, groups.size), replace=False))
    pool = np.flatnonzero(np.isin(assignments, chosen))
    if pool.size > batch_size:
        pool = np.sort(rng.choice(pool, size=batch_size, replace=False))
    return pool, chosen


def update_assignment(assignments, batch_nodes, Z_batch):
    """New assignment list with batch nodes moved to the argmax of their ``Z`` row."""
    out = np.array(assignments, copy=True)
    Zb = Z_batch.data if isinstance(Z_batch, Tensor) else np.asarray(Z_batch)
    out[np.asarray(batch_nodes, dtype=np.int64)] = np.argmax(Zb, axis=1)
    return out


# -- checkpoints ----------------------------------------------------------------------

MAGIC = b"NSBM1\n"


def save_checkpoint(path, arrays, meta=None):
    """Write ``NSBM1`` + one-line JSON manifest + little-endian float64 arrays."""
    names = list(arrays)
    manifest = {
        "params": [{"name": k, "shape": list(np.shape(_np(arrays[k])))} for k in names],
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for k in names:
            fh.write(np.ascontiguousarray(_np(arrays[k]), dtype="<f8").tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(arrays, meta)``."""
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise ValueError(f"{path}: not an NSBM1 checkpoint")
        manifest = json.loads(fh.readline().decode("utf-8"))
        arrays = {}
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated array {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after last array")
    return arrays, manifest["meta"]


def _np(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
