"""Canonical stochastic block model: block counts, exact likelihood and greedy fitting.

Community labels are 0-based here (``0..K-1``).
"""

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin

from .community import init_assignment
from .numerics import make_rng
from .validation import check_graph, check_labels


def count_blocks(graph, z, K=None):
    """Edge counts ``C``, possible-edge counts ``N`` and sizes ``n`` for labels ``z``.

    For undirected graphs an edge between communities i != j is counted in
    both ``C[i, j]`` and ``C[j, i]``; ``N[i, i] = n_i (n_i - 1) / 2``.
    Directed graphs count ordered pairs and use ``N[i, i] = n_i (n_i - 1)``.
    Edge weights are summed (they are all 1 for unweighted graphs).
    """
    z = check_labels(z, graph.n_nodes, K)
    K = int(z.max()) + 1 if K is None else int(K)
    sizes = np.bincount(z, minlength=K).astype(np.float64)
    C = np.zeros((K, K))
    np.add.at(C, (z[graph.src], z[graph.dst]), graph.weight)
    if not graph.directed:
        C = C + C.T - np.diag(np.diag(C))
        N = np.outer(sizes, sizes)
        np.fill_diagonal(N, sizes * (sizes - 1) / 2.0)
    else:
        N = np.outer(sizes, sizes)
        np.fill_diagonal(N, sizes * (sizes - 1))
    return C, N, sizes


def ml_block_matrix(C, N):
    """Maximum-likelihood block matrix ``P = C / N`` (0 where ``N == 0``)."""
    C = np.asarray(C, dtype=np.float64)
    N = np.asarray(N, dtype=np.float64)
    return np.divide(C, N, out=np.zeros_like(C), where=N > 0)


def _xlogy(x, y):
    # x * ln(y) with 0 * ln(anything) = 0 and -inf for x > 0, y == 0
    out = np.zeros(np.broadcast(x, y).shape)
    pos = x > 0
    with np.errstate(divide="ignore"):
        out[pos] = x[pos] * np.log(y[pos])
    return out


def block_log_likelihood(C, N, P, directed=False):
    """Bernoulli log-likelihood summed over community pairs.

    Unordered pairs (upper triangle with diagonal) for undirected graphs.
    """
    C, N, P = (np.asarray(a, dtype=np.float64) for a in (C, N, P))
    terms = _xlogy(C, P) + _xlogy(N - C, 1.0 - P)
    if not directed:
        terms = np.triu(terms)
    return float(terms.sum())


def exact_log_likelihood(graph, z, P):
    """ln of the SBM likelihood of ``graph``'s edges under labels ``z`` and block matrix ``P``.

    Returns ``-inf`` when an observed edge has probability 0 or a missing edge
    has probability 1.
    """
    P = np.asarray(P, dtype=np.float64)
    if np.any(P < 0) or np.any(P > 1):
        raise ValueError("block matrix entries must lie in [0, 1]")
    C, N, _ = count_blocks(graph, z, P.shape[0])
    return block_log_likelihood(C, N, P, graph.directed)


def profile_log_likelihood(C, N, directed=False):
    """Log-likelihood at the maximum-likelihood block matrix."""
    return block_log_likelihood(C, N, ml_block_matrix(C, N), directed)


def _move_counts(C, sizes, w_to, a, b, directed, w_from=None):
    # counts after moving one node with per-community edge weights w_to from a to b
    C = C.copy()
    sizes = sizes.copy()
    if directed:
        w_from = w_to if w_from is None else w_from
        C[a, :] -= w_to
        C[:, a] -= w_from
        C[b, :] += w_to
        C[:, b] += w_from
    else:
        C[a, :] -= w_to
        C[:, a] -= w_to
        C[a, a] += w_to[a]  # the a-a entry was hit twice for one set of edges
        C[b, :] += w_to
        C[:, b] += w_to
        C[b, b] -= w_to[b]
    sizes[a] -= 1
    sizes[b] += 1
    return C, sizes


def _pairs(sizes, directed):
    N = np.outer(sizes, sizes)
    np.fill_diagonal(N, sizes * (sizes - 1) if directed else sizes * (sizes - 1) / 2.0)
    return N


def growth_labels(graph, K):
    """Seeded-growth start (see :func:`nsbm.community.init_assignment`).

    Nodes the growth leaves over join the community they send most edge
    weight to, in id order; nodes with no such link join the smallest one.
    """
    z = init_assignment(graph, K, pseudo=True)
    adj = graph.adjacency().tocsr()
    if graph.directed:
        adj = (adj + adj.T).tocsr()
    for v in np.flatnonzero(z == K):
        nb = adj.indices[adj.indptr[v] : adj.indptr[v + 1]]
        w = adj.data[adj.indptr[v] : adj.indptr[v + 1]]
        ok = z[nb] < K
        if ok.any():
            z[v] = int(np.argmax(np.bincount(z[nb][ok], weights=w[ok], minlength=K)))
        else:
            z[v] = int(np.argmin(np.bincount(z[z < K], minlength=K)))
    return z


def fit_sbm(graph, K, rng=None, max_sweeps=100, init="growth"):
    """Greedy single-node label sweeps maximising the profile likelihood.

    Each sweep visits nodes in a random order and moves a node to the label
    with the highest likelihood (counts updated incrementally, ``P = C / N``).
    Ties keep the current label. Stops after a sweep with no change or after
    ``max_sweeps``. ``init`` is ``"growth"`` (degree-based seeded growth),
    ``"random"`` (uniform labels from ``rng``) or an explicit label array;
    random starts often stall in mixed local optima. Returns ``(z, P, trace)`` where ``trace`` holds the
    likelihood after initialisation and after every accepted move.
    """
    graph = check_graph(graph)
    K = int(K)
    if K < 1:
        raise ValueError("K must be >= 1")
    if K > graph.n_nodes:
        raise ValueError(f"K={K} exceeds the number of nodes {graph.n_nodes}")
    rng = make_rng(0, "fit_sbm") if rng is None else make_rng(rng, "fit_sbm")
    n = graph.n_nodes
    if isinstance(init, str) and init == "random":
        z = rng.integers(0, K, size=n)
    elif isinstance(init, str) and init == "growth":
        z = growth_labels(graph, K)
    elif isinstance(init, str):
        raise ValueError(f"unknown init {init!r}")
    else:
        z = check_labels(init, n, K).copy()
    directed = graph.directed
    adj = graph.adjacency().tocsr()
    adj_in = adj.T.tocsr() if directed else adj
    C, _, sizes = count_blocks(graph, z, K)
    current = profile_log_likelihood(C, _pairs(sizes, directed), directed)
    trace = [current]
    for _ in range(max_sweeps):
        changed = False
        for v in rng.permutation(n):
            a = z[v]
            nb, w = adj.indices[adj.indptr[v] : adj.indptr[v + 1]], adj.data[adj.indptr[v] : adj.indptr[v + 1]]
            w_to = np.bincount(z[nb], weights=w, minlength=K)
            w_from = None
            if directed:
                nb_in = adj_in.indices[adj_in.indptr[v] : adj_in.indptr[v + 1]]
                w_in = adj_in.data[adj_in.indptr[v] : adj_in.indptr[v + 1]]
                w_from = np.bincount(z[nb_in], weights=w_in, minlength=K)
            best, best_b = current, a
            for b in range(K):
                if b == a:
                    continue
                C2, s2 = _move_counts(C, sizes, w_to, a, b, directed, w_from)
                ll = profile_log_likelihood(C2, _pairs(s2, directed), directed)
                if ll > best + 1e-12:
                    best, best_b = ll, b
            if best_b != a:
                C, sizes = _move_counts(C, sizes, w_to, a, best_b, directed, w_from)
                z[v] = best_b
                current = best
                trace.append(current)
                changed = True
        if not changed:
            break
    C, N, _ = count_blocks(graph, z, K)
    return z, ml_block_matrix(C, N), trace


class ClassicSBM(ClusterMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`fit_sbm`.

    ``fit`` takes a :class:`~nsbm.graph.Graph`; ``labels_`` holds the
    recovered communities, ``block_matrix_`` the ML block matrix. The first
    start uses seeded growth, the remaining ``n_init - 1`` are random; the
    start with the highest final likelihood wins.
    """

    def __init__(self, n_communities=2, max_sweeps=100, n_init=5, random_state=0):
        self.n_communities = n_communities
        self.max_sweeps = max_sweeps
        self.n_init = n_init
        self.random_state = random_state

    def fit(self, graph, y=None):
        best = None
        for i in range(self.n_init):
            rng = make_rng(self.random_state, f"classic-sbm/{i}")
            init = "growth" if i == 0 else "random"
            z, P, trace = fit_sbm(graph, self.n_communities, rng, self.max_sweeps, init)
            if best is None or trace[-1] > best[2][-1]:
                best = (z, P, trace)
        self.labels_, self.block_matrix_, self.trace_ = best
        self.log_likelihood_ = self.trace_[-1]
        return self

    def predict(self, graph=None):
        return self.labels_
