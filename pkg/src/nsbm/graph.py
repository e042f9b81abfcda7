"""Graph container, file formats and attribute encoding."""

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .numerics import Tensor, concat, make_rng, tensor


class GraphFormatError(ValueError):
    """Malformed graph input; carries the offending line number when known."""

    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line


class Graph:
    """Immutable graph with dense integer node ids ``0..n-1``.

    Undirected graphs keep each edge once with ``src < dst``; the adjacency
    index is symmetric. Edge weights default to 1.0.
    """

    def __init__(
        self,
        n_nodes,
        src,
        dst,
        weight=None,
        directed=False,
        attributes=None,
        tokens=None,
        labels=None,
        id_map=None,
    ):
        n_nodes = int(n_nodes)
        src = np.asarray(src, dtype=np.int64).ravel()
        dst = np.asarray(dst, dtype=np.int64).ravel()
        if weight is None:
            weight = np.ones(src.size)
        weight = np.asarray(weight, dtype=np.float64).ravel()
        if not (src.size == dst.size == weight.size):
            raise GraphFormatError("edge arrays differ in length")
        if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= n_nodes):
            raise GraphFormatError("edge endpoint outside 0..n_nodes-1")
        if np.any(src == dst):
            raise GraphFormatError("self-loops are not supported")
        if not np.all(np.isfinite(weight)):
            raise GraphFormatError("edge weights must be finite")
        if not directed:
            lo, hi = np.minimum(src, dst), np.maximum(src, dst)
            src, dst = lo, hi
        # collapse duplicates by summing weights
        key = src * n_nodes + dst
        uniq, inv = np.unique(key, return_inverse=True)
        summed = np.zeros(uniq.size)
        np.add.at(summed, inv, weight)
        self.n_nodes = n_nodes
        self.directed = bool(directed)
        self.src = (uniq // n_nodes).astype(np.int64) if n_nodes else uniq
        self.dst = (uniq % n_nodes).astype(np.int64) if n_nodes else uniq
        self.weight = summed
        self.attributes = None if attributes is None else np.asarray(attributes, dtype=np.float64)
        if self.attributes is not None and self.attributes.shape[0] != n_nodes:
            raise GraphFormatError(f"attribute rows {self.attributes.shape[0]} != node count {n_nodes}")
        self.tokens = tokens
        self.labels = labels
        self.id_map = list(id_map) if id_map is not None else None
        self._adj = None

    # -- construction helpers ------------------------------------------------
    @classmethod
    def from_dense(cls, W, directed=False, **kwargs):
        W = np.asarray(W, dtype=np.float64)
        M = W if directed else np.triu(W, 1)
        src, dst = np.nonzero(M)
        return cls(W.shape[0], src, dst, M[src, dst], directed=directed, **kwargs)

    @classmethod
    def from_edges(cls, n_nodes, edges, directed=False, **kwargs):
        edges = list(edges)
        if not edges:
            return cls(n_nodes, [], [], [], directed=directed, **kwargs)
        arr = np.asarray(edges, dtype=np.float64)
        w = arr[:, 2] if arr.shape[1] > 2 else None
        return cls(n_nodes, arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), w, directed=directed, **kwargs)

    def with_(self, **changes):
        """Copy with some of attributes/tokens/labels/id_map replaced."""
        fields = dict(
            attributes=self.attributes, tokens=self.tokens, labels=self.labels, id_map=self.id_map
        )
        fields.update(changes)
        return Graph(self.n_nodes, self.src, self.dst, self.weight, directed=self.directed, **fields)

    # -- queries ---------------------------------------------------------------
    @property
    def n_edges(self):
        return int(self.src.size)

    @property
    def is_weighted(self):
        return bool(np.any(self.weight != 1.0))

    def adjacency(self):
        """Sparse CSR adjacency (symmetric for undirected graphs), sorted indices."""
        if self._adj is None:
            n = self.n_nodes
            if self.directed:
                rows, cols, w = self.src, self.dst, self.weight
            else:
                rows = np.concatenate([self.src, self.dst])
                cols = np.concatenate([self.dst, self.src])
                w = np.concatenate([self.weight, self.weight])
            adj = sp.csr_matrix((w, (rows, cols)), shape=(n, n))
            adj.sort_indices()
            self._adj = adj
        return self._adj

    def neighbors(self, v):
        adj = self.adjacency()
        return adj.indices[adj.indptr[v] : adj.indptr[v + 1]]

    def neighbor_weights(self, v):
        adj = self.adjacency()
        return adj.data[adj.indptr[v] : adj.indptr[v + 1]]

    def degree(self, v=None):
        """Neighbor count (out-neighbors when directed)."""
        deg = np.diff(self.adjacency().indptr)
        return deg if v is None else int(deg[v])

    def strength(self):
        return np.asarray(self.adjacency().sum(axis=1)).ravel()

    def has_edge(self, u, v):
        nb = self.neighbors(u)
        i = np.searchsorted(nb, v)
        return bool(i < nb.size and nb[i] == v)

    def dense_block(self, nodes):
        """Dense weighted adjacency restricted to ``nodes`` (in the given order)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        return self.adjacency()[nodes][:, nodes].toarray()

    def edge_multiset(self):
        return sorted(zip(self.src.tolist(), self.dst.tolist(), self.weight.tolist()))

    def label_matrix(self, n_labels=None):
        """Boolean node x label membership from ``labels``."""
        if self.labels is None:
            raise ValueError("graph has no labels")
        if n_labels is None:
            n_labels = 1 + max((max(ls) for ls in self.labels if ls), default=-1)
        M = np.zeros((self.n_nodes, n_labels), dtype=bool)
        for v, ls in enumerate(self.labels):
            M[v, list(ls)] = True
        return M

    def __repr__(self):
        kind = "directed" if self.directed else "undirected"
        return f"Graph(n_nodes={self.n_nodes}, n_edges={self.n_edges}, {kind})"


# -- file formats -------------------------------------------------------------


def _sort_ids(ids):
    try:
        return sorted(ids, key=int)
    except ValueError:
        return list(ids)


def load_edge_list(path, directed=False, weighted=False):
    """Read ``src<TAB>dst[<TAB>weight]`` lines; ``#`` starts a comment line.

    Node ids are re-indexed densely (numeric order when every id is an
    integer, else order of first appearance); ``graph.id_map[i]`` is the
    original id of node ``i``. Duplicate edges are merged by summing weights
    (unweighted input keeps weight 1.0).
    """
    path = Path(path)
    rows = []
    seen = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 2 or len(parts) > 3:
                raise GraphFormatError(f"expected 2 or 3 tab-separated columns, got {len(parts)}", lineno, path)
            a, b = parts[0].strip(), parts[1].strip()
            if not a or not b:
                raise GraphFormatError("empty node id", lineno, path)
            if a == b:
                raise GraphFormatError(f"self-loop on node {a!r}", lineno, path)
            w = 1.0
            if len(parts) == 3:
                try:
                    w = float(parts[2])
                except ValueError:
                    raise GraphFormatError(f"non-numeric weight {parts[2]!r}", lineno, path) from None
                if not np.isfinite(w):
                    raise GraphFormatError(f"non-finite weight {parts[2]!r}", lineno, path)
            for x in (a, b):
                seen.setdefault(x, len(seen))
            rows.append((a, b, w if weighted else 1.0))
    if not rows:
        raise GraphFormatError("no edges found", 0, path)
    ids = _sort_ids(list(seen))
    index = {x: i for i, x in enumerate(ids)}
    src = [index[a] for a, _, _ in rows]
    dst = [index[b] for _, b, _ in rows]
    w = [x for _, _, x in rows]
    g = Graph(len(ids), src, dst, w, directed=directed, id_map=ids)
    if not weighted:
        g.weight = np.ones_like(g.weight)
    return g


def save_edge_list(graph, path, weighted=None):
    if weighted is None:
        weighted = graph.is_weighted
    names = graph.id_map if graph.id_map is not None else [str(i) for i in range(graph.n_nodes)]
    with open(path, "w", encoding="utf-8") as fh:
        for s, d, w in zip(graph.src, graph.dst, graph.weight):
            if weighted:
                fh.write(f"{names[s]}\t{names[d]}\t{float(w)!r}\n")
            else:
                fh.write(f"{names[s]}\t{names[d]}\n")


def _node_index(graph):
    if graph.id_map is None:
        return {str(i): i for i in range(graph.n_nodes)}
    return {str(x): i for i, x in enumerate(graph.id_map)}


def load_labels(path, graph):
    """Read ``node<TAB>label1,label2,...``; returns (labels per node, label names).

    Nodes absent from the file get an empty label list.
    """
    index = _node_index(graph)
    names = {}
    labels = [[] for _ in range(graph.n_nodes)]
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise GraphFormatError("expected node<TAB>labels", lineno, path)
            if parts[0] not in index:
                raise GraphFormatError(f"unknown node {parts[0]!r}", lineno, path)
            v = index[parts[0]]
            for lab in parts[1].split(","):
                lab = lab.strip()
                if lab:
                    labels[v].append(names.setdefault(lab, len(names)))
    return labels, list(names)


def save_labels(labels, path, graph=None, names=None):
    ids = graph.id_map if graph is not None and graph.id_map is not None else None
    with open(path, "w", encoding="utf-8") as fh:
        for v, ls in enumerate(labels):
            node = ids[v] if ids is not None else v
            text = ",".join(str(names[x]) if names else str(x) for x in ls)
            fh.write(f"{node}\t{text}\n")


def load_features(path, graph):
    """Feature CSV with a header row; first column is the node id."""
    index = _node_index(graph)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise GraphFormatError("empty feature file", 0, path)
        X = np.full((graph.n_nodes, len(header) - 1), np.nan)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if row[0] not in index:
                raise GraphFormatError(f"unknown node {row[0]!r}", lineno, path)
            try:
                X[index[row[0]]] = [float(x) for x in row[1:]]
            except ValueError as exc:
                raise GraphFormatError(str(exc), lineno, path) from None
    return X


def save_features(X, path, graph=None):
    ids = graph.id_map if graph is not None and graph.id_map is not None else range(X.shape[0])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node"] + [f"f{j}" for j in range(X.shape[1])])
        for node, row in zip(ids, X):
            w.writerow([node] + [repr(float(x)) for x in row])


# -- attribute encoders ---------------------------------------------------------


@dataclass
class AttributeEncoderConfig:
    token_buckets: int = 0
    numeric_dim: int = 0
    free_dim: int = 8

    def __post_init__(self):
        if min(self.token_buckets, self.numeric_dim, self.free_dim) < 0:
            raise ValueError("encoder dimensions must be >= 0")
        if self.total_dim == 0:
            raise ValueError("raw embedding dimension must be positive")

    @property
    def total_dim(self):
        return self.token_buckets + self.numeric_dim + self.free_dim


def token_bucket(token, buckets):
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % buckets


def hash_tokens(tokens, buckets):
    out = np.zeros(buckets)
    for t in tokens:
        out[token_bucket(t, buckets)] += 1.0
    n = np.linalg.norm(out)
    return out / n if n > 0 else out


@dataclass
class RawEmbedding:
    """Per-node raw embedding: fixed encoded part plus a trainable table."""

    fixed: np.ndarray
    free: Tensor

    @property
    def dim(self):
        return self.fixed.shape[1] + self.free.shape[1]

    def matrix(self):
        if self.free.shape[1] == 0:
            return tensor(self.fixed)
        if self.fixed.shape[1] == 0:
            return self.free
        return concat([tensor(self.fixed), self.free], axis=1)


def encode_attributes(graph, config, rng=None):
    """Concatenate [hashed token counts, numeric features, free embedding].

    The free part is a trainable ``N(0, 0.01)`` table (std 0.1).
    """
    n = graph.n_nodes
    parts = []
    if config.token_buckets:
        if graph.tokens is None:
            raise ValueError("node 0 has no tokens but token_buckets > 0")
        H = np.zeros((n, config.token_buckets))
        for v in range(n):
            toks = graph.tokens[v]
            if toks is None:
                raise ValueError(f"node {v} has no tokens but token_buckets > 0")
            H[v] = hash_tokens(toks, config.token_buckets)
        parts.append(H)
    if config.numeric_dim:
        A = graph.attributes
        if A is None:
            raise ValueError("node 0 has no numeric attributes but numeric_dim > 0")
        if A.shape[1] < config.numeric_dim:
            raise ValueError(f"node 0 has {A.shape[1]} numeric attributes, need {config.numeric_dim}")
        bad = np.nonzero(~np.all(np.isfinite(A[:, : config.numeric_dim]), axis=1))[0]
        if bad.size:
            raise ValueError(f"node {int(bad[0])} is missing numeric attributes")
        parts.append(A[:, : config.numeric_dim])
    fixed = np.concatenate(parts, axis=1) if parts else np.zeros((n, 0))
    rng = make_rng(0, "free-embedding") if rng is None else rng
    free = tensor(rng.normal(0.0, 0.1, size=(n, config.free_dim)), requires_grad=True, name="free_embedding")
    return RawEmbedding(fixed=fixed, free=free)
