"""Input validation helpers shared by the estimators."""

import numpy as np

from .graph import Graph


def check_graph(graph, require_edges=False, require_attributes=False):
    if not isinstance(graph, Graph):
        raise TypeError(f"expected a Graph, got {type(graph).__name__}")
    if graph.n_nodes == 0:
        raise ValueError("graph has no nodes")
    if require_edges and graph.n_edges == 0:
        raise ValueError("graph has no edges")
    if require_attributes and graph.attributes is None:
        raise ValueError("graph has no node attributes")
    return graph


def check_labels(z, n_nodes, K=None):
    z = np.asarray(z)
    if z.shape != (n_nodes,):
        raise ValueError(f"labels must have shape ({n_nodes},), got {z.shape}")
    if not np.issubdtype(z.dtype, np.integer):
        if not np.all(np.equal(np.mod(z, 1), 0)):
            raise ValueError("labels must be integers")
    z = z.astype(np.int64)
    if z.size and z.min() < 0:
        raise ValueError("labels must be >= 0")
    if K is not None and z.size and z.max() >= K:
        raise ValueError(f"label {int(z.max())} out of range for K={K}")
    return z


def check_membership(Z, n_nodes=None, atol=1e-6):
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ValueError(f"membership matrix must be 2-D, got shape {Z.shape}")
    if n_nodes is not None and Z.shape[0] != n_nodes:
        raise ValueError(f"membership has {Z.shape[0]} rows, expected {n_nodes}")
    if np.any(Z < -atol) or np.any(np.abs(Z.sum(axis=1) - 1.0) > atol):
        raise ValueError("membership rows must be probability distributions")
    return Z


def check_finite_matrix(X, name="X", ndim=2):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X
