"""The NSBM estimator: sequence embedder + soft membership trained with the joint loss."""

import math

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.cluster import KMeans

from .community import (
    ALPHA,
    THETA_Z,
    community_embeddings,
    init_assignment,
    joint_loss,
    load_checkpoint,
    membership,
    sample_batch,
    save_checkpoint,
    update_assignment,
)
from .embedder import build_reprs, embed_sequence, init_embedder
from .graph import AttributeEncoderConfig, encode_attributes
from .layers import flatten_params, init_linear
from .numerics import AdamState, adam_step, evaluate_with_gradients, make_rng, tensor
from .validation import check_graph


class NSBM(ClusterMixin, TransformerMixin, BaseEstimator):
    """Neural stochastic block model.

    ``fit(graph, y=None)`` trains on a :class:`~nsbm.graph.Graph`; ``y`` is an
    optional per-node list of known community labels for the label loss.
    ``predict_proba`` gives the soft membership ``Z`` (``K + 1`` columns with
    the pseudo-community), ``predict`` its argmax and ``transform`` the node
    embeddings. Everything after ``fit`` is a single forward pass.

    Parameters
    ----------
    n_communities : int
        K, the number of real communities.
    pseudo : bool
        Add a last membership column for nodes outside every community.
    d_model, d_out, m, free_dim, pooling, repr_key
        Embedder width, output width, representative length, width of the
        trainable per-node table, pooling mode and neighbour sorting key.
    epochs, batch_size, c, lr, embedder_lr
        Each epoch runs ``ceil(n / batch_size)`` batches drawn from ``c``
        sampled communities; Adam learning rate ``lr`` (``embedder_lr`` for
        the embedder and raw table, defaulting to ``lr``).
    alpha, num_negatives, loss_weights
        Scaled-cosine factor, negatives per positive edge, per-term weights.
    kernel : {"embedding", "raw"}
        Node matrix used in the similarity kernel: learned embeddings or the
        raw (attribute) embedding. Kernels are unit-normalised, clipped at 0
        and treated as constants (``detach_kernel``). The default is "raw": a
        kernel built from the embeddings it is meant to group drifts toward
        all-ones, where every assignment looks equally good.
    seed_membership : bool
        Start the membership layer as a nearest-centroid classifier over the
        initial assignment communities (``seed_sharpness`` scales logits).
    reseed_every : int
        Every that many steps, a community that is the argmax of fewer than
        ``reseed_fraction * n / K`` nodes takes over one half of the largest
        community (2-means in embedding space). 0 disables.
    """

    def __init__(self, n_communities=2, pseudo=True, d_model=64, d_out=64, m=16, free_dim=8,
                 pooling="mean", repr_key="degree", epochs=50, batch_size=256, c=3, lr=1e-3,
                 embedder_lr=None, alpha=ALPHA, num_negatives=5, loss_weights=None, theta_z=THETA_Z, kernel="raw",
                 normalize_similarity=True, detach_kernel=True, seed_membership=True, seed_sharpness=4.0,
                 reseed_every=10, reseed_fraction=0.25, random_state=0):
        self.n_communities = n_communities
        self.pseudo = pseudo
        self.d_model = d_model
        self.d_out = d_out
        self.m = m
        self.free_dim = free_dim
        self.pooling = pooling
        self.repr_key = repr_key
        self.epochs = epochs
        self.batch_size = batch_size
        self.c = c
        self.lr = lr
        self.embedder_lr = embedder_lr
        self.alpha = alpha
        self.num_negatives = num_negatives
        self.loss_weights = loss_weights
        self.theta_z = theta_z
        self.kernel = kernel
        self.normalize_similarity = normalize_similarity
        self.detach_kernel = detach_kernel
        self.seed_membership = seed_membership
        self.seed_sharpness = seed_sharpness
        self.reseed_every = reseed_every
        self.reseed_fraction = reseed_fraction
        self.random_state = random_state

    # -- setup -------------------------------------------------------------------------

    def _encoder_config(self, graph):
        numeric = 0 if graph.attributes is None else graph.attributes.shape[1]
        return AttributeEncoderConfig(numeric_dim=numeric, free_dim=self.free_dim)

    def initialize(self, graph):
        """Build parameters, representatives and the initial assignment list."""
        graph = check_graph(graph)
        if self.kernel not in ("embedding", "raw"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        seed = self.random_state
        self.raw_ = encode_attributes(graph, self._encoder_config(graph), make_rng(seed, "free-table"))
        d_raw = self.raw_.fixed.shape[1] + self.raw_.free.shape[1]
        rng = make_rng(seed, "heads-init")
        cols = self.n_communities + (1 if self.pseudo else 0)
        self.params_ = {
            "embedder": init_embedder(d_raw, self.d_model, self.d_out, self.m, self.pooling, seed),
            "membership": init_linear(rng, self.d_out, cols, scale=0.01),
            "link1": init_linear(rng, self.d_out, self.d_out),
            "link2": init_linear(rng, self.d_out, self.d_out),
            "community": {
                "layer": init_linear(rng, self.d_out, self.d_out),
                "w2": tensor(rng.normal(scale=0.1, size=self.d_out), requires_grad=True),
            },
        }
        if self.free_dim:
            self.params_["raw"] = {"free": self.raw_.free}
        self.reprs_ = build_reprs(graph, self.m, self.repr_key)
        self.n_nodes_ = graph.n_nodes
        self.assignments_ = init_assignment(graph, self.n_communities, self.pseudo)
        if self.seed_membership:
            self._seed_membership()
        self.optimizer_ = AdamState.for_params(self.flat_params(), lr=self.lr)
        if self.embedder_lr is not None:
            ratio = self.embedder_lr / self.lr if self.lr else 0.0
            self.optimizer_.lr_scale = {k: ratio for k in self.flat_params()
                                        if k.startswith(("embedder.", "raw."))}
        self.epoch_ = 0
        self.loss_history_ = []
        return self

    def _centroid_logits(self, mu, scale):
        """Weights and biases of ``logit_k = s (x . mu_k - |mu_k|^2 / 2)`` for scaled inputs."""
        beta = self.seed_sharpness
        return beta * scale * mu.T, -0.5 * beta * (mu * mu).sum(axis=1)

    def _scaled_embeddings(self):
        X = self.embed().data
        scale = 1.0 / np.sqrt((X * X).sum(axis=1).mean() + 1e-12)
        return X * scale, scale

    def _seed_membership(self):
        """Start the membership layer as a nearest-centroid classifier of the initial assignment."""
        K = self.n_communities
        Xs, scale = self._scaled_embeddings()
        rng = make_rng(self.random_state, "membership-seed")
        mu = np.empty((K, Xs.shape[1]))
        for k in range(K):
            members = np.flatnonzero(self.assignments_ == k)
            if members.size == 0:
                members = rng.choice(self.n_nodes_, size=1)
            mu[k] = Xs[members].mean(axis=0)
        W = np.zeros((Xs.shape[1], K + (1 if self.pseudo else 0)))
        b = np.zeros(W.shape[1])
        W[:, :K], b[:K] = self._centroid_logits(mu, scale)
        if self.pseudo:
            logits = Xs @ (W[:, :K] / scale) + b[:K]
            share = min(float(np.mean(self.assignments_ == K)), 0.5)
            b[K] = np.quantile(logits.max(axis=1), share) if share > 0 else logits.min() - 1.0
        self.params_["membership"]["W"].data = W
        self.params_["membership"]["b"].data = b

    def _reseed_dead(self, rng):
        """Split the largest community in two (2-means) for every community that emptied out.

        Returns the re-seeded column indices.
        """
        K = self.n_communities
        labels = self.predict_proba().argmax(axis=1)
        counts = np.bincount(labels, minlength=K + 1)[:K].astype(float)
        dead = np.flatnonzero(counts < self.reseed_fraction * self.n_nodes_ / K)
        if dead.size == 0:
            return dead
        Xs, scale = self._scaled_embeddings()
        layer = self.params_["membership"]
        done = []
        for j in dead:
            i = int(np.argmax(counts))
            members = np.flatnonzero(labels == i)
            if i == j or members.size < 2:
                continue
            km = KMeans(2, n_init=3, random_state=int(rng.integers(2**31))).fit(Xs[members])
            W, b = self._centroid_logits(km.cluster_centers_, scale)
            for col, half in ((i, 0), (j, 1)):
                layer["W"].data[:, col] = W[:, half]
                layer["b"].data[col] = b[half]
                for name in ("membership.W", "membership.b"):
                    self.optimizer_.m[name][..., col] = 0.0
                    self.optimizer_.v[name][..., col] = 0.0
            sizes = np.bincount(km.labels_, minlength=2)
            counts[i], counts[j] = sizes
            labels[members[km.labels_ == 1]] = j
            done.append(int(j))
        return np.array(done, dtype=np.int64)

    def flat_params(self):
        return flatten_params(self.params_)

    # -- forward -----------------------------------------------------------------------------

    def embed(self, nodes=None):
        seqs = self.reprs_ if nodes is None else self.reprs_[np.asarray(nodes)]
        return embed_sequence(seqs, self.raw_.matrix(), self.params_["embedder"])

    def embed_graph(self, graph):
        """Embeddings of another graph's nodes with the trained parameters.

        The per-node free table only exists for the training graph's nodes, so
        a graph of a different size needs ``free_dim=0``.
        """
        graph = check_graph(graph)
        fixed = encode_attributes(graph, self._encoder_config(graph)).fixed
        if fixed.shape[1] != self.raw_.fixed.shape[1]:
            raise ValueError(f"graph has {fixed.shape[1]} encoded attribute columns, model expects "
                             f"{self.raw_.fixed.shape[1]}")
        if self.free_dim and graph.n_nodes != self.n_nodes_:
            raise ValueError("a model with a free embedding table only embeds graphs of its training size")
        free = self.raw_.free.data if self.free_dim else np.zeros((graph.n_nodes, 0))
        raw = np.concatenate([fixed, free], axis=1)
        return embed_sequence(build_reprs(graph, self.m, self.repr_key), raw, self.params_["embedder"])

    def _embed_input(self, X):
        return self.embed() if X is None else self.embed_graph(X)

    def membership_tensor(self, X):
        return membership(X, self.params_["membership"])

    def batch_loss(self, graph, nodes, rng, labels=None):
        """Joint loss on the induced subgraph of ``nodes``."""
        A = graph.dense_block(nodes)
        X = self.embed(nodes)
        Z = self.membership_tensor(X)
        iu, ju = np.nonzero(np.triu(A) if not graph.directed else A)
        pos = np.stack([iu, ju], axis=1)
        w = A[iu, ju] if graph.is_weighted else None
        lab = None
        if labels is not None:
            lab = {r: labels[v] for r, v in enumerate(nodes) if labels[v]}
        K_in = X
        if self.kernel == "raw":
            K_in = tensor(self.raw_.matrix().data[np.asarray(nodes)])
        loss = joint_loss(
            Z, X, A, pos, (self.params_["link1"], self.params_["link2"]), self.n_communities,
            rng=rng, num_negatives=self.num_negatives, labels=lab, loss_weights=self.loss_weights,
            alpha=self.alpha, normalize_similarity=self.normalize_similarity, edge_weights=w,
            detach_kernel=self.detach_kernel, kernel_X=K_in,
        )
        return loss, Z

    # -- training ---------------------------------------------------------------------------

    def steps_per_epoch(self):
        return max(1, math.ceil(self.n_nodes_ / self.batch_size))

    def train_epoch(self, graph, labels=None, callback=None):
        """One epoch of batches; epoch ``e`` draws from its own random stream."""
        e = self.epoch_
        rng = make_rng(self.random_state, f"batch/{e}")
        flat = self.flat_params()
        for s in range(self.steps_per_epoch()):
            nodes, _ = sample_batch(self.assignments_, self.c, self.batch_size, rng)
            holder = {}

            def fn():
                loss, Z = self.batch_loss(graph, nodes, rng, labels)
                holder["loss"], holder["Z"] = loss, Z
                return loss.total

            try:
                _, grads = evaluate_with_gradients(fn, flat)
                parts = holder["loss"].as_dict()
                if not np.isfinite(parts["total"]):
                    raise FloatingPointError("non-finite loss")
                adam_step(flat, grads, self.optimizer_)
            except FloatingPointError as exc:
                raise FloatingPointError(f"epoch {e} step {s}: {exc}") from exc
            self.assignments_ = update_assignment(self.assignments_, nodes, holder["Z"])
            parts["reseeded"] = 0
            if self.reseed_every and self.optimizer_.step % self.reseed_every == 0:
                parts["reseeded"] = len(self._reseed_dead(rng))
            parts.update(epoch=e, step=s, batch=len(nodes))
            self.loss_history_.append(parts)
            if callback is not None:
                callback(parts)
        self.epoch_ += 1

    def fit(self, graph, y=None, callback=None):
        self.initialize(graph)
        labels = _label_lists(y, graph.n_nodes)
        for _ in range(self.epochs):
            self.train_epoch(graph, labels, callback)
        return self

    # -- inference ----------------------------------------------------------------------------

    def transform(self, X=None):
        """Node embeddings of the training graph (``X=None``) or of graph ``X``."""
        return self._embed_input(X).data

    def predict_proba(self, X=None):
        return self.membership_tensor(self._embed_input(X)).data

    def predict(self, graph=None):
        return np.argmax(self.predict_proba(graph), axis=1)

    def community_embeddings(self, nodes=None, graph=None):
        X = self.embed(nodes) if graph is None else self.embed_graph(graph)
        if graph is not None and nodes is not None:
            X = X[np.asarray(nodes)]
        Z = self.membership_tensor(X)
        return community_embeddings(Z, X, self.params_["community"], self.theta_z, self.n_communities)

    # -- persistence ------------------------------------------------------------------------------

    def state_arrays(self):
        """Parameters, optimiser moments and assignments as named float arrays."""
        flat = self.flat_params()
        out = {k: v.data for k, v in flat.items()}
        for k in flat:
            out[f"adam.m.{k}"] = self.optimizer_.m[k]
            out[f"adam.v.{k}"] = self.optimizer_.v[k]
        out["state.assignments"] = self.assignments_.astype(np.float64)
        out["state.counters"] = np.array([self.epoch_, self.optimizer_.step], dtype=np.float64)
        return out

    def save(self, path, meta=None):
        meta = dict(meta or {})
        meta["estimator"] = {k: v for k, v in self.get_params().items()}
        save_checkpoint(path, self.state_arrays(), meta)

    def load_state(self, graph, path):
        """Rebuild from ``graph`` and overwrite every array from a checkpoint.

        Raises ``ValueError`` listing names whose shapes differ.
        """
        arrays, meta = load_checkpoint(path)
        self.load_arrays(graph, arrays)
        return meta

    def load_arrays(self, graph, arrays):
        """Rebuild from ``graph`` and overwrite every array from ``arrays`` (see :meth:`state_arrays`)."""
        self.initialize(graph)
        expected = {k: np.shape(v) for k, v in self.state_arrays().items()}
        bad = [f"{k}: checkpoint {arrays[k].shape if k in arrays else 'missing'} vs model {s}"
               for k, s in expected.items() if k not in arrays or arrays[k].shape != s]
        bad += [f"{k}: unexpected in checkpoint" for k in arrays if k not in expected]
        if bad:
            raise ValueError("checkpoint does not match model:\n  " + "\n  ".join(bad))
        flat = self.flat_params()
        for k, t in flat.items():
            t.data[...] = arrays[k]
            self.optimizer_.m[k] = arrays[f"adam.m.{k}"].copy()
            self.optimizer_.v[k] = arrays[f"adam.v.{k}"].copy()
        self.assignments_ = arrays["state.assignments"].astype(np.int64)
        self.epoch_, self.optimizer_.step = (int(x) for x in arrays["state.counters"])
        return self


def _label_lists(y, n):
    if y is None:
        return None
    out = []
    for v in range(n):
        lab = y[v]
        if lab is None:
            out.append([])
        elif np.isscalar(lab):
            out.append([int(lab)] if int(lab) >= 0 else [])
        else:
            out.append([int(x) for x in lab])
    return out
