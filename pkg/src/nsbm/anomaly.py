"""Correlated-anomaly detection.

A window of time series (``n_samples x n_features``) is turned into a graph
whose nodes are the features and whose edges are clipped Pearson
correlations. A community model with a pseudo-community sorts features into
at most ``K`` candidate anomaly sets; each set is then scored by an
attention-weighted Rayleigh quotient that approximates its normalised top
eigenvalue (the *principal score*), and alarms above ``theta_anomaly``.

Exact power-iteration scores serve as the validation oracle and as the
classical PCA baseline.
"""

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator
from sklearn.base import BaseEstimator

from .classic_sbm import fit_sbm
from .community import attention_scores, community_similarity, joint_loss, membership, sbm_loss
from .embedder import build_reprs, embed_sequence, init_embedder
from .graph import Graph
from .layers import flatten_params, init_linear
from .numerics import AdamState, adam_step, evaluate_with_gradients, make_rng, safe_log, tensor

THETA_ANOMALY = 0.7
PENALTY = 50.0


class ConvergenceError(RuntimeError):
    """Power iteration did not settle; ``residual`` is ``|M v - lambda v|`` of the last iterate."""

    def __init__(self, iterations, residual):
        super().__init__(f"power iteration did not converge in {iterations} iterations (residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


# -- correlations ------------------------------------------------------------------------


def _standardize(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("window must be a 2-D array (samples x features)")
    if X.shape[0] < 2:
        raise ValueError(f"need at least 2 samples per feature, got {X.shape[0]}")
    centered = X - X.mean(axis=0)
    sd = np.sqrt((centered**2).mean(axis=0))
    flat = sd <= 1e-12 * np.maximum(1.0, np.abs(X).max(axis=0))
    S = np.where(flat, 0.0, centered / np.where(flat, 1.0, sd))
    return S, flat


def pearson_correlation(X):
    """Feature-by-feature Pearson correlation; zero-variance features correlate 0 with the rest."""
    S, _ = _standardize(X)
    C = S.T @ S / S.shape[0]
    np.fill_diagonal(C, 1.0)
    return np.clip(C, -1.0, 1.0)


def correlation_operator(X):
    """The correlation matrix of ``X`` as a matrix-free operator (for very wide windows)."""
    S, flat = _standardize(X)
    n, p = S.shape
    fix = flat.astype(np.float64)

    def mv(u):
        u = np.ravel(u)
        return S.T @ (S @ u) / n + fix * u

    return LinearOperator((p, p), matvec=mv, rmatvec=mv, dtype=np.float64)


@dataclass
class CorrelationGraph:
    """Clipped correlations with a zero diagonal (no self-edges)."""

    matrix: np.ndarray
    theta: float

    @property
    def n_features(self):
        return self.matrix.shape[0]

    def block(self, members):
        """Clipped correlation among ``members`` with the unit diagonal restored."""
        members = np.asarray(members, dtype=np.int64)
        B = self.matrix[np.ix_(members, members)].copy()
        np.fill_diagonal(B, 1.0)
        return B

    def graph(self):
        return Graph.from_dense(self.matrix)


def clipped_correlation(X, theta_corr):
    """Pearson correlations with every entry below ``theta_corr`` set to 0."""
    if not 0 <= theta_corr <= 1:
        raise ValueError("theta_corr must lie in [0, 1]")
    C = pearson_correlation(X)
    C[C < theta_corr] = 0.0
    np.fill_diagonal(C, 0.0)
    return CorrelationGraph(C, float(theta_corr))


def calibrate_threshold(X, factor=1.5):
    """``factor`` times the mean absolute off-diagonal correlation of a reference window."""
    C = pearson_correlation(X)
    p = C.shape[0]
    if p < 2:
        raise ValueError("need at least 2 features")
    off = np.abs(C).sum() - np.trace(np.abs(C))
    return float(min(1.0, factor * off / (p * (p - 1))))


# -- principal scores --------------------------------------------------------------------------


def principal_eigenpair(M, tol=1e-9, max_iter=10_000):
    """Largest eigenvalue and unit eigenvector of a symmetric matrix by power iteration.

    Dense matrices with negative entries are shifted by a Gershgorin bound so
    the largest (not the largest-magnitude) eigenvalue is found; nonnegative
    matrices and operators are assumed to have a dominant top eigenvalue.
    Stops when the Rayleigh quotient changes by at most ``tol * max(1, |lambda|)``.
    """
    shift = 0.0
    if isinstance(M, LinearOperator):
        n = M.shape[0]
        mv = M.matvec
    else:
        M = np.asarray(M, dtype=np.float64)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValueError("matrix must be square")
        if not np.allclose(M, M.T, atol=1e-12):
            raise ValueError("matrix must be symmetric")
        n = M.shape[0]
        if np.any(M < 0):
            radius = np.abs(M).sum(axis=1) - np.abs(np.diag(M))
            shift = max(0.0, -float(np.min(np.diag(M) - radius)))
        mv = M.__matmul__
    if n == 0:
        raise ValueError("empty matrix")
    v = make_rng(0, "power-iteration").uniform(0.5, 1.5, size=n)
    v /= np.linalg.norm(v)
    lam = None
    for it in range(1, max_iter + 1):
        w = mv(v) + shift * v
        new = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0 - shift, v
        v = w / norm
        if lam is not None and abs(new - lam) <= tol * max(1.0, abs(new)):
            lam = new
            break
        lam = new
    else:
        residual = float(np.linalg.norm(mv(v) + shift * v - lam * v))
        raise ConvergenceError(max_iter, residual)
    return lam - shift, v


def exact_principal_score(matrix, size=None, tol=1e-9, max_iter=10_000):
    """``lambda_max(matrix) / size`` (size defaults to the matrix order), at most 1.

    For a correlation matrix the ratio cannot exceed 1; the clamp removes
    rounding excess on (near) rank-one blocks.
    """
    lam, _ = principal_eigenpair(matrix, tol, max_iter)
    return min(1.0, lam / (matrix.shape[0] if size is None else size))


def approx_principal_score(alpha, corr_block):
    """``a^T C a / size`` with ``a = alpha / |alpha|``; ``None`` for empty sets or zero ``alpha``."""
    a = np.asarray(getattr(alpha, "data", alpha), dtype=np.float64).ravel()
    C = np.asarray(corr_block, dtype=np.float64)
    if a.size == 0:
        return None
    if C.shape != (a.size, a.size):
        raise ValueError(f"alpha of length {a.size} does not fit a {C.shape} block")
    norm = np.linalg.norm(a)
    if norm == 0.0:
        return None
    a = a / norm
    return min(1.0, float(a @ C @ a) / a.size)


def attention_weights(Xk, params):
    """Unnormalised per-member weights ``w2^T tanh(L(Xk))``."""
    return attention_scores(Xk, params["layer"], params["w2"])


def pca_loss(x_tilde, alpha, penalty=PENALTY):
    """``-var(x_tilde) + penalty * (alpha.alpha - 1)^2``.

    ``x_tilde`` is the member series projected on ``alpha``; maximising its
    variance under the unit-norm penalty drives ``alpha`` to the top principal
    direction. A single-member set has variance 0 by convention.
    """
    x_tilde = x_tilde if hasattr(x_tilde, "backward") else tensor(x_tilde)
    alpha = alpha if hasattr(alpha, "backward") else tensor(alpha)
    norm_gap = (alpha * alpha).sum() - 1.0
    reg = norm_gap * norm_gap * penalty
    if alpha.shape[0] <= 1:
        return reg
    centered = x_tilde - x_tilde.mean()
    return reg - (centered * centered).mean()


# -- detector -------------------------------------------------------------------------------------

N_NODE_FEATURES = 7


def node_features(cg, top=16):
    """Per-feature summary of its clipped-correlation row.

    Mean of the top 1 / 4 / ``top`` correlations, edge density, mean edge
    weight and ``log1p`` counts of correlations above 0.5 and 0.7.
    """
    W = cg.matrix
    p = W.shape[0]
    k = max(1, min(top, p - 1))
    part = -np.partition(-W, k - 1, axis=1)[:, :k] if p > 1 else np.zeros((p, 1))
    part = -np.sort(-part, axis=1)
    nz = (W > 0).sum(axis=1)
    return np.column_stack([
        part[:, :1].mean(axis=1),
        part[:, : min(4, k)].mean(axis=1),
        part.mean(axis=1),
        nz / max(p - 1, 1),
        W.sum(axis=1) / np.maximum(nz, 1),
        np.log1p((W >= 0.5).sum(axis=1)),
        np.log1p((W >= 0.7).sum(axis=1)),
    ])


@dataclass
class WindowView:
    """Everything the detector needs from one window, independent of parameters."""

    S: np.ndarray
    cg: CorrelationGraph
    feats: np.ndarray
    reprs: np.ndarray


@dataclass
class AnomalyReport:
    window: object
    sets: list = field(default_factory=list)
    theta_anomaly: float = THETA_ANOMALY

    @property
    def alarm(self):
        return any(s["alarm"] for s in self.sets)

    @property
    def members(self):
        out = set()
        for s in self.sets:
            if s["alarm"]:
                out.update(s["members"])
        return sorted(out)

    def as_dict(self):
        d = asdict(self)
        d["alarm"] = self.alarm
        d["members"] = self.members
        return d


def pseudo_label_loss(Z, anomalous, normal, K):
    """Class-balanced ``-ln(1 - Z_pseudo)`` on known anomalies and ``-ln Z_pseudo`` on known normals.

    Each present class contributes its mean; the result averages the classes,
    so a handful of anomalies among thousands of normal features still counts.
    """
    terms = []
    if len(anomalous):
        terms.append(-safe_log(Z[np.asarray(anomalous), :K].sum(axis=1)).mean())
    if len(normal):
        terms.append(-safe_log(Z[np.asarray(normal), K]).mean())
    if not terms:
        return tensor(0.0)
    return sum(terms) * (1.0 / len(terms))


class AnomalyDetector(BaseEstimator):
    """Community-based correlated-anomaly detector.

    ``fit(windows, truths)`` trains on feature windows; ``truths[i]`` lists the
    planted sets of window ``i`` (``[]`` for a clean window, ``None`` for
    unlabeled). The clipping threshold is calibrated on the first clean (or
    first) training window unless ``theta_corr`` is given.

    Parameters
    ----------
    n_communities : int
        K, the number of candidate anomaly sets (plus one pseudo-community).
    theta_anomaly, theta_corr, corr_factor
        Alarm threshold, clipping threshold (``None`` = calibrate) and its
        calibration factor.
    min_set_size : int
        Sets with fewer members are not scored: with few samples per window a
        handful of noise features reaches a high principal score by chance,
        and the recursive refinement searches many such handfuls.
    refine : bool
        Structural features cannot tell two similar anomaly sets apart, and a
        community may also pick up features that merely lean on an anomaly
        set's factor; with ``refine`` each community is bisected by the
        classic SBM on its clipped graph, recursively, as long as a half
        scores higher than its parent.
    d_model, d_out, m, pooling
        Embedder sizes, representative length (neighbours by edge weight) and
        pooling; attention pooling lets a feature's own statistics outweigh
        neighbours that merely correlate with an anomaly set.
    epochs, batch_size, lr, loss_weights
        Training schedule; ``loss_weights`` may set ``sbm``, ``entropy``,
        ``link``, ``labels`` and ``pca``.
    """

    def __init__(self, n_communities=2, theta_anomaly=THETA_ANOMALY, theta_corr=None, corr_factor=1.5,
                 min_set_size=10, refine=True, d_model=32, d_out=32, m=16, pooling="attention", epochs=10, batch_size=256,
                 lr=5e-3,
                 loss_weights=None, random_state=0):
        self.n_communities = n_communities
        self.theta_anomaly = theta_anomaly
        self.theta_corr = theta_corr
        self.corr_factor = corr_factor
        self.min_set_size = min_set_size
        self.refine = refine
        self.d_model = d_model
        self.d_out = d_out
        self.m = m
        self.pooling = pooling
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.loss_weights = loss_weights
        self.random_state = random_state

    # -- setup ---------------------------------------------------------------------------

    def initialize(self):
        K = self.n_communities
        rng = make_rng(self.random_state, "anomaly-init")
        self.params_ = {
            "embedder": init_embedder(N_NODE_FEATURES, self.d_model, self.d_out, self.m, self.pooling,
                                      self.random_state),
            "membership": init_linear(rng, self.d_out, K + 1),
            "link1": init_linear(rng, self.d_out, self.d_out),
            "link2": init_linear(rng, self.d_out, self.d_out),
            "attention": {
                "layer": init_linear(rng, self.d_out, self.d_out),
                "w2": tensor(rng.normal(scale=0.1, size=self.d_out), requires_grad=True),
            },
        }
        self.optimizer_ = AdamState.for_params(self.flat_params(), lr=self.lr)
        self.loss_history_ = []
        return self

    def flat_params(self):
        return flatten_params(self.params_)

    def view(self, X):
        """Clipped graph, node features and representatives of one window."""
        S, _ = _standardize(X)
        cg = clipped_correlation(X, self.theta_corr_)
        return WindowView(S, cg, node_features(cg), build_reprs(cg.graph(), self.m, "weight"))

    def forward(self, view, nodes=None):
        seqs = view.reprs if nodes is None else view.reprs[nodes]
        X = embed_sequence(seqs, view.feats, self.params_["embedder"])
        return X, membership(X, self.params_["membership"])

    def state_arrays(self):
        flat = self.flat_params()
        out = {k: v.data for k, v in flat.items()}
        for k in flat:
            out[f"adam.m.{k}"] = self.optimizer_.m[k]
            out[f"adam.v.{k}"] = self.optimizer_.v[k]
        out["state.theta_corr"] = np.array([self.theta_corr_])
        out["state.step"] = np.array([float(self.optimizer_.step)])
        return out

    def load_arrays(self, arrays):
        """Re-initialise and overwrite every array; raises ``ValueError`` on shape mismatches."""
        self.initialize()
        self.theta_corr_ = 0.0
        expected = {k: np.shape(v) for k, v in self.state_arrays().items()}
        bad = [f"{k}: checkpoint {arrays[k].shape if k in arrays else 'missing'} vs model {s}"
               for k, s in expected.items() if k not in arrays or arrays[k].shape != s]
        bad += [f"{k}: unexpected in checkpoint" for k in arrays if k not in expected]
        if bad:
            raise ValueError("checkpoint does not match detector:\n  " + "\n  ".join(bad))
        for k, t in self.flat_params().items():
            t.data[...] = arrays[k]
            self.optimizer_.m[k] = arrays[f"adam.m.{k}"].copy()
            self.optimizer_.v[k] = arrays[f"adam.v.{k}"].copy()
        self.theta_corr_ = float(arrays["state.theta_corr"][0])
        self.optimizer_.step = int(arrays["state.step"][0])
        return self

    # -- training ------------------------------------------------------------------------------

    def fit(self, windows, truths):
        windows = [np.asarray(w, dtype=np.float64) for w in windows]
        if len(windows) != len(truths):
            raise ValueError("need one truth entry per window")
        if self.theta_corr is None:
            clean = [i for i, t in enumerate(truths) if t is not None and len(t) == 0]
            self.theta_corr_ = calibrate_threshold(windows[clean[0] if clean else 0], self.corr_factor)
        else:
            self.theta_corr_ = float(self.theta_corr)
        self.initialize()
        views = [self.view(w) for w in windows]
        for e in range(self.epochs):
            rng = make_rng(self.random_state, f"anomaly-epoch/{e}")
            for i in rng.permutation(len(views)):
                self.train_step(views[i], truths[i], rng)
        return self

    def _batch(self, view, sets, rng):
        p = view.cg.n_features
        planted = np.concatenate(sets).astype(np.int64) if sets else np.zeros(0, dtype=np.int64)
        rest = np.setdiff1d(np.arange(p), planted)
        room = max(self.batch_size - planted.size, 0)
        extra = rng.choice(rest, size=min(room, rest.size), replace=False)
        return np.sort(np.concatenate([planted, extra]))

    def train_step(self, view, sets, rng):
        K = self.n_communities
        sets = [np.asarray(s, dtype=np.int64) for s in (sets or [])]
        labeled = sets is not None
        nodes = self._batch(view, sets, rng)
        row = {int(v): r for r, v in enumerate(nodes)}
        planted = {int(v) for s in sets for v in s}
        A = view.cg.matrix[np.ix_(nodes, nodes)]
        iu, ju = np.nonzero(np.triu(A))
        pos = np.stack([iu, ju], axis=1)
        weights = {"sbm": 1.0, "entropy": 1.0, "link": 1.0, "labels": 1.0, "pca": 1.0}
        weights.update(self.loss_weights or {})
        holder = {}

        def fn():
            X, Z = self.forward(view, nodes)
            loss = joint_loss(
                Z, X, A, pos, (self.params_["link1"], self.params_["link2"]), K, rng=rng,
                loss_weights={"sbm": 0.0, "entropy": weights["entropy"], "link": weights["link"]},
                edge_weights=A[iu, ju],
            )
            # the correlation graph's total mass varies by orders of magnitude between
            # clean and injected windows, so the sbm term is taken per unit of kernel mass
            C = community_similarity(Z, tensor(view.feats[nodes]), A, K, normalize=True, detach_kernel=True)
            sbm = sbm_loss(C, Z[:, :K].sum(axis=0)) * (1.0 / max(float(C.data.sum()), 1e-12))
            total = loss.total + sbm * weights["sbm"]
            parts = loss.as_dict()
            parts["sbm"] = float(sbm.data)
            if labeled:
                anomalous = [row[v] for v in sorted(planted)]
                normal = [r for v, r in row.items() if v not in planted]
                lab = pseudo_label_loss(Z, anomalous, normal, K)
                total = total + lab * weights["labels"]
                parts["labels"] = float(lab.data)
            # principal directions of the planted sets and of the communities as currently
            # assigned; the latter carry stray members the attention has to learn to ignore
            labels = np.argmax(Z.data, axis=1)
            groups = [(np.array([row[int(v)] for v in s]), None) for s in sets]
            groups += [(np.flatnonzero(labels == k), k) for k in range(K)]
            groups = [(r, k) for r, k in groups if r.size >= 2]
            pca = tensor(0.0)
            for r, k in groups:
                # membership scaling is held constant here: otherwise the norm penalty is
                # cheapest to satisfy by pushing anomalies into the pseudo-community
                scale = Z.data[r, :K].sum(axis=1, keepdims=True) if k is None else Z.data[r, k : k + 1]
                alpha = attention_weights(X[r] * scale, self.params_["attention"])
                pca = pca + pca_loss(tensor(view.S[:, nodes[r]]) @ alpha, alpha)
            if groups:
                pca = pca * (1.0 / len(groups))
            parts["pca"] = float(pca.data)
            holder["parts"] = parts
            return total + pca * weights["pca"]

        value, grads = evaluate_with_gradients(fn, self.flat_params())
        adam_step(self.flat_params(), grads, self.optimizer_)
        parts = holder["parts"]
        parts["total"] = float(value)
        self.loss_history_.append(parts)
        return parts

    # -- monitoring ----------------------------------------------------------------------------

    def detect(self, X, window=None, theta_anomaly=None, oracle=False):
        """Score one window; see :func:`monitor_window`."""
        theta = self.theta_anomaly if theta_anomaly is None else theta_anomaly
        view = self.view(X)
        E, Z = self.forward(view)
        labels = np.argmax(Z.data, axis=1)
        K = self.n_communities
        min_size = max(self.min_set_size, 1)

        def score(members, k):
            Xk = E.data[members] * Z.data[members, k : k + 1]
            alpha = attention_weights(tensor(Xk), self.params_["attention"]).data
            return approx_principal_score(alpha, view.cg.block(members))

        sets = []
        for k in range(K):
            parts = [np.flatnonzero(labels == k)]
            if self.refine and parts[0].size >= 2 * min_size:
                parts = self._split(view, parts[0], k, score, min_size)
            for members in parts:
                entry = {"community": k, "members": members.tolist(), "rho_hat": None, "rho": None, "alarm": False}
                if members.size >= min_size:
                    entry["rho_hat"] = score(members, k)
                    if oracle:
                        entry["rho"] = exact_principal_score(view.cg.block(members))
                    entry["alarm"] = entry["rho_hat"] is not None and entry["rho_hat"] > theta
                sets.append(entry)
        return AnomalyReport(window, sets, theta)

    @classmethod
    def _split(cls, view, members, k, score, min_size, whole=None):
        """Recursive two-block classic SBM bisection of a community's clipped graph.

        A split is kept only when one half scores higher than the whole; kept
        halves are refined again.
        """
        if members.size < 2 * min_size:
            return [members]
        sub = Graph.from_dense((view.cg.matrix[np.ix_(members, members)] > 0).astype(np.float64))
        if sub.n_edges == 0:
            return [members]
        z, _, _ = fit_sbm(sub, 2)
        halves = [members[z == 0], members[z == 1]]
        if min(h.size for h in halves) < min_size:
            return [members]
        whole = (score(members, k) or 0.0) if whole is None else whole
        scores = [score(h, k) or 0.0 for h in halves]
        if max(scores) <= whole:
            return [members]
        return [part for h, sc in zip(halves, scores) for part in cls._split(view, h, k, score, min_size, sc)]


def monitor_window(X, detector, theta_corr=None, theta_anomaly=THETA_ANOMALY, K=None, window=None, oracle=False):
    """Detect correlated anomaly sets in one window with a trained detector.

    ``theta_corr`` overrides the detector's calibrated clipping threshold for
    this window; ``K`` must match the detector when given.
    """
    if K is not None and K != detector.n_communities:
        raise ValueError(f"detector was trained with K={detector.n_communities}, not {K}")
    if theta_corr is None:
        return detector.detect(X, window, theta_anomaly, oracle)
    saved = detector.theta_corr_
    detector.theta_corr_ = float(theta_corr)
    try:
        return detector.detect(X, window, theta_anomaly, oracle)
    finally:
        detector.theta_corr_ = saved


class PCABaseline(BaseEstimator):
    """Classical detector: principal component of the whole window's correlation matrix.

    Features whose squared loading exceeds the uniform level ``1 / p`` form
    the candidate set; it alarms when that set's exact principal score
    exceeds ``theta_anomaly``. The whole-window score is reported as well.
    """

    def __init__(self, theta_anomaly=THETA_ANOMALY, tol=1e-9, max_iter=10_000):
        self.theta_anomaly = theta_anomaly
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, windows=None, truths=None):
        return self

    def detect(self, X, window=None):
        X = np.asarray(X, dtype=np.float64)
        p = X.shape[1]
        lam, u = principal_eigenpair(correlation_operator(X), self.tol, self.max_iter)
        members = np.flatnonzero(u * u >= 1.0 / p)
        rho = exact_principal_score(pearson_correlation(X[:, members]), tol=self.tol, max_iter=self.max_iter)
        entry = {"community": 0, "members": members.tolist(), "rho_hat": rho, "rho": rho,
                 "alarm": rho > self.theta_anomaly, "window_score": lam / p}
        return AnomalyReport(window, [entry], self.theta_anomaly)
