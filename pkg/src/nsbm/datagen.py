"""Synthetic benchmarks: planted partitions, perturbed alignment pairs and
correlated-anomaly window streams."""

from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import Graph
from .numerics import make_rng


@dataclass
class PlantedPartitionSpec:
    sizes: list = field(default_factory=lambda: [50, 50])
    p_in: float = 0.3
    p_out: float = 0.02
    attr_dim: int = 16
    attr_noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.p_out < self.p_in <= 1:
            raise ValueError("need 0 <= p_out < p_in <= 1")
        if not self.sizes or min(self.sizes) < 1:
            raise ValueError("community sizes must be positive")

    @property
    def K(self):
        return len(self.sizes)

    @classmethod
    def uniform(cls, K, size, **kwargs):
        return cls(sizes=[size] * K, **kwargs)


def planted_partition(spec):
    """Graph with ground-truth labels; edges i.i.d. Bernoulli(p_in / p_out).

    Attributes are a per-community mean drawn from N(0, I) plus isotropic
    Gaussian noise of scale ``attr_noise``.
    """
    rng = make_rng(spec.seed, "planted-partition")
    sizes = np.asarray(spec.sizes)
    z = np.repeat(np.arange(sizes.size), sizes)
    n = z.size
    iu, ju = np.triu_indices(n, 1)
    p = np.where(z[iu] == z[ju], spec.p_in, spec.p_out)
    keep = rng.random(iu.size) < p
    attrs = None
    if spec.attr_dim > 0:
        means = rng.normal(size=(sizes.size, spec.attr_dim))
        attrs = means[z] + spec.attr_noise * rng.normal(size=(n, spec.attr_dim))
    labels = [[int(c)] for c in z]
    return Graph(n, iu[keep], ju[keep], directed=False, attributes=attrs, labels=labels)


@dataclass
class AlignmentPairSpec:
    base: PlantedPartitionSpec = field(default_factory=PlantedPartitionSpec)
    perm_seed: int = 1
    flip_prob: float = 0.05
    attr_jitter: float = 0.1

    def __post_init__(self):
        if isinstance(self.base, dict):
            self.base = PlantedPartitionSpec(**self.base)
        if not 0 <= self.flip_prob < 0.5:
            raise ValueError("flip probability must lie in [0, 0.5)")


def perturb_pair(spec):
    """Return ``(G1, G2, truth)`` where ``truth[v]`` is G2's id for G1's node v.

    G2 relabels G1 by a random permutation; each G1 edge is flipped with
    probability ``flip_prob`` (half of flips delete the edge, half move it to a
    random non-edge) and attributes get N(0, attr_jitter^2) noise. The number
    of flipped edges equals the number of G1 edges whose image is missing in G2
    (see :func:`count_flips`).
    """
    g1 = planted_partition(spec.base)
    rng = make_rng(spec.perm_seed, "perturb-pair")
    n = g1.n_nodes
    perm = rng.permutation(n)
    edges = set(zip(g1.src.tolist(), g1.dst.tolist()))
    flips = rng.random(len(g1.src)) < spec.flip_prob
    kept = []
    n_added = 0
    for (s, d), f in zip(zip(g1.src.tolist(), g1.dst.tolist()), flips):
        if not f:
            kept.append((s, d))
        elif rng.random() < 0.5:
            n_added += 1  # replace by a random non-edge
        # else: deleted
    new = set(kept)
    while n_added:
        a, b = rng.integers(0, n, size=2)
        if a == b:
            continue
        e = (min(a, b), max(a, b))
        if e in edges or e in new:
            continue
        new.add(e)
        n_added -= 1
    src = np.array([perm[s] for s, _ in sorted(new)], dtype=np.int64)
    dst = np.array([perm[d] for _, d in sorted(new)], dtype=np.int64)
    attrs2 = labels2 = None
    if g1.attributes is not None:
        attrs2 = np.empty_like(g1.attributes)
        attrs2[perm] = g1.attributes + spec.attr_jitter * rng.normal(size=g1.attributes.shape)
    if g1.labels is not None:
        labels2 = [None] * n
        for v in range(n):
            labels2[perm[v]] = list(g1.labels[v])
    g2 = Graph(n, src, dst, attributes=attrs2, labels=labels2)
    return g1, g2, perm.astype(np.int64)


def count_flips(g1, g2, truth):
    """G1 edges that do not survive under the alignment ``truth``."""
    e2 = set(zip(g2.src.tolist(), g2.dst.tolist()))
    lost = 0
    for s, d in zip(truth[g1.src], truth[g1.dst]):
        if (min(s, d), max(s, d)) not in e2:
            lost += 1
    return lost


def spec_to_dict(spec):
    return asdict(spec)


# -- correlated-anomaly windows ---------------------------------------------------------

SCENARIO_DEFAULTS = {
    # window_size, n_samples, anomaly share (fraction of window) or count range, n_sets range
    "large": dict(window_size=200, n_samples=100, fraction=(0.2, 0.5), count=None, n_sets=(1, 2)),
    "small": dict(window_size=200, n_samples=100, fraction=(0.05, 0.2), count=None, n_sets=(1, 2)),
    "hidden": dict(window_size=2048, n_samples=16, fraction=None, count=(20, 200), n_sets=(1, 1)),
}


@dataclass
class AnomalyScenario:
    """Stream of feature windows (``n_samples x window_size``), some carrying
    strongly correlated feature sets.

    ``large``/``small`` anomalies cover a fraction of the window's features;
    ``hidden`` plants 20-200 features in a window of more than 2000 features
    observed over very few samples. Anomaly sets follow a shared latent factor
    with pairwise correlation ``strength`` (drawn per set from the range).
    """

    tag: str = "large"
    n_windows: int = 200
    inject_fraction: float = 0.1
    strength: tuple = (0.8, 0.95)
    window_size: int = None
    n_samples: int = None
    fraction: tuple = None
    count: tuple = None
    n_sets: tuple = None
    max_rejections: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.tag not in SCENARIO_DEFAULTS:
            raise ValueError(f"unknown scenario {self.tag!r}; expected one of {sorted(SCENARIO_DEFAULTS)}")
        for k, v in SCENARIO_DEFAULTS[self.tag].items():
            if getattr(self, k) is None:
                setattr(self, k, v)
        self.strength = tuple(self.strength)
        if not 0 <= self.inject_fraction <= 1:
            raise ValueError("inject_fraction must lie in [0, 1]")
        if not 0 < self.strength[0] <= self.strength[1] <= 1:
            raise ValueError("strength range must lie in (0, 1]")
        if self.n_samples < 2:
            raise ValueError("windows need at least 2 samples")
        if self.tag == "hidden" and self.window_size <= 2000:
            raise ValueError("hidden windows must hold more than 2000 features")


@dataclass
class AnomalyWindow:
    window: int
    features: np.ndarray
    injected: bool
    sets: list = field(default_factory=list)
    strengths: list = field(default_factory=list)
    rejections: int = 0

    @property
    def members(self):
        return np.sort(np.concatenate(self.sets)) if self.sets else np.zeros(0, dtype=np.int64)

    def truth(self):
        return {
            "window": self.window,
            "injected": self.injected,
            "members": self.members.tolist(),
            "sets": [s.tolist() for s in self.sets],
            "strengths": [float(s) for s in self.strengths],
            "rejections": self.rejections,
        }


def latent_factor_block(rng, n_samples, size, s):
    """``size`` columns with pairwise correlation ``s``: ``sqrt(s) f + sqrt(1 - s) e_i``."""
    f = rng.normal(size=(n_samples, 1))
    return np.sqrt(s) * f + np.sqrt(1.0 - s) * rng.normal(size=(n_samples, size))


def _draw_window(scenario, rng, inject):
    p, n = scenario.window_size, scenario.n_samples
    X = rng.normal(size=(n, p))
    if not inject:
        return X, [], []
    if scenario.count is not None:
        total = int(rng.integers(scenario.count[0], scenario.count[1] + 1))
    else:
        lo, hi = scenario.fraction
        total = int(round(rng.uniform(lo, hi) * p))
    n_sets = int(rng.integers(scenario.n_sets[0], scenario.n_sets[1] + 1))
    n_sets = max(1, min(n_sets, total // 2))
    cuts = np.sort(rng.choice(np.arange(1, total), size=n_sets - 1, replace=False)) if n_sets > 1 else []
    sizes = np.diff(np.concatenate([[0], cuts, [total]])).astype(int)
    cols = rng.permutation(p)[:total]
    sets, strengths, start = [], [], 0
    for size in sizes:
        members = np.sort(cols[start : start + size])
        start += size
        s = float(rng.uniform(*scenario.strength))
        X[:, members] = latent_factor_block(rng, n, size, s)
        sets.append(members.astype(np.int64))
        strengths.append(s)
    return X, sets, strengths


def _hidden_ok(X, sets, threshold=0.7):
    from .anomaly import correlation_operator, exact_principal_score, pearson_correlation

    full = exact_principal_score(correlation_operator(X), X.shape[1])
    if full >= threshold:
        return False
    for members in sets:
        if exact_principal_score(pearson_correlation(X[:, members]), members.size) <= threshold:
            return False
    return True


def synth_anomaly_windows(scenario):
    """List of :class:`AnomalyWindow`; exactly ``round(inject_fraction * n_windows)`` are injected.

    Each window draws from its own stream. Injected ``hidden`` windows are
    redrawn until the whole window scores below 0.7 while every planted set
    scores above it; the number of redraws is kept on the window.
    """
    sel = make_rng(scenario.seed, f"anomaly/{scenario.tag}/select")
    n_inj = int(round(scenario.inject_fraction * scenario.n_windows))
    injected = np.zeros(scenario.n_windows, dtype=bool)
    injected[sel.permutation(scenario.n_windows)[:n_inj]] = True
    out = []
    for w in range(scenario.n_windows):
        for attempt in range(scenario.max_rejections + 1):
            rng = make_rng(scenario.seed, f"anomaly/{scenario.tag}/{w}/{attempt}")
            X, sets, strengths = _draw_window(scenario, rng, injected[w])
            if scenario.tag != "hidden" or not sets or _hidden_ok(X, sets):
                break
        else:
            raise RuntimeError(f"window {w}: no valid hidden draw in {scenario.max_rejections} attempts")
        out.append(AnomalyWindow(w, X, bool(injected[w]), sets, strengths, attempt))
    return out
