"""Evaluation: matched community precision/F1, alignment accuracy and
window-level anomaly detection rates."""

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import normalized_mutual_info_score


def _truth_lists(truth, n):
    out = []
    for v in range(n):
        t = truth[v]
        if t is None:
            out.append([])
        elif np.isscalar(t):
            out.append([int(t)])
        else:
            out.append([int(x) for x in t])
    return out


def top_k_membership(Z, ks):
    """Boolean ``(n, cols)``: column j is among row v's top ``ks[v]`` (ties -> lower index)."""
    Z = np.asarray(Z, dtype=np.float64)
    order = np.argsort(-Z, axis=1, kind="stable")
    out = np.zeros(Z.shape, dtype=bool)
    for v, k in enumerate(ks):
        out[v, order[v, : max(int(k), 1)]] = True
    return out


@dataclass
class CommunityEvalResult:
    precision: float
    macro_f1: float
    nmi: float
    per_community: list = field(default_factory=list)
    matching: dict = field(default_factory=dict)

    def as_dict(self):
        return asdict(self)


def community_metrics(Z, truth, n_communities=None):
    """Hungarian-matched average precision and macro-F1.

    ``Z`` is a soft (or one-hot) membership matrix; columns at index
    ``>= n_communities`` (the pseudo-community) take part in ranking but are
    never matched. ``truth[v]`` is a label or a list of labels; a node with
    ``k`` truth labels is predicted in the top ``k`` columns of its row.
    Precision averages over nonempty predicted communities, F1 over truth
    communities (unmatched ones score 0).
    """
    Z = np.asarray(Z, dtype=np.float64)
    n = Z.shape[0]
    K = Z.shape[1] if n_communities is None else int(n_communities)
    tl = _truth_lists(truth, n)
    n_truth = 1 + max((max(t) for t in tl if t), default=-1)
    T = np.zeros((n, n_truth), dtype=bool)
    for v, t in enumerate(tl):
        T[v, t] = True
    P = top_k_membership(Z, [len(t) for t in tl])[:, :K]
    # canonical column order so the result cannot depend on predicted indices
    canon = sorted(range(K), key=lambda j: tuple(np.flatnonzero(P[:, j])))
    Pc = P[:, canon]
    overlap = Pc.T.astype(np.int64) @ T.astype(np.int64)
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    per, precisions, f1 = [], [], np.zeros(n_truth)
    matched = {}
    for r, c in zip(rows, cols):
        size_p, size_t, hit = Pc[:, r].sum(), T[:, c].sum(), overlap[r, c]
        prec = hit / size_p if size_p else 0.0
        rec = hit / size_t if size_t else 0.0
        f = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        j = canon[r]
        matched[int(j)] = int(c)
        if size_p:
            precisions.append(prec)
        f1[c] = f
        per.append({"predicted": int(j), "truth": int(c), "precision": float(prec), "recall": float(rec), "f1": float(f)})
    # unmatched nonempty predicted communities count with precision 0
    unmatched = set(range(K)) - set(matched)
    precisions += [0.0 for j in unmatched if P[:, j].any()]
    per.sort(key=lambda d: d["truth"])
    first = np.array([t[0] if t else -1 for t in tl])
    top1 = np.argmax(Z, axis=1)
    has = first >= 0
    nmi = float(normalized_mutual_info_score(first[has], top1[has])) if has.any() else 0.0
    return CommunityEvalResult(
        precision=float(np.mean(precisions)) if precisions else 0.0,
        macro_f1=float(f1.mean()) if n_truth else 0.0,
        nmi=nmi,
        per_community=per,
        matching=matched,
    )


def alignment_accuracy(matching, truth):
    """Fraction of truth pairs ``(g1, g2)`` whose G1 node's top-1 match is ``g2``.

    ``matching`` maps G1 node -> matched G2 node (dict or array indexed by G1 id).
    """
    truth = np.asarray(truth, dtype=np.int64).reshape(-1, 2)
    if truth.shape[0] == 0:
        raise ValueError("empty ground truth")
    get = matching.get if isinstance(matching, dict) else (lambda v: np.asarray(matching)[v])
    hits = sum(int(get(int(a)) == int(b)) for a, b in truth)
    return hits / truth.shape[0]


@dataclass
class AnomalyEvalResult:
    alert_recall: float
    member_recall: float
    accuracy: float
    extra_alarms: int
    n_windows: int
    n_injected: int

    @property
    def rec(self):
        return (self.alert_recall, self.member_recall)

    def as_dict(self):
        return asdict(self)


def anomaly_metrics(reports, truths):
    """``rec`` pair, ``acu`` and ``ex.a`` over aligned windows.

    ``reports[i]`` needs ``alarm`` (bool) and ``members`` (features in alarmed
    sets); ``truths[i]`` needs ``injected`` (bool) and ``members`` (all planted
    anomaly features). Empty denominators give 0.
    """
    if len(reports) != len(truths):
        raise ValueError(f"{len(reports)} reports for {len(truths)} truth windows")
    inj = alerted_inj = ex = 0
    true_members = found_true = 0
    detected = detected_true = 0
    for rep, tr in zip(reports, truths):
        if "window" in rep and "window" in tr and rep["window"] != tr["window"]:
            raise ValueError(f"window ids differ: {rep['window']} vs {tr['window']}")
        alarm = bool(rep["alarm"])
        got = set(int(x) for x in rep.get("members", ())) if alarm else set()
        real = set(int(x) for x in tr.get("members", ()))
        if tr["injected"]:
            inj += 1
            if alarm:
                alerted_inj += 1
                true_members += len(real)
                found_true += len(got & real)
        elif alarm:
            ex += 1
        detected += len(got)
        detected_true += len(got & real)
    return AnomalyEvalResult(
        alert_recall=alerted_inj / inj if inj else 0.0,
        member_recall=found_true / true_members if true_members else 0.0,
        accuracy=detected_true / detected if detected else 0.0,
        extra_alarms=ex,
        n_windows=len(reports),
        n_injected=inj,
    )
