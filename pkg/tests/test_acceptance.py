"""End-to-end acceptance checks, one test per criterion.

Each test records PASS/FAIL with its measured values; the terminal summary
prints one line per criterion (see ``conftest.py``).
"""

import itertools
import json
import time

import numpy as np
import pytest
from scipy.stats import spearmanr
from sklearn.cluster import KMeans

from nsbm.alignment import AlignmentModel, AlignmentSide, alignment_loss, alignment_scores, match_nodes, train_alignment
from nsbm.anomaly import (
    AnomalyDetector,
    PCABaseline,
    approx_principal_score,
    attention_weights,
    exact_principal_score,
    pca_loss,
    pearson_correlation,
)
from nsbm.classic_sbm import count_blocks, exact_log_likelihood, fit_sbm, ml_block_matrix
from nsbm.cli import main
from nsbm.community import (
    community_embeddings,
    community_similarity,
    entropy_loss,
    joint_loss,
    label_loss,
    link_loss,
    membership,
    sbm_loss,
)
from nsbm.datagen import (
    AlignmentPairSpec,
    AnomalyScenario,
    PlantedPartitionSpec,
    perturb_pair,
    planted_partition,
    synth_anomaly_windows,
)
from nsbm.embedder import skipgram_loss
from nsbm.graph import Graph
from nsbm.layers import init_linear
from nsbm.metrics import alignment_accuracy, anomaly_metrics, community_metrics
from nsbm.model import NSBM
from nsbm.numerics import (
    AdamState,
    adam_step,
    evaluate_with_gradients,
    finite_difference_check,
    make_rng,
    softmax,
    tensor,
)

TOL = 1e-4


# -- 1 -----------------------------------------------------------------------------------------------


def _instance(seed=0):
    rng = make_rng(seed, "acceptance-grad")
    n = d = 12
    A = np.triu((rng.random((n, n)) < 0.35).astype(float), 1)
    A = A + A.T
    return rng, rng.normal(size=(n, d)), A


def test_criterion_1_gradient_suite(criterion):
    with criterion(1, "finite-difference gradients of every loss") as rec:
        t0 = time.perf_counter()
        rng, X0, A = _instance()
        X = tensor(X0.copy(), requires_grad=True)
        member = init_linear(rng, 12, 4)  # K = 3 plus pseudo
        l1, l2 = init_linear(rng, 12, 12), init_linear(rng, 12, 12)
        iu, ju = np.nonzero(np.triu(A))
        pos = np.stack([iu, ju], 1)
        neg = rng.integers(0, 12, size=(3 * len(pos), 2))
        labels = {0: [1], 4: [0, 2], 9: [2]}
        walks = rng.integers(0, 12, size=(6, 5))
        walk_neg = rng.integers(0, 12, size=(len(walks) * 4 * 2 * 2, 3))
        am = AlignmentModel.create(12, 12, d_out=12, identity=False, seed=1)
        X2 = rng.normal(size=(12, 12))
        attn = {"layer": init_linear(rng, 12, 12), "w2": tensor(rng.normal(size=12), requires_grad=True)}
        S = rng.normal(size=(30, 12))

        def Z():
            return membership(X, member)

        both = {"X": X, **{f"member.{k}": v for k, v in member.items()}}
        links = {"X": X, **{f"l1.{k}": v for k, v in l1.items()}, **{f"l2.{k}": v for k, v in l2.items()}}
        cases = {
            "sbm": (lambda: sbm_loss(community_similarity(Z(), X, A, 3), Z()[:, :3].sum(axis=0)), both),
            "entropy": (lambda: entropy_loss(Z()), both),
            "link": (lambda: link_loss(X, pos, l1, l2, negatives=neg), links),
            "labels": (lambda: label_loss(Z(), labels), both),
            "joint": (lambda: joint_loss(Z(), X, A, pos, (l1, l2), 3, negatives=neg, labels=labels).total,
                      {**both, **links}),
            "community_attention": (lambda: community_embeddings(Z(), X, attn, 0.1).vectors[0].sum(),
                                    {"X": X, "attn.W": attn["layer"]["W"], "attn.w2": attn["w2"]}),
            "alignment": (lambda: alignment_loss(X, X2, alignment_scores(X, X2, am), am), {"X": X, **am.params()}),
            "pca": (lambda: pca_loss(tensor(S) @ attention_weights(X, attn), attention_weights(X, attn)),
                    {"X": X, "attn.W": attn["layer"]["W"], "attn.w2": attn["w2"]}),
            "skipgram": (lambda: skipgram_loss(walks, 2, 3, X, negatives=walk_neg[: _pairs(walks, 2)]), {"X": X}),
        }
        worst = {}
        for name, (fn, params) in cases.items():
            worst[name] = finite_difference_check(fn, params, tolerance=TOL).max_error
        elapsed = time.perf_counter() - t0
        rec.detail = f"max rel err {max(worst.values()):.1e} ({max(worst, key=worst.get)})"
        assert all(e <= TOL for e in worst.values()), worst
        assert elapsed < 30


def _pairs(walks, window):
    from nsbm.embedder import context_pairs

    return len(context_pairs(walks, window))


# -- 2 -----------------------------------------------------------------------------------------------


def test_criterion_2_exact_likelihood_oracle(criterion):
    with criterion(2, "exact SBM log-likelihood worked example") as rec:
        g = Graph.from_edges(4, [(0, 1), (2, 3), (0, 2)])
        z = np.array([0, 0, 1, 1])
        C, N, _ = count_blocks(g, z, 2)
        P = ml_block_matrix(C, N)
        ll = exact_log_likelihood(g, z, P)
        rec.detail = f"ln L = {ll:.9f}"
        assert P.tolist() == [[1.0, 0.25], [0.25, 1.0]]
        assert abs(ll - (np.log(0.25) + 3 * np.log(0.75))) <= 1e-9
        assert abs(ll - (-2.249340)) <= 1e-6


# -- 3 -----------------------------------------------------------------------------------------------


def test_criterion_3_matrix_loss_tracks_likelihood(criterion):
    with criterion(3, "Spearman(-sbm_loss, exact ln L) over all bipartitions") as rec:
        t0 = time.perf_counter()
        g = planted_partition(PlantedPartitionSpec(sizes=[5, 5], p_in=0.5, p_out=0.1, attr_dim=0, seed=0))
        A = g.dense_block(np.arange(g.n_nodes))
        approx, exact = [], []
        for bits in itertools.product((0, 1), repeat=10):
            z = np.array(bits)
            Z = np.eye(2)[z]
            # the loss's own similarity with hard labels: edge-end counts between blocks
            approx.append(-sbm_loss(Z.T @ A @ Z, Z.sum(axis=0)).item())
            C, N, _ = count_blocks(g, z, 2)
            exact.append(exact_log_likelihood(g, z, ml_block_matrix(C, N)))
        rho = spearmanr(approx, exact).statistic
        rec.detail = f"rho = {rho:.3f} over {len(approx)} labelings, {g.n_edges} edges"
        assert rho >= 0.8
        assert time.perf_counter() - t0 < 60


# -- 4 -----------------------------------------------------------------------------------------------


def test_criterion_4_classic_sbm_recovers_cliques(criterion):
    with criterion(4, "classic SBM recovers two 5-cliques") as rec:
        edges = [(b + i, b + j) for b in (0, 5) for i in range(5) for j in range(i + 1, 5)]
        g = Graph.from_edges(10, edges)
        ok = 0
        for seed in range(20):
            z, _, _ = fit_sbm(g, 2, seed)
            ok += len(set(z[:5])) == 1 and len(set(z[5:])) == 1 and z[0] != z[5]
        rec.detail = f"{ok}/20 seeds"
        assert ok == 20


# -- 5 -----------------------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_nsbm_beats_link_only(criterion):
    with criterion(5, "NSBM joint loss vs link-only on 10 planted communities") as rec:
        t0 = time.perf_counter()
        joint_f1, link_f1 = [], []
        for seed in range(5):
            g = planted_partition(PlantedPartitionSpec.uniform(10, 60, p_in=0.15, p_out=0.01, attr_dim=16, seed=seed))
            truth = [lab[0] for lab in g.labels]
            base = dict(n_communities=10, pseudo=False, kernel="raw", batch_size=600, c=10, lr=1e-2, epochs=60,
                        random_state=seed)
            m = NSBM(embedder_lr=0.0, **base).fit(g)
            joint_f1.append(community_metrics(m.predict_proba(None), truth, 10).macro_f1)
            link = NSBM(loss_weights={"sbm": 0.0, "entropy": 0.0}, **base).fit(g)
            km = KMeans(10, n_init=10, random_state=0).fit(link.transform(None))
            link_f1.append(community_metrics(np.eye(10)[km.labels_], truth, 10).macro_f1)
        wins = sum(j > lo for j, lo in zip(joint_f1, link_f1))
        elapsed = time.perf_counter() - t0
        rec.detail = (f"joint F1 {np.round(joint_f1, 3).tolist()} link-only {np.round(link_f1, 3).tolist()} "
                      f"wins {wins}/5")
        assert min(joint_f1) >= 0.9
        assert wins >= 4
        assert elapsed < 300


# -- 6 -----------------------------------------------------------------------------------------------


def test_criterion_6_permutation_invariance(criterion):
    with criterion(6, "losses and metrics invariant under community relabeling") as rec:
        rng = np.random.default_rng(6)
        K, n = 5, 20
        Z = softmax(tensor(rng.normal(scale=2.0, size=(n, K + 1)))).data
        X = rng.normal(size=(n, 4))
        A = np.triu((rng.random((n, n)) < 0.3).astype(float), 1)
        A = A + A.T
        C = community_similarity(Z, X, A, K).data
        s = Z[:, :K].sum(axis=0)
        truth = rng.integers(0, K, size=n)
        base = (sbm_loss(C, s).item(), entropy_loss(Z).item(), community_metrics(Z, truth, K).as_dict())
        worst = 0.0
        for _ in range(200):
            p = rng.permutation(K)
            cols = np.append(p, K)
            got_sbm = sbm_loss(C[np.ix_(p, p)], s[p]).item()
            got_ent = entropy_loss(Z[:, cols]).item()
            got_met = community_metrics(Z[:, cols], truth, K).as_dict()
            worst = max(worst, abs(got_sbm - base[0]), abs(got_ent - base[1]))
            assert got_met["precision"] == base[2]["precision"] and got_met["macro_f1"] == base[2]["macro_f1"]
            assert got_met["nmi"] == base[2]["nmi"]
        rec.detail = f"200 permutations, max loss change {worst:.1e}"
        assert worst == 0.0


# -- 7 -----------------------------------------------------------------------------------------------


def test_criterion_7_rayleigh_bound(criterion):
    with criterion(7, "approximate score bounded by exact score; PCA loss closes the gap") as rec:
        rng = make_rng(7, "acceptance-rayleigh")
        violations, worst = 0, -np.inf
        for i in range(1000):
            if i % 10 == 0:
                F = rng.normal(size=(40, 10)) + rng.normal(size=(40, 1)) * rng.uniform(0, 2)
                C = pearson_correlation(F)
                exact = exact_principal_score(C, tol=1e-13, max_iter=100_000)
            a = rng.normal(size=10)
            a /= np.linalg.norm(a)
            gap = approx_principal_score(a, C) - exact
            worst = max(worst, gap)
            violations += gap > 1e-12
        corr = np.array([[1.0, 0.8], [0.8, 1.0]])
        x = make_rng(8, "t").normal(size=(5000, 2)) @ np.linalg.cholesky(corr).T
        x = (x - x.mean(0)) / x.std(0)
        a = tensor(np.array([0.9, 0.1]), requires_grad=True)
        opt = AdamState.for_params({"a": a}, lr=1e-2)
        for _ in range(2000):
            _, g = evaluate_with_gradients(lambda: pca_loss(tensor(x) @ a, a), {"a": a})
            adam_step({"a": a}, g, opt)
        closed = abs(approx_principal_score(a.data, corr) - 0.9)
        rec.detail = f"violations {violations}/1000, max gap {worst:.1e}, trained gap {closed:.4f}"
        assert violations == 0
        assert closed <= 0.02


# -- 8 -----------------------------------------------------------------------------------------------


def _anomaly_run(tag):
    train = synth_anomaly_windows(AnomalyScenario(tag, n_windows=40, inject_fraction=0.5, seed=100))
    det = AnomalyDetector(random_state=0).fit([w.features for w in train], [w.sets for w in train])
    test = synth_anomaly_windows(AnomalyScenario(tag, n_windows=200, inject_fraction=0.1, seed=0))
    truths = [w.truth() for w in test]
    nsbm = anomaly_metrics([det.detect(w.features, w.window).as_dict() for w in test], truths)
    pca = anomaly_metrics([PCABaseline().detect(w.features, w.window).as_dict() for w in test], truths)
    return nsbm, pca


@pytest.mark.slow
def test_criterion_8_anomaly_scenarios(criterion):
    with criterion(8, "anomaly scenarios: NSBM vs PCA on large and hidden") as rec:
        t0 = time.perf_counter()
        large, large_pca = _anomaly_run("large")
        hidden, hidden_pca = _anomaly_run("hidden")
        elapsed = time.perf_counter() - t0
        rec.detail = (f"large NSBM {large.alert_recall:.2f} (ex.a {large.extra_alarms}) PCA {large_pca.alert_recall:.2f}; "
                      f"hidden NSBM {hidden.alert_recall:.2f} (ex.a {hidden.extra_alarms}) "
                      f"PCA {hidden_pca.alert_recall:.2f}")
        assert large.alert_recall >= 0.75 and large_pca.alert_recall >= 0.75
        assert hidden.alert_recall >= 0.5 and hidden_pca.alert_recall <= 0.1
        for res in (large, hidden):
            assert res.extra_alarms <= 0.1 * (res.n_windows - res.n_injected)
        assert elapsed < 600, f"{elapsed:.0f}s"


# -- 9 -----------------------------------------------------------------------------------------------


def _alignment_accuracy(flip, jitter, tied):
    spec = AlignmentPairSpec(PlantedPartitionSpec.uniform(4, 50, p_in=0.15, p_out=0.01, attr_dim=16, seed=0),
                             perm_seed=1, flip_prob=flip, attr_jitter=jitter)
    g1, g2, perm = perturb_pair(spec)
    truth = np.stack([np.arange(g1.n_nodes), perm], 1)
    fw = NSBM(n_communities=4, pseudo=False, free_dim=0, epochs=20, batch_size=200, c=4, lr=1e-2,
              embedder_lr=0.0, random_state=0).fit(g1)
    s1, s2 = AlignmentSide.from_model(fw), AlignmentSide.from_model(fw, g2)
    model = train_alignment(s1, s2, epochs=20, tied=tied)
    return alignment_accuracy(match_nodes(s1.X, s2.X, model).top1, truth)


@pytest.mark.slow
def test_criterion_9_alignment(criterion):
    with criterion(9, "alignment of a permuted 200-node copy") as rec:
        t0 = time.perf_counter()
        noisy = _alignment_accuracy(0.05, 0.1, tied=False)
        clean = _alignment_accuracy(0.0, 0.0, tied=True)
        elapsed = time.perf_counter() - t0
        rec.detail = f"5% flips top-1 {noisy:.3f}; noiseless tied {clean:.3f}"
        assert noisy >= 0.8
        assert clean == 1.0
        assert elapsed < 300


# -- 10 ----------------------------------------------------------------------------------------------


def test_criterion_10_cli_determinism(criterion, tmp_path):
    with criterion(10, "train + eval byte-identical; eval leaves the checkpoint unchanged") as rec:
        (tmp_path / "data.spec").write_text("kind = planted\nsizes = 20, 20, 20\np_in = 0.3\np_out = 0.02\n"
                                            "attr_dim = 8\nseed = 3\n")
        (tmp_path / "run.cfg").write_text("n_communities = 3\nepochs = 5\nbatch_size = 60\nc = 3\nlr = 0.01\n"
                                          "d_model = 16\nd_out = 16\n")
        assert main(["generate", str(tmp_path / "data.spec"), "--out-dir", str(tmp_path / "data")]) == 0
        digests, reports = [], []
        for run in ("a", "b"):
            out = tmp_path / run
            assert main(["train", str(tmp_path / "data"), "--config", str(tmp_path / "run.cfg"), "--seed", "11",
                         "--out-dir", str(out / "train")]) == 0
            ckpt = out / "train" / "checkpoint.nsbm"
            before = ckpt.read_bytes()
            assert main(["eval", str(ckpt), str(tmp_path / "data"), "--out-dir", str(out / "eval")]) == 0
            assert ckpt.read_bytes() == before
            digests.append(before)
            reports.append((out / "eval" / "metrics.json").read_bytes())
        meta = json.loads(reports[0])
        rec.detail = f"checkpoint sha256 {meta['checkpoint_sha256'][:12]}..., F1 {meta['metrics']['community']['macro_f1']:.3f}"
        assert digests[0] == digests[1]
        assert reports[0] == reports[1]
        assert (tmp_path / "a" / "train" / "loss.csv").read_bytes() == (tmp_path / "b" / "train" / "loss.csv").read_bytes()
