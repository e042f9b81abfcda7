"""``nsbm`` command line: generate -> train -> eval, plus classical baselines.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from .alignment import (
    AlignmentModel,
    AlignmentSide,
    alignment_accuracy_topk,
    load_alignment,
    match_nodes,
    save_alignment,
    save_matching,
    train_alignment,
)
from .anomaly import AnomalyDetector, ConvergenceError, PCABaseline
from .classic_sbm import ClassicSBM
from .community import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .datagen import (
    AlignmentPairSpec,
    AnomalyScenario,
    PlantedPartitionSpec,
    perturb_pair,
    planted_partition,
    spec_to_dict,
    synth_anomaly_windows,
)
from .graph import Graph, GraphFormatError, load_edge_list, load_features, load_labels, save_edge_list, save_features, save_labels
from .metrics import anomaly_metrics, community_metrics
from .model import NSBM

log = logging.getLogger("nsbm")

USAGE, DATA, NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- dataset specs and files ---------------------------------------------------------------------

KINDS = {"planted": PlantedPartitionSpec, "alignment": AlignmentPairSpec, "anomaly": AnomalyScenario}
_BASE_KEYS = {f.name for f in fields(PlantedPartitionSpec)}


def _parse_scalar(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_spec(text):
    """``kind = planted|alignment|anomaly`` plus ``key = value`` fields; commas make lists."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"spec line {lineno}: expected key = value")
        k, v = (x.strip() for x in line.split("=", 1))
        raw[k] = [_parse_scalar(x.strip()) for x in v.split(",")] if "," in v else _parse_scalar(v)
    kind = raw.pop("kind", None)
    if kind not in KINDS:
        raise UsageError(f"spec needs kind = one of {sorted(KINDS)}")
    if kind == "planted" and "sizes" in raw and not isinstance(raw["sizes"], list):
        raw["sizes"] = [raw["sizes"]]
    try:
        if kind == "alignment":
            base = {k: raw.pop(k) for k in list(raw) if k in _BASE_KEYS}
            if "sizes" in base and not isinstance(base["sizes"], list):
                base["sizes"] = [base["sizes"]]
            return kind, AlignmentPairSpec(base=PlantedPartitionSpec(**base), **raw)
        return kind, KINDS[kind](**raw)
    except TypeError as exc:
        raise UsageError(f"bad spec field: {exc}") from None
    except ValueError as exc:
        raise UsageError(f"invalid spec: {exc}") from None


def _write_graph(g, out, prefix):
    save_edge_list(g, out / f"{prefix}.tsv")
    if g.labels is not None:
        save_labels(g.labels, out / f"{prefix}_labels.tsv")
    if g.attributes is not None:
        save_features(g.attributes, out / f"{prefix}_features.csv")
    return {"edges": f"{prefix}.tsv", "labels": f"{prefix}_labels.tsv", "features": f"{prefix}_features.csv",
            "n_nodes": g.n_nodes}


def generate(spec_path, out, seed=None):
    kind, spec = parse_spec(Path(spec_path).read_text(encoding="utf-8"))
    if seed is not None:
        if kind == "alignment":
            spec.base.seed, spec.perm_seed = seed, seed + 1
        else:
            spec.seed = seed
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"kind": kind, "spec": spec_to_dict(spec)}
    if kind == "planted":
        manifest["graph"] = _write_graph(planted_partition(spec), out, "graph")
    elif kind == "alignment":
        g1, g2, perm = perturb_pair(spec)
        manifest["g1"] = _write_graph(g1, out, "g1")
        manifest["g2"] = _write_graph(g2, out, "g2")
        save_alignment(np.stack([np.arange(g1.n_nodes), perm], axis=1), out / "truth.tsv")
        manifest["truth"] = "truth.tsv"
    else:
        windows = synth_anomaly_windows(spec)
        (out / "windows").mkdir(exist_ok=True)
        names = []
        for w in windows:
            name = f"windows/w{w.window:05d}.csv"
            np.savetxt(out / name, w.features, delimiter=",", fmt="%.17g",
                       header=",".join(f"f{j}" for j in range(w.features.shape[1])), comments="")
            names.append(name)
        (out / "truth.json").write_text(json.dumps([w.truth() for w in windows], indent=1) + "\n")
        manifest.update(windows=names, truth="truth.json")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(data):
    path = Path(data) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"{path}: no dataset manifest")
    return json.loads(path.read_text())


def read_graph(data, entry):
    """Graph with nodes ``0..n-1`` (isolated ones included), attributes and labels."""
    data = Path(data)
    g = load_edge_list(data / entry["edges"])
    try:
        ids = np.array([int(x) for x in g.id_map], dtype=np.int64)
    except ValueError:
        raise GraphFormatError("dataset node ids must be integers", 0, data / entry["edges"]) from None
    n = int(entry["n_nodes"])
    shell = Graph(n, ids[g.src], ids[g.dst])
    attrs = load_features(data / entry["features"], shell) if (data / entry["features"]).exists() else None
    labels = load_labels(data / entry["labels"], shell)[0] if (data / entry["labels"]).exists() else None
    return Graph(n, ids[g.src], ids[g.dst], attributes=attrs, labels=labels)


def read_windows(data, manifest):
    data = Path(data)
    windows = [np.loadtxt(data / name, delimiter=",", skiprows=1, ndmin=2) for name in manifest["windows"]]
    truths = json.loads((data / manifest["truth"]).read_text())
    return windows, truths


def _need(manifest, *kinds):
    if manifest["kind"] not in kinds:
        raise UsageError(f"dataset kind {manifest['kind']!r} does not fit; expected {' or '.join(kinds)}")


# -- reports ---------------------------------------------------------------------------------------


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_rows(path, rows):
    cols = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in cols])


def params_digest(arrays):
    h = hashlib.sha256()
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())
    return h.hexdigest()


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- train ------------------------------------------------------------------------------------------


def _fit_nsbm(cfg, graph, resume, rows):
    model = NSBM(**cfg.nsbm_params())
    if resume:
        arrays, _ = load_checkpoint(resume)
        model.load_arrays(graph, {k: v for k, v in arrays.items() if not k.startswith("align.")})
    else:
        model.initialize(graph)
    labels = None
    while model.epoch_ < cfg.epochs:
        model.train_epoch(graph, labels, callback=lambda p: rows.append({"phase": "community", **p}))
    return model


def train(cfg, data, out, task, resume=None):
    manifest = load_manifest(data)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    meta = {"task": task, "config": cfg.as_dict(), "dataset": manifest["spec"], "kind": manifest["kind"]}
    if task == "anomaly":
        _need(manifest, "anomaly")
        windows, truths = read_windows(data, manifest)
        if resume:
            raise UsageError("--resume is supported for the community and alignment tasks")
        det = AnomalyDetector(**cfg.detector_params())
        det.fit(windows, [t["sets"] for t in truths])
        rows = [{"phase": "anomaly", "step": i, **r} for i, r in enumerate(det.loss_history_)]
        arrays = det.state_arrays()
    else:
        _need(manifest, "planted", "alignment")
        if task == "align":
            _need(manifest, "alignment")
        graph = read_graph(data, manifest["graph" if manifest["kind"] == "planted" else "g1"])
        model = _fit_nsbm(cfg, graph, resume, rows)
        arrays = model.state_arrays()
        if task == "align":
            g2 = read_graph(data, manifest["g2"])
            side1, side2 = AlignmentSide.from_model(model), AlignmentSide.from_model(model, g2)
            am = train_alignment(side1, side2, epochs=cfg.align_epochs, c=cfg.c, batch_size=cfg.batch_size,
                                 lr=cfg.align_lr, entropy_weight=cfg.align_entropy, tied=cfg.align_tied,
                                 alpha=cfg.alpha, seed=cfg.seed)
            rows += [{"phase": "alignment", **r} for r in am.loss_history]
            arrays.update({f"align.{k}": v.data for k, v in am.params().items()})
    ckpt = out / "checkpoint.nsbm"
    save_checkpoint(ckpt, arrays, meta)
    write_rows(out / "loss.csv", rows)
    cfg.save(out / "config.txt")
    return ckpt


# -- eval ---------------------------------------------------------------------------------------------


def _load_nsbm(cfg, graph, arrays):
    model = NSBM(**cfg.nsbm_params())
    model.load_arrays(graph, {k: v for k, v in arrays.items() if not k.startswith("align.")})
    return model


def evaluate(ckpt, data, out, task=None, oracle=False):
    arrays, meta = load_checkpoint(ckpt)
    task = task or meta["task"]
    if task != meta["task"]:
        raise UsageError(f"checkpoint was trained for task {meta['task']!r}, not {task!r}")
    cfg = RunConfig(**meta["config"])
    manifest = load_manifest(data)
    out.mkdir(parents=True, exist_ok=True)
    report = {"task": task, "seed": cfg.seed, "config": cfg.as_dict(), "dataset": manifest["spec"],
              "checkpoint_sha256": file_digest(ckpt)}
    if task == "anomaly":
        _need(manifest, "anomaly")
        det = AnomalyDetector(**cfg.detector_params()).load_arrays(arrays)
        before = params_digest(det.state_arrays())
        windows, truths = read_windows(data, manifest)
        reports, rows = [], []
        with open(out / "alarms.jsonl", "w") as fh:
            for X, t in zip(windows, truths):
                t0 = time.perf_counter()
                rep = det.detect(X, t["window"], oracle=oracle)
                log.info("window %s: %.4f s", t["window"], time.perf_counter() - t0)
                d = rep.as_dict()
                fh.write(json.dumps(d, sort_keys=True) + "\n")
                reports.append(d)
                scores = [s["rho_hat"] for s in d["sets"] if s["rho_hat"] is not None]
                rows.append({"window": t["window"], "injected": int(t["injected"]), "alarm": int(d["alarm"]),
                             "max_rho_hat": max(scores) if scores else None})
        write_rows(out / "windows.csv", rows)
        report["metrics"] = anomaly_metrics(reports, truths).as_dict()
        after = params_digest(det.state_arrays())
    else:
        _need(manifest, "planted", "alignment")
        graph = read_graph(data, manifest["graph" if manifest["kind"] == "planted" else "g1"])
        model = _load_nsbm(cfg, graph, arrays)
        before = params_digest(model.state_arrays())
        t0 = time.perf_counter()
        Z = model.predict_proba()
        log.info("membership: %.6f s per node", (time.perf_counter() - t0) / graph.n_nodes)
        metrics = {}
        if graph.labels is not None:
            metrics["community"] = community_metrics(Z, graph.labels, cfg.n_communities).as_dict()
        rows = [{"node": v, "label": int(np.argmax(Z[v])), **{f"z{k}": float(Z[v, k]) for k in range(Z.shape[1])}}
                for v in range(graph.n_nodes)]
        write_rows(out / "membership.csv", rows)
        if task == "align":
            _need(manifest, "alignment")
            g2 = read_graph(data, manifest["g2"])
            am = AlignmentModel.create(model.d_out, tied=cfg.align_tied, alpha=cfg.alpha)
            for k, v in am.params().items():
                v.data[...] = arrays[f"align.{k}"]
            t0 = time.perf_counter()
            match = match_nodes(model.transform(None), model.transform(g2), am, k=cfg.align_k)
            log.info("matching: %.6f s per node", (time.perf_counter() - t0) / graph.n_nodes)
            truth = load_alignment(Path(data) / manifest["truth"])
            save_matching(match, out / "matching.tsv")
            metrics["alignment"] = {"top1": alignment_accuracy_topk(match, truth, 1),
                                    f"top{cfg.align_k}": alignment_accuracy_topk(match, truth, cfg.align_k)}
            write_rows(out / "matching.csv", [{"node": int(a), "match": int(match.top1[a]), "truth": int(b),
                                               "score": float(match.scores[a, 0])} for a, b in truth])
        report["metrics"] = metrics
        after = params_digest(model.state_arrays())
    if before != after:
        raise FloatingPointError("evaluation changed model parameters")
    report["parameters_sha256"] = after
    write_json(out / "metrics.json", report)
    return report


# -- baselines -----------------------------------------------------------------------------------------


def baseline(cfg, data, out, which):
    manifest = load_manifest(data)
    out.mkdir(parents=True, exist_ok=True)
    report = {"baseline": which, "seed": cfg.seed, "config": cfg.as_dict(), "dataset": manifest["spec"]}
    if which == "sbm":
        _need(manifest, "planted", "alignment")
        graph = read_graph(data, manifest["graph" if manifest["kind"] == "planted" else "g1"])
        model = ClassicSBM(n_communities=cfg.n_communities, random_state=cfg.seed).fit(graph)
        Z = np.eye(cfg.n_communities)[model.labels_]
        write_rows(out / "membership.csv", [{"node": v, "label": int(z)} for v, z in enumerate(model.labels_)])
        report["metrics"] = {"log_likelihood": float(model.log_likelihood_)}
        if graph.labels is not None:
            report["metrics"]["community"] = community_metrics(Z, graph.labels, cfg.n_communities).as_dict()
    else:
        _need(manifest, "anomaly")
        windows, truths = read_windows(data, manifest)
        det = PCABaseline(theta_anomaly=cfg.theta_anomaly)
        reports = []
        with open(out / "alarms.jsonl", "w") as fh:
            for X, t in zip(windows, truths):
                d = det.detect(X, t["window"]).as_dict()
                fh.write(json.dumps(d, sort_keys=True) + "\n")
                reports.append(d)
        report["metrics"] = anomaly_metrics(reports, truths).as_dict()
    write_json(out / "metrics.json", report)
    return report


# -- entry point ------------------------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="nsbm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", type=Path, help="key = value run configuration")
        sp.add_argument("--seed", type=int, help="overrides the configured seed")
        sp.add_argument("--out-dir", type=Path, required=True)
        sp.add_argument("-v", "--verbose", action="store_true")

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("spec", type=Path, help="dataset spec: kind = planted|alignment|anomaly, then fields")
    common(g, config=False)
    t = sub.add_parser("train", help="train and write checkpoint + loss CSV")
    t.add_argument("data", type=Path)
    t.add_argument("--task", choices=["none", "align", "anomaly"], default="none")
    t.add_argument("--resume", type=Path, help="continue from a checkpoint")
    common(t)
    e = sub.add_parser("eval", help="evaluate a checkpoint without updating it")
    e.add_argument("checkpoint", type=Path)
    e.add_argument("data", type=Path)
    e.add_argument("--task", choices=["none", "align", "anomaly"])
    e.add_argument("--oracle", action="store_true", help="add exact principal scores")
    common(e, config=False)
    b = sub.add_parser("baseline", help="classical SBM or PCA baseline")
    b.add_argument("data", type=Path)
    b.add_argument("which", choices=["sbm", "pca"])
    common(b)
    return p


def _config(args):
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        if args.command == "generate":
            generate(args.spec, args.out_dir, args.seed)
        elif args.command == "train":
            train(_config(args), args.data, args.out_dir, args.task, args.resume)
        elif args.command == "eval":
            if args.seed is not None:
                log.info("--seed is ignored by eval; the checkpoint's seed is used")
            evaluate(args.checkpoint, args.data, args.out_dir, args.task, args.oracle)
        else:
            baseline(_config(args), args.data, args.out_dir, args.which)
    except (UsageError, ConfigError) as exc:
        print(f"nsbm: usage error: {exc}", file=sys.stderr)
        return USAGE
    except (FloatingPointError, ConvergenceError, ArithmeticError) as exc:
        print(f"nsbm: numerical failure: {exc}", file=sys.stderr)
        return NUMERIC
    except (OSError, ValueError, KeyError, GraphFormatError) as exc:
        print(f"nsbm: data error: {exc}", file=sys.stderr)
        return DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
