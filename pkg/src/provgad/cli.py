"""Command-line front end.

Subcommands: ingest, train, detect, adapt, threshold, eval, synth, perturb,
bench. Exit codes: 0 success, 1 validation/usage error, 2 runtime error.
Diagnostics go to standard error; data goes to the declared output paths;
`detect` and `eval` additionally print a summary table to standard output.

Configuration comes from an optional JSON file mirroring the pipeline
config; command-line flags override file values, and the PROVGAD_SEED
environment variable seeds runs that specify no seed anywhere.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
import tracemalloc

import numpy as np

from . import __version__
from . import detector as det
from . import harness
from . import model as mdl
from . import pipeline as pl
from .errors import MissingArtifactError, ProvgadError, ValidationError
from .graphs import (Vocabulary, build_multigraph, edge_reduction_ratio,
                     reduce_noise, save_graph)
from .ingest import group_by_batch, read_events
from .serialize import read_json, write_json


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ----------------------------------------------------------------------
# config assembly
# ----------------------------------------------------------------------

def _build_config(args) -> pl.PipelineConfig:
    doc = read_json(args.config) if getattr(args, "config", None) else {}
    if not isinstance(doc, dict):
        raise ValidationError("config file must hold a JSON object")
    train = dict(doc.get("train", {}))

    env_seed = os.environ.get("PROVGAD_SEED")
    if env_seed is not None and "seed" not in train:
        try:
            train["seed"] = int(env_seed)
        except ValueError:
            raise ValidationError(f"PROVGAD_SEED must be an integer, got {env_seed!r}")

    simple = {
        "granularity": "granularity", "log_format": "format", "logs": "logs",
        "vocabulary": "vocabulary", "checkpoint": "checkpoint",
        "detector": "detector", "report": "report", "neighbors": "neighbors",
        "capacity": "capacity", "threads": "threads", "adapt_epochs": "adapt_epochs",
    }
    for key, flag in simple.items():
        value = getattr(args, flag, None)
        if value is not None:
            doc[key] = value
    train_flags = {
        "hidden_dim": "hidden_dim", "encoder_layers": "layers",
        "mask_rate": "mask_rate", "loss_scale": "loss_scale",
        "learning_rate": "learning_rate", "weight_decay": "weight_decay",
        "epochs": "epochs", "seed": "seed", "reverse_messages": "reverse_messages",
    }
    for key, flag in train_flags.items():
        value = getattr(args, flag, None)
        if value is not None:
            train[key] = value
    if getattr(args, "theta", None) is not None:
        doc["theta"] = args.theta
        doc.pop("target_fpr", None)
    if getattr(args, "target_fpr", None) is not None:
        doc["target_fpr"] = args.target_fpr
        doc.pop("theta", None)
    if doc.get("theta") is None and doc.get("target_fpr") is None:
        doc["target_fpr"] = 0.01
    if getattr(args, "no_figures", False):
        doc["figures"] = False
    if getattr(args, "artifacts", None):
        root = args.artifacts
        doc.setdefault("vocabulary", os.path.join(root, "vocabulary.json"))
        doc.setdefault("checkpoint", os.path.join(root, "checkpoint.json"))
        doc.setdefault("detector", os.path.join(root, "detector.json"))
    doc["train"] = train
    return pl.PipelineConfig.from_dict(doc)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file mirroring the pipeline config")
    p.add_argument("--granularity", choices=pl.GRANULARITIES)
    p.add_argument("--format", choices=("streamspot", "jsonl"))
    p.add_argument("--logs")
    p.add_argument("--artifacts", help="directory shorthand for the three artifact paths")
    p.add_argument("--vocabulary")
    p.add_argument("--checkpoint")
    p.add_argument("--detector")
    p.add_argument("--report")
    p.add_argument("--theta", type=float)
    p.add_argument("--target-fpr", dest="target_fpr", type=float)
    p.add_argument("--neighbors", type=int)
    p.add_argument("--capacity", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--adapt-epochs", dest="adapt_epochs", type=int)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--mask-rate", dest="mask_rate", type=float)
    p.add_argument("--loss-scale", dest="loss_scale", type=float)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--reverse-messages", dest="reverse_messages",
                   action=argparse.BooleanOptionalAction, default=None,
                   help="also pass messages against edge direction")
    p.add_argument("--no-figures", action="store_true")


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def _cmd_ingest(args) -> int:
    cfg = _build_config(args)
    if cfg.logs is None:
        raise ValidationError("ingest needs --logs")
    os.makedirs(args.out, exist_ok=True)
    vocab = Vocabulary(dim=cfg.train.hidden_dim, seed=cfg.train.seed)
    batches = group_by_batch(read_events(cfg.logs, cfg.log_format))
    manifest = []
    for i, (batch_id, events) in enumerate(batches.items()):
        mg = build_multigraph(events)
        graph = reduce_noise(mg, vocab)
        path = os.path.join(args.out, f"graph_{i:05d}.json")
        save_graph(graph, path)
        manifest.append({"batch": batch_id, "path": os.path.basename(path),
                         "nodes": graph.num_nodes, "edges": graph.num_edges,
                         "edge_reduction": edge_reduction_ratio(mg, graph)})
    vocab.save(os.path.join(args.out, "vocabulary.json"))
    write_json(os.path.join(args.out, "manifest.json"),
               {"format_version": 1, "batches": manifest})
    _log(f"ingested {len(manifest)} batches into {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _build_config(args)
    summary = pl.run_training(cfg)
    _log(f"trained on {summary['graphs']} graphs; detector holds "
         f"{summary['points']} points; theta={summary['theta']:g}")
    return 0


def _cmd_detect(args) -> int:
    cfg = _build_config(args)
    if args.two_stage:
        if not args.entity_config:
            raise ValidationError("--two-stage needs --entity-config")
        entity_cfg = pl.load_config(args.entity_config)
        report = pl.run_two_stage(cfg, entity_cfg, args.logs_target, args.labels)
    else:
        report = pl.run_detection(cfg, args.logs_target, args.labels)
    report_path = args.out or cfg.report
    if report_path:
        written = pl.write_report(report, report_path, figures=cfg.figures)
        _log("wrote " + ", ".join(written))
    print(pl.render_table(report))
    return 0


def _cmd_adapt(args) -> int:
    cfg = _build_config(args)
    summary = pl.run_adaption(cfg, args.feedback, args.feedback_labels)
    if summary["changed"]:
        _log(f"adapted on {summary['graphs']} feedback graphs; detector now "
             f"holds {summary['points']} points")
    else:
        _log("empty feedback; artifacts unchanged")
    return 0


def _cmd_threshold(args) -> int:
    cfg = _build_config(args)
    theta = pl.run_threshold(cfg, args.benign_logs)
    _log(f"selected theta at target FPR {cfg.target_fpr:g}")
    print(f"{theta!r}")
    return 0


def _cmd_eval(args) -> int:
    report = read_json(args.report_path)
    table = pl.load_labels(args.labels)
    targets = report["targets"]
    missing = [t["id"] for t in targets if t["id"] not in table]
    if missing:
        raise ValidationError(f"{len(missing)} report targets lack labels")
    labels = [table[t["id"]] for t in targets]
    for rec, lab in zip(targets, labels):
        rec["label"] = lab
    theta = args.theta if args.theta is not None else report["theta"]
    if theta is None:
        raise ValidationError("report has no theta; pass --theta")
    report["theta"] = float(theta)
    for rec in targets:
        rec["malicious"] = bool(rec["score"] >= theta)
    report["metrics"] = pl.compute_metrics(labels, [t["score"] for t in targets], theta)
    if args.out:
        written = pl.write_report(report, args.out,
                                  figures=not getattr(args, "no_figures", False))
        _log("wrote " + ", ".join(written))
    print(pl.render_table(report))
    return 0


def _cmd_synth(args) -> int:
    if args.spec:
        doc = read_json(args.spec)
        scenarios = [harness.ScenarioDef(**s) for s in doc["scenarios"]]
        spec = harness.ScenarioSpec(
            scenarios=scenarios,
            nodes_per_graph=tuple(doc.get("nodes_per_graph", (80, 120))),
            graphs_per_scenario=doc.get("graphs_per_scenario", 100),
            seed=doc.get("seed", args.seed or 0),
        )
    else:
        builder = harness.PRESETS[args.preset]
        kwargs = {"seed": args.seed or 0}
        if args.graphs is not None:
            key = ("graphs_per_scenario" if args.preset in ("batched", "drift")
                   else "benign_graphs")
            kwargs[key] = args.graphs
        if args.nodes is not None:
            kwargs["nodes"] = tuple(args.nodes)
        spec = builder(**kwargs)
    paths = harness.gen_corpus(spec, args.out)
    _log(f"wrote {paths.events}, {paths.batch_labels}, {paths.node_labels}")
    if args.train_frac is not None:
        train_path, test_path = harness.write_split(paths, args.out, args.train_frac)
        _log(f"wrote {train_path}, {test_path}")
    return 0


def _cmd_perturb(args) -> int:
    spec = harness.PerturbationSpec(
        strategy=args.strategy, intensity=args.intensity, seed=args.seed or 0)
    counters = harness.perturb_corpus(
        args.events, args.node_labels, spec, args.out, attack_type=args.attack_type)
    _log(f"strategy {args.strategy}: relabeled {counters['relabeled_nodes']} nodes, "
         f"added {counters['added_edges']} edges -> {args.out}")
    return 0


def _cmd_bench(args) -> int:
    report: dict = {"format_version": 1, "tool": {"name": "provgad", "version": __version__}}
    if not os.path.exists(args.events):
        raise MissingArtifactError(f"corpus not found: {args.events}")
    with open(args.events, encoding="utf-8") as fh:
        lines = [l for l in fh if l.strip()]
    if not lines:
        report.update({"phases": {}, "empty_corpus": True})
        write_json(args.out, report)
        _log("empty corpus; zeroed report")
        return 0

    import resource

    phases: dict[str, dict] = {}

    def timed(name: str, fn):
        tracemalloc.start()
        t0 = time.perf_counter()
        result = fn()
        wall = time.perf_counter() - t0
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        phases[name] = {
            "wall_s": wall,
            "py_heap_peak_bytes": peak,
            "rss_peak_kb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss,
        }
        return result

    from .graphs import graphs_from_events
    from .ingest import parse_lines

    def construct(subset):
        vocab = Vocabulary(dim=args.dim, seed=0)
        return graphs_from_events(parse_lines(subset, args.format), vocab), vocab

    (graphs, vocab) = timed("construct_full", lambda: construct(lines))
    timed("construct_half", lambda: construct(lines[: len(lines) // 2]))
    full = phases["construct_full"]["wall_s"]
    half = phases["construct_half"]["wall_s"]
    report["construction_doubling_ratio"] = full / half if half > 0 else None

    subset = [g for g in graphs if g.num_nodes >= 2][: args.train_graphs]
    cfg = mdl.TrainConfig(hidden_dim=args.dim, encoder_layers=2,
                          epochs=args.train_epochs, seed=0)
    params, _ = timed("train", lambda: mdl.train(subset, cfg))
    timed("embed", lambda: [mdl.embed(g, params) for g in subset])

    rng = np.random.default_rng(0)
    qdim = args.query_dim

    def query_phase(n_points: int) -> float:
        # the scaling claim is about the search; the tree is built directly so
        # the large size is not dominated by the one-off baseline pass
        pts = rng.uniform(-1.0, 1.0, (n_points, qdim))
        tree = det.KDTree(pts, np.arange(n_points, dtype=np.int64))
        queries = rng.uniform(-1.0, 1.0, (args.queries, qdim))
        t0 = time.perf_counter()
        times = []
        for q in queries:
            q0 = time.perf_counter()
            tree.query(q, 10)
            times.append(time.perf_counter() - q0)
        phases[f"detect_{n_points}"] = {
            "wall_s": time.perf_counter() - t0,
            "median_query_s": float(np.median(times)),
        }
        return float(np.median(times))

    small = query_phase(args.points_small)
    large = query_phase(args.points_large)
    report["detection_scaling_ratio"] = large / small if small > 0 else None
    report["memory_growth"] = args.points_large / args.points_small
    report["phases"] = phases
    write_json(args.out, report)
    _log(f"bench report -> {args.out}")
    return 0


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="provgad", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"provgad {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="parse logs into a graph store + vocabulary")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="graph-store directory")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("train", help="train the model and fit the detector")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("detect", help="score targets against trained artifacts")
    _add_config_flags(p)
    p.add_argument("--logs-target", required=True, help="target log file")
    p.add_argument("--labels", help="JSONL ground-truth labels for metrics")
    p.add_argument("--out", help="report path (overrides config report)")
    p.add_argument("--two-stage", action="store_true",
                   help="batched screening, then entity detection on positives")
    p.add_argument("--entity-config", help="entity-mode config for --two-stage")
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("adapt", help="retrain on confirmed-benign feedback")
    _add_config_flags(p)
    p.add_argument("--feedback", required=True, help="feedback log file")
    p.add_argument("--feedback-labels", help="labels proving feedback is benign")
    p.set_defaults(func=_cmd_adapt)

    p = sub.add_parser("threshold", help="re-select theta for a target FPR")
    _add_config_flags(p)
    p.add_argument("--benign-logs", help="benign calibration logs "
                                         "(default: training self-scores)")
    p.set_defaults(func=_cmd_threshold)

    p = sub.add_parser("eval", help="attach labels/metrics to an existing report")
    p.add_argument("--report-path", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--theta", type=float)
    p.add_argument("--out", help="write the evaluated report here")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--preset", choices=sorted(harness.PRESETS), default="batched")
    p.add_argument("--spec", help="full scenario spec as JSON (overrides preset)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--graphs", type=int, help="graphs per scenario")
    p.add_argument("--nodes", type=int, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--train-frac", type=float,
                   help="also write a benign train/test split")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("perturb", help="apply an adversarial strategy to a corpus")
    p.add_argument("--events", required=True)
    p.add_argument("--node-labels", required=True)
    p.add_argument("--strategy", choices=harness.STRATEGIES, required=True)
    p.add_argument("--intensity", type=float, default=1.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--attack-type", help="poison label for BFP on benign corpora")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_perturb)

    p = sub.add_parser("bench", help="wall-clock and memory per pipeline phase")
    p.add_argument("--events", required=True)
    p.add_argument("--format", default="streamspot", choices=("streamspot", "jsonl"))
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--train-graphs", dest="train_graphs", type=int, default=8)
    p.add_argument("--train-epochs", dest="train_epochs", type=int, default=2)
    p.add_argument("--query-dim", dest="query_dim", type=int, default=8)
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--points-small", dest="points_small", type=int, default=1000)
    p.add_argument("--points-large", dest="points_large", type=int, default=100000)
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        code = exc.code if exc.code is not None else 0
        return 0 if code == 0 else 1
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ProvgadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
