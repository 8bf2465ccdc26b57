"""End-to-end orchestration: train, detect, adapt, and evaluation metrics.

Both detection granularities share one code path through parsing, graph
construction and the representation model; they differ only in which
embeddings reach the detector (per-batch state vectors vs per-node vectors)
and in how targets are named (batch id vs ``batch/node``).
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import __version__
from . import detector as det
from . import model as mdl
from .errors import MissingArtifactError, ValidationError
from .graphs import ProvenanceGraph, Vocabulary, graphs_from_events
from .ingest import read_events
from .model import TrainConfig
from .serialize import canonical_json, read_json, sha256_text, write_json

GRANULARITIES = ("batched", "entity")


@dataclass
class PipelineConfig:
    granularity: str = "batched"
    log_format: str = "streamspot"
    logs: str | None = None
    vocabulary: str = "artifacts/vocabulary.json"
    checkpoint: str = "artifacts/checkpoint.json"
    detector: str = "artifacts/detector.json"
    report: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    neighbors: int = 10
    theta: float | None = None
    target_fpr: float | None = None
    capacity: int | None = None
    adapt_epochs: int = 10
    threads: int = 1
    figures: bool = True

    def validate(self) -> "PipelineConfig":
        if self.granularity not in GRANULARITIES:
            raise ValidationError(f"granularity must be one of {GRANULARITIES}")
        if (self.theta is None) == (self.target_fpr is None):
            raise ValidationError("exactly one of theta / target_fpr must be set")
        if self.theta is not None and not self.theta > 0:
            raise ValidationError("theta must be > 0")
        if self.target_fpr is not None and not 0.0 < self.target_fpr < 1.0:
            raise ValidationError("target_fpr must be in (0, 1)")
        if self.neighbors < 1:
            raise ValidationError("neighbors must be >= 1")
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")
        if self.adapt_epochs < 0:
            raise ValidationError("adapt_epochs must be >= 0")
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        doc = {k: v for k, v in self.__dict__.items() if k != "train"}
        doc["train"] = self.train.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        doc = dict(doc)
        unknown = set(doc) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        train_doc = dict(doc.pop("train", {}))
        granularity = doc.get("granularity", "batched")
        if "hidden_dim" not in train_doc:
            train_doc["hidden_dim"] = 256 if granularity == "batched" else 64
        cfg = cls(train=TrainConfig.from_dict(train_doc), **doc)
        return cfg.validate()

    def config_hash(self) -> str:
        return sha256_text(canonical_json(self.to_dict()))


def load_config(path: str) -> PipelineConfig:
    return PipelineConfig.from_dict(read_json(path))


# ----------------------------------------------------------------------
# shared plumbing
# ----------------------------------------------------------------------

def _load_graphs(logs: str, fmt: str, vocab: Vocabulary) -> list[ProvenanceGraph]:
    if not os.path.exists(logs):
        raise MissingArtifactError(f"log file not found: {logs}")
    return graphs_from_events(read_events(logs, fmt), vocab)


def _embed_graphs(graphs: Sequence[ProvenanceGraph], params: mdl.ModelParams,
                  threads: int) -> list[mdl.OutputEmbeddings]:
    if threads > 1 and len(graphs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda g: mdl.embed(g, params), graphs))
    return [mdl.embed(g, params) for g in graphs]


def _detector_points(graphs: Sequence[ProvenanceGraph],
                     embeddings: Sequence[mdl.OutputEmbeddings],
                     granularity: str) -> np.ndarray:
    if granularity == "batched":
        return np.vstack([e.state for e in embeddings])
    return np.vstack([e.node for e in embeddings])


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifactError(f"{what} not found: {path} (run `train` first)")
    return path


def _load_artifacts(cfg: PipelineConfig):
    vocab = Vocabulary.load(_require(cfg.vocabulary, "vocabulary"))
    params, train_cfg, _ = mdl.load_checkpoint(_require(cfg.checkpoint, "checkpoint"))
    state = det.load_detector(_require(cfg.detector, "detector snapshot"))
    return vocab, params, train_cfg, state


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------

def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc_score(labels: Sequence[str], scores: Sequence[float]) -> float | None:
    """Rank-statistic AUC with midranks for ties; None when only one class."""
    y = np.array([1 if l == "malicious" else 0 for l in labels])
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _midranks(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def compute_metrics(labels: Sequence[str], scores: Sequence[float],
                    theta: float) -> dict:
    """Confusion counts at theta plus threshold-free AUC.

    Ratios with an undefined denominator are reported as None, never
    defaulted to 0.
    """
    if len(labels) != len(scores):
        raise ValidationError(f"{len(labels)} labels for {len(scores)} scores")
    bad = {l for l in labels if l not in ("benign", "malicious")}
    if bad:
        raise ValidationError(f"labels must be benign/malicious, got {sorted(bad)}")
    y = np.array([l == "malicious" for l in labels])
    flagged = np.asarray(scores, dtype=np.float64) >= theta
    tp = int((y & flagged).sum())
    fp = int((~y & flagged).sum())
    fn = int((y & ~flagged).sum())
    tn = int((~y & ~flagged).sum())

    def ratio(num: int, den: int) -> float | None:
        return num / den if den else None

    precision = ratio(tp, tp + fp)
    recall = ratio(tp, tp + fn)
    fpr = ratio(fp, fp + tn)
    f1 = (2.0 * precision * recall / (precision + recall)
          if precision is not None and recall is not None and (precision + recall) > 0
          else None)
    return {
        "counts": {"tp": tp, "fp": fp, "tn": tn, "fn": fn},
        "precision": precision,
        "recall": recall,
        "fpr": fpr,
        "f1": f1,
        "auc": auc_score(labels, scores),
    }


# ----------------------------------------------------------------------
# labels
# ----------------------------------------------------------------------

def load_labels(path: str) -> dict[str, str]:
    labels: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            doc = json.loads(line)
            target, label = doc.get("target"), doc.get("label")
            if not isinstance(target, str) or label not in ("benign", "malicious"):
                raise ValidationError(f"{path}:{line_no}: bad label record")
            labels[target] = label
    return labels


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------

def run_training(cfg: PipelineConfig) -> dict:
    """Parse -> build -> train -> embed -> fit detector -> persist artifacts."""
    cfg.validate()
    if cfg.logs is None:
        raise ValidationError("config needs `logs` for training")
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    vocab = Vocabulary(dim=cfg.train.hidden_dim, seed=cfg.train.seed)
    graphs = _load_graphs(cfg.logs, cfg.log_format, vocab)
    if not graphs:
        raise ValidationError("training corpus is empty")
    if cfg.granularity == "batched" and len(graphs) < cfg.neighbors + 1:
        raise ValidationError(
            f"batched mode needs at least k+1 = {cfg.neighbors + 1} training graphs, "
            f"got {len(graphs)}")
    timings["construct_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    params, trace = mdl.train(graphs, cfg.train)
    timings["train_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    embeddings = _embed_graphs(graphs, params, cfg.threads)
    points = _detector_points(graphs, embeddings, cfg.granularity)
    timings["embed_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    state = det.fit(points, k=cfg.neighbors, capacity=cfg.capacity)
    theta = cfg.theta if cfg.theta is not None else det.select_threshold(
        state.training_scores, cfg.target_fpr)
    state.theta = float(theta)
    timings["fit_s"] = time.perf_counter() - t0

    for path in (cfg.vocabulary, cfg.checkpoint, cfg.detector):
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
    vocab.frozen = True
    vocab.save(cfg.vocabulary)
    mdl.save_checkpoint(cfg.checkpoint, params, cfg.train,
                        vocabulary_ref=os.path.basename(cfg.vocabulary))
    det.save_detector(cfg.detector, state)
    return {
        "graphs": len(graphs),
        "points": len(state.points),
        "theta": state.theta,
        "loss_trace": trace,
        "timings": timings,
    }


# ----------------------------------------------------------------------
# detection
# ----------------------------------------------------------------------

def _score_targets(cfg: PipelineConfig, graphs: list[ProvenanceGraph],
                   embeddings: list[mdl.OutputEmbeddings],
                   state: det.DetectorState) -> tuple[list[str], np.ndarray]:
    ids: list[str] = []
    if cfg.granularity == "batched":
        queries = np.vstack([e.state for e in embeddings])
        ids = [g.batch_id for g in graphs]
    else:
        queries = np.vstack([e.node for e in embeddings])
        for g in graphs:
            ids.extend(f"{g.batch_id}/{uid}" for uid in g.node_uids)
    if cfg.threads > 1 and len(queries) > 1:
        chunks = np.array_split(np.arange(len(queries)), cfg.threads)
        scores = np.empty(len(queries))
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            for idx, part in zip(chunks, pool.map(
                    lambda ix: det.score_many(state, queries[ix]), chunks)):
                scores[idx] = part
    else:
        scores = det.score_many(state, queries)
    return ids, scores


def run_detection(cfg: PipelineConfig, target_logs: str,
                  labels_path: str | None = None) -> dict:
    """Score every target in the logs and assemble a detection report."""
    cfg.validate()
    timings: dict[str, float] = {}
    vocab, params, _, state = _load_artifacts(cfg)

    t0 = time.perf_counter()
    graphs = _load_graphs(target_logs, cfg.log_format, vocab)
    timings["construct_s"] = time.perf_counter() - t0
    if not graphs:
        raise ValidationError("target corpus is empty")

    t0 = time.perf_counter()
    embeddings = _embed_graphs(graphs, params, cfg.threads)
    timings["embed_s"] = time.perf_counter() - t0

    theta = cfg.theta if cfg.theta is not None else state.theta
    if theta is None:
        raise ValidationError("no theta available; set theta or run `threshold`")

    t0 = time.perf_counter()
    ids, scores = _score_targets(cfg, graphs, embeddings, state)
    timings["score_s"] = time.perf_counter() - t0

    labels = None
    if labels_path is not None:
        table = load_labels(labels_path)
        missing = [t for t in ids if t not in table]
        extra = sorted(set(table) - set(ids))
        if missing or extra:
            raise ValidationError(
                f"label/target mismatch: {len(missing)} targets unlabeled, "
                f"{len(extra)} labels without targets")
        labels = [table[t] for t in ids]

    targets = [
        {"id": t, "score": float(s), "malicious": bool(s >= theta)}
        for t, s in zip(ids, scores)
    ]
    if labels is not None:
        for rec, lab in zip(targets, labels):
            rec["label"] = lab
    metrics = compute_metrics(labels, scores, theta) if labels is not None else None

    return {
        "format_version": 1,
        "tool": {"name": "provgad", "version": __version__},
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "granularity": cfg.granularity,
        "theta": float(theta),
        "targets": targets,
        "metrics": metrics,
        "timings": timings,
    }


def write_report(report: dict, path: str, figures: bool | None = None) -> list[str]:
    """Write the JSON report plus CSV and figure siblings; returns paths."""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    write_json(path, report)
    written = [path]
    base, _ = os.path.splitext(path)
    csv_path = base + ".csv"
    has_labels = report["targets"] and "label" in report["targets"][0]
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("id,score,malicious" + (",label" if has_labels else "") + "\n")
        for rec in report["targets"]:
            row = f"{rec['id']},{rec['score']!r},{int(rec['malicious'])}"
            if has_labels:
                row += f",{rec['label']}"
            fh.write(row + "\n")
    written.append(csv_path)
    if figures if figures is not None else report["config"].get("figures", True):
        from . import figures as fig
        written.extend(fig.render_report_figures(report, base))
    return written


def render_table(report: dict, limit: int = 20) -> str:
    """Human-readable summary table for standard output."""
    lines = []
    theta = report["theta"]
    targets = report["targets"]
    n_mal = sum(1 for t in targets if t["malicious"])
    theta_txt = f"{theta:g}" if theta is not None else "n/a"
    lines.append(f"targets: {len(targets)}  flagged: {n_mal}  theta: {theta_txt}")
    metrics = report.get("metrics")
    if metrics:
        fmt = lambda v: "null" if v is None else f"{v:.4f}"
        lines.append(
            "precision: {p}  recall: {r}  fpr: {f}  f1: {f1}  auc: {a}".format(
                p=fmt(metrics["precision"]), r=fmt(metrics["recall"]),
                f=fmt(metrics["fpr"]), f1=fmt(metrics["f1"]), a=fmt(metrics["auc"])))
        c = metrics["counts"]
        lines.append(f"tp: {c['tp']}  fp: {c['fp']}  tn: {c['tn']}  fn: {c['fn']}")
    header = f"{'target':<32} {'score':>12} verdict"
    lines.append(header)
    lines.append("-" * len(header))
    ranked = sorted(targets, key=lambda t: -t["score"])[:limit]
    for t in ranked:
        verdict = "malicious" if t["malicious"] else "benign"
        lines.append(f"{t['id']:<32} {t['score']:>12.4f} {verdict}")
    if len(targets) > limit:
        lines.append(f"... ({len(targets) - limit} more, see report files)")
    return "\n".join(lines)


# ----------------------------------------------------------------------
# adaption
# ----------------------------------------------------------------------

def run_adaption(cfg: PipelineConfig, feedback_logs: str,
                 feedback_labels: str | None = None) -> dict:
    """Continue training on confirmed-benign feedback and absorb its embeddings.

    The representation is retrained with a fresh optimizer over the retained
    weights; the detector memorizes the feedback embeddings with FIFO
    eviction at the configured capacity. Theta is kept fixed.
    """
    cfg.validate()
    vocab, params, train_cfg, state = _load_artifacts(cfg)
    events = read_events(feedback_logs, cfg.log_format)
    graphs = graphs_from_events(events, vocab)
    if feedback_labels is not None:
        table = load_labels(feedback_labels)
        tainted = sorted(g.batch_id for g in graphs
                         if table.get(g.batch_id) == "malicious")
        if tainted:
            raise ValidationError(
                f"feedback contains malicious batches {tainted}; "
                "detector memory must stay benign")
    if not graphs:
        return {"graphs": 0, "points": len(state.points), "changed": False}

    # damped step size: feedback batches must refine the representation
    # without drifting it away from the embeddings already memorized
    adapt_cfg = replace(train_cfg, epochs=cfg.adapt_epochs,
                        learning_rate=0.1 * train_cfg.learning_rate)
    params, trace = mdl.train(graphs, adapt_cfg, params=params)
    embeddings = _embed_graphs(graphs, params, cfg.threads)
    points = _detector_points(graphs, embeddings, cfg.granularity)
    state = det.absorb(state, points, cfg.capacity)

    vocab.save(cfg.vocabulary)
    mdl.save_checkpoint(cfg.checkpoint, params, train_cfg,
                        vocabulary_ref=os.path.basename(cfg.vocabulary))
    det.save_detector(cfg.detector, state)
    return {
        "graphs": len(graphs),
        "points": len(state.points),
        "loss_trace": trace,
        "changed": True,
    }


# ----------------------------------------------------------------------
# threshold re-selection and two-stage detection
# ----------------------------------------------------------------------

def run_threshold(cfg: PipelineConfig, benign_logs: str | None = None) -> float:
    """Pick theta for the configured target FPR and store it in the snapshot.

    Scores come from the given benign logs when provided, otherwise from the
    memorized training points themselves (self-excluded).
    """
    cfg.validate()
    if cfg.target_fpr is None:
        raise ValidationError("threshold selection needs target_fpr in the config")
    vocab, params, _, state = _load_artifacts(cfg)
    if benign_logs is None:
        scores = state.training_scores
    else:
        graphs = _load_graphs(benign_logs, cfg.log_format, vocab)
        if not graphs:
            raise ValidationError("benign calibration corpus is empty")
        embeddings = _embed_graphs(graphs, params, cfg.threads)
        _, scores = _score_targets(cfg, graphs, embeddings, state)
    theta = det.select_threshold(scores, cfg.target_fpr)
    state.theta = float(theta)
    det.save_detector(cfg.detector, state)
    return float(theta)


def run_two_stage(batched_cfg: PipelineConfig, entity_cfg: PipelineConfig,
                  target_logs: str, labels_path: str | None = None) -> dict:
    """Batched screening first; entity-level detection on positive batches."""
    batched_report = run_detection(batched_cfg, target_logs)
    positives = {t["id"] for t in batched_report["targets"] if t["malicious"]}
    stage1 = {
        "batches": len(batched_report["targets"]),
        "positive_batches": sorted(positives),
        "theta": batched_report["theta"],
    }
    if not positives:
        report = {
            "format_version": 1,
            "tool": {"name": "provgad", "version": __version__},
            "config_hash": entity_cfg.config_hash(),
            "config": entity_cfg.to_dict(),
            "granularity": "entity",
            "theta": None,
            "stage1": stage1,
            "targets": [],
            "metrics": None,
            "timings": batched_report["timings"],
        }
        return report
    from .harness import filter_corpus
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        subset = os.path.join(tmp, "positives.tsv")
        filter_corpus(target_logs, subset, lambda batch: batch in positives)
        report = run_detection(entity_cfg, subset)
    if labels_path is not None:
        # the full corpus labels cover batches outside the screened subset
        table = load_labels(labels_path)
        missing = [t["id"] for t in report["targets"] if t["id"] not in table]
        if missing:
            raise ValidationError(f"{len(missing)} screened targets lack labels")
        labels = [table[t["id"]] for t in report["targets"]]
        for rec, lab in zip(report["targets"], labels):
            rec["label"] = lab
        scores = [t["score"] for t in report["targets"]]
        report["metrics"] = compute_metrics(labels, scores, report["theta"])
    report["stage1"] = stage1
    return report
