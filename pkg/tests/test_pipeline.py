"""Pipeline orchestration, metrics, reports, adaption."""

import dataclasses
import json
import os

import numpy as np
import pytest

from provgad import detector as det
from provgad import harness
from provgad import pipeline as pl
from provgad.errors import MissingArtifactError, ValidationError
from provgad.model import TrainConfig
from provgad.serialize import sha256_file


# ----------------------------------------------------------------------
# config
# ----------------------------------------------------------------------

def test_config_requires_exactly_one_threshold_source():
    with pytest.raises(ValidationError):
        pl.PipelineConfig(theta=None, target_fpr=None).validate()
    with pytest.raises(ValidationError):
        pl.PipelineConfig(theta=2.0, target_fpr=0.01).validate()
    pl.PipelineConfig(theta=2.0).validate()
    pl.PipelineConfig(target_fpr=0.01).validate()


def test_config_granularity_defaults_hidden_dim():
    batched = pl.PipelineConfig.from_dict({"granularity": "batched", "theta": 2.0})
    entity = pl.PipelineConfig.from_dict({"granularity": "entity", "theta": 2.0})
    assert batched.train.hidden_dim == 256
    assert entity.train.hidden_dim == 64


def test_config_rejects_unknown_keys():
    with pytest.raises(ValidationError):
        pl.PipelineConfig.from_dict({"theta": 1.0, "granlarity": "batched"})


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------

def test_metrics_hand_counted_confusion():
    labels = ["malicious"] * 3 + ["benign"] * 3
    scores = [5.0, 4.0, 3.0, 2.0, 1.0, 0.0]
    m = pl.compute_metrics(labels, scores, theta=3.0)
    assert m["counts"] == {"tp": 3, "fp": 0, "tn": 3, "fn": 0}
    assert m["precision"] == 1.0 and m["recall"] == 1.0
    assert m["fpr"] == 0.0 and m["f1"] == 1.0 and m["auc"] == 1.0


def test_metrics_identities_on_random_confusion_tables():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(2, 60))
        labels = ["malicious" if rng.random() < 0.4 else "benign" for _ in range(n)]
        scores = rng.uniform(0, 2, n)
        theta = float(rng.uniform(0.2, 1.8))
        m = pl.compute_metrics(labels, scores, theta)
        c = m["counts"]
        assert c["tp"] + c["fn"] == labels.count("malicious")
        assert c["fp"] + c["tn"] == labels.count("benign")
        if m["precision"] is not None:
            assert m["precision"] == c["tp"] / (c["tp"] + c["fp"])
        else:
            assert c["tp"] + c["fp"] == 0
        if m["recall"] is not None:
            assert m["recall"] == c["tp"] / (c["tp"] + c["fn"])
        if m["fpr"] is not None:
            assert m["fpr"] == c["fp"] / (c["fp"] + c["tn"])
        if m["f1"] is not None:
            p, r = m["precision"], m["recall"]
            assert m["f1"] == pytest.approx(2 * p * r / (p + r))


def test_metrics_null_denominators_are_none_not_zero():
    m = pl.compute_metrics(["benign", "benign"], [0.1, 0.2], theta=1.0)
    assert m["precision"] is None  # no flagged targets
    assert m["recall"] is None  # no malicious targets
    assert m["fpr"] == 0.0
    assert m["auc"] is None  # single class


def test_auc_random_scores_near_half():
    rng = np.random.default_rng(1)
    n = 10_000
    labels = ["malicious" if rng.random() < 0.5 else "benign" for _ in range(n)]
    scores = rng.uniform(0, 1, n)
    auc = pl.auc_score(labels, scores)
    assert auc == pytest.approx(0.5, abs=0.02)


def test_auc_handles_ties_with_midranks():
    labels = ["malicious", "malicious", "benign", "benign"]
    assert pl.auc_score(labels, [1.0, 1.0, 1.0, 1.0]) == 0.5
    # pair wins: (2,1)=1, (2,0)=1, (1,1)=0.5, (1,0)=1 -> 3.5/4
    assert pl.auc_score(labels, [2.0, 1.0, 1.0, 0.0]) == 0.875


def test_metrics_validation():
    with pytest.raises(ValidationError):
        pl.compute_metrics(["benign"], [1.0, 2.0], 1.0)
    with pytest.raises(ValidationError):
        pl.compute_metrics(["suspicious"], [1.0], 1.0)


# ----------------------------------------------------------------------
# training and detection
# ----------------------------------------------------------------------

def test_training_point_counts(trained_batched, tmp_path):
    # batched mode: one state point per training graph
    cfg = trained_batched["cfg"]
    state = det.load_detector(cfg.detector)
    n_train_graphs = len({line.split("\t")[-1].strip()
                          for line in open(cfg.logs) if line.strip()})
    assert len(state.points) == n_train_graphs == trained_batched["summary"]["points"]

    # entity mode: one point per node across the training graphs
    ecfg = dataclasses.replace(
        cfg, granularity="entity",
        train=TrainConfig(hidden_dim=8, encoder_layers=1, epochs=1, seed=5),
        vocabulary=str(tmp_path / "v.json"), checkpoint=str(tmp_path / "c.json"),
        detector=str(tmp_path / "d.json"))
    summary = pl.run_training(ecfg)
    from provgad.graphs import Vocabulary, graphs_from_events
    from provgad.ingest import read_events
    graphs = graphs_from_events(read_events(cfg.logs, "streamspot"),
                                Vocabulary(dim=8, seed=5))
    assert summary["points"] == sum(g.num_nodes for g in graphs)


def test_batched_mode_requires_k_plus_one_graphs(tmp_path, mini_corpus):
    one_batch = str(tmp_path / "one.tsv")
    harness.filter_corpus(mini_corpus["paths"].events, one_batch,
                          lambda b: b == "web-000")
    cfg = pl.PipelineConfig(
        granularity="batched", logs=one_batch,
        vocabulary=str(tmp_path / "v.json"), checkpoint=str(tmp_path / "c.json"),
        detector=str(tmp_path / "d.json"),
        train=TrainConfig(hidden_dim=8, encoder_layers=1, epochs=1),
        neighbors=5, target_fpr=0.05)
    with pytest.raises(ValidationError):
        pl.run_training(cfg)


def test_detection_of_training_graph_scores_low(trained_batched, tmp_path):
    cfg = trained_batched["cfg"]
    one = str(tmp_path / "seen.tsv")
    harness.filter_corpus(cfg.logs, one, lambda b: b == "web-000")
    report = pl.run_detection(cfg, one)
    (target,) = report["targets"]
    assert target["id"] == "web-000"
    assert not target["malicious"]
    # the memorized copy contributes a zero distance, so the detection-path
    # score sits strictly below the point's own self-excluded training score
    state = det.load_detector(cfg.detector)
    assert target["score"] < state.training_scores[0]


def test_detection_report_shape_and_metrics(trained_batched):
    cfg = trained_batched["cfg"]
    report = pl.run_detection(cfg, trained_batched["test"], trained_batched["test_labels"])
    assert report["granularity"] == "batched"
    assert report["theta"] > 0
    assert {t["label"] for t in report["targets"]} <= {"benign", "malicious"}
    m = report["metrics"]
    assert m is not None and m["auc"] is not None
    assert set(m["counts"]) == {"tp", "fp", "tn", "fn"}
    assert report["config_hash"] == cfg.config_hash()


def test_detection_never_mutates_artifacts(trained_batched):
    cfg = trained_batched["cfg"]
    before = {p: sha256_file(p) for p in (cfg.vocabulary, cfg.checkpoint, cfg.detector)}
    pl.run_detection(cfg, trained_batched["test"], trained_batched["test_labels"])
    after = {p: sha256_file(p) for p in before}
    assert before == after


def test_detection_label_mismatch_errors(trained_batched, tmp_path):
    cfg = trained_batched["cfg"]
    partial = tmp_path / "partial.jsonl"
    lines = open(trained_batched["test_labels"]).read().strip().splitlines()
    partial.write_text("\n".join(lines[:-2]) + "\n")
    with pytest.raises(ValidationError):
        pl.run_detection(cfg, trained_batched["test"], str(partial))


def test_detection_missing_artifacts_error(tmp_path, mini_corpus):
    cfg = pl.PipelineConfig(
        granularity="batched", logs=mini_corpus["train"],
        vocabulary=str(tmp_path / "nope_v.json"),
        checkpoint=str(tmp_path / "nope_c.json"),
        detector=str(tmp_path / "nope_d.json"),
        train=TrainConfig(hidden_dim=8, encoder_layers=1),
        theta=2.0)
    with pytest.raises(MissingArtifactError):
        pl.run_detection(cfg, mini_corpus["test"])


def test_both_modes_share_construction_and_encoder(monkeypatch, mini_corpus, tmp_path):
    """Instrumented call trace: one shared code path for both granularities."""
    import provgad.graphs as graphs_mod
    import provgad.model as model_mod

    calls = {"reduce": 0, "encode": 0}
    orig_reduce = graphs_mod.reduce_noise
    orig_encode = model_mod.encode

    def counting_reduce(*a, **k):
        calls["reduce"] += 1
        return orig_reduce(*a, **k)

    def counting_encode(*a, **k):
        calls["encode"] += 1
        return orig_encode(*a, **k)

    monkeypatch.setattr(graphs_mod, "reduce_noise", counting_reduce)
    monkeypatch.setattr(model_mod, "encode", counting_encode)
    # pipeline modules resolve these at call time through their module globals
    monkeypatch.setattr(model_mod, "embed",
                        lambda g, p: counting_encode(g, np.asarray(g.node_features, dtype=np.float64), p))

    for granularity in ("batched", "entity"):
        calls["reduce"] = calls["encode"] = 0
        cfg = pl.PipelineConfig(
            granularity=granularity, logs=mini_corpus["train"],
            vocabulary=str(tmp_path / f"{granularity}_v.json"),
            checkpoint=str(tmp_path / f"{granularity}_c.json"),
            detector=str(tmp_path / f"{granularity}_d.json"),
            train=TrainConfig(hidden_dim=8, encoder_layers=1, epochs=1, seed=1),
            neighbors=5, target_fpr=0.05)
        pl.run_training(cfg)
        assert calls["reduce"] > 0 and calls["encode"] > 0


def test_rerun_training_byte_identical_artifacts(trained_batched):
    cfg = trained_batched["cfg"]
    paths = (cfg.vocabulary, cfg.checkpoint, cfg.detector)
    before = {p: sha256_file(p) for p in paths}
    pl.run_training(cfg)  # overwrite in place with the same seed
    assert before == {p: sha256_file(p) for p in paths}


# ----------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------

def test_write_report_emits_json_csv_figures(trained_batched, tmp_path):
    cfg = trained_batched["cfg"]
    report = pl.run_detection(cfg, trained_batched["test"], trained_batched["test_labels"])
    out = tmp_path / "report.json"
    written = pl.write_report(report, str(out), figures=True)
    assert str(out) in written
    csv_path = tmp_path / "report.csv"
    assert csv_path.exists()
    header = csv_path.read_text().splitlines()[0]
    assert header == "id,score,malicious,label"
    assert (tmp_path / "report_scores.png").exists()
    assert (tmp_path / "report_roc.png").exists()
    loaded = json.loads(out.read_text())
    assert loaded["metrics"]["counts"] == report["metrics"]["counts"]


def test_report_csv_roundtrips_scores_exactly(trained_batched, tmp_path):
    cfg = trained_batched["cfg"]
    report = pl.run_detection(cfg, trained_batched["test"])
    out = tmp_path / "r.json"
    pl.write_report(report, str(out), figures=False)
    rows = (tmp_path / "r.csv").read_text().strip().splitlines()[1:]
    for rec, row in zip(report["targets"], rows):
        rid, score, flag = row.split(",")[:3]
        assert rid == rec["id"]
        assert float(score) == rec["score"]


def test_render_table_mentions_counts(trained_batched):
    cfg = trained_batched["cfg"]
    report = pl.run_detection(cfg, trained_batched["test"], trained_batched["test_labels"])
    text = pl.render_table(report)
    assert "precision" in text and "theta" in text


# ----------------------------------------------------------------------
# adaption
# ----------------------------------------------------------------------

@pytest.fixture()
def drift_setup(tmp_path):
    spec = harness.drift_spec(seed=33, graphs_per_scenario=14, nodes=(40, 60))
    paths = harness.gen_corpus(spec, str(tmp_path / "corpus"))
    train_b = {f"web-{i:03d}" for i in range(10)} | {f"mail-{i:03d}" for i in range(10)}
    feed_b = {f"backup-{i:03d}" for i in range(7)}
    test_b = ({f"web-{i:03d}" for i in range(10, 14)}
              | {f"mail-{i:03d}" for i in range(10, 14)}
              | {f"backup-{i:03d}" for i in range(7, 14)})
    files = {
        "train": str(tmp_path / "train.tsv"),
        "feedback": str(tmp_path / "feedback.tsv"),
        "test": str(tmp_path / "test.tsv"),
        "labels": str(tmp_path / "labels.jsonl"),
        "feedback_labels": str(tmp_path / "fb_labels.jsonl"),
    }
    harness.filter_corpus(paths.events, files["train"], lambda b: b in train_b)
    harness.filter_corpus(paths.events, files["feedback"], lambda b: b in feed_b)
    harness.filter_corpus(paths.events, files["test"], lambda b: b in test_b)
    harness.filter_labels(paths.batch_labels, files["labels"], lambda t: t in test_b)
    harness.filter_labels(paths.batch_labels, files["feedback_labels"], lambda t: t in feed_b)
    cfg = pl.PipelineConfig(
        granularity="batched", logs=files["train"],
        vocabulary=str(tmp_path / "art/v.json"),
        checkpoint=str(tmp_path / "art/c.json"),
        detector=str(tmp_path / "art/d.json"),
        train=TrainConfig(hidden_dim=12, encoder_layers=2, epochs=5, seed=3),
        neighbors=5, target_fpr=0.02, adapt_epochs=3, capacity=400)
    pl.run_training(cfg)
    return cfg, files


def test_adaption_reduces_false_positives(drift_setup):
    cfg, files = drift_setup
    before = pl.run_detection(cfg, files["test"], files["labels"])
    fpr_before = before["metrics"]["fpr"]
    result = pl.run_adaption(cfg, files["feedback"], files["feedback_labels"])
    assert result["changed"] and result["graphs"] == 7
    after = pl.run_detection(cfg, files["test"], files["labels"])
    assert after["metrics"]["fpr"] < fpr_before
    # previously false-positive drift batches score strictly lower now
    b = {t["id"]: t["score"] for t in before["targets"]}
    a = {t["id"]: t["score"] for t in after["targets"]}
    for batch in b:
        if batch.startswith("backup") and b[batch] >= before["theta"]:
            assert a[batch] < b[batch]


def test_adaption_refuses_malicious_feedback(drift_setup, tmp_path):
    cfg, files = drift_setup
    bad = tmp_path / "bad_labels.jsonl"
    lines = [json.loads(l) for l in open(files["feedback_labels"])]
    lines[0]["label"] = "malicious"
    bad.write_text("\n".join(json.dumps(l) for l in lines) + "\n")
    with pytest.raises(ValidationError):
        pl.run_adaption(cfg, files["feedback"], str(bad))


def test_adaption_empty_feedback_is_noop(drift_setup, tmp_path):
    cfg, files = drift_setup
    empty = tmp_path / "empty.tsv"
    empty.write_text("")
    hashes = {p: sha256_file(p) for p in (cfg.vocabulary, cfg.checkpoint, cfg.detector)}
    result = pl.run_adaption(cfg, str(empty))
    assert not result["changed"]
    assert hashes == {p: sha256_file(p) for p in hashes}


def test_adaption_fifo_capacity(drift_setup):
    cfg, files = drift_setup
    small = dataclasses.replace(cfg, capacity=7)
    result = pl.run_adaption(small, files["feedback"])
    assert result["points"] == 7  # only the newest points survive
    state = det.load_detector(cfg.detector)
    assert len(state.points) == 7


# ----------------------------------------------------------------------
# threshold + two-stage
# ----------------------------------------------------------------------

def test_run_threshold_from_training_scores(trained_batched):
    cfg = trained_batched["cfg"]
    theta = pl.run_threshold(cfg)
    state = det.load_detector(cfg.detector)
    assert state.theta == theta
    assert (state.training_scores >= theta).mean() <= cfg.target_fpr


def test_run_threshold_from_benign_logs(trained_batched, tmp_path):
    import shutil

    cfg = trained_batched["cfg"]
    scratch = str(tmp_path / "detector.json")
    shutil.copy(cfg.detector, scratch)
    theta = pl.run_threshold(dataclasses.replace(cfg, detector=scratch),
                             benign_logs=trained_batched["train"])
    assert theta > 0
    assert det.load_detector(scratch).theta == theta


def test_two_stage_detection(tmp_path, mini_corpus):
    # batched stage on the mini corpus, entity stage on flagged batches
    art_b = tmp_path / "b"
    art_e = tmp_path / "e"
    cfg_b = pl.PipelineConfig(
        granularity="batched", logs=mini_corpus["train"],
        vocabulary=str(art_b / "v.json"), checkpoint=str(art_b / "c.json"),
        detector=str(art_b / "d.json"),
        train=TrainConfig(hidden_dim=12, encoder_layers=2, epochs=5, seed=5),
        neighbors=5, target_fpr=0.05)
    cfg_e = dataclasses.replace(
        cfg_b, granularity="entity",
        vocabulary=str(art_e / "v.json"), checkpoint=str(art_e / "c.json"),
        detector=str(art_e / "d.json"),
        train=TrainConfig(hidden_dim=8, encoder_layers=1, epochs=2, seed=5))
    pl.run_training(cfg_b)
    pl.run_training(cfg_e)
    report = pl.run_two_stage(cfg_b, cfg_e, mini_corpus["test"])
    assert "stage1" in report
    stage1 = report["stage1"]
    n_test_batches = len({line.split("\t")[-1].strip()
                          for line in open(mini_corpus["test"]) if line.strip()})
    assert stage1["batches"] == n_test_batches
    flagged = set(stage1["positive_batches"])
    assert all(t["id"].split("/")[0] in flagged for t in report["targets"])
