"""Shared fixtures: a small trained pipeline reused across test modules."""

import dataclasses

import pytest

from provgad import harness
from provgad import pipeline as pl
from provgad.model import TrainConfig


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory):
    """Tiny batched corpus: 5 benign scenarios + 1 attack, 8 graphs each."""
    root = tmp_path_factory.mktemp("mini_corpus")
    spec = harness.batched_spec(seed=101, graphs_per_scenario=8, nodes=(30, 45))
    paths = harness.gen_corpus(spec, str(root))
    train_path, test_path = harness.write_split(paths, str(root), 0.75)
    test_batches = {line.split("\t")[-1].strip()
                    for line in open(test_path, encoding="utf-8") if line.strip()}
    labels_path = str(root / "test_labels.jsonl")
    harness.filter_labels(paths.batch_labels, labels_path, lambda t: t in test_batches)
    return {
        "root": str(root),
        "paths": paths,
        "train": train_path,
        "test": test_path,
        "test_labels": labels_path,
    }


@pytest.fixture(scope="session")
def trained_batched(mini_corpus, tmp_path_factory):
    """Artifacts of a small batched-mode training run."""
    art = tmp_path_factory.mktemp("mini_artifacts")
    cfg = pl.PipelineConfig(
        granularity="batched",
        logs=mini_corpus["train"],
        vocabulary=str(art / "vocabulary.json"),
        checkpoint=str(art / "checkpoint.json"),
        detector=str(art / "detector.json"),
        train=TrainConfig(hidden_dim=12, encoder_layers=2, epochs=6, seed=5),
        neighbors=5,
        target_fpr=0.05,
    )
    summary = pl.run_training(cfg)
    return {"cfg": cfg, "summary": summary, **mini_corpus}


def clone_config(cfg, **overrides):
    return dataclasses.replace(cfg, **overrides)
