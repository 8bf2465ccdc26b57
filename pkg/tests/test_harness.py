"""Corpus generation and adversarial perturbation."""

import json
import os

import numpy as np
import pytest

from provgad import harness
from provgad.errors import ValidationError
from provgad.graphs import Vocabulary, graphs_from_events
from provgad.ingest import read_events


def small_spec(seed=0):
    return harness.ScenarioSpec(
        scenarios=[
            harness.ScenarioDef("alpha", list("ab"), list("mn"), motif="tree"),
            harness.ScenarioDef("omega", list("cd"), list("op"), motif="chain"),
            harness.ScenarioDef("strike", list("ab"), list("mn"), motif="tree",
                                attack=True, attack_node_types=["z", "y"],
                                attack_edge_types=["x", "w"], attack_fanout=4),
        ],
        nodes_per_graph=(15, 25),
        graphs_per_scenario=5,
        seed=seed,
    )


def test_gen_corpus_counts_and_labels(tmp_path):
    paths = harness.gen_corpus(small_spec(), str(tmp_path))
    labels = [json.loads(l) for l in open(paths.batch_labels)]
    assert len(labels) == 15
    assert sum(1 for l in labels if l["label"] == "malicious") == 5
    batches = {line.split("\t")[-1].strip() for line in open(paths.events) if line.strip()}
    assert batches == {l["target"] for l in labels}


def test_gen_corpus_deterministic(tmp_path):
    a = harness.gen_corpus(small_spec(seed=9), str(tmp_path / "a"))
    b = harness.gen_corpus(small_spec(seed=9), str(tmp_path / "b"))
    for pa, pb in ((a.events, b.events), (a.batch_labels, b.batch_labels),
                   (a.node_labels, b.node_labels)):
        assert open(pa, "rb").read() == open(pb, "rb").read()


def test_gen_corpus_all_benign_when_no_attack(tmp_path):
    spec = harness.ScenarioSpec(
        scenarios=[harness.ScenarioDef("only", list("ab"), list("mn"))],
        nodes_per_graph=(10, 12), graphs_per_scenario=3, seed=1)
    paths = harness.gen_corpus(spec, str(tmp_path))
    labels = [json.loads(l)["label"] for l in open(paths.batch_labels)]
    assert set(labels) == {"benign"}


def test_generated_corpus_survives_full_ingestion(tmp_path):
    paths = harness.gen_corpus(small_spec(), str(tmp_path))
    vocab = Vocabulary(dim=6, seed=0)
    graphs = graphs_from_events(read_events(paths.events, "streamspot"), vocab)
    assert len(graphs) == 15
    for g in graphs:
        assert g.num_nodes >= 2
        # simple graph: at most one edge per ordered pair
        pairs = list(zip(g.edge_src.tolist(), g.edge_dst.tolist()))
        assert len(pairs) == len(set(pairs))
        assert ((g.edge_src >= 0) & (g.edge_src < g.num_nodes)).all()
        assert ((g.edge_dst >= 0) & (g.edge_dst < g.num_nodes)).all()


def test_node_labels_cover_every_node(tmp_path):
    paths = harness.gen_corpus(small_spec(), str(tmp_path))
    vocab = Vocabulary(dim=4, seed=0)
    graphs = graphs_from_events(read_events(paths.events, "streamspot"), vocab)
    table = {json.loads(l)["target"] for l in open(paths.node_labels)}
    expected = {f"{g.batch_id}/{uid}" for g in graphs for uid in g.node_uids}
    assert table == expected


def test_spec_validation():
    spec = small_spec()
    spec.scenarios = [s for s in spec.scenarios if s.attack]
    with pytest.raises(ValidationError):
        spec.validate()
    bad = small_spec()
    bad.scenarios[2].attack_node_types = ["a"]  # inside benign alphabet
    bad.scenarios[2].attack_edge_types = ["m"]
    with pytest.raises(ValidationError):
        bad.validate()
    dup = small_spec()
    dup.scenarios[1].name = "alpha"
    with pytest.raises(ValidationError):
        dup.validate()


def test_write_split_benign_only_training(tmp_path):
    paths = harness.gen_corpus(small_spec(), str(tmp_path))
    train_p, test_p = harness.write_split(paths, str(tmp_path), 0.6)
    train_batches = {l.split("\t")[-1].strip() for l in open(train_p) if l.strip()}
    test_batches = {l.split("\t")[-1].strip() for l in open(test_p) if l.strip()}
    labels = {json.loads(l)["target"]: json.loads(l)["label"]
              for l in open(paths.batch_labels)}
    assert all(labels[b] == "benign" for b in train_batches)
    assert {b for b in labels if labels[b] == "malicious"} <= test_batches
    assert train_batches.isdisjoint(test_batches)
    assert train_batches | test_batches == set(labels)


# ----------------------------------------------------------------------
# graph-level perturbation
# ----------------------------------------------------------------------

@pytest.fixture()
def attacked_graph(tmp_path):
    paths = harness.gen_corpus(small_spec(seed=3), str(tmp_path))
    vocab = Vocabulary(dim=6, seed=0)
    graphs = graphs_from_events(read_events(paths.events, "streamspot"), vocab)
    g = next(gr for gr in graphs if gr.batch_id == "strike-000")
    malicious = {json.loads(l)["target"].split("/", 1)[1]
                 for l in open(paths.node_labels)
                 if json.loads(l)["label"] == "malicious"
                 and json.loads(l)["target"].startswith("strike-000/")}
    assert malicious
    return g, malicious, vocab


def test_mfe_full_intensity_relabels_to_benign_modal(attacked_graph):
    g, malicious, vocab = attacked_graph
    spec = harness.PerturbationSpec("MFE", 1.0, seed=0)
    out = harness.perturb(g, malicious, spec, vocab)
    ben_labels = [lbl for uid, lbl in zip(g.node_uids, g.node_labels)
                  if uid not in malicious]
    modal = harness._modal(ben_labels)
    for uid, lbl in zip(out.node_uids, out.node_labels):
        if uid in malicious:
            assert lbl == modal
    assert out.node_uids == g.node_uids
    assert np.array_equal(out.edge_src, g.edge_src)


def test_mse_only_adds_edges(attacked_graph):
    g, malicious, vocab = attacked_graph
    spec = harness.PerturbationSpec("MSE", 1.0, seed=1)
    out = harness.perturb(g, malicious, spec, vocab)
    assert out.num_edges >= g.num_edges
    assert out.num_nodes == g.num_nodes
    assert out.node_labels == g.node_labels
    before = set(zip(g.edge_src.tolist(), g.edge_dst.tolist()))
    after = set(zip(out.edge_src.tolist(), out.edge_dst.tolist()))
    assert before <= after
    mal_idx = {i for i, uid in enumerate(out.node_uids) if uid in malicious}
    for s, d in after - before:
        assert s not in mal_idx and d in mal_idx


def test_mce_composes_mfe_and_mse(attacked_graph):
    g, malicious, vocab = attacked_graph
    mce = harness.perturb(g, malicious, harness.PerturbationSpec("MCE", 1.0, seed=2), vocab)
    mfe = harness.perturb(g, malicious, harness.PerturbationSpec("MFE", 1.0, seed=2), vocab)
    mse_after_mfe = harness.perturb(mfe, malicious,
                                    harness.PerturbationSpec("MSE", 1.0, seed=2), vocab)
    assert sorted(mce.node_labels) == sorted(mfe.node_labels)
    assert mce.num_edges == mse_after_mfe.num_edges


def test_bfp_preserves_edges_and_relabels_benign(attacked_graph):
    g, malicious, vocab = attacked_graph
    spec = harness.PerturbationSpec("BFP", 0.5, seed=3)
    out = harness.perturb(g, malicious, spec, vocab)
    assert np.array_equal(out.edge_src, g.edge_src)
    assert np.array_equal(out.edge_dst, g.edge_dst)
    assert out.edge_label_sets == g.edge_label_sets
    mal_labels = [lbl for uid, lbl in zip(g.node_uids, g.node_labels) if uid in malicious]
    target = harness._modal(mal_labels)
    ben_idx = [i for i, uid in enumerate(g.node_uids) if uid not in malicious]
    changed = [i for i in ben_idx if out.node_labels[i] != g.node_labels[i]]
    assert len(changed) == int(round(0.5 * len(ben_idx)))
    assert all(out.node_labels[i] == target for i in changed)
    # malicious nodes untouched
    for i, uid in enumerate(g.node_uids):
        if uid in malicious:
            assert out.node_labels[i] == g.node_labels[i]


def test_perturb_requires_malicious_nodes_for_evasion(attacked_graph):
    g, _, vocab = attacked_graph
    for strategy in ("MFE", "MSE", "MCE"):
        with pytest.raises(ValidationError):
            harness.perturb(g, set(), harness.PerturbationSpec(strategy, 1.0), vocab)


def test_bfp_on_benign_graph_needs_attack_label(attacked_graph):
    g, _, vocab = attacked_graph
    with pytest.raises(ValidationError):
        harness.perturb(g, set(), harness.PerturbationSpec("BFP", 0.5), vocab)
    out = harness.perturb(g, set(),
                          harness.PerturbationSpec("BFP", 0.5, attack_label=12345), vocab)
    assert 12345 in out.node_labels


def test_perturbation_spec_validation():
    with pytest.raises(ValidationError):
        harness.PerturbationSpec("XXX", 0.5).validate()
    with pytest.raises(ValidationError):
        harness.PerturbationSpec("MFE", 0.0).validate()
    with pytest.raises(ValidationError):
        harness.PerturbationSpec("MFE", 1.5).validate()


def test_perturbed_features_rederive_from_vocabulary(attacked_graph):
    g, malicious, vocab = attacked_graph
    out = harness.perturb(g, malicious, harness.PerturbationSpec("MFE", 1.0, seed=4), vocab)
    for lbl, row in zip(out.node_labels, out.node_features):
        assert np.array_equal(row, vocab.node_vector(lbl))


# ----------------------------------------------------------------------
# wire-level perturbation
# ----------------------------------------------------------------------

def test_perturb_corpus_mfe_rewrites_types(tmp_path):
    paths = harness.gen_corpus(small_spec(seed=5), str(tmp_path))
    out = str(tmp_path / "mfe.tsv")
    counters = harness.perturb_corpus(
        paths.events, paths.node_labels,
        harness.PerturbationSpec("MFE", 1.0, seed=0), out)
    assert counters["relabeled_nodes"] > 0 and counters["added_edges"] == 0
    mal = harness._load_node_labels(paths.node_labels)
    for line in open(out):
        f = line.rstrip("\n").split("\t")
        batch_mal = mal.get(f[5], set())
        for uid, t in ((f[0], f[1]), (f[2], f[3])):
            if uid in batch_mal:
                assert t not in ("z", "y")  # attack types gone at intensity 1


def test_perturb_corpus_mse_appends_edges(tmp_path):
    paths = harness.gen_corpus(small_spec(seed=6), str(tmp_path))
    out = str(tmp_path / "mse.tsv")
    counters = harness.perturb_corpus(
        paths.events, paths.node_labels,
        harness.PerturbationSpec("MSE", 1.0, seed=0), out)
    n_before = sum(1 for l in open(paths.events) if l.strip())
    n_after = sum(1 for l in open(out) if l.strip())
    assert n_after == n_before + counters["added_edges"]
    assert counters["added_edges"] > 0


def test_perturb_corpus_deterministic(tmp_path):
    paths = harness.gen_corpus(small_spec(seed=7), str(tmp_path))
    outs = []
    for tag in ("a", "b"):
        out = str(tmp_path / f"{tag}.tsv")
        harness.perturb_corpus(paths.events, paths.node_labels,
                               harness.PerturbationSpec("MCE", 0.7, seed=11), out)
        outs.append(open(out, "rb").read())
    assert outs[0] == outs[1]


def test_perturb_corpus_bfp_with_explicit_type(tmp_path):
    spec = harness.ScenarioSpec(
        scenarios=[harness.ScenarioDef("only", list("ab"), list("mn"))],
        nodes_per_graph=(10, 14), graphs_per_scenario=3, seed=2)
    paths = harness.gen_corpus(spec, str(tmp_path))
    out = str(tmp_path / "bfp.tsv")
    with pytest.raises(ValidationError):
        harness.perturb_corpus(paths.events, paths.node_labels,
                               harness.PerturbationSpec("BFP", 0.5, seed=0), out)
    counters = harness.perturb_corpus(
        paths.events, paths.node_labels,
        harness.PerturbationSpec("BFP", 0.5, seed=0), out, attack_type="z")
    assert counters["relabeled_nodes"] > 0
    assert any("\tz\t" in line for line in open(out))


def test_filter_corpus_roundtrip(tmp_path):
    paths = harness.gen_corpus(small_spec(seed=8), str(tmp_path))
    out = str(tmp_path / "alpha_only.tsv")
    kept = harness.filter_corpus(paths.events, out, lambda b: b.startswith("alpha"))
    assert kept == sum(1 for l in open(out) if l.strip())
    assert all(l.rstrip().endswith(tuple(f"alpha-{i:03d}" for i in range(5)))
               for l in open(out) if l.strip())
