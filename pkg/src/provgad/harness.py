"""Synthetic corpora and adversarial perturbations.

Generators emit the 6-field tab-separated wire format so every end-to-end
experiment exercises the real parsing path. Each scenario owns a label
alphabet and a structural motif; attack scenarios additionally inject a
high-fan-out probe subgraph whose nodes carry labels outside every benign
alphabet. Labels files name malicious batches and malicious nodes.

Perturbation strategies model log-manipulating adversaries: relabeling
malicious entities to the dominant benign label, padding malicious entities
with benign-looking edges, both combined, and poisoning benign training
entities with an attack-typical label.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ValidationError
from .graphs import ProvenanceGraph, Vocabulary

MOTIFS = ("tree", "chain", "star", "ring", "bipartite")
STRATEGIES = ("MFE", "MSE", "MCE", "BFP")


@dataclass
class ScenarioDef:
    name: str
    node_types: list[str]
    edge_types: list[str]
    motif: str = "tree"
    extra_edge_rate: float = 0.5
    attack: bool = False
    attack_node_types: list[str] = field(default_factory=list)
    attack_edge_types: list[str] = field(default_factory=list)
    attack_fanout: int | None = None  # None derives ~5% of the graph
    graphs: int | None = None  # overrides ScenarioSpec.graphs_per_scenario


@dataclass
class ScenarioSpec:
    scenarios: list[ScenarioDef]
    nodes_per_graph: tuple[int, int] = (80, 120)
    graphs_per_scenario: int = 100
    seed: int = 0

    def validate(self) -> "ScenarioSpec":
        if not self.scenarios:
            raise ValidationError("spec needs at least one scenario")
        benign = [s for s in self.scenarios if not s.attack]
        if not benign:
            raise ValidationError("spec needs at least one benign scenario")
        lo, hi = self.nodes_per_graph
        if not 2 <= lo <= hi:
            raise ValidationError("nodes_per_graph range must satisfy 2 <= lo <= hi")
        if self.graphs_per_scenario < 1:
            raise ValidationError("graphs_per_scenario must be >= 1")
        names = [s.name for s in self.scenarios]
        if len(set(names)) != len(names):
            raise ValidationError("scenario names must be unique")
        benign_node_types = {t for s in benign for t in s.node_types}
        benign_edge_types = {t for s in benign for t in s.edge_types}
        for s in self.scenarios:
            if s.motif not in MOTIFS:
                raise ValidationError(f"{s.name}: unknown motif {s.motif!r}")
            if not s.node_types or not s.edge_types:
                raise ValidationError(f"{s.name}: empty label alphabet")
            if s.attack:
                novel = (set(s.attack_node_types) - benign_node_types) | (
                    set(s.attack_edge_types) - benign_edge_types)
                if not novel:
                    raise ValidationError(
                        f"{s.name}: attack scenario must use at least one label "
                        "outside the benign alphabets")
        return self


@dataclass
class CorpusPaths:
    events: str
    batch_labels: str
    node_labels: str


def _type_weights(n_types: int) -> np.ndarray:
    w = 0.5 ** np.arange(n_types)
    return w / w.sum()


def _motif_edges(motif: str, n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    if motif == "tree":
        return [(int(rng.integers(0, i)), i) for i in range(1, n)]
    if motif == "chain":
        return [(i - 1, i) for i in range(1, n)]
    if motif == "star":
        # collector orientation: many sources feed one hub, whose attention
        # averages over them; the reverse direction lets one node's noise
        # reach every leaf and hence the pooled embedding
        return [(i, 0) for i in range(1, n)]
    if motif == "ring":
        return [(i, (i + 1) % n) for i in range(n)]
    # bipartite: sources in the left half write into the right half
    half = max(1, n // 2)
    edges = []
    for r in range(half, n):
        for _ in range(int(rng.integers(1, 3))):
            edges.append((int(rng.integers(0, half)), r))
    return edges


def _generate_batch(scenario: ScenarioDef, spec: ScenarioSpec, batch_id: str,
                    rng: np.random.Generator) -> tuple[list[str], list[str], list[str]]:
    """Returns (event lines, node uids, malicious uids)."""
    lo, hi = spec.nodes_per_graph
    n = int(rng.integers(lo, hi + 1))
    node_w = _type_weights(len(scenario.node_types))
    edge_w = _type_weights(len(scenario.edge_types))
    types = [scenario.node_types[int(i)]
             for i in rng.choice(len(scenario.node_types), size=n, p=node_w)]
    # structural roots (tree root, star hub, chain head) keep a fixed type so a
    # scenario forms one tight behavioral cluster instead of one per root label
    types[0] = scenario.node_types[0]

    pairs = _motif_edges(scenario.motif, n, rng)
    for _ in range(int(scenario.extra_edge_rate * n)):
        pairs.append((int(rng.integers(n)), int(rng.integers(n))))

    lines: list[str] = []

    def emit(src: int | str, dst: int | str, etype: str) -> None:
        lines.append(f"{src}\t{types_map[str(src)]}\t{dst}\t{types_map[str(dst)]}\t{etype}\t{batch_id}")

    types_map = {str(i): t for i, t in enumerate(types)}
    for s, d in pairs:
        etype = scenario.edge_types[int(rng.choice(len(scenario.edge_types), p=edge_w))]
        for _ in range(1 + int(rng.integers(0, 3))):  # duplicates exercise reduction
            emit(s, d, etype)
        if len(scenario.edge_types) > 1 and rng.random() < 0.3:
            other = scenario.edge_types[int(rng.integers(len(scenario.edge_types)))]
            if other != etype:
                emit(s, d, other)

    malicious: list[str] = []
    uids = [str(i) for i in range(n)]
    if scenario.attack:
        if not scenario.attack_node_types or not scenario.attack_edge_types:
            raise ValidationError(f"{scenario.name}: attack scenario needs attack alphabets")
        fanout = scenario.attack_fanout
        if fanout is None:
            fanout = max(2, int(round(0.05 * n)) - 1)
        probe = "atk0"
        types_map[probe] = scenario.attack_node_types[0]
        sock_type = scenario.attack_node_types[-1]
        connect = scenario.attack_edge_types[0]
        respond = scenario.attack_edge_types[-1]
        ingress = scenario.edge_types[0]
        emit(int(rng.integers(n)), probe, ingress)
        malicious.append(probe)
        for j in range(fanout):
            sock = f"atk{j + 1}"
            types_map[sock] = sock_type
            emit(probe, sock, connect)
            emit(sock, probe, respond)
            malicious.append(sock)
        uids = uids + malicious
    return lines, uids, malicious


def gen_corpus(spec: ScenarioSpec, out_dir: str) -> CorpusPaths:
    """Write events.tsv, batch_labels.jsonl and node_labels.jsonl; seeded."""
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    paths = CorpusPaths(
        events=os.path.join(out_dir, "events.tsv"),
        batch_labels=os.path.join(out_dir, "batch_labels.jsonl"),
        node_labels=os.path.join(out_dir, "node_labels.jsonl"),
    )
    with open(paths.events, "w", encoding="utf-8") as ev, \
            open(paths.batch_labels, "w", encoding="utf-8") as bl, \
            open(paths.node_labels, "w", encoding="utf-8") as nl:
        for si, scenario in enumerate(spec.scenarios):
            count = scenario.graphs if scenario.graphs is not None else spec.graphs_per_scenario
            for gi in range(count):
                batch_id = f"{scenario.name}-{gi:03d}"
                rng = np.random.default_rng(np.random.SeedSequence(
                    entropy=[spec.seed, si, gi]))
                lines, uids, malicious = _generate_batch(scenario, spec, batch_id, rng)
                ev.write("\n".join(lines) + "\n")
                bl.write(json.dumps(
                    {"target": batch_id,
                     "label": "malicious" if scenario.attack else "benign"}) + "\n")
                mal = set(malicious)
                for uid in uids:
                    nl.write(json.dumps(
                        {"target": f"{batch_id}/{uid}",
                         "label": "malicious" if uid in mal else "benign"}) + "\n")
    return paths


def filter_corpus(events_path: str, out_path: str,
                  keep: Callable[[str], bool]) -> int:
    """Copy event lines whose batch id satisfies the predicate."""
    kept = 0
    with open(events_path, encoding="utf-8") as src, \
            open(out_path, "w", encoding="utf-8") as dst:
        for line in src:
            if not line.strip():
                continue
            batch = line.rstrip("\n").split("\t")[-1]
            if keep(batch):
                dst.write(line)
                kept += 1
    return kept


def filter_labels(labels_path: str, out_path: str,
                  keep: Callable[[str], bool]) -> int:
    kept = 0
    with open(labels_path, encoding="utf-8") as src, \
            open(out_path, "w", encoding="utf-8") as dst:
        for line in src:
            if not line.strip():
                continue
            if keep(json.loads(line)["target"]):
                dst.write(line)
                kept += 1
    return kept


# ----------------------------------------------------------------------
# preset corpora
# ----------------------------------------------------------------------

def batched_spec(seed: int = 0, graphs_per_scenario: int = 100,
                 nodes: tuple[int, int] = (80, 120)) -> ScenarioSpec:
    """Six scenarios: five benign activities plus one drive-by style attack."""
    scenarios = [
        ScenarioDef("web", list("abc"), list("mn"), motif="tree", extra_edge_rate=0.5),
        ScenarioDef("mail", list("def"), list("op"), motif="chain", extra_edge_rate=0.4),
        ScenarioDef("video", list("ghi"), list("qr"), motif="star", extra_edge_rate=0.3),
        ScenarioDef("game", list("jkl"), list("st"), motif="ring", extra_edge_rate=0.6),
        ScenarioDef("files", list("npr"), list("uv"), motif="bipartite", extra_edge_rate=0.4),
        ScenarioDef("attack", list("abc"), list("mn"), motif="tree", extra_edge_rate=0.5,
                    attack=True, attack_node_types=["z", "y"],
                    attack_edge_types=["x", "w"], attack_fanout=30),
    ]
    return ScenarioSpec(scenarios, nodes, graphs_per_scenario, seed)


def entity_spec(seed: int = 0, benign_graphs: int = 40, attack_graphs: int = 25,
                nodes: tuple[int, int] = (60, 100)) -> ScenarioSpec:
    """Two benign services plus attacked variants carrying ~5% probe nodes."""
    scenarios = [
        ScenarioDef("websrv", list("abc"), list("mn"), motif="tree",
                    extra_edge_rate=0.5, graphs=benign_graphs),
        ScenarioDef("dbio", list("def"), list("op"), motif="chain",
                    extra_edge_rate=0.4, graphs=benign_graphs),
        ScenarioDef("websrv-hit", list("abc"), list("mn"), motif="tree",
                    extra_edge_rate=0.5, attack=True,
                    attack_node_types=["z", "y"], attack_edge_types=["x", "w"],
                    graphs=attack_graphs),
        ScenarioDef("dbio-hit", list("def"), list("op"), motif="chain",
                    extra_edge_rate=0.4, attack=True,
                    attack_node_types=["z", "y"], attack_edge_types=["x", "w"],
                    graphs=attack_graphs),
    ]
    return ScenarioSpec(scenarios, nodes, 1, seed)


def drift_spec(seed: int = 0, graphs_per_scenario: int = 30,
               nodes: tuple[int, int] = (60, 100)) -> ScenarioSpec:
    """Two established benign scenarios plus one that appears post-training."""
    scenarios = [
        ScenarioDef("web", list("abc"), list("mn"), motif="tree", extra_edge_rate=0.5),
        ScenarioDef("mail", list("def"), list("op"), motif="chain", extra_edge_rate=0.4),
        ScenarioDef("backup", list("uvw"), list("kl"), motif="star", extra_edge_rate=0.4),
    ]
    return ScenarioSpec(scenarios, nodes, graphs_per_scenario, seed)


PRESETS = {"batched": batched_spec, "entity": entity_spec, "drift": drift_spec}


def write_split(paths: CorpusPaths, out_dir: str, train_frac: float) -> tuple[str, str]:
    """Split a corpus into benign-only train.tsv and the remaining test.tsv.

    Per benign scenario the first ceil(train_frac * count) batches (by id
    order) go to training; every attack batch goes to testing.
    """
    if not 0.0 < train_frac < 1.0:
        raise ValidationError("train_frac must be in (0, 1)")
    labels: dict[str, str] = {}
    with open(paths.batch_labels, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                doc = json.loads(line)
                labels[doc["target"]] = doc["label"]
    by_scenario: dict[str, list[str]] = {}
    for batch in labels:
        by_scenario.setdefault(batch.rsplit("-", 1)[0], []).append(batch)
    train_batches: set[str] = set()
    for scenario, batch_list in by_scenario.items():
        batch_list.sort()
        if any(labels[b] == "malicious" for b in batch_list):
            continue
        cut = int(np.ceil(train_frac * len(batch_list)))
        train_batches.update(batch_list[:cut])
    train_path = os.path.join(out_dir, "train.tsv")
    test_path = os.path.join(out_dir, "test.tsv")
    filter_corpus(paths.events, train_path, lambda b: b in train_batches)
    filter_corpus(paths.events, test_path, lambda b: b not in train_batches)
    return train_path, test_path


# ----------------------------------------------------------------------
# adversarial perturbation, graph level
# ----------------------------------------------------------------------

@dataclass
class PerturbationSpec:
    strategy: str
    intensity: float
    seed: int = 0
    attack_label: int | None = None  # poison target when the graph has no malicious nodes

    def validate(self) -> "PerturbationSpec":
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"strategy must be one of {STRATEGIES}")
        if not 0.0 < self.intensity <= 1.0:
            raise ValidationError("intensity must be in (0, 1]")
        return self


def _modal(values: Iterable) -> object:
    counts: dict = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    # ties resolve to the smallest value for determinism
    return min(sorted(counts), key=lambda v: (-counts[v], v))


def _copy_graph(g: ProvenanceGraph) -> ProvenanceGraph:
    return ProvenanceGraph(
        batch_id=g.batch_id,
        node_uids=list(g.node_uids),
        node_labels=list(g.node_labels),
        node_features=g.node_features.copy(),
        edge_src=g.edge_src.copy(),
        edge_dst=g.edge_dst.copy(),
        edge_label_sets=list(g.edge_label_sets),
        edge_features=g.edge_features.copy(),
    )


def _relabel(g: ProvenanceGraph, indices: Sequence[int], label: int,
             vocab: Vocabulary) -> None:
    row = vocab.node_vector(label)
    for i in indices:
        g.node_labels[i] = label
        g.node_features[i] = row


def perturb(g: ProvenanceGraph, malicious_uids: Iterable[str],
            spec: PerturbationSpec, vocab: Vocabulary) -> ProvenanceGraph:
    """Apply one adversarial strategy; node count is always preserved."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    mal = set(malicious_uids)
    mal_idx = [i for i, uid in enumerate(g.node_uids) if uid in mal]
    ben_idx = [i for i, uid in enumerate(g.node_uids) if uid not in mal]
    if spec.strategy in ("MFE", "MSE", "MCE") and not mal_idx:
        raise ValidationError(f"{spec.strategy} needs malicious nodes in the graph")
    out = _copy_graph(g)

    if spec.strategy in ("MFE", "MCE"):
        if not ben_idx:
            raise ValidationError("MFE needs at least one benign node")
        target = _modal(g.node_labels[i] for i in ben_idx)
        count = int(round(spec.intensity * len(mal_idx)))
        chosen = [mal_idx[int(i)] for i in rng.permutation(len(mal_idx))[:count]]
        _relabel(out, chosen, int(target), vocab)

    if spec.strategy in ("MSE", "MCE"):
        if not ben_idx:
            raise ValidationError("MSE needs at least one benign node")
        ben_set = set(ben_idx)
        benign_edge_labels = [
            lbl
            for s, d, labels in zip(g.edge_src, g.edge_dst, g.edge_label_sets)
            for lbl in labels
            if int(s) in ben_set and int(d) in ben_set
        ]
        if not benign_edge_labels:
            benign_edge_labels = [lbl for labels in g.edge_label_sets for lbl in labels]
        if not benign_edge_labels:
            raise ValidationError("MSE needs at least one existing edge label")
        edge_label = int(_modal(benign_edge_labels))
        count = int(round(spec.intensity * len(mal_idx)))
        existing = set(zip(out.edge_src.tolist(), out.edge_dst.tolist()))
        candidates = [(b, v) for b in ben_idx for v in mal_idx if (b, v) not in existing]
        chosen = [candidates[int(i)] for i in rng.permutation(len(candidates))[:count]]
        if chosen:
            new_src = np.concatenate([out.edge_src, np.array([c[0] for c in chosen])])
            new_dst = np.concatenate([out.edge_dst, np.array([c[1] for c in chosen])])
            new_sets = out.edge_label_sets + [(edge_label,) for _ in chosen]
            new_feat = np.vstack([out.edge_features,
                                  np.tile(vocab.edge_vector(edge_label), (len(chosen), 1))])
            order = np.lexsort((new_dst, new_src))
            out.edge_src = new_src[order].astype(np.int64)
            out.edge_dst = new_dst[order].astype(np.int64)
            out.edge_label_sets = [new_sets[int(i)] for i in order]
            out.edge_features = new_feat[order]

    if spec.strategy == "BFP":
        if not ben_idx:
            raise ValidationError("BFP needs benign nodes to poison")
        if spec.attack_label is not None:
            target = int(spec.attack_label)
        elif mal_idx:
            target = int(_modal(g.node_labels[i] for i in mal_idx))
        else:
            raise ValidationError(
                "BFP on a fully benign graph needs an explicit attack_label")
        count = int(round(spec.intensity * len(ben_idx)))
        chosen = [ben_idx[int(i)] for i in rng.permutation(len(ben_idx))[:count]]
        _relabel(out, chosen, target, vocab)

    return out


# ----------------------------------------------------------------------
# adversarial perturbation, wire level (used by the CLI)
# ----------------------------------------------------------------------

def _load_node_labels(path: str) -> dict[str, set[str]]:
    """batch id -> set of malicious node uids."""
    table: dict[str, set[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            batch, _, uid = doc["target"].partition("/")
            if not uid:
                continue
            if doc["label"] == "malicious":
                table.setdefault(batch, set()).add(uid)
            else:
                table.setdefault(batch, set())
    return table


def perturb_corpus(events_path: str, node_labels_path: str, spec: PerturbationSpec,
                   out_events_path: str, attack_type: str | None = None) -> dict:
    """Rewrite a TSV corpus under one strategy; returns per-strategy counters."""
    spec.validate()
    mal_by_batch = _load_node_labels(node_labels_path)

    batches: dict[str, list[list[str]]] = {}
    with open(events_path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 6:
                raise ValidationError(f"{events_path}: expected 6 fields, got {len(fields)}")
            batches.setdefault(fields[5], []).append(fields)

    if spec.strategy == "BFP" and attack_type is None:
        mal_types: list[str] = []
        for batch, rows in batches.items():
            mal = mal_by_batch.get(batch, set())
            for row in rows:
                if row[0] in mal:
                    mal_types.append(row[1])
                if row[2] in mal:
                    mal_types.append(row[3])
        if not mal_types:
            raise ValidationError("BFP needs --attack-type when the corpus has "
                                  "no labeled malicious nodes")
        attack_type = str(_modal(mal_types))

    rng = np.random.default_rng(spec.seed)
    relabeled = 0
    added_edges = 0

    out_lines: list[str] = []
    for batch, rows in batches.items():
        mal = mal_by_batch.get(batch, set())
        node_type: dict[str, str] = {}
        for row in rows:
            node_type.setdefault(row[0], row[1])
            node_type.setdefault(row[2], row[3])
        ben = [u for u in node_type if u not in mal]
        mal_here = [u for u in node_type if u in mal]

        retype: dict[str, str] = {}
        if spec.strategy in ("MFE", "MCE") and mal_here:
            target = str(_modal(node_type[u] for u in ben)) if ben else None
            if target:
                count = int(round(spec.intensity * len(mal_here)))
                for i in rng.permutation(len(mal_here))[:count]:
                    retype[mal_here[int(i)]] = target
                relabeled += len(retype)
        if spec.strategy == "BFP" and ben:
            count = int(round(spec.intensity * len(ben)))
            for i in rng.permutation(len(ben))[:count]:
                retype[ben[int(i)]] = attack_type
            relabeled += count

        new_rows = [
            [r[0], retype.get(r[0], r[1]), r[2], retype.get(r[2], r[3]), r[4], r[5]]
            for r in rows
        ]

        if spec.strategy in ("MSE", "MCE") and mal_here and ben:
            existing = {(r[0], r[2]) for r in rows}
            ben_edge_types = [r[4] for r in rows if r[0] not in mal and r[2] not in mal]
            if not ben_edge_types:
                ben_edge_types = [r[4] for r in rows]
            etype = str(_modal(ben_edge_types))
            count = int(round(spec.intensity * len(mal_here)))
            candidates = [(b, v) for b in ben for v in mal_here if (b, v) not in existing]
            for i in rng.permutation(len(candidates))[:count]:
                b, v = candidates[int(i)]
                src_t = retype.get(b, node_type[b])
                dst_t = retype.get(v, node_type[v])
                new_rows.append([b, src_t, v, dst_t, etype, batch])
                added_edges += 1

        out_lines.extend("\t".join(r) for r in new_rows)

    with open(out_events_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out_lines) + "\n")
    return {"relabeled_nodes": relabeled, "added_edges": added_edges}
