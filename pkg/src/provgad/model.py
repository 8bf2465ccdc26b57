"""Masked graph auto-encoder over provenance graphs.

The encoder stacks attention layers. Per layer, every edge carries a message
built from the source embedding and the (constant) edge feature; attention
scores are softmax-normalized over each destination's incoming edges, and a
node's new embedding is its self-projection plus the attention-weighted sum
of incoming messages. The final node embedding concatenates the layer inputs
with every layer output, and the batch-level state embedding is the mean of
all node embeddings.

Training is self-supervised: a random node subset has its input replaced by a
trainable mask token, a single-layer decoder reconstructs the hidden nodes'
initial features under a scaled cosine loss, and a two-layer MLP scores
sampled positive/negative node pairs under binary cross-entropy. Both losses
are differentiated with the in-package expression graph engine and optimized
by Adam with decoupled weight decay.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import DivergenceError, EmptyMaskError, NonFiniteError, ValidationError
from .graphs import ProvenanceGraph
from .serialize import lists_to_array, read_json, write_json

ATTENTION_SLOPE = 0.2
PROB_FLOOR = 1e-7
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    hidden_dim: int = 64
    encoder_layers: int = 3
    mask_rate: float = 0.5
    loss_scale: float = 3.0
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    epochs: int = 50
    seed: int = 0
    # off by default: messages flow along edge direction only; switching this
    # on mirrors every edge so information also reaches the source side
    reverse_messages: bool = False

    def validate(self) -> "TrainConfig":
        if self.hidden_dim < 1:
            raise ValidationError("hidden_dim must be >= 1")
        if self.encoder_layers < 1:
            raise ValidationError("encoder_layers must be >= 1")
        if not 0.0 < self.mask_rate < 1.0:
            raise ValidationError("mask_rate must be in (0, 1)")
        if self.loss_scale < 1.0:
            raise ValidationError("loss_scale must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValidationError("learning_rate must be > 0")
        if self.weight_decay < 0.0:
            raise ValidationError("weight_decay must be >= 0")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return cls(**doc).validate()


@dataclass
class OutputEmbeddings:
    node: np.ndarray  # (N, output_dim)
    state: np.ndarray  # (output_dim,)


def _layer_names(prefix: str) -> tuple[str, str, str, str]:
    return (f"{prefix}.msg", f"{prefix}.att_src", f"{prefix}.att_msg", f"{prefix}.self")


class ModelParams:
    """All trainable tensors, addressed by name."""

    def __init__(self, hidden_dim: int, encoder_layers: int, tensors: dict[str, np.ndarray],
                 reverse_messages: bool = False):
        self.hidden_dim = hidden_dim
        self.encoder_layers = encoder_layers
        self.tensors = tensors
        self.reverse_messages = reverse_messages

    @property
    def output_dim(self) -> int:
        return self.hidden_dim * (self.encoder_layers + 1)

    @classmethod
    def init(cls, cfg: TrainConfig) -> "ModelParams":
        cfg.validate()
        d, l = cfg.hidden_dim, cfg.encoder_layers
        out = d * (l + 1)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=[cfg.seed, 0]))

        def xavier(rows: int, cols: int) -> np.ndarray:
            bound = np.sqrt(6.0 / (rows + cols))
            return rng.uniform(-bound, bound, size=(rows, cols))

        tensors: dict[str, np.ndarray] = {}

        def attention_block(prefix: str) -> None:
            msg, att_src, att_msg, selfw = _layer_names(prefix)
            tensors[msg] = xavier(2 * d, d)
            tensors[att_src] = xavier(d, 1)
            tensors[att_msg] = xavier(d, 1)
            tensors[selfw] = xavier(d, d)

        for i in range(1, l + 1):
            attention_block(f"enc{i}")
        tensors["mask_token"] = np.zeros((1, d))
        tensors["remask_token"] = np.zeros((1, out))
        tensors["decode.project"] = xavier(out, d)
        attention_block("decode")
        tensors["struct.w1"] = xavier(2 * out, d)
        tensors["struct.b1"] = np.zeros((1, d))
        tensors["struct.w2"] = xavier(d, 1)
        tensors["struct.b2"] = np.zeros((1, 1))
        return cls(d, l, tensors, reverse_messages=cfg.reverse_messages)

    def copy(self) -> "ModelParams":
        return ModelParams(self.hidden_dim, self.encoder_layers,
                           {k: v.copy() for k, v in self.tensors.items()},
                           reverse_messages=self.reverse_messages)


# ----------------------------------------------------------------------
# graph constants shared by every step on the same graph
# ----------------------------------------------------------------------

@dataclass
class _GraphTensors:
    n: int
    m: int
    x: np.ndarray  # (N, d) initial node features
    e: np.ndarray  # (E, d) edge features
    src_select: np.ndarray  # (E, N) picks source rows
    dst_scatter: np.ndarray  # (N, E) sums messages per destination
    groups: np.ndarray  # (E,) destination index per edge


def _graph_tensors(g: ProvenanceGraph, reverse_messages: bool = False) -> _GraphTensors:
    n = g.num_nodes
    src = np.asarray(g.edge_src, dtype=np.int64)
    dst = np.asarray(g.edge_dst, dtype=np.int64)
    feats = np.asarray(g.edge_features, dtype=np.float64)
    if reverse_messages and len(src):
        src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
        feats = np.vstack([feats, feats])
    m = len(src)
    src_select = np.zeros((m, n))
    dst_scatter = np.zeros((n, m))
    if m:
        src_select[np.arange(m), src] = 1.0
        dst_scatter[dst, np.arange(m)] = 1.0
    return _GraphTensors(
        n=n, m=m,
        x=np.asarray(g.node_features, dtype=np.float64),
        e=feats,
        src_select=src_select,
        dst_scatter=dst_scatter,
        groups=dst,
    )


class _ParamRefs:
    """Adds model tensors to an expression graph lazily, once each."""

    def __init__(self, expr: ad.ExprGraph, params: ModelParams):
        self.expr = expr
        self.params = params
        self._refs: dict[str, int] = {}

    def __call__(self, name: str) -> int:
        ref = self._refs.get(name)
        if ref is None:
            ref = self.expr.param(name, self.params.tensors[name])
            self._refs[name] = ref
        return ref


def _attention_layer(expr: ad.ExprGraph, P: _ParamRefs, gt: _GraphTensors,
                     h: int, e_const: int, prefix: str) -> int:
    msg_w, att_src_w, att_msg_w, self_w = _layer_names(prefix)
    h_self = expr.matmul(h, P(self_w))
    if gt.m == 0:
        return h_self
    h_src = expr.matmul(expr.const(gt.src_select), h)
    msg = expr.matmul(expr.hconcat(h_src, e_const), P(msg_w))
    score = expr.leaky_relu(
        expr.add(expr.matmul(h_src, P(att_src_w)), expr.matmul(msg, P(att_msg_w))),
        ATTENTION_SLOPE)
    att = expr.row_softmax(score, gt.groups)
    weighted = expr.mul(msg, att)
    return expr.add(h_self, expr.matmul(expr.const(gt.dst_scatter), weighted))


def _encoder_refs(expr: ad.ExprGraph, P: _ParamRefs, gt: _GraphTensors, input_ref: int) -> int:
    e_const = expr.const(gt.e) if gt.m else -1
    h = input_ref
    outputs = [input_ref]
    for i in range(1, P.params.encoder_layers + 1):
        h = _attention_layer(expr, P, gt, h, e_const, f"enc{i}")
        outputs.append(h)
    return expr.hconcat(*outputs)


def _masked_input_refs(expr: ad.ExprGraph, P: _ParamRefs, gt: _GraphTensors,
                       masked: np.ndarray) -> int:
    keep = np.ones((gt.n, 1))
    keep[masked] = 0.0
    flag = 1.0 - keep
    kept = expr.mul(expr.const(gt.x), expr.const(keep))
    token = expr.matmul(expr.const(flag), P("mask_token"))
    return expr.add(kept, token)


def _decoder_refs(expr: ad.ExprGraph, P: _ParamRefs, gt: _GraphTensors,
                  h: int, masked: np.ndarray, loss_scale: float) -> tuple[int, int]:
    """Returns (reconstruction ref over all nodes, feature-loss ref)."""
    keep = np.ones((gt.n, 1))
    keep[masked] = 0.0
    flag = 1.0 - keep
    h_kept = expr.mul(h, expr.const(keep))
    h_rem = expr.matmul(expr.const(flag), P("remask_token"))
    h_star = expr.matmul(expr.add(h_kept, h_rem), P("decode.project"))
    e_const = expr.const(gt.e) if gt.m else -1
    recon = _attention_layer(expr, P, gt, h_star, e_const, "decode")

    select = np.zeros((len(masked), gt.n))
    select[np.arange(len(masked)), masked] = 1.0
    recon_masked = expr.matmul(expr.const(select), recon)
    target = expr.const(gt.x[masked])
    cos = expr.rowwise_cosine(target, recon_masked)
    floss = expr.mean(expr.power(expr.affine(cos, -1.0, 1.0), loss_scale))
    return recon, floss


def _structure_refs(expr: ad.ExprGraph, P: _ParamRefs, h: int,
                    samples: Sequence[tuple[int, int, int]], n: int) -> int:
    idx = np.asarray(samples, dtype=np.int64)

    def select(col: int) -> int:
        sel = np.zeros((len(idx), n))
        sel[np.arange(len(idx)), idx[:, col]] = 1.0
        return expr.matmul(expr.const(sel), h)

    anchors, positives, negatives = select(0), select(1), select(2)

    def prob(pair: int) -> int:
        hidden = expr.leaky_relu(
            expr.add(expr.matmul(pair, P("struct.w1")), P("struct.b1")), ATTENTION_SLOPE)
        logit = expr.add(expr.matmul(hidden, P("struct.w2")), P("struct.b2"))
        return expr.clamp(expr.sigmoid(logit), PROB_FLOOR, 1.0 - PROB_FLOOR)

    p_pos = prob(expr.hconcat(anchors, positives))
    p_neg = prob(expr.hconcat(anchors, negatives))
    terms = expr.add(expr.log(p_pos), expr.log(expr.affine(p_neg, -1.0, 1.0)))
    return expr.affine(expr.mean(terms), -1.0, 0.0)


# ----------------------------------------------------------------------
# public operations
# ----------------------------------------------------------------------

def mask_nodes(g: ProvenanceGraph, rate: float, rng: np.random.Generator,
               params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Pick round(rate*N) nodes uniformly; replace their inputs by the mask token."""
    if not 0.0 < rate < 1.0:
        raise ValidationError("mask rate must be in (0, 1)")
    n = g.num_nodes
    if n < 1:
        raise ValidationError("cannot mask an empty graph")
    count = int(round(rate * n))
    masked = np.sort(rng.permutation(n)[:count])
    inputs = np.asarray(g.node_features, dtype=np.float64).copy()
    if count:
        inputs[masked] = params.tensors["mask_token"][0]
    return masked, inputs


def encode(g: ProvenanceGraph, inputs: np.ndarray, params: ModelParams) -> OutputEmbeddings:
    """Run the encoder on given per-node inputs; edges are never masked."""
    gt = _graph_tensors(g, params.reverse_messages)
    if inputs.shape != (gt.n, params.hidden_dim):
        raise ValidationError(
            f"inputs shape {inputs.shape} does not match ({gt.n}, {params.hidden_dim})")
    expr = ad.ExprGraph()
    P = _ParamRefs(expr, params)
    h_ref = _encoder_refs(expr, P, gt, expr.const(inputs))
    node = ad.evaluate(expr, h_ref)
    return OutputEmbeddings(node=node, state=node.mean(axis=0))


def decode_features(h: OutputEmbeddings, masked: np.ndarray, g: ProvenanceGraph,
                    params: ModelParams, loss_scale: float) -> tuple[np.ndarray, float]:
    """Re-mask, reconstruct initial features, return (reconstruction, loss)."""
    if len(masked) == 0:
        raise EmptyMaskError("feature reconstruction needs a non-empty masked set")
    gt = _graph_tensors(g, params.reverse_messages)
    expr = ad.ExprGraph()
    P = _ParamRefs(expr, params)
    h_ref = expr.const(h.node)
    recon_ref, floss_ref = _decoder_refs(expr, P, gt, h_ref, np.asarray(masked), loss_scale)
    loss = float(ad.evaluate(expr, floss_ref)[0, 0])
    return expr.value(recon_ref), loss


def scaled_cosine_loss(x: np.ndarray, recon: np.ndarray, masked: np.ndarray,
                       loss_scale: float) -> float:
    """Direct formula used as an independent check of the decoder loss."""
    xs, rs = x[masked], recon[masked]
    nx = np.maximum(np.linalg.norm(xs, axis=1), ad.NORM_FLOOR)
    nr = np.maximum(np.linalg.norm(rs, axis=1), ad.NORM_FLOOR)
    cos = (xs * rs).sum(axis=1) / (nx * nr)
    return float(((1.0 - cos) ** loss_scale).mean())


def sample_structure(g: ProvenanceGraph, masked: np.ndarray,
                     rng: np.random.Generator,
                     max_tries: int = 100) -> tuple[list[tuple[int, int, int]], int]:
    """One (positive, negative) pair per eligible non-masked node.

    A node is eligible when it has an outgoing edge to another non-masked
    node. Negatives are drawn by rejection among non-masked nodes that the
    anchor has no edge to; anchors whose negative draw fails are skipped and
    counted.
    """
    masked_set = {int(i) for i in np.asarray(masked).ravel()}
    unmasked = [i for i in range(g.num_nodes) if i not in masked_set]
    if len(unmasked) < 2:
        return [], 0
    adj = g.out_neighbors()
    samples: list[tuple[int, int, int]] = []
    skipped = 0
    unmasked_set = set(unmasked)
    for n in unmasked:
        pool = [m for m in adj[n] if m in unmasked_set and m != n]
        if not pool:
            continue
        pos = pool[int(rng.integers(len(pool)))]
        out_set = set(adj[n])
        neg = -1
        for _ in range(max_tries):
            cand = unmasked[int(rng.integers(len(unmasked)))]
            if cand != n and cand not in out_set:
                neg = cand
                break
        if neg < 0:
            skipped += 1
            continue
        samples.append((n, pos, neg))
    return samples, skipped


def structure_loss(h: OutputEmbeddings, samples: Sequence[tuple[int, int, int]],
                   params: ModelParams) -> float:
    """Binary cross-entropy over sampled pairs; 0 when no samples exist."""
    if not samples:
        return 0.0
    idx = np.asarray(samples, dtype=np.int64)
    H = h.node
    w1, b1 = params.tensors["struct.w1"], params.tensors["struct.b1"]
    w2, b2 = params.tensors["struct.w2"], params.tensors["struct.b2"]

    def prob(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        z = np.concatenate([a, b], axis=1) @ w1 + b1
        z = np.where(z >= 0.0, z, ATTENTION_SLOPE * z)
        logit = z @ w2 + b2
        p = 1.0 / (1.0 + np.exp(-logit))
        return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)

    p_pos = prob(H[idx[:, 0]], H[idx[:, 1]])
    p_neg = prob(H[idx[:, 0]], H[idx[:, 2]])
    return float(-(np.log(p_pos) + np.log(1.0 - p_neg)).mean())


def embed(g: ProvenanceGraph, params: ModelParams) -> OutputEmbeddings:
    """Inference-time embeddings: encoder on unmasked initial features."""
    return encode(g, np.asarray(g.node_features, dtype=np.float64), params)


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------

def _training_graph(gt: _GraphTensors, params: ModelParams, masked: np.ndarray,
                    samples: Sequence[tuple[int, int, int]],
                    loss_scale: float) -> tuple[ad.ExprGraph, int]:
    expr = ad.ExprGraph()
    P = _ParamRefs(expr, params)
    input_ref = (_masked_input_refs(expr, P, gt, masked)
                 if len(masked) else expr.const(gt.x))
    h_ref = _encoder_refs(expr, P, gt, input_ref)
    loss_ref = -1
    if len(masked):
        _, floss_ref = _decoder_refs(expr, P, gt, h_ref, masked, loss_scale)
        loss_ref = floss_ref
    if samples:
        sloss_ref = _structure_refs(expr, P, h_ref, samples, gt.n)
        loss_ref = expr.add(loss_ref, sloss_ref) if loss_ref >= 0 else sloss_ref
    if loss_ref < 0:
        raise ValidationError("graph produced neither loss term; too few nodes")
    return expr, loss_ref


class _Adam:
    """Adam with decoupled weight decay; update order is name-sorted."""

    def __init__(self, params: ModelParams, lr: float, weight_decay: float):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.t
        bc2 = 1.0 - ADAM_BETA2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            p = self.params.tensors[name]
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
            p -= self.lr * update
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p


def train(graphs: Sequence[ProvenanceGraph], cfg: TrainConfig,
          params: ModelParams | None = None,
          rng: np.random.Generator | None = None) -> tuple[ModelParams, list[float]]:
    """Train on benign graphs; returns final params and per-epoch mean loss.

    Passing ``params`` continues training existing weights (used by the
    adaption path); otherwise weights are freshly initialized from the seed.
    """
    cfg.validate()
    if not graphs:
        raise ValidationError("training needs at least one graph")
    for g in graphs:
        if g.num_nodes < 2:
            raise ValidationError(f"batch {g.batch_id!r} has fewer than 2 nodes")
    if params is None:
        params = ModelParams.init(cfg)
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=[cfg.seed, 1]))
    optimizer = _Adam(params, cfg.learning_rate, cfg.weight_decay)
    tensors_cache = {id(g): _graph_tensors(g, params.reverse_messages) for g in graphs}
    trace: list[float] = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(graphs))
        losses = np.empty(len(order))
        for pos, gi in enumerate(order):
            g = graphs[int(gi)]
            gt = tensors_cache[id(g)]
            count = int(round(cfg.mask_rate * gt.n))
            masked = np.sort(rng.permutation(gt.n)[:count])
            samples, _ = sample_structure(g, masked, rng)
            expr, loss_ref = _training_graph(gt, params, masked, samples, cfg.loss_scale)
            try:
                loss = float(ad.evaluate(expr, loss_ref)[0, 0])
            except NonFiniteError as exc:
                raise DivergenceError(f"loss diverged on batch {g.batch_id!r}: {exc}") from exc
            grads = ad.gradients(expr, loss_ref)
            optimizer.step(grads)
            losses[pos] = loss
        trace.append(float(losses.mean()))
    return params, trace


# ----------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------

def save_checkpoint(path: str, params: ModelParams, cfg: TrainConfig,
                    vocabulary_ref: str | None = None) -> None:
    write_json(path, {
        "format_version": 1,
        "config": cfg.to_dict(),
        "vocabulary_ref": vocabulary_ref,
        "tensors": {k: v.tolist() for k, v in params.tensors.items()},
    })


def load_checkpoint(path: str) -> tuple[ModelParams, TrainConfig, str | None]:
    doc = read_json(path)
    cfg = TrainConfig.from_dict(doc["config"])
    tensors = {k: lists_to_array(v) for k, v in doc["tensors"].items()}
    params = ModelParams(cfg.hidden_dim, cfg.encoder_layers, tensors,
                         reverse_messages=cfg.reverse_messages)
    return params, cfg, doc.get("vocabulary_ref")
