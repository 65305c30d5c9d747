"""Strategies for combining the token encoder with the message passer.

Seven wirings are selectable: the two single-model baselines, node- and
graph-level contrastive supervision of the token encoder, late fusion of
the two graph embeddings, and the two joint fusions (message-passer
states injected into the encoder input, or encoder token outputs injected
into every message-passing step). Contrastive negatives come from seeded
within-graph derangements by default; cross-graph sampling sits behind a
flag.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, constant, parameter
from .gnn import GnnConfig, GraphBatch, build_gnn
from .lm import EncoderConfig, PredictionHead, SmilesEncoder, xavier

STRATEGIES = (
    "lm-baseline",
    "mpnn-baseline",
    "contrast-node",
    "contrast-graph",
    "late-fusion",
    "mpnn2lm",
    "lm2mpnn",
)
FUSION_OPS = ("sum", "max", "concat", "gate")


@dataclass
class ContrastConfig:
    margin: float = 1.0
    norm_p: int = 2
    alpha: float = 0.1        # node-level regularization weight
    alpha_graph: float = 0.1  # graph-level regularization weight
    triples_per_chunk: int | None = None  # None = one chunk of all N triples

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.alpha < 0 or self.alpha_graph < 0:
            raise ValueError("regularization weights must be >= 0")


@dataclass
class EncodedMolecule:
    """One record, fully preprocessed for training."""

    graph: object
    tokens: object
    label: float


@dataclass
class TripleBatch:
    """Row indices defining (anchor, positive, negative) triples.

    anchor_idx indexes both the anchor matrix and the positive matrix;
    neg_idx indexes the positive matrix. skipped counts nodes for which no
    valid negative existed.
    """

    anchor_idx: np.ndarray
    neg_idx: np.ndarray
    skipped: int = 0

    def __len__(self):
        return len(self.anchor_idx)

    def materialize(self, anchors, positives):
        """Concrete (a, p, n) vector triples, for oracle comparisons."""
        return [
            (anchors[i], positives[i], positives[j])
            for i, j in zip(self.anchor_idx, self.neg_idx)
        ]


def derangement(n, rng):
    """Uniform fixed-point-free permutation of range(n) via rejection."""
    if n < 2:
        raise ValueError("derangements need n >= 2")
    while True:
        perm = rng.permutation(n)
        if not (perm == np.arange(n)).any():
            return perm


def build_triples(lm_nodes, mpnn_nodes, offsets, seed, cross_graph=False):
    """Per-node triples: anchors from the encoder, positives from the
    message passer, negatives from a seeded derangement.

    Within-graph mode deranges each graph's node indices; single-node
    graphs borrow a uniform node from another graph (or are skipped and
    counted when the batch offers none). Cross-graph mode deranges the
    whole batch's node set at once.
    """
    rows_a = lm_nodes.shape[0] if hasattr(lm_nodes, "shape") else len(lm_nodes)
    rows_p = mpnn_nodes.shape[0] if hasattr(mpnn_nodes, "shape") else len(mpnn_nodes)
    if rows_a != rows_p:
        raise ValueError(
            f"anchor rows {rows_a} != positive rows {rows_p}"
        )
    offsets = np.asarray(offsets, dtype=np.int64)
    if offsets[-1] != rows_a:
        raise ValueError("graph boundaries do not cover the node rows")
    rng = np.random.default_rng(seed)
    total = int(offsets[-1])
    if cross_graph:
        if total < 2:
            return TripleBatch(np.empty(0, np.int64), np.empty(0, np.int64), 1)
        perm = derangement(total, rng)
        return TripleBatch(np.arange(total, dtype=np.int64), perm.astype(np.int64))
    anchor = []
    neg = []
    skipped = 0
    for g in range(len(offsets) - 1):
        lo, hi = int(offsets[g]), int(offsets[g + 1])
        size = hi - lo
        if size >= 2:
            perm = derangement(size, rng)
            anchor.extend(range(lo, hi))
            neg.extend(lo + perm)
        else:
            outside = total - size
            if outside == 0:
                skipped += 1
                continue
            pick = int(rng.integers(0, outside))
            if pick >= lo:
                pick += size
            anchor.append(lo)
            neg.append(pick)
    return TripleBatch(
        np.asarray(anchor, dtype=np.int64), np.asarray(neg, dtype=np.int64), skipped
    )


def triplet_loss(tape, anchors, positives, triples, cfg):
    """Sum over triples of max(||a-p||_2 - ||a-n||_2 + margin, 0).

    The chunked double-sum formulation (chunks of cfg.triples_per_chunk)
    is algebraically identical to this flat sum for any chunk size, so the
    flat sum is what runs.
    """
    if len(triples) == 0:
        return constant(np.asarray(0.0))
    a = tape.apply("gather-rows", anchors, indices=triples.anchor_idx)
    p = tape.apply("gather-rows", positives, indices=triples.anchor_idx)
    n = tape.apply("gather-rows", positives, indices=triples.neg_idx)
    d_ap = tape.apply("p-norm-of-difference", a, p, p=cfg.norm_p)
    d_an = tape.apply("p-norm-of-difference", a, n, p=cfg.norm_p)
    hinge = tape.apply(
        "relu",
        tape.apply(
            "add", tape.apply("subtract", d_ap, d_an), constant(cfg.margin)
        ),
    )
    return tape.apply("sum-over-rows", hinge)


def fuse(tape, h1, h2, op, gate_params=None):
    """Combine two same-shape embeddings: sum, max, concat, or gate.

    The gate is a highway-style convex mix g * h1 + (1 - g) * h2 with
    g = sigmoid([h1 || h2] W_g + b_g).
    """
    if h1.shape != h2.shape:
        raise ValueError(f"fuse: shapes {h1.shape} and {h2.shape} differ")
    if op == "sum":
        return tape.apply("add", h1, h2)
    if op == "max":
        return tape.apply("elementwise-max", h1, h2)
    if op == "concat":
        return tape.apply("concat-last-axis", h1, h2)
    if op == "gate":
        if gate_params is None:
            raise ValueError("gate fusion requires gate parameters")
        w, b = gate_params
        joint = tape.apply("concat-last-axis", h1, h2)
        g = tape.apply(
            "sigmoid",
            tape.apply("broadcast-add-bias", tape.apply("matmul", joint, w), b),
        )
        keep = tape.apply("subtract", constant(1.0), g)
        return tape.apply(
            "add", tape.apply("multiply", g, h1), tape.apply("multiply", keep, h2)
        )
    raise ValueError(f"unknown fusion op '{op}'")


class IntegratedModel:
    """Bundles the components one strategy needs and runs its forward.

    Component initialization draws from per-component seeded streams, so
    two models built with the same seed share bitwise-identical weights
    for the components they have in common regardless of strategy.
    """

    def __init__(
        self,
        strategy,
        vocab_size,
        seed=0,
        encoder_config=None,
        gnn_config=None,
        fusion="sum",
        contrast=None,
        task_kind="regression",
        frozen_mpnn=False,
        cross_graph_negatives=False,
    ):
        if strategy not in STRATEGIES:
            raise ValueError(
                f"unknown strategy '{strategy}'; choose from {STRATEGIES}"
            )
        if fusion not in FUSION_OPS:
            raise ValueError(f"unknown fusion op '{fusion}'; choose from {FUSION_OPS}")
        self.strategy = strategy
        self.fusion = fusion
        self.contrast = contrast or ContrastConfig()
        self.task_kind = task_kind
        self.frozen_mpnn = frozen_mpnn
        self.cross_graph_negatives = cross_graph_negatives
        self.encoder_config = encoder_config or EncoderConfig(vocab_size=vocab_size)
        self.gnn_config = gnn_config or GnnConfig()
        d = self.encoder_config.hidden_dim
        if self.gnn_config.hidden_dim != d:
            raise ValueError("encoder and gnn hidden dims must agree")

        self.encoder = None
        self.gnn = None
        self.gate_w = None
        self.gate_b = None
        self.mpnn2lm_proj = None

        if strategy != "mpnn-baseline":
            self.encoder = SmilesEncoder(
                self.encoder_config, np.random.default_rng([seed, 0])
            )
        if strategy != "lm-baseline":
            cell_width = 2 * d if (strategy == "lm2mpnn" and fusion == "concat") else d
            if strategy == "lm2mpnn" and self.gnn_config.variant != "mpnn":
                raise ValueError("lm2mpnn requires the mpnn variant")
            self.gnn = build_gnn(
                self.gnn_config, np.random.default_rng([seed, 1]),
                cell_width=cell_width,
            )
        head_width = 2 * d if (strategy == "late-fusion" and fusion == "concat") else d
        self.head = PredictionHead(
            head_width, d, np.random.default_rng([seed, 2])
        )
        rng_fuse = np.random.default_rng([seed, 3])
        if fusion == "gate" and strategy in ("late-fusion", "mpnn2lm", "lm2mpnn"):
            self.gate_w = parameter(xavier(rng_fuse, 2 * d, d), "fuse.gate_w")
            self.gate_b = parameter(np.zeros(d), "fuse.gate_b")
        if strategy == "mpnn2lm" and fusion == "concat":
            self.mpnn2lm_proj = parameter(xavier(rng_fuse, 2 * d, d), "fuse.proj")

    # -- plumbing ----------------------------------------------------------

    @property
    def gate_params(self):
        return (self.gate_w, self.gate_b) if self.gate_w is not None else None

    def parameters(self):
        params = []
        if self.encoder is not None:
            params.extend(self.encoder.parameters())
        if self.gnn is not None:
            params.extend(self.gnn.parameters())
        params.extend(self.head.parameters())
        if self.gate_w is not None:
            params.extend([self.gate_w, self.gate_b])
        if self.mpnn2lm_proj is not None:
            params.append(self.mpnn2lm_proj)
        return params

    def _lm_outputs(self, tape, mols, want_nodes):
        """Per-molecule encoder passes; stacked CLS rows and node rows."""
        cls_rows = []
        node_rows = []
        for mol in mols:
            e_out = self.encoder.forward(tape, mol.tokens.token_ids)
            if want_nodes:
                nodes, graph_emb = self.encoder.extract(
                    tape, e_out, mol.tokens.atom_token_positions
                )
                node_rows.append(nodes)
            else:
                graph_emb = tape.apply("gather-rows", e_out, indices=np.array([0]))
            cls_rows.append(graph_emb)
        stacked_cls = tape.apply("concat-rows", *cls_rows)
        stacked_nodes = (
            tape.apply("concat-rows", *node_rows) if want_nodes else None
        )
        return stacked_cls, stacked_nodes

    def _mpnn_readout(self, tape, gb):
        states = self.gnn.run(tape, gb)
        return self.gnn.readout(tape, states, gb), states

    def _prediction_loss(self, tape, preds, labels):
        target = constant(labels.reshape(-1, 1))
        kind = (
            "squared-error"
            if self.task_kind == "regression"
            else "binary-cross-entropy-with-logit"
        )
        return tape.apply(kind, preds, target)

    def _contrast_total(self, tape, pred_loss, trip_loss, weight):
        scaled = tape.apply("multiply", constant(weight), trip_loss)
        return tape.apply("add", pred_loss, scaled)

    # -- strategy forwards --------------------------------------------------

    def _forward_mpnn2lm(self, tape, mols, gb, mpnn_states):
        rows = []
        base = 0
        for mol in mols:
            n_atoms = mol.graph.num_atoms
            seq_len = len(mol.tokens.token_ids)
            block = tape.apply(
                "gather-rows", mpnn_states,
                indices=np.arange(base, base + n_atoms, dtype=np.int64),
            )
            injected = tape.apply(
                "scatter-add-rows", block,
                indices=np.asarray(mol.tokens.atom_token_positions, dtype=np.int64),
                num_rows=seq_len,
            )
            e_in = self.encoder.embed(tape, mol.tokens.token_ids)
            fused = fuse(tape, e_in, injected, self.fusion, self.gate_params)
            if self.fusion == "concat":
                fused = tape.apply("matmul", fused, self.mpnn2lm_proj)
            e_out = self.encoder.encode(tape, fused)
            rows.append(tape.apply("mean-over-rows", e_out))
            base += n_atoms
        pooled = tape.apply("concat-rows", *rows)
        return self.head.forward(tape, pooled)

    def _forward_lm2mpnn(self, tape, gb, lm_node_rows):
        def inject(t, h):
            return fuse(t, h, lm_node_rows, self.fusion, self.gate_params)

        states = self.gnn.run(tape, gb, fuse_fn=inject)
        pooled = self.gnn.readout(tape, states, gb)
        return self.head.forward(tape, pooled)

    def forward_batch(self, tape, mols, batch_seed=0, predict_only=False):
        """Loss, raw predictions, and counters for one batch.

        Regression predictions are raw head outputs; classification
        predictions are logits (consumers apply the logistic function).
        """
        labels = np.asarray([m.label for m in mols], dtype=np.float64)
        gb = GraphBatch.from_graphs([m.graph for m in mols]) \
            if self.strategy != "lm-baseline" else None
        info = {"skipped_triples": 0, "contrast_skipped": 0}

        if self.strategy == "lm-baseline":
            cls_rows, _ = self._lm_outputs(tape, mols, want_nodes=False)
            preds = self.head.forward(tape, cls_rows)
            return self._prediction_loss(tape, preds, labels), preds, info

        if self.strategy == "mpnn-baseline":
            pooled, _ = self._mpnn_readout(tape, gb)
            preds = self.head.forward(tape, pooled)
            return self._prediction_loss(tape, preds, labels), preds, info

        if self.strategy == "contrast-node":
            _, lm_nodes = self._lm_outputs(tape, mols, want_nodes=True)
            per_graph = tape.apply("segment-mean", lm_nodes, offsets=gb.offsets)
            preds = self.head.forward(tape, per_graph)
            if predict_only:
                return None, preds, info
            pred_loss = self._prediction_loss(tape, preds, labels)
            mpnn_states = self.gnn.run(tape, gb)
            if self.frozen_mpnn:
                mpnn_states = tape.detach(mpnn_states)
            triples = build_triples(
                lm_nodes, mpnn_states, gb.offsets, batch_seed,
                cross_graph=self.cross_graph_negatives,
            )
            info["skipped_triples"] = triples.skipped
            trip = triplet_loss(tape, lm_nodes, mpnn_states, triples, self.contrast)
            total = self._contrast_total(tape, pred_loss, trip, self.contrast.alpha)
            return total, preds, info

        if self.strategy == "contrast-graph":
            cls_rows, _ = self._lm_outputs(tape, mols, want_nodes=False)
            preds = self.head.forward(tape, cls_rows)
            if predict_only:
                return None, preds, info
            pred_loss = self._prediction_loss(tape, preds, labels)
            pooled, _ = self._mpnn_readout(tape, gb)
            if self.frozen_mpnn:
                pooled = tape.detach(pooled)
            if len(mols) < 2:
                info["contrast_skipped"] = 1
                return pred_loss, preds, info
            perm = derangement(len(mols), np.random.default_rng(batch_seed))
            triples = TripleBatch(
                np.arange(len(mols), dtype=np.int64), perm.astype(np.int64)
            )
            trip = triplet_loss(tape, cls_rows, pooled, triples, self.contrast)
            total = self._contrast_total(
                tape, pred_loss, trip, self.contrast.alpha_graph
            )
            return total, preds, info

        if self.strategy == "late-fusion":
            cls_rows, _ = self._lm_outputs(tape, mols, want_nodes=False)
            pooled, _ = self._mpnn_readout(tape, gb)
            fused = fuse(tape, cls_rows, pooled, self.fusion, self.gate_params)
            preds = self.head.forward(tape, fused)
            return self._prediction_loss(tape, preds, labels), preds, info

        if self.strategy == "mpnn2lm":
            mpnn_states = self.gnn.run(tape, gb)
            preds = self._forward_mpnn2lm(tape, mols, gb, mpnn_states)
            return self._prediction_loss(tape, preds, labels), preds, info

        # lm2mpnn
        node_rows = []
        for mol in mols:
            e_out = self.encoder.forward(tape, mol.tokens.token_ids)
            nodes, _ = self.encoder.extract(
                tape, e_out, mol.tokens.atom_token_positions
            )
            node_rows.append(nodes)
        lm_node_rows = tape.apply("concat-rows", *node_rows)
        preds = self._forward_lm2mpnn(tape, gb, lm_node_rows)
        return self._prediction_loss(tape, preds, labels), preds, info

    def predict(self, mols):
        """Raw predictions under a non-recording tape."""
        tape = Tape(grad_enabled=False)
        _, preds, _ = self.forward_batch(tape, mols, batch_seed=0, predict_only=True)
        return preds.values.reshape(-1)

    def state_dict(self):
        return {p.name: p.values.copy() for p in self.parameters()}

    def load_state_dict(self, state):
        for p in self.parameters():
            p.values[:] = state[p.name]
