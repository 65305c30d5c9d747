"""Edge-conditioned message passing over block-diagonal molecule batches.

Messages flow in both orientations of every bond: a per-edge matrix built
from the bond features multiplies the neighbor state, and contributions
are scatter-added per destination node. The node update is a gated
recurrent cell (a plain two-layer perceptron is available behind
``update_kind`` for ablations). Batches concatenate graphs with boundary
offsets instead of padding; readout is the mean over each graph's block.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import constant, parameter
from .lm import xavier
from .smiles import EDGE_FEATURE_DIM, NODE_FEATURE_DIM


@dataclass
class GnnConfig:
    hidden_dim: int = 64
    message_steps: int = 3
    edge_feature_dim: int = EDGE_FEATURE_DIM
    variant: str = "mpnn"
    graphconv_layers: int = 2
    update_kind: str = "gru"
    edge_hidden: int = 64

    def __post_init__(self):
        if self.variant not in ("mpnn", "graphconv"):
            raise ValueError(f"unknown gnn variant '{self.variant}'")
        if self.update_kind not in ("gru", "mlp"):
            raise ValueError(f"unknown update kind '{self.update_kind}'")
        if self.message_steps < 0:
            raise ValueError("message_steps must be >= 0")


class GraphBatch:
    """Block-diagonal concatenation of molecular graphs.

    Every bond appears twice in the directed edge arrays (u->v and v->u),
    sharing its feature row.
    """

    def __init__(self, node_features, edge_src, edge_dst, edge_features, offsets):
        self.node_features = node_features
        self.edge_src = edge_src
        self.edge_dst = edge_dst
        self.edge_features = edge_features
        self.offsets = offsets

    @property
    def num_nodes(self):
        return self.node_features.shape[0]

    @property
    def num_graphs(self):
        return len(self.offsets) - 1

    @classmethod
    def from_graphs(cls, graphs):
        if not graphs:
            raise ValueError("empty graph batch")
        feats, src, dst, efeats = [], [], [], []
        offsets = [0]
        base = 0
        for g in graphs:
            feats.append(g.node_features)
            for j, b in enumerate(g.bonds):
                src.extend((base + b.u, base + b.v))
                dst.extend((base + b.v, base + b.u))
                efeats.extend((g.edge_features[j], g.edge_features[j]))
            base += g.num_atoms
            offsets.append(base)
        node_features = np.concatenate(feats, axis=0)
        edge_features = (
            np.asarray(efeats, dtype=np.float64)
            if efeats
            else np.zeros((0, EDGE_FEATURE_DIM))
        )
        return cls(
            node_features,
            np.asarray(src, dtype=np.int64),
            np.asarray(dst, dtype=np.int64),
            edge_features,
            np.asarray(offsets, dtype=np.int64),
        )


class Mpnn:
    def __init__(self, config, rng, cell_width=None):
        self.config = config
        d = config.hidden_dim
        w = cell_width or d
        self.cell_width = w
        eh = config.edge_hidden
        ef = config.edge_feature_dim
        self.w_in = parameter(xavier(rng, NODE_FEATURE_DIM, d), "gnn.w_in")
        self.b_in = parameter(np.zeros(d), "gnn.b_in")
        self.we1 = parameter(xavier(rng, ef, eh), "gnn.edge.w1")
        self.be1 = parameter(np.zeros(eh), "gnn.edge.b1")
        self.we2 = parameter(xavier(rng, eh, w * w), "gnn.edge.w2")
        self.be2 = parameter(np.zeros(w * w), "gnn.edge.b2")
        if config.update_kind == "gru":
            self.wz = parameter(xavier(rng, 2 * w, w), "gnn.cell.wz")
            self.bz = parameter(np.zeros(w), "gnn.cell.bz")
            self.wr = parameter(xavier(rng, 2 * w, w), "gnn.cell.wr")
            self.br = parameter(np.zeros(w), "gnn.cell.br")
            self.wm = parameter(xavier(rng, w, w), "gnn.cell.wm")
            self.wh = parameter(xavier(rng, w, w), "gnn.cell.wh")
            self._cell = [self.wz, self.bz, self.wr, self.br, self.wm, self.wh]
        else:
            self.wu1 = parameter(xavier(rng, 2 * w, w), "gnn.cell.wu1")
            self.bu1 = parameter(np.zeros(w), "gnn.cell.bu1")
            self.wu2 = parameter(xavier(rng, w, w), "gnn.cell.wu2")
            self.bu2 = parameter(np.zeros(w), "gnn.cell.bu2")
            self._cell = [self.wu1, self.bu1, self.wu2, self.bu2]
        if w != d:
            self.w_proj = parameter(xavier(rng, w, d), "gnn.w_proj")
            self.b_proj = parameter(np.zeros(d), "gnn.b_proj")
        else:
            self.w_proj = None
            self.b_proj = None

    def parameters(self):
        params = [self.w_in, self.b_in, self.we1, self.be1, self.we2, self.be2]
        params.extend(self._cell)
        if self.w_proj is not None:
            params.extend([self.w_proj, self.b_proj])
        return params

    def initial_states(self, tape, batch):
        x = constant(batch.node_features)
        return tape.apply(
            "broadcast-add-bias", tape.apply("matmul", x, self.w_in), self.b_in
        )

    def _edge_mlp(self, tape, ef):
        if ef.shape[-1] != self.config.edge_feature_dim:
            raise ValueError(
                f"edge features of width {ef.shape[-1]}, expected "
                f"{self.config.edge_feature_dim}"
            )
        hidden = tape.apply(
            "relu",
            tape.apply(
                "broadcast-add-bias", tape.apply("matmul", ef, self.we1), self.be1
            ),
        )
        return tape.apply(
            "broadcast-add-bias", tape.apply("matmul", hidden, self.we2), self.be2
        )

    def edge_matrices(self, tape, batch, edge_features=None):
        """Per-edge (w x w) matrices, flattened to (num_edges x w*w).

        Bond feature rows are near-categorical, so the perceptron runs on
        the unique rows and the results are gathered back per edge (same
        values, far fewer flops).
        """
        gather_back = None
        if edge_features is None:
            rows = batch.edge_features
            unique, inverse = np.unique(rows, axis=0, return_inverse=True)
            if len(unique) < len(rows):
                gather_back = inverse.reshape(-1).astype(np.int64)
                rows = unique
            ef = constant(rows)
        else:
            ef = edge_features
        a_flat = self._edge_mlp(tape, ef)
        if gather_back is not None:
            a_flat = tape.apply("gather-rows", a_flat, indices=gather_back)
        return a_flat

    def _message_operator(self, tape, batch):
        """message_fn(tape, states) with the edge network evaluated once
        per unique bond feature row and applied per type via BLAS."""
        unique, inverse = np.unique(
            batch.edge_features, axis=0, return_inverse=True
        )
        inverse = inverse.reshape(-1)
        a_types = self._edge_mlp(tape, constant(unique))
        order = np.argsort(inverse, kind="stable").astype(np.int64)
        counts = np.bincount(inverse, minlength=len(unique))
        bounds = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        src, dst = batch.edge_src, batch.edge_dst

        def message_fn(t, states):
            return t.apply(
                "typed-edge-message", a_types, states,
                src=src, dst=dst, order=order, bounds=bounds,
            )

        return message_fn

    def message(self, tape, states, a_flat, batch):
        return tape.apply(
            "edge-message", a_flat, states,
            src=batch.edge_src, dst=batch.edge_dst,
        )

    def update(self, tape, states, messages):
        """Gated update: h' = (1 - z) * h + z * tanh(Wm m + Wh (r * h))."""
        if self.config.update_kind == "mlp":
            joint = tape.apply("concat-last-axis", states, messages)
            hidden = tape.apply(
                "relu",
                tape.apply(
                    "broadcast-add-bias", tape.apply("matmul", joint, self.wu1),
                    self.bu1,
                ),
            )
            return tape.apply(
                "broadcast-add-bias", tape.apply("matmul", hidden, self.wu2),
                self.bu2,
            )
        joint = tape.apply("concat-last-axis", states, messages)
        z = tape.apply(
            "sigmoid",
            tape.apply(
                "broadcast-add-bias", tape.apply("matmul", joint, self.wz), self.bz
            ),
        )
        r = tape.apply(
            "sigmoid",
            tape.apply(
                "broadcast-add-bias", tape.apply("matmul", joint, self.wr), self.br
            ),
        )
        gated = tape.apply("multiply", r, states)
        cand = tape.apply(
            "tanh",
            tape.apply(
                "add",
                tape.apply("matmul", messages, self.wm),
                tape.apply("matmul", gated, self.wh),
            ),
        )
        keep = tape.apply("subtract", constant(1.0), z)
        return tape.apply(
            "add", tape.apply("multiply", keep, states), tape.apply("multiply", z, cand)
        )

    def _project(self, tape, states):
        if self.w_proj is None:
            return states
        return tape.apply(
            "broadcast-add-bias", tape.apply("matmul", states, self.w_proj),
            self.b_proj,
        )

    def run(self, tape, batch, steps=None, fuse_fn=None):
        """T message-passing steps; fuse_fn (if given) injects aligned
        cross-model rows into h before both aggregation and update."""
        steps = self.config.message_steps if steps is None else steps
        h = self.initial_states(tape, batch)
        message_fn = (
            self._message_operator(tape, batch) if batch.edge_src.size else None
        )
        for _ in range(steps):
            fused = fuse_fn(tape, h) if fuse_fn is not None else h
            if message_fn is not None:
                m = message_fn(tape, fused)
            else:
                m = constant(np.zeros((batch.num_nodes, self.cell_width)))
            h = self._project(tape, self.update(tape, fused, m))
        return h

    def readout(self, tape, states, batch):
        return tape.apply("segment-mean", states, offsets=batch.offsets)


class GraphConv:
    """Two stacked h' = relu(W_self h + W_nbr sum_neighbors h_u + b) layers."""

    def __init__(self, config, rng):
        self.config = config
        d = config.hidden_dim
        widths = [NODE_FEATURE_DIM] + [d] * config.graphconv_layers
        self.layers = []
        for n in range(config.graphconv_layers):
            self.layers.append({
                "w_self": parameter(xavier(rng, widths[n], d), f"gc.{n}.w_self"),
                "w_nbr": parameter(xavier(rng, widths[n], d), f"gc.{n}.w_nbr"),
                "b": parameter(np.zeros(d), f"gc.{n}.b"),
            })

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend([layer["w_self"], layer["w_nbr"], layer["b"]])
        return out

    def layer_forward(self, tape, states, batch, layer):
        own = tape.apply("matmul", states, layer["w_self"])
        if batch.edge_src.size:
            pulled = tape.apply("gather-rows", states, indices=batch.edge_src)
            summed = tape.apply(
                "scatter-add-rows", pulled,
                indices=batch.edge_dst, num_rows=batch.num_nodes,
            )
            own = tape.apply("add", own, tape.apply("matmul", summed, layer["w_nbr"]))
        return tape.apply("relu", tape.apply("broadcast-add-bias", own, layer["b"]))

    def run(self, tape, batch, steps=None, fuse_fn=None):
        if fuse_fn is not None:
            raise ValueError("graphconv does not support message-level fusion")
        h = constant(batch.node_features)
        for layer in self.layers:
            h = self.layer_forward(tape, h, batch, layer)
        return h

    def readout(self, tape, states, batch):
        return tape.apply("segment-mean", states, offsets=batch.offsets)


def build_gnn(config, rng, cell_width=None):
    if config.variant == "graphconv":
        return GraphConv(config, rng)
    return Mpnn(config, rng, cell_width=cell_width)
