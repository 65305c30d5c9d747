"""Transformer encoder over SMILES tokens with an optional MLM stage.

Produces the three outputs the integration strategies consume: per-atom
node embeddings (rows of the final hidden state at atom token positions),
a sequence-level embedding (the CLS row), and a property prediction.
Blocks are post-layer-norm: x = LN(x + attention(x)); x = LN(x + ffn(x)).
Attention logits at masked key positions are set to -inf, which makes the
real-token outputs independent of padding.
"""

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, backward, constant, parameter
from .optim import AdamState, adam_step
from .smiles import Vocabulary


@dataclass
class EncoderConfig:
    vocab_size: int
    hidden_dim: int = 64
    num_layers: int = 3
    num_heads: int = 4
    ffn_dim: int = 256
    max_len: int = 256

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by "
                f"num_heads {self.num_heads}"
            )


def xavier(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class SmilesEncoder:
    def __init__(self, config, rng):
        self.config = config
        d = config.hidden_dim
        dk = d // config.num_heads
        self.head_dim = dk
        self.token_embedding = parameter(
            rng.normal(0.0, 0.02, size=(config.vocab_size, d)), "lm.tok_emb"
        )
        self.position_embedding = parameter(
            rng.normal(0.0, 0.02, size=(config.max_len, d)), "lm.pos_emb"
        )
        self.layers = []
        for n in range(config.num_layers):
            layer = {
                "wq": [parameter(xavier(rng, d, dk), f"lm.{n}.wq{h}")
                       for h in range(config.num_heads)],
                "wk": [parameter(xavier(rng, d, dk), f"lm.{n}.wk{h}")
                       for h in range(config.num_heads)],
                "wv": [parameter(xavier(rng, d, dk), f"lm.{n}.wv{h}")
                       for h in range(config.num_heads)],
                "wo": parameter(xavier(rng, d, d), f"lm.{n}.wo"),
                "bo": parameter(np.zeros(d), f"lm.{n}.bo"),
                "ln1_g": parameter(np.ones(d), f"lm.{n}.ln1_g"),
                "ln1_b": parameter(np.zeros(d), f"lm.{n}.ln1_b"),
                "ln2_g": parameter(np.ones(d), f"lm.{n}.ln2_g"),
                "ln2_b": parameter(np.zeros(d), f"lm.{n}.ln2_b"),
                "w1": parameter(xavier(rng, d, config.ffn_dim), f"lm.{n}.w1"),
                "b1": parameter(np.zeros(config.ffn_dim), f"lm.{n}.b1"),
                "w2": parameter(xavier(rng, config.ffn_dim, d), f"lm.{n}.w2"),
                "b2": parameter(np.zeros(d), f"lm.{n}.b2"),
            }
            self.layers.append(layer)
        self._inv_sqrt_dk = constant(1.0 / math.sqrt(dk))

    def parameters(self):
        params = [self.token_embedding, self.position_embedding]
        for layer in self.layers:
            params.extend(layer["wq"] + layer["wk"] + layer["wv"])
            params.extend(
                layer[k]
                for k in ("wo", "bo", "ln1_g", "ln1_b", "ln2_g", "ln2_b",
                          "w1", "b1", "w2", "b2")
            )
        return params

    def embed(self, tape, token_ids, positions=None):
        """Token embedding + learned positional embedding, (seq_len x d)."""
        token_ids = np.asarray(token_ids, dtype=np.int64)
        if positions is None:
            positions = np.arange(len(token_ids), dtype=np.int64)
        if len(token_ids) > self.config.max_len:
            raise IndexError(
                f"sequence of {len(token_ids)} tokens exceeds max_len "
                f"{self.config.max_len}"
            )
        tok = tape.apply("gather-rows", self.token_embedding, indices=token_ids)
        pos = tape.apply("gather-rows", self.position_embedding, indices=positions)
        return tape.apply("add", tok, pos)

    def encode(self, tape, e_in, mask=None, collect_attention=None):
        """Stack of self-attention + feed-forward blocks; shape preserved."""
        seq_len = e_in.shape[0]
        if mask is None:
            mask = np.ones(seq_len, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (seq_len,):
            raise ValueError(f"mask length {mask.shape} != seq_len {seq_len}")
        x = e_in
        for layer in self.layers:
            heads = []
            for h in range(self.config.num_heads):
                q = tape.apply("matmul", x, layer["wq"][h])
                k = tape.apply("matmul", x, layer["wk"][h])
                v = tape.apply("matmul", x, layer["wv"][h])
                scores = tape.apply("matmul", q, tape.apply("transpose", k))
                scores = tape.apply("multiply", scores, self._inv_sqrt_dk)
                probs = tape.apply("masked-softmax", scores, mask=mask)
                if collect_attention is not None:
                    collect_attention.append(probs.values)
                heads.append(tape.apply("matmul", probs, v))
            ctx = heads[0]
            for part in heads[1:]:
                ctx = tape.apply("concat-last-axis", ctx, part)
            attn = tape.apply(
                "broadcast-add-bias", tape.apply("matmul", ctx, layer["wo"]),
                layer["bo"],
            )
            x = tape.apply(
                "layer-normalize", tape.apply("add", x, attn),
                layer["ln1_g"], layer["ln1_b"],
            )
            hidden = tape.apply(
                "relu",
                tape.apply(
                    "broadcast-add-bias", tape.apply("matmul", x, layer["w1"]),
                    layer["b1"],
                ),
            )
            ffn = tape.apply(
                "broadcast-add-bias", tape.apply("matmul", hidden, layer["w2"]),
                layer["b2"],
            )
            x = tape.apply(
                "layer-normalize", tape.apply("add", x, ffn),
                layer["ln2_g"], layer["ln2_b"],
            )
        return x

    def forward(self, tape, token_ids, mask=None, collect_attention=None):
        return self.encode(
            tape, self.embed(tape, token_ids), mask, collect_attention
        )

    def extract(self, tape, e_out, atom_token_positions):
        """(node embeddings, CLS embedding) from the final hidden state."""
        positions = np.asarray(atom_token_positions, dtype=np.int64)
        if positions.size == 0:
            raise ValueError("extract: empty atom position list")
        if (positions == 0).any():
            raise ValueError("extract: position 0 is the CLS token, not an atom")
        nodes = tape.apply("gather-rows", e_out, indices=positions)
        graph_emb = tape.apply("gather-rows", e_out, indices=np.array([0]))
        return nodes, graph_emb


class PredictionHead:
    """Two-layer perceptron (in_width -> hidden -> 1) with relu between."""

    def __init__(self, in_width, hidden, rng, name="head"):
        self.in_width = in_width
        self.w1 = parameter(xavier(rng, in_width, hidden), f"{name}.w1")
        self.b1 = parameter(np.zeros(hidden), f"{name}.b1")
        self.w2 = parameter(xavier(rng, hidden, 1), f"{name}.w2")
        self.b2 = parameter(np.zeros(1), f"{name}.b2")

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, tape, x):
        if x.shape[-1] != self.in_width:
            raise ValueError(
                f"prediction head expects width {self.in_width}, got {x.shape[-1]}"
            )
        hidden = tape.apply(
            "relu",
            tape.apply("broadcast-add-bias", tape.apply("matmul", x, self.w1), self.b1),
        )
        return tape.apply(
            "broadcast-add-bias", tape.apply("matmul", hidden, self.w2), self.b2
        )


class MlmHead:
    def __init__(self, hidden_dim, vocab_size, rng):
        self.w = parameter(xavier(rng, hidden_dim, vocab_size), "mlm.w")
        self.b = parameter(np.zeros(vocab_size), "mlm.b")

    def parameters(self):
        return [self.w, self.b]


def select_mlm_positions(sequence, mask_rate, rng):
    """Indices of non-special tokens chosen for masking (Bernoulli per token)."""
    picks = []
    for pos, tid in enumerate(sequence.token_ids):
        if tid in (Vocabulary.CLS, Vocabulary.PAD, Vocabulary.MASK, Vocabulary.UNK):
            continue
        if rng.random() < mask_rate:
            picks.append(pos)
    return picks


def mlm_pretrain_step(encoder, head, params, state, batch, mask_rate=0.15, seed=0):
    """Mask tokens, predict the originals, take one Adam step.

    Returns the scalar loss, or None when no token was maskable (the step
    is skipped).
    """
    rng = np.random.default_rng(seed)
    masked = []
    for seq in batch:
        picks = select_mlm_positions(seq, mask_rate, rng)
        if picks:
            masked.append((seq, picks))
    if not masked:
        return None
    tape = Tape()
    loss = None
    for seq, picks in masked:
        ids = np.asarray(seq.token_ids, dtype=np.int64).copy()
        targets = ids[picks]
        ids[picks] = Vocabulary.MASK
        e_out = encoder.forward(tape, ids)
        rows = tape.apply("gather-rows", e_out, indices=np.asarray(picks))
        logits = tape.apply(
            "broadcast-add-bias", tape.apply("matmul", rows, head.w), head.b
        )
        piece = tape.apply("cross-entropy-with-logits", logits, target_ids=targets)
        loss = piece if loss is None else tape.apply("add", loss, piece)
    grads = backward(loss, tape)
    full = {p.node_id: grads.get(p.node_id, np.zeros_like(p.values)) for p in params}
    adam_step(params, full, state)
    return float(loss.values)


def run_mlm_pretraining(encoder, train_sequences, epochs, batch_size, lr,
                        mask_rate, seed):
    """Self-contained MLM stage over the training split's sequences."""
    rng = np.random.default_rng(seed)
    head = MlmHead(encoder.config.hidden_dim, encoder.config.vocab_size, rng)
    params = encoder.parameters() + head.parameters()
    state = AdamState(params, lr=lr)
    losses = []
    skipped = 0
    for epoch in range(epochs):
        order = list(range(len(train_sequences)))
        np.random.default_rng(seed * 1000 + epoch).shuffle(order)
        for lo in range(0, len(order), batch_size):
            batch = [train_sequences[i] for i in order[lo:lo + batch_size]]
            loss = mlm_pretrain_step(
                encoder, head, params, state, batch, mask_rate,
                seed=seed * 100003 + epoch * 1009 + lo,
            )
            if loss is None:
                skipped += 1
            else:
                losses.append(loss)
    return losses, skipped
