"""Next-action model architectures.

Five variants share a small set of building blocks:

- ``galt``: transformer text encoder over the current utterance, fused with a
  mean-pooled embedding of the recent action history.
- ``gnn_lt``: the same encoder fused with a graph-attention head that walks the
  action history as a path graph, with order / slot-fill / utterance-summary
  edge features.
- ``lt_dialogue_history``: encoder over concatenated recent utterances plus the
  current one, linear classifier, no graph channel.
- ``lt_action_history``: encoder over the current utterance with recent action
  tokens appended in the text channel, linear classifier.
- ``gnn_only``: the graph-attention head alone with a linear classifier; it
  never reads the utterance text.

All parameters are float64 tensors registered under stable dotted names, so
checkpoints are byte-reproducible and can be walked for exact parameter
counts. Models are immutable during inference: prediction never mutates
parameters, so one loaded model can serve concurrent requests; training owns
the parameters exclusively.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from nap.errors import (CheckpointError, ConfigError, ShapeError,
                        SlotSchemaError, UnknownActionError)
from nap.tensor.core import Tensor, no_grad
from nap.tensor.io import load_params, save_params, assign_params
from nap.tensor.ops import (add, concat, dropout, embedding_lookup, gelu,
                            layer_norm, leaky_relu, matmul, mean_pool, mul,
                            multi_head_attention, permute, reshape, slice_axis,
                            softmax)
from nap.tokenizer import Vocab, encode_turn

GALT = "galt"
GNN_LT = "gnn_lt"
LT_DIALOGUE_HISTORY = "lt_dialogue_history"
LT_ACTION_HISTORY = "lt_action_history"
GNN_ONLY = "gnn_only"
VARIANTS = (GALT, GNN_LT, LT_DIALOGUE_HISTORY, LT_ACTION_HISTORY, GNN_ONLY)

INIT_STD = 0.02
SIDECAR_FORMAT = "nap-model"
SIDECAR_VERSION = 1


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class EncoderConfig:
    """Dimensions of the transformer text encoder."""

    vocab_size: int
    n_layers: int = 4
    n_heads: int = 4
    hidden_dim: int = 128
    ffn_dim: int = 512
    max_len: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        for field in ("vocab_size", "n_layers", "n_heads", "hidden_dim", "ffn_dim", "max_len"):
            value = getattr(self, field)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"encoder {field} must be a positive integer, got {value!r}")
        if self.hidden_dim % self.n_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} is not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class ModelConfig:
    """Full model specification: variant, encoder dims, and graph/fusion dims."""

    variant: str
    n_actions: int
    n_slots: int
    encoder: EncoderConfig
    graph_dim: int = 128
    fusion_dim: int = 128
    history_cap: int = 32
    n_gnn_layers: int = 2
    gnn_heads: int = 2
    gnn_window: Optional[int] = None
    dialogue_window: int = 3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown model variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.n_actions < 2:
            raise ConfigError(f"n_actions must be at least 2, got {self.n_actions}")
        if self.n_slots < 0:
            raise ConfigError(f"n_slots must be nonnegative, got {self.n_slots}")
        for field in ("graph_dim", "fusion_dim", "history_cap", "n_gnn_layers", "gnn_heads"):
            value = getattr(self, field)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{field} must be a positive integer, got {value!r}")
        if self.graph_dim % self.gnn_heads != 0:
            raise ConfigError(
                f"graph_dim {self.graph_dim} is not divisible by gnn_heads {self.gnn_heads}")
        if self.gnn_window is not None and self.gnn_window < 1:
            raise ConfigError(f"gnn_window must be positive when set, got {self.gnn_window}")
        if self.dialogue_window < 0:
            raise ConfigError(f"dialogue_window must be >= 0, got {self.dialogue_window}")

    @property
    def effective_gnn_window(self) -> int:
        return self.history_cap if self.gnn_window is None else self.gnn_window

    @property
    def has_text_encoder(self) -> bool:
        return self.variant != GNN_ONLY

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["encoder"] = EncoderConfig(**data["encoder"])
        return cls(**data)


def default_config(variant: str, n_actions: int, vocab_size: int, n_slots: int,
                   **overrides) -> ModelConfig:
    """Build a ModelConfig with defaults, routing overrides to the right level."""
    encoder_fields = {f.name for f in dataclasses.fields(EncoderConfig)} - {"vocab_size"}
    encoder_kwargs = {k: overrides.pop(k) for k in list(overrides) if k in encoder_fields}
    return ModelConfig(variant=variant, n_actions=n_actions, n_slots=n_slots,
                       encoder=EncoderConfig(vocab_size=vocab_size, **encoder_kwargs),
                       **overrides)


# -- parameter bookkeeping ----------------------------------------------------------


class _Component:
    """Base for parameterized blocks: owns named float64 parameter tensors."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def _normal(self, rng: np.random.Generator, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self._register(name, rng.normal(0.0, INIT_STD, size=shape))

    def _zeros(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self._register(name, np.zeros(shape))

    def _ones(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self._register(name, np.ones(shape))

    def _register(self, name: str, values: np.ndarray) -> Tensor:
        tensor = Tensor(values, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def parameters(self) -> List[Tensor]:
        return [self._params[name] for name in sorted(self._params)]

    def param_dict(self) -> Dict[str, Tensor]:
        return dict(self._params)


def count_params(component) -> int:
    """Exact number of trainable scalars in a component, model, or tensor list."""
    params = component.parameters() if hasattr(component, "parameters") else list(component)
    return int(sum(p.size for p in params))


# -- transformer text encoder ---------------------------------------------------------


class TransformerEncoder(_Component):
    """Post-norm transformer: residual attention and feed-forward sublayers,
    each followed by layer normalization. Padding positions are hidden from
    every attention query by an additive mask whose weight underflows to 0."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator,
                 prefix: str = "encoder"):
        super().__init__()
        self.config = config
        d, ffn = config.hidden_dim, config.ffn_dim
        self.token_emb = self._normal(rng, f"{prefix}.token_emb", (config.vocab_size, d))
        self.pos_emb = self._normal(rng, f"{prefix}.pos_emb", (config.max_len, d))
        self.layers = []
        for i in range(config.n_layers):
            p = f"{prefix}.layer{i}"
            self.layers.append({
                "wq": self._normal(rng, f"{p}.wq", (d, d)),
                "bq": self._zeros(f"{p}.bq", (d,)),
                "wk": self._normal(rng, f"{p}.wk", (d, d)),
                "bk": self._zeros(f"{p}.bk", (d,)),
                "wv": self._normal(rng, f"{p}.wv", (d, d)),
                "bv": self._zeros(f"{p}.bv", (d,)),
                "wo": self._normal(rng, f"{p}.wo", (d, d)),
                "bo": self._zeros(f"{p}.bo", (d,)),
                "ln1_gain": self._ones(f"{p}.ln1_gain", (d,)),
                "ln1_bias": self._zeros(f"{p}.ln1_bias", (d,)),
                "ffn_w1": self._normal(rng, f"{p}.ffn_w1", (d, ffn)),
                "ffn_b1": self._zeros(f"{p}.ffn_b1", (ffn,)),
                "ffn_w2": self._normal(rng, f"{p}.ffn_w2", (ffn, d)),
                "ffn_b2": self._zeros(f"{p}.ffn_b2", (d,)),
                "ln2_gain": self._ones(f"{p}.ln2_gain", (d,)),
                "ln2_bias": self._zeros(f"{p}.ln2_bias", (d,)),
            })

    def forward(self, token_ids, attn_mask, training: bool = False,
                rng: Optional[np.random.Generator] = None,
                collect: Optional[list] = None) -> Tensor:
        """Last-layer hidden states [batch, seq, hidden_dim].

        ``collect``, when a list, receives one [batch, heads, seq, seq]
        attention-weight array per layer.
        """
        ids = np.asarray(token_ids, dtype=np.int64)
        mask = np.asarray(attn_mask, dtype=np.float64)
        if ids.ndim != 2:
            raise ShapeError(f"encoder expects [batch, seq] token ids, got shape {ids.shape}")
        if mask.shape != ids.shape:
            raise ShapeError(f"attention mask shape {mask.shape} != token shape {ids.shape}")
        n_seq = ids.shape[1]
        if n_seq > self.config.max_len:
            raise ShapeError(
                f"sequence length {n_seq} exceeds encoder max_len {self.config.max_len}")
        p = self.config.dropout
        if training and p > 0.0 and rng is None:
            raise ConfigError("a training forward pass with dropout needs an rng")

        x = add(embedding_lookup(self.token_emb, ids),
                embedding_lookup(self.pos_emb, np.arange(n_seq)))
        x = dropout(x, p, training, rng)
        for layer in self.layers:
            q = add(matmul(x, layer["wq"]), layer["bq"])
            k = add(matmul(x, layer["wk"]), layer["bk"])
            v = add(matmul(x, layer["wv"]), layer["bv"])
            attn = multi_head_attention(q, k, v, mask, self.config.n_heads,
                                        return_weights=collect is not None)
            if collect is not None:
                attn, weights = attn
                collect.append(weights)
            proj = add(matmul(attn, layer["wo"]), layer["bo"])
            x = layer_norm(add(x, dropout(proj, p, training, rng)),
                           layer["ln1_gain"], layer["ln1_bias"])
            hidden = gelu(add(matmul(x, layer["ffn_w1"]), layer["ffn_b1"]))
            ff = add(matmul(hidden, layer["ffn_w2"]), layer["ffn_b2"])
            x = layer_norm(add(x, dropout(ff, p, training, rng)),
                           layer["ln2_gain"], layer["ln2_bias"])
        return x


# -- action-history heads --------------------------------------------------------------


class GraphEmbeddingHead(_Component):
    """Mean-pooled embedding of the recent action history.

    The action table has one reserved row (index 0) that encodes "no prior
    action"; real action ids are stored shifted by one. Each retained history
    position gates its action embedding with a learned position embedding
    (``action * (1 + position)``): a plain additive position term would cancel
    under the mean, whereas the gate keeps reorderings of the same actions
    distinguishable while a zeroed position table still returns the action
    row untouched. Positions count backwards from the present — the most
    recent action is always position 0 — so the signal that matters most for
    the next action sits at a fixed index regardless of history length.
    """

    def __init__(self, n_actions: int, graph_dim: int, history_cap: int,
                 rng: np.random.Generator, prefix: str = "graph_embed"):
        super().__init__()
        self.history_cap = history_cap
        self.action_emb = self._normal(rng, f"{prefix}.action_emb", (n_actions + 1, graph_dim))
        self.pos_emb = self._normal(rng, f"{prefix}.pos_emb", (history_cap, graph_dim))

    def forward(self, histories: Sequence[Sequence[int]]) -> Tensor:
        """[batch, graph_dim] pooled history embeddings.

        An empty history yields exactly the reserved row-0 embedding.
        """
        n_batch = len(histories)
        width = max(1, max((min(len(h), self.history_cap) for h in histories), default=1))
        ids = np.zeros((n_batch, width), dtype=np.int64)
        pool_mask = np.zeros((n_batch, width))
        pos_ids = np.zeros((n_batch, width), dtype=np.int64)
        pos_mask = np.zeros((n_batch, width))
        for row, history in enumerate(histories):
            recent = list(history)[-self.history_cap:]
            if not recent:
                pool_mask[row, 0] = 1.0  # id 0 -> reserved row, position term masked off
                continue
            n = len(recent)
            ids[row, :n] = [action_id + 1 for action_id in recent]
            pool_mask[row, :n] = 1.0
            pos_ids[row, :n] = np.arange(n - 1, -1, -1)
            pos_mask[row, :n] = 1.0
        gate = add(Tensor(np.ones((n_batch, width, 1))),
                   mul(embedding_lookup(self.pos_emb, pos_ids),
                       Tensor(pos_mask[..., None])))
        combined = mul(embedding_lookup(self.action_emb, ids), gate)
        return mean_pool(combined, pool_mask)


class GraphAttentionHead(_Component):
    """Attention over the action history viewed as a path graph.

    Nodes are the recent history actions; consecutive actions are connected.
    Each layer transforms node features, scores node pairs with additive
    attention over (source, target, edge) features through a LeakyReLU, and
    aggregates neighbor values restricted to the path neighborhood
    {previous, self, next}. Edge features combine the edge's order index, the
    turn's slot-fill flags, and a projected utterance summary; the same slot
    flags and summary describe every edge of the turn, since prediction sees
    only the current turn's state. Self-loops carry the same turn-state
    features with order contribution zero, so even a single-node history
    sees the current slot state. An empty history yields the reserved row-0
    action embedding as the null-graph readout.
    """

    def __init__(self, n_actions: int, graph_dim: int, n_layers: int, n_heads: int,
                 n_slots: int, summary_dim: int, window: int,
                 rng: np.random.Generator, prefix: str = "gnn"):
        super().__init__()
        if graph_dim % n_heads != 0:
            raise ConfigError(f"graph_dim {graph_dim} not divisible by n_heads {n_heads}")
        self.graph_dim = graph_dim
        self.n_heads = n_heads
        self.head_dim = graph_dim // n_heads
        self.n_slots = n_slots
        self.summary_dim = summary_dim
        self.window = window
        self.action_emb = self._normal(rng, f"{prefix}.action_emb", (n_actions + 1, graph_dim))
        self.layers = []
        for i in range(n_layers):
            p = f"{prefix}.layer{i}"
            self.layers.append({
                "w": self._normal(rng, f"{p}.w", (graph_dim, graph_dim)),
                "b": self._zeros(f"{p}.b", (graph_dim,)),
                "a_src": self._normal(rng, f"{p}.a_src", (n_heads, self.head_dim)),
                "a_dst": self._normal(rng, f"{p}.a_dst", (n_heads, self.head_dim)),
                "a_edge": self._normal(rng, f"{p}.a_edge", (n_heads, self.head_dim)),
                "w_order": self._normal(rng, f"{p}.w_order", (1, graph_dim)),
                "w_slots": self._normal(rng, f"{p}.w_slots", (n_slots, graph_dim)),
                "w_utt": self._normal(rng, f"{p}.w_utt", (summary_dim, graph_dim)),
                "w_edge_val": self._normal(rng, f"{p}.w_edge_val", (graph_dim, graph_dim)),
            })

    def forward(self, histories: Sequence[Sequence[int]],
                utterance_summary: Optional[Tensor],
                slot_flags: np.ndarray,
                collect: Optional[list] = None) -> Tensor:
        """[batch, graph_dim] readouts (mean over node states after all layers).

        ``utterance_summary`` is [batch, summary_dim] or None for variants with
        no text path (treated as zeros). ``collect``, when a list, receives one
        entry per batch row: a list of per-layer [heads, nodes, nodes]
        attention-weight arrays.
        """
        flags = np.asarray(slot_flags, dtype=np.float64)
        if flags.shape != (len(histories), self.n_slots):
            raise ShapeError(
                f"slot flags shape {flags.shape} != ({len(histories)}, {self.n_slots})")
        rows = []
        for row, history in enumerate(histories):
            if utterance_summary is None:
                summary = Tensor(np.zeros((1, self.summary_dim)))
            else:
                summary = slice_axis(utterance_summary, 0, row, row + 1)
            row_collect = [] if collect is not None else None
            rows.append(self._forward_single(tuple(history)[-self.window:], summary,
                                             flags[row:row + 1], row_collect))
            if collect is not None:
                collect.append(row_collect)
        return concat(rows, axis=0)

    def _forward_single(self, history: Tuple[int, ...], summary: Tensor,
                        flags_row: np.ndarray,
                        collect: Optional[list]) -> Tensor:
        if not history:
            return slice_axis(self.action_emb, 0, 0, 1)
        n = len(history)
        n_heads, head_dim = self.n_heads, self.head_dim
        nodes = embedding_lookup(
            self.action_emb, np.asarray([a + 1 for a in history], dtype=np.int64))
        ones_head = Tensor(np.ones((head_dim, 1)))
        ones_nodes = Tensor(np.ones((n, 1)))
        band = np.eye(n) + np.eye(n, k=1) + np.eye(n, k=-1)
        off_band = Tensor(((1.0 - band) * -1e30)[:, :, None])
        upper = np.eye(n, k=1)[:, :, None]
        lower = np.eye(n, k=-1)[:, :, None]
        diagonal = Tensor(np.eye(n)[:, :, None])
        # Edge order indices, scaled into (0, 1] by the history window.
        orders = Tensor(((np.arange(n - 1) + 1.0) / self.window)[:, None]) if n > 1 else None
        flags = Tensor(flags_row)

        for layer in self.layers:
            g = add(matmul(nodes, layer["w"]), layer["b"])           # [n, d]
            gh = reshape(g, (n, n_heads, head_dim))
            src = reshape(matmul(mul(gh, layer["a_src"]), ones_head), (n, n_heads))
            dst = reshape(matmul(mul(gh, layer["a_dst"]), ones_head), (n, n_heads))
            scores = add(reshape(src, (n, 1, n_heads)), reshape(dst, (1, n, n_heads)))
            # Self-loop edges: order term zero, shared turn-state features.
            shared = add(matmul(flags, layer["w_slots"]), matmul(summary, layer["w_utt"]))
            self_h = reshape(shared, (1, n_heads, head_dim))
            self_score = reshape(matmul(mul(self_h, layer["a_edge"]), ones_head),
                                 (1, n_heads))
            scores = add(scores, mul(reshape(self_score, (1, 1, n_heads)), diagonal))
            if n > 1:
                edge_feats = add(matmul(orders, layer["w_order"]), shared)  # [n-1, d]
                eh = reshape(edge_feats, (n - 1, n_heads, head_dim))
                edge_scores = reshape(matmul(mul(eh, layer["a_edge"]), ones_head),
                                      (n - 1, n_heads))
                pad = Tensor(np.zeros((1, n_heads)))
                up = mul(reshape(concat([edge_scores, pad], axis=0), (n, 1, n_heads)),
                         Tensor(upper))
                down = mul(reshape(concat([pad, edge_scores], axis=0), (n, 1, n_heads)),
                           Tensor(lower))
                scores = add(scores, add(up, down))
            weights = softmax(add(leaky_relu(scores), off_band), axis=1)  # [n, n, heads]
            if collect is not None:
                collect.append(np.transpose(weights.data.copy(), (2, 0, 1)))
            w_perm = permute(weights, (2, 0, 1))                      # [heads, n, n]
            context = permute(matmul(w_perm, permute(gh, (1, 0, 2))), (1, 0, 2))
            self_val = reshape(matmul(shared, layer["w_edge_val"]), (1, n_heads, head_dim))
            alpha_self = reshape(matmul(permute(mul(weights, diagonal), (0, 2, 1)),
                                        ones_nodes), (n, n_heads, 1))
            context = add(context, mul(alpha_self, self_val))
            if n > 1:
                edge_vals = reshape(matmul(edge_feats, layer["w_edge_val"]),
                                    (n - 1, n_heads, head_dim))
                pad_v = Tensor(np.zeros((1, n_heads, head_dim)))
                alpha_up = reshape(matmul(permute(mul(weights, Tensor(upper)), (0, 2, 1)),
                                          ones_nodes), (n, n_heads, 1))
                alpha_down = reshape(matmul(permute(mul(weights, Tensor(lower)), (0, 2, 1)),
                                            ones_nodes), (n, n_heads, 1))
                context = add(context,
                              add(mul(alpha_up, concat([edge_vals, pad_v], axis=0)),
                                  mul(alpha_down, concat([pad_v, edge_vals], axis=0))))
            nodes = gelu(reshape(context, (n, self.graph_dim)))
        return mean_pool(reshape(nodes, (1, n, self.graph_dim)), np.ones((1, n)))


class FusionHead(_Component):
    """Gated fusion of the pooled text encoding and the graph readout.

    logits = (GELU(pooled @ W_l + b_l) * GELU(graph @ W_g + b_g)) @ W_f + b_f
    where * is the elementwise product over the shared fusion dimension.
    """

    def __init__(self, hidden_dim: int, graph_dim: int, fusion_dim: int, n_actions: int,
                 rng: np.random.Generator, prefix: str = "fusion"):
        super().__init__()
        self.w_l = self._normal(rng, f"{prefix}.w_l", (hidden_dim, fusion_dim))
        self.b_l = self._zeros(f"{prefix}.b_l", (fusion_dim,))
        self.w_g = self._normal(rng, f"{prefix}.w_g", (graph_dim, fusion_dim))
        self.b_g = self._zeros(f"{prefix}.b_g", (fusion_dim,))
        self.w_f = self._normal(rng, f"{prefix}.w_f", (fusion_dim, n_actions))
        self.b_f = self._zeros(f"{prefix}.b_f", (n_actions,))

    def forward(self, pooled: Tensor, graph_readout: Tensor) -> Tensor:
        """Pre-softmax logits [batch, n_actions]."""
        text_gate = gelu(add(matmul(pooled, self.w_l), self.b_l))
        graph_gate = gelu(add(matmul(graph_readout, self.w_g), self.b_g))
        return add(matmul(mul(text_gate, graph_gate), self.w_f), self.b_f)


class LinearHead(_Component):
    """Affine map, used for baseline classifiers and the masked-token head."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, prefix: str):
        super().__init__()
        self.w = self._normal(rng, f"{prefix}.w", (in_dim, out_dim))
        self.b = self._zeros(f"{prefix}.b", (out_dim,))

    def forward(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)


# -- batches and featurization ---------------------------------------------------------


@dataclass(frozen=True)
class Example:
    """One classification instance: the turn's text and state plus its label."""

    utterance: str
    action_history: Tuple[str, ...] = ()
    filled_slots: Tuple[str, ...] = ()
    prior_utterances: Tuple[str, ...] = ()
    label: Optional[int] = None


@dataclass
class Batch:
    """Dense model inputs for a list of examples."""

    token_ids: Optional[np.ndarray]            # [batch, seq] or None (no text path)
    attn_mask: Optional[np.ndarray]            # [batch, seq] or None
    histories: Tuple[Tuple[int, ...], ...]     # action ids per row
    slot_flags: np.ndarray                     # [batch, n_slots]
    labels: Optional[np.ndarray]               # [batch] or None
    partition: Optional[str] = None            # data partition tag ("train"/"valid"/"test")

    def __len__(self) -> int:
        return len(self.histories)


class Featurizer:
    """Turns examples into model inputs for a specific variant.

    Text channels by variant: ``galt`` and ``gnn_lt`` encode only the current
    utterance (history travels through the graph channel); ``lt_action_history``
    appends recent action tokens to the text; ``lt_dialogue_history`` prepends
    recent prior utterances; ``gnn_only`` has no text channel at all.
    """

    def __init__(self, vocab: Vocab, action_names: Sequence[str],
                 slot_names: Sequence[str], config: ModelConfig):
        self.vocab = vocab
        self.config = config
        self.action_names = tuple(action_names)
        self.slot_names = tuple(slot_names)
        self.action_to_id = {name: i for i, name in enumerate(self.action_names)}
        self.slot_to_col = {name: i for i, name in enumerate(self.slot_names)}

    def encode(self, examples: Sequence[Example],
               partition: Optional[str] = None) -> Batch:
        if not examples:
            raise ConfigError("cannot featurize an empty example list")
        histories = []
        unknown = []
        for example in examples:
            ids = []
            for name in example.action_history:
                if name in self.action_to_id:
                    ids.append(self.action_to_id[name])
                else:
                    unknown.append(name)
            histories.append(tuple(ids))
        if unknown:
            raise UnknownActionError(sorted(set(unknown)))

        flags = np.zeros((len(examples), self.config.n_slots))
        for row, example in enumerate(examples):
            for slot in example.filled_slots:
                if slot not in self.slot_to_col:
                    raise SlotSchemaError(f"unknown slot name {slot!r} in filled slots")
                flags[row, self.slot_to_col[slot]] = 1.0

        labeled = [example.label is not None for example in examples]
        if any(labeled) and not all(labeled):
            raise ConfigError("examples mix labeled and unlabeled rows")
        labels = None
        if all(labeled):
            labels = np.asarray([example.label for example in examples], dtype=np.int64)
            if labels.min() < 0 or labels.max() >= self.config.n_actions:
                raise ConfigError(
                    f"label out of range for {self.config.n_actions} actions")

        token_ids = attn_mask = None
        if self.config.has_text_encoder:
            max_len = self.config.encoder.max_len
            ids_rows = np.empty((len(examples), max_len), dtype=np.int64)
            mask_rows = np.empty((len(examples), max_len), dtype=np.int64)
            for row, example in enumerate(examples):
                text, actions = self._text_channel(example)
                ids_rows[row], mask_rows[row] = encode_turn(text, actions, self.vocab, max_len)
            width = max(1, int(mask_rows.sum(axis=1).max()))
            token_ids = np.ascontiguousarray(ids_rows[:, :width])
            attn_mask = np.ascontiguousarray(mask_rows[:, :width])
        return Batch(token_ids=token_ids, attn_mask=attn_mask,
                     histories=tuple(histories), slot_flags=flags, labels=labels,
                     partition=partition)

    def _text_channel(self, example: Example) -> Tuple[str, Tuple[str, ...]]:
        if self.config.variant == LT_ACTION_HISTORY:
            return example.utterance, tuple(example.action_history)
        if self.config.variant == LT_DIALOGUE_HISTORY:
            window = self.config.dialogue_window
            prior = tuple(example.prior_utterances)[-window:] if window > 0 else ()
            return " ".join((*prior, example.utterance)), ()
        return example.utterance, ()


# -- the composed model ------------------------------------------------------------------


class NextActionModel:
    """A complete next-action classifier for one variant.

    Holds the vocabulary, the procedure's action and slot names, and all
    parameter tensors. ``forward`` produces pre-softmax logits; prediction
    helpers convert them to probability distributions.
    """

    def __init__(self, config: ModelConfig, vocab: Vocab,
                 action_names: Sequence[str], slot_names: Sequence[str],
                 sop_hash: str = "", seed: int = 0):
        action_names = tuple(action_names)
        slot_names = tuple(slot_names)
        if len(action_names) != config.n_actions:
            raise ConfigError(
                f"config names {config.n_actions} actions but {len(action_names)} were given")
        if len(slot_names) != config.n_slots:
            raise ConfigError(
                f"config names {config.n_slots} slots but {len(slot_names)} were given")
        if len(vocab) != config.encoder.vocab_size:
            raise ConfigError(
                f"config vocab_size {config.encoder.vocab_size} != vocabulary size {len(vocab)}")
        if vocab.action_names != action_names:
            raise ConfigError("vocabulary action tokens do not match the model's action names")
        self.config = config
        self.vocab = vocab
        self.action_names = action_names
        self.slot_names = slot_names
        self.sop_hash = sop_hash
        self.featurizer = Featurizer(vocab, action_names, slot_names, config)

        rng = np.random.default_rng(seed)
        variant = config.variant
        enc = config.encoder
        self.encoder = self.mlm_head = self.graph_embed = self.gnn = None
        self.fusion = self.classifier = None
        if config.has_text_encoder:
            self.encoder = TransformerEncoder(enc, rng)
            self.mlm_head = LinearHead(enc.hidden_dim, enc.vocab_size, rng, prefix="mlm")
        if variant == GALT:
            self.graph_embed = GraphEmbeddingHead(config.n_actions, config.graph_dim,
                                                  config.history_cap, rng)
        if variant in (GNN_LT, GNN_ONLY):
            self.gnn = GraphAttentionHead(config.n_actions, config.graph_dim,
                                          config.n_gnn_layers, config.gnn_heads,
                                          config.n_slots, enc.hidden_dim,
                                          config.effective_gnn_window, rng)
        if variant in (GALT, GNN_LT):
            self.fusion = FusionHead(enc.hidden_dim, config.graph_dim,
                                     config.fusion_dim, config.n_actions, rng)
        elif variant == GNN_ONLY:
            self.classifier = LinearHead(config.graph_dim, config.n_actions, rng,
                                         prefix="classifier")
        else:
            self.classifier = LinearHead(enc.hidden_dim, config.n_actions, rng,
                                         prefix="classifier")

    # -- parameters ----------------------------------------------------------------

    def _components(self):
        candidates = (self.encoder, self.mlm_head, self.graph_embed, self.gnn,
                      self.fusion, self.classifier)
        return [c for c in candidates if c is not None]

    def parameters(self) -> List[Tensor]:
        table = self.param_dict()
        return [table[name] for name in sorted(table)]

    def param_dict(self) -> Dict[str, Tensor]:
        table: Dict[str, Tensor] = {}
        for component in self._components():
            table.update(component.param_dict())
        return table

    # -- forward passes ------------------------------------------------------------

    def encode_utterance(self, token_ids, attn_mask, training: bool = False,
                         rng: Optional[np.random.Generator] = None,
                         collect: Optional[list] = None) -> Tensor:
        """Last-layer hidden states of the text encoder, [batch, seq, hidden]."""
        if self.encoder is None:
            raise ConfigError(f"variant {self.config.variant!r} has no text encoder")
        return self.encoder.forward(token_ids, attn_mask, training, rng, collect)

    def mlm_logits(self, token_ids, attn_mask, training: bool = False,
                   rng: Optional[np.random.Generator] = None) -> Tensor:
        """Per-position vocabulary logits for masked-token pretraining."""
        hidden = self.encode_utterance(token_ids, attn_mask, training, rng)
        return self.mlm_head.forward(hidden)

    def forward(self, batch: Batch, training: bool = False,
                rng: Optional[np.random.Generator] = None,
                collect: Optional[dict] = None) -> Tensor:
        """Classification logits [batch, n_actions].

        ``collect``, when a dict, gains "encoder_attention" (per-layer arrays)
        and/or "gnn_attention" (per-row lists of per-layer arrays).
        """
        variant = self.config.variant
        pooled = None
        if self.encoder is not None:
            if batch.token_ids is None:
                raise ConfigError(f"variant {variant!r} needs a text channel in the batch")
            enc_collect = None
            if collect is not None:
                enc_collect = collect.setdefault("encoder_attention", [])
            hidden = self.encoder.forward(batch.token_ids, batch.attn_mask,
                                          training, rng, enc_collect)
            pooled = mean_pool(hidden, batch.attn_mask)
        if variant == GALT:
            graph_readout = self.graph_embed.forward(batch.histories)
            return self.fusion.forward(pooled, graph_readout)
        if variant in (GNN_LT, GNN_ONLY):
            gnn_collect = None
            if collect is not None:
                gnn_collect = collect.setdefault("gnn_attention", [])
            graph_readout = self.gnn.forward(batch.histories, pooled,
                                             batch.slot_flags, gnn_collect)
            if variant == GNN_LT:
                return self.fusion.forward(pooled, graph_readout)
            return self.classifier.forward(graph_readout)
        return self.classifier.forward(pooled)

    def predict_proba(self, batch: Batch) -> np.ndarray:
        """Probability distributions [batch, n_actions], no gradient tracking."""
        with no_grad():
            logits = self.forward(batch, training=False)
            return softmax(logits, axis=-1).data.copy()


# -- prediction -----------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionRequest:
    """One prediction query: the live utterance plus conversation state.

    ``k`` bounds how many prior utterances the dialogue-history variant reads;
    the graph variants window the action history by their own configuration.
    """

    utterance: str
    action_history: Tuple[str, ...] = ()
    k: int = 0
    prior_utterances: Tuple[str, ...] = ()
    filled_slots: Tuple[str, ...] = ()


@dataclass(frozen=True)
class Prediction:
    action_name: str
    action_id: int
    probability: float
    distribution: np.ndarray


def predict_next_action(model: NextActionModel, request: PredictionRequest) -> Prediction:
    """Argmax prediction; ties break toward the lowest action id."""
    if request.k < 0:
        raise ConfigError(f"history window k must be >= 0, got {request.k}")
    prior = tuple(request.prior_utterances)
    if request.k == 0:
        prior = ()
    else:
        prior = prior[-request.k:]
    example = Example(utterance=request.utterance,
                      action_history=tuple(request.action_history),
                      filled_slots=tuple(request.filled_slots),
                      prior_utterances=prior)
    batch = model.featurizer.encode([example])
    distribution = model.predict_proba(batch)[0]
    action_id = int(np.argmax(distribution))
    return Prediction(action_name=model.action_names[action_id], action_id=action_id,
                      probability=float(distribution[action_id]), distribution=distribution)


# -- construction and persistence --------------------------------------------------------


def build_model(variant: str, graph, vocab: Vocab, seed: int = 0,
                config: Optional[ModelConfig] = None, **overrides) -> NextActionModel:
    """Wire a model to a procedure graph and vocabulary.

    ``overrides`` adjust individual config fields (encoder or model level)
    when no explicit ``config`` is given.
    """
    if config is None:
        config = default_config(variant, n_actions=graph.n_actions,
                                vocab_size=len(vocab), n_slots=len(graph.slots),
                                **overrides)
    elif overrides:
        raise ConfigError("pass either a full config or field overrides, not both")
    return NextActionModel(config, vocab, action_names=graph.action_names,
                           slot_names=sorted(graph.slots), sop_hash=graph.document_hash,
                           seed=seed)


def vocab_fingerprint(vocab: Vocab) -> str:
    """Content hash of the token table; guards checkpoint/vocabulary pairing."""
    payload = "\n".join(vocab.id_to_token).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def sidecar_path(checkpoint_path: Union[str, Path]) -> Path:
    return Path(str(checkpoint_path) + ".config.json")


def save_model(model: NextActionModel, path: Union[str, Path]) -> None:
    """Write parameters plus a sidecar config document describing the model."""
    save_params(path, model.parameters())
    sidecar = {
        "format": SIDECAR_FORMAT,
        "version": SIDECAR_VERSION,
        "config": model.config.to_dict(),
        "action_names": list(model.action_names),
        "slot_names": list(model.slot_names),
        "vocab_hash": vocab_fingerprint(model.vocab),
        "sop_hash": model.sop_hash,
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")


def load_model(path: Union[str, Path], vocab: Vocab, graph=None) -> NextActionModel:
    """Rebuild a model from a checkpoint, refusing mismatched artifacts.

    The vocabulary must hash to the value recorded at save time; when a graph
    is supplied, its document hash and action names must match as well.
    """
    meta_path = sidecar_path(path)
    if not meta_path.exists():
        raise CheckpointError(f"model config sidecar not found: {meta_path}")
    try:
        sidecar = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise CheckpointError(f"unreadable model config sidecar {meta_path}: {err}") from None
    if sidecar.get("format") != SIDECAR_FORMAT:
        raise CheckpointError(f"{meta_path} is not a model config sidecar")
    if sidecar.get("version") != SIDECAR_VERSION:
        raise CheckpointError(
            f"unsupported model sidecar version {sidecar.get('version')} in {meta_path}")
    config = ModelConfig.from_dict(sidecar["config"])
    if vocab_fingerprint(vocab) != sidecar["vocab_hash"]:
        raise CheckpointError(
            "vocabulary does not match the one this model was trained with")
    if graph is not None:
        if graph.document_hash != sidecar["sop_hash"]:
            raise CheckpointError(
                "procedure graph does not match the one this model was trained with")
        if list(graph.action_names) != list(sidecar["action_names"]):
            raise CheckpointError("procedure action names do not match the checkpoint")
    model = NextActionModel(config, vocab,
                            action_names=tuple(sidecar["action_names"]),
                            slot_names=tuple(sidecar["slot_names"]),
                            sop_hash=sidecar["sop_hash"], seed=0)
    assign_params(model.parameters(), load_params(path))
    return model
