"""Shared graph builders: LSTM steps, encoders, additive attention, padding.

All builders append to a Graph through a GraphBuilder, which declares named
parameters on first use against a fixed shape table. Batches are padded to a
common length; padded positions are frozen out of recurrent state updates,
masked out of attention scores, and excluded from losses, so batch results
match the unpadded single-example computation exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Ref
from .data import PAD_ID

NEG_ATTN = -1e9  # added to attention scores at padded key positions


class GraphBuilder:
    """Declare-on-first-use parameter refs over one graph."""

    def __init__(self, graph: Graph, shapes: dict[str, tuple]):
        self.g = graph
        self.shapes = shapes
        self._refs: dict[str, Ref] = {}

    def p(self, name: str) -> Ref:
        if name not in self._refs:
            self._refs[name] = self.g.param(name, self.shapes[name])
        return self._refs[name]

    def c(self, value) -> Ref:
        return self.g.const(value)


def pad_batch(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences; returns int ids [B, S] and float mask [B, S]."""
    if not seqs:
        raise ValueError("empty batch")
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    for i, seq in enumerate(seqs):
        ids[i, : len(seq)] = seq
        mask[i, : len(seq)] = 1.0
    return ids, mask


# ---------------------------------------------------------------------------
# LSTM

def lstm_shapes(prefix: str, in_dim: int, hidden: int) -> dict[str, tuple]:
    # fused input/forget/cell/output gates: one [x; h] projection
    return {f"{prefix}.W": (in_dim + hidden, 4 * hidden), f"{prefix}.b": (4 * hidden,)}


def set_forget_bias(arrays: dict[str, np.ndarray], prefix: str, hidden: int,
                    value: float = 1.0) -> None:
    b = arrays[f"{prefix}.b"]
    b[hidden: 2 * hidden] = value


def lstm_step(b: GraphBuilder, prefix: str, x: Ref, h: Ref, cell: Ref) -> tuple[Ref, Ref]:
    hidden = h.shape[-1]
    z = ad.matmul(ad.concat([x, h], axis=-1), b.p(f"{prefix}.W")) + b.p(f"{prefix}.b")
    i = ad.sigmoid(ad.slice_axis(z, 0, hidden))
    f = ad.sigmoid(ad.slice_axis(z, hidden, 2 * hidden))
    g = ad.tanh(ad.slice_axis(z, 2 * hidden, 3 * hidden))
    o = ad.sigmoid(ad.slice_axis(z, 3 * hidden, 4 * hidden))
    cell2 = f * cell + i * g
    h2 = o * ad.tanh(cell2)
    return h2, cell2


def run_lstm(b: GraphBuilder, prefix: str, steps: list[Ref], hidden: int,
             mask: np.ndarray | None = None, reverse: bool = False):
    """Unidirectional pass over per-position embeddings [B, E].

    Returns (states by position, final hidden, final cell). With a mask,
    state updates at padded positions are frozen, so the final state is the
    state at each sequence's true boundary.
    """
    if not steps:
        raise ValueError("cannot encode an empty sequence")
    batch = steps[0].shape[0]
    zeros = b.c(np.zeros((batch, hidden)))
    h, cell = zeros, zeros
    states: list[Ref | None] = [None] * len(steps)
    order = range(len(steps) - 1, -1, -1) if reverse else range(len(steps))
    for t in order:
        h_new, cell_new = lstm_step(b, prefix, steps[t], h, cell)
        if mask is not None:
            m = b.c(mask[:, t: t + 1])
            inv = b.c(1.0 - mask[:, t: t + 1])
            h = h_new * m + h * inv
            cell = cell_new * m + cell * inv
        else:
            h, cell = h_new, cell_new
        states[t] = h
    return states, h, cell


def bilstm_shapes(prefix: str, in_dim: int, hidden: int) -> dict[str, tuple]:
    return {**lstm_shapes(f"{prefix}.fw", in_dim, hidden),
            **lstm_shapes(f"{prefix}.bw", in_dim, hidden)}


def bilstm_encode(b: GraphBuilder, prefix: str, steps: list[Ref], hidden: int,
                  mask: np.ndarray | None = None):
    """Concatenated forward/backward states per position, [B, 2*hidden] each.

    Also returns the two directions' final states (forward at the true end,
    backward at position 0) for decoder initialization.
    """
    fw, fw_last, _ = run_lstm(b, f"{prefix}.fw", steps, hidden, mask)
    bw, bw_last, _ = run_lstm(b, f"{prefix}.bw", steps, hidden, mask, reverse=True)
    states = [ad.concat([f, w], axis=-1) for f, w in zip(fw, bw)]
    return states, fw_last, bw_last


# ---------------------------------------------------------------------------
# additive attention

def attention_shapes(prefix: str, key_dim: int, query_dim: int, attn_dim: int) -> dict:
    return {
        f"{prefix}.U": (key_dim, attn_dim),
        f"{prefix}.Wq": (query_dim, attn_dim),
        f"{prefix}.b": (attn_dim,),
        f"{prefix}.v": (attn_dim,),
    }


@dataclass
class AttentionKeys:
    stacked: Ref                 # [B, S, D] encoder states
    projected: Ref               # [B, S, A] states through U
    score_mask: np.ndarray | None  # [B, S] additive mask, 0 or NEG_ATTN


def attention_keys(b: GraphBuilder, prefix: str, states: list[Ref],
                   mask: np.ndarray | None = None) -> AttentionKeys:
    stacked = ad.stack(states, axis=1)
    batch, span, dim = stacked.shape
    attn_dim = b.shapes[f"{prefix}.U"][1]
    flat = ad.matmul(ad.reshape(stacked, (batch * span, dim)), b.p(f"{prefix}.U"))
    projected = ad.reshape(flat, (batch, span, attn_dim))
    score_mask = None if mask is None else np.where(mask > 0, 0.0, NEG_ATTN)
    return AttentionKeys(stacked, projected, score_mask)


def attention_read(b: GraphBuilder, prefix: str, keys: AttentionKeys,
                   query: Ref) -> tuple[Ref, Ref]:
    """Context vector and weights for one decoder query [B, Hq]."""
    batch, _, attn_dim = keys.projected.shape
    q = ad.matmul(query, b.p(f"{prefix}.Wq")) + b.p(f"{prefix}.b")
    scores = ad.matvec(ad.tanh(keys.projected + ad.reshape(q, (batch, 1, attn_dim))),
                       b.p(f"{prefix}.v"))
    if keys.score_mask is not None:
        scores = scores + b.c(keys.score_mask)
    weights = ad.softmax(scores, axis=-1)
    context = ad.weighted_sum(weights, keys.stacked)
    return context, weights


@dataclass
class DecoderStep:
    """One decoding step: state, context, previous-output embedding, distribution."""

    state: Ref
    cell: Ref
    context: Ref
    y_prev: Ref
    dist: Ref


def masked_mean_nll(b: GraphBuilder, step_probs: list[Ref], gold: np.ndarray,
                    mask: np.ndarray, floor: float) -> Ref:
    """Cross-entropy over teacher-forced steps.

    step_probs[t] is the [B, V] distribution predicting gold[:, t]; mask
    selects real positions. Per example, the negative log-likelihood is
    averaged over its own positions; the batch loss is the mean over examples.
    """
    per_step = []
    for t, probs in enumerate(step_probs):
        p = ad.pick(probs, gold[:, t])
        per_step.append(ad.log(ad.clip_min(p, floor)))
    table = ad.stack(per_step, axis=1)          # [B, T]
    summed = ad.reduce_sum(table * b.c(mask), axis=1)
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("example with no target positions")
    return ad.mean(-summed * b.c(1.0 / counts))
