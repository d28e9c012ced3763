"""Pointer-generator inflection model.

Two unidirectional LSTM encoders (language+morphological tags, lemma
characters) feed two attention mechanisms whose contexts are concatenated.
At each step the decoder either generates a symbol from the vocabulary or
copies one of the input characters; a learned sigmoid gate alpha mixes the
generator distribution with the copy distribution, which redistributes the
character-attention weights onto the symbols they point at.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Graph
from .config import ModelConfig
from .data import encode_pg_input, encode_target
from .layers import (
    DecoderStep,
    GraphBuilder,
    attention_keys,
    attention_read,
    attention_shapes,
    lstm_shapes,
    lstm_step,
    masked_mean_nll,
    pad_batch,
    run_lstm,
    set_forget_bias,
)
from .params import ParamSet


# -- standalone pieces of the output layer, shared with verification tests --

def generation_gate(context, state, y_prev, w_c, w_s, w_y, bias) -> float:
    """Probability of generating (vs copying): sigmoid of three dot products."""
    z = float(np.dot(w_c, context) + np.dot(w_s, state) + np.dot(w_y, y_prev) + bias)
    return 1.0 / (1.0 + np.exp(-z))


def copy_distribution(attn_weights, char_seq, vocab_size: int) -> np.ndarray:
    """Scatter attention mass onto the symbols present in the input."""
    attn_weights = np.asarray(attn_weights, dtype=np.float64)
    char_seq = np.asarray(char_seq, dtype=np.int64)
    if attn_weights.shape != char_seq.shape:
        raise ValueError("attention weights and character positions misaligned")
    out = np.zeros(vocab_size)
    np.add.at(out, char_seq, attn_weights)
    return out


def mix_distributions(alpha: float, p_dec, p_copy) -> np.ndarray:
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    p_dec = np.asarray(p_dec, dtype=np.float64)
    p_copy = np.asarray(p_copy, dtype=np.float64)
    if p_dec.shape != p_copy.shape:
        raise ValueError("distributions must share a support")
    return alpha * p_dec + (1.0 - alpha) * p_copy


class PgModel:
    kind = "pg"
    native_optimizer = "adam"

    def __init__(self, config: ModelConfig, vocab_size: int):
        if config.kind != "pg":
            raise ValueError(f"config is for {config.kind!r}")
        self.config = config
        self.vocab_size = vocab_size

    # -- parameters ---------------------------------------------------------

    def param_shapes(self) -> dict[str, tuple]:
        e, h, a, v = (self.config.embed_dim, self.config.hidden_dim,
                      self.config.attn_dim, self.vocab_size)
        shapes = {"emb": (v, e)}
        shapes.update(lstm_shapes("tagenc", e, h))
        shapes.update(lstm_shapes("charenc", e, h))
        # queries concatenate the previous decoder state with the current
        # input symbol's embedding (see MedModel.param_shapes)
        shapes.update(attention_shapes("atag", h, h + e, a))
        shapes.update(attention_shapes("achar", h, h + e, a))
        shapes.update(lstm_shapes("dec", e + 2 * h, h))
        shapes.update({
            "init.W": (2 * h, h), "init.b": (h,),
            "out.W": (h + 2 * h, v), "out.b": (v,),
            "gate.wc": (2 * h,), "gate.ws": (h,), "gate.wy": (e,), "gate.b": (),
        })
        return shapes

    def init_params(self, seed: int) -> ParamSet:
        rng = np.random.default_rng(seed)
        arrays = {name: rng.uniform(-0.1, 0.1, size=shape)
                  for name, shape in self.param_shapes().items()}
        for prefix in ("tagenc", "charenc", "dec"):
            set_forget_bias(arrays, prefix, self.config.hidden_dim)
        return ParamSet(arrays)

    # -- encoding -----------------------------------------------------------

    @staticmethod
    def encode_inputs(examples, vocab) -> tuple:
        pairs = [encode_pg_input(ex, vocab) for ex in examples]
        return ([p[0] for p in pairs], [p[1] for p in pairs])

    @staticmethod
    def encode_targets(examples, vocab) -> list[list[int]]:
        return [encode_target(ex, vocab) for ex in examples]

    def max_output_len(self, encoded: tuple, i: int) -> int:
        return len(encoded[1][i]) + self.config.max_len_margin

    # -- graph construction -------------------------------------------------

    def _builder(self) -> GraphBuilder:
        return GraphBuilder(Graph(), self.param_shapes())

    def _encode(self, b: GraphBuilder, tag_seqs, char_seqs) -> dict:
        h = self.config.hidden_dim
        tag_ids, tag_mask = pad_batch(tag_seqs)
        char_ids, char_mask = pad_batch(char_seqs)
        tag_steps = [ad.rows(b.p("emb"), tag_ids[:, t]) for t in range(tag_ids.shape[1])]
        char_steps = [ad.rows(b.p("emb"), char_ids[:, t]) for t in range(char_ids.shape[1])]
        tag_states, tag_last, _ = run_lstm(b, "tagenc", tag_steps, h, tag_mask)
        char_states, char_last, _ = run_lstm(b, "charenc", char_steps, h, char_mask)
        keys_tag = attention_keys(b, "atag", tag_states, tag_mask)
        keys_char = attention_keys(b, "achar", char_states, char_mask)
        ends = ad.concat([tag_last, char_last], axis=-1)
        s0 = ad.tanh(ad.matmul(ends, b.p("init.W")) + b.p("init.b"))
        cell0 = b.c(np.zeros((len(tag_seqs), h)))
        return {"keys_tag": keys_tag, "keys_char": keys_char,
                "char_ids": char_ids, "state": s0, "cell": cell0}

    def decode_step(self, b: GraphBuilder, ctx: dict, prev_ids) -> tuple[dict, DecoderStep]:
        batch = len(prev_ids)
        y = ad.rows(b.p("emb"), np.asarray(prev_ids, dtype=np.int64))
        query = ad.concat([ctx["state"], y], axis=-1)
        c_tag, _ = attention_read(b, "atag", ctx["keys_tag"], query)
        c_char, attn_char = attention_read(b, "achar", ctx["keys_char"], query)
        context = ad.concat([c_tag, c_char], axis=-1)
        state, cell = lstm_step(b, "dec", ad.concat([y, context], axis=-1),
                                ctx["state"], ctx["cell"])
        logits = ad.matmul(ad.concat([state, context], axis=-1), b.p("out.W")) + b.p("out.b")
        p_dec = ad.softmax(logits, axis=-1)
        alpha = ad.sigmoid(ad.matvec(context, b.p("gate.wc"))
                           + ad.matvec(state, b.p("gate.ws"))
                           + ad.matvec(y, b.p("gate.wy"))
                           + b.p("gate.b"))
        p_copy = ad.scatter_sum(attn_char, ctx["char_ids"], self.vocab_size)
        a = ad.reshape(alpha, (batch, 1))
        dist = a * p_dec + (b.c(1.0) - a) * p_copy
        new_ctx = dict(ctx)
        new_ctx["state"], new_ctx["cell"] = state, cell
        return new_ctx, DecoderStep(state, cell, context, y, dist)

    def start_decode(self, b: GraphBuilder, encoded: tuple) -> dict:
        tag_seqs, char_seqs = encoded
        return self._encode(b, tag_seqs, char_seqs)

    def loss_graph(self, encoded: tuple, targets: list[list[int]]):
        tag_seqs, char_seqs = encoded
        if not (len(tag_seqs) == len(char_seqs) == len(targets)):
            raise ValueError("batch components differ in length")
        if any(len(t) < 2 for t in targets):
            raise ValueError("target sequences must contain at least one symbol")
        b = self._builder()
        ctx = self._encode(b, tag_seqs, char_seqs)
        gold, gold_mask = pad_batch(targets)
        dists = []
        for t in range(gold.shape[1] - 1):
            ctx, step = self.decode_step(b, ctx, gold[:, t])
            dists.append(step.dist)
        loss = masked_mean_nll(b, dists, gold[:, 1:], gold_mask[:, 1:],
                               self.config.prob_floor)
        return b.g, loss

    def loss(self, params: ParamSet, tag_seq: list[int], char_seq: list[int],
             target_ids: list[int]) -> float:
        """Teacher-forced mean cross-entropy for one encoded example."""
        g, loss = self.loss_graph(([tag_seq], [char_seq]), [target_ids])
        value = float(ad.evaluate(g, params)[loss.nid])
        if not np.isfinite(value):
            raise FloatingPointError("non-finite loss")
        return value


def model_for(kind: str, config: ModelConfig, vocab_size: int):
    from .med import MedModel

    if kind == "med":
        return MedModel(config, vocab_size)
    if kind == "pg":
        return PgModel(config, vocab_size)
    raise ValueError(f"unknown model kind {kind!r}")
