"""Attention-based encoder-decoder for inflection: one bidirectional LSTM over
the language tag, morphological tags, and lemma characters as a single symbol
sequence, and an attentive LSTM decoder that generates the inflected form.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Session
from .config import ModelConfig
from .data import encode_med_input, encode_target
from .layers import (
    DecoderStep,
    GraphBuilder,
    attention_keys,
    attention_read,
    attention_shapes,
    bilstm_encode,
    bilstm_shapes,
    lstm_shapes,
    lstm_step,
    masked_mean_nll,
    pad_batch,
    set_forget_bias,
)
from .params import ParamSet


class MedModel:
    kind = "med"
    native_optimizer = "adadelta"

    def __init__(self, config: ModelConfig, vocab_size: int):
        if config.kind != "med":
            raise ValueError(f"config is for {config.kind!r}")
        self.config = config
        self.vocab_size = vocab_size

    # -- parameters ---------------------------------------------------------

    def param_shapes(self) -> dict[str, tuple]:
        e, h, a, v = (self.config.embed_dim, self.config.hidden_dim,
                      self.config.attn_dim, self.vocab_size)
        shapes = {"emb": (v, e)}
        shapes.update(bilstm_shapes("enc", e, h))
        # the attention query sees the current input symbol as well as the
        # previous decoder state; without it the scorer cannot tell which
        # input position follows the one just emitted
        shapes.update(attention_shapes("att", 2 * h, h + e, a))
        shapes.update(lstm_shapes("dec", e + 2 * h, h))
        shapes.update({"init.W": (2 * h, h), "init.b": (h,),
                       "out.W": (h + 2 * h, v), "out.b": (v,)})
        return shapes

    def init_params(self, seed: int) -> ParamSet:
        rng = np.random.default_rng(seed)
        arrays = {name: rng.uniform(-0.1, 0.1, size=shape)
                  for name, shape in self.param_shapes().items()}
        for prefix in ("enc.fw", "enc.bw", "dec"):
            set_forget_bias(arrays, prefix, self.config.hidden_dim)
        return ParamSet(arrays)

    # -- encoding -----------------------------------------------------------

    @staticmethod
    def encode_inputs(examples, vocab) -> tuple:
        return ([encode_med_input(ex, vocab) for ex in examples],)

    @staticmethod
    def encode_targets(examples, vocab) -> list[list[int]]:
        return [encode_target(ex, vocab) for ex in examples]

    def max_output_len(self, encoded: tuple, i: int) -> int:
        return len(encoded[0][i]) + self.config.max_len_margin

    # -- graph construction -------------------------------------------------

    def _builder(self) -> GraphBuilder:
        return GraphBuilder(Graph(), self.param_shapes())

    def _encode(self, b: GraphBuilder, inputs: list[list[int]]) -> dict:
        h = self.config.hidden_dim
        ids, mask = pad_batch(inputs)
        steps = [ad.rows(b.p("emb"), ids[:, t]) for t in range(ids.shape[1])]
        states, fw_last, bw_last = bilstm_encode(b, "enc", steps, h, mask)
        keys = attention_keys(b, "att", states, mask)
        ends = ad.concat([fw_last, bw_last], axis=-1)
        s0 = ad.tanh(ad.matmul(ends, b.p("init.W")) + b.p("init.b"))
        cell0 = b.c(np.zeros((len(inputs), h)))
        return {"keys": keys, "state": s0, "cell": cell0}

    def decode_step(self, b: GraphBuilder, ctx: dict, prev_ids) -> tuple[dict, DecoderStep]:
        y = ad.rows(b.p("emb"), np.asarray(prev_ids, dtype=np.int64))
        query = ad.concat([ctx["state"], y], axis=-1)
        context, _ = attention_read(b, "att", ctx["keys"], query)
        state, cell = lstm_step(b, "dec", ad.concat([y, context], axis=-1),
                                ctx["state"], ctx["cell"])
        logits = ad.matmul(ad.concat([state, context], axis=-1), b.p("out.W")) + b.p("out.b")
        dist = ad.softmax(logits, axis=-1)
        new_ctx = {"keys": ctx["keys"], "state": state, "cell": cell}
        return new_ctx, DecoderStep(state, cell, context, y, dist)

    def start_decode(self, b: GraphBuilder, encoded: tuple) -> dict:
        return self._encode(b, encoded[0])

    def loss_graph(self, encoded: tuple, targets: list[list[int]]):
        (inputs,) = encoded
        if len(inputs) != len(targets):
            raise ValueError("inputs and targets differ in length")
        if any(len(t) < 2 for t in targets):
            raise ValueError("target sequences must contain at least one symbol")
        b = self._builder()
        ctx = self._encode(b, inputs)
        gold, gold_mask = pad_batch(targets)
        dists = []
        for t in range(gold.shape[1] - 1):
            ctx, step = self.decode_step(b, ctx, gold[:, t])
            dists.append(step.dist)
        loss = masked_mean_nll(b, dists, gold[:, 1:], gold_mask[:, 1:],
                               self.config.prob_floor)
        return b.g, loss

    def loss(self, params: ParamSet, input_ids: list[int], target_ids: list[int]) -> float:
        """Teacher-forced mean cross-entropy for one encoded example."""
        g, loss = self.loss_graph(([input_ids],), [target_ids])
        value = float(ad.evaluate(g, params)[loss.nid])
        if not np.isfinite(value):
            raise FloatingPointError("non-finite loss")
        return value

    # -- single-example views used by verification tests ---------------------

    def encoder_states(self, params: ParamSet, input_ids: list[int]) -> np.ndarray:
        """Per-position concatenated forward/backward states, [L, 2*hidden]."""
        if not input_ids:
            raise ValueError("cannot encode an empty sequence")
        b = self._builder()
        steps = [ad.rows(b.p("emb"), np.array([sym])) for sym in input_ids]
        states, _, _ = bilstm_encode(b, "enc", steps, self.config.hidden_dim)
        stacked = ad.stack(states, axis=1)
        return ad.evaluate(b.g, params)[stacked.nid][0]

    def attend(self, params: ParamSet, query: np.ndarray,
               states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Context vector and attention weights for one query over [S, 2H] states."""
        if states.shape[0] == 0:
            raise ValueError("attention needs at least one encoder state")
        b = self._builder()
        refs = [b.c(states[t: t + 1]) for t in range(states.shape[0])]
        keys = attention_keys(b, "att", refs)
        context, weights = attention_read(b, "att", keys, b.c(query[None, :]))
        sess = Session(b.g, params)
        return sess.value(context)[0], sess.value(weights)[0]
