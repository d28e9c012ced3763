"""Greedy and beam-search decoding on top of the incremental graph session.

Both strategies reuse the models' decode_step builders: each emitted symbol
appends one step's nodes to the live graph, and the session evaluates only
what is new. Greedy runs whole batches; beam search handles one example at a
time, scores candidates by length-normalized log-probability, and breaks ties
toward the lowest symbol index (so width 1 reproduces greedy exactly).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Session
from .data import BOS_ID, EOS_ID
from .layers import GraphBuilder
from .params import ParamSet


@dataclass
class DecodeResult:
    ids: list[int]       # emitted symbols, EOS excluded
    truncated: bool      # hit the length cap before emitting EOS


def greedy_decode(model, params: ParamSet, encoded: tuple,
                  max_len: int | None = None) -> list[DecodeResult]:
    batch = len(encoded[0])
    b = GraphBuilder(Graph(), model.param_shapes())
    ctx = model.start_decode(b, encoded)
    sess = Session(b.g, params)
    caps = [max_len if max_len is not None else model.max_output_len(encoded, i)
            for i in range(batch)]
    if min(caps) < 1:
        raise ValueError("length cap must be at least 1")

    out: list[list[int]] = [[] for _ in range(batch)]
    done = [False] * batch
    truncated = [False] * batch
    prev = np.full(batch, BOS_ID, dtype=np.int64)
    for _ in range(max(caps)):
        ctx, step = model.decode_step(b, ctx, prev)
        dist = sess.value(step.dist)
        nxt = dist.argmax(axis=1)  # ties resolve to the lowest symbol index
        for i in range(batch):
            if done[i]:
                nxt[i] = EOS_ID
                continue
            if nxt[i] == EOS_ID:
                done[i] = True
            else:
                out[i].append(int(nxt[i]))
                if len(out[i]) >= caps[i]:
                    done[i] = True
                    truncated[i] = True
        prev = nxt
        if all(done):
            break
    return [DecodeResult(ids, trunc) for ids, trunc in zip(out, truncated)]


@dataclass
class _Beam:
    tokens: tuple[int, ...]
    log_prob: float
    ctx: dict
    done: bool
    truncated: bool

    def score(self) -> float:
        # normalize by emission count; EOS counts as an emission
        steps = len(self.tokens) + (1 if self.done and not self.truncated else 0)
        return self.log_prob / max(steps, 1)


def beam_decode(model, params: ParamSet, encoded: tuple, width: int,
                max_len: int | None = None) -> DecodeResult:
    if len(encoded[0]) != 1:
        raise ValueError("beam search decodes one example at a time")
    if width < 1:
        raise ValueError("beam width must be >= 1")
    b = GraphBuilder(Graph(), model.param_shapes())
    ctx0 = model.start_decode(b, encoded)
    sess = Session(b.g, params)
    cap = max_len if max_len is not None else model.max_output_len(encoded, 0)

    beams = [_Beam((), 0.0, ctx0, False, False)]
    for _ in range(cap):
        if all(beam.done for beam in beams):
            break
        candidates = [beam for beam in beams if beam.done]
        for beam in beams:
            if beam.done:
                continue
            prev = beam.tokens[-1] if beam.tokens else BOS_ID
            new_ctx, step = model.decode_step(b, beam.ctx, np.array([prev]))
            dist = sess.value(step.dist)[0]
            logs = np.log(np.maximum(dist, 1e-300))
            top = np.argsort(-logs, kind="stable")[:width]
            for sym in top:
                sym = int(sym)
                if sym == EOS_ID:
                    candidates.append(_Beam(beam.tokens, beam.log_prob + logs[sym],
                                            new_ctx, True, False))
                else:
                    grown = _Beam(beam.tokens + (sym,), beam.log_prob + logs[sym],
                                  new_ctx, False, False)
                    if len(grown.tokens) >= cap:
                        grown.done = True
                        grown.truncated = True
                    candidates.append(grown)
        candidates.sort(key=lambda c: (-c.score(), c.tokens))
        beams = candidates[:width]

    best = min(beams, key=lambda c: (-c.score(), c.tokens))
    return DecodeResult(list(best.tokens), best.truncated)


def decode_strings(vocab, results: list[DecodeResult]) -> list[str]:
    return [vocab.decode_string(r.ids) for r in results]
