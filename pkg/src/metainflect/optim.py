"""Optimizers: plain SGD, Adadelta, and Adam, all as pure state transitions.

Hyperparameter defaults follow the optimizers' original publications
(Adadelta: rho=0.95, eps=1e-6; Adam: alpha=1e-3, beta1=0.9, beta2=0.999,
eps=1e-8). A step maps (state, params, grads) to a fresh (state, params)
pair; nothing is mutated, and equal inputs give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import GradientMap
from .params import ParamSet, check_grads

OPTIMIZER_KINDS = ("sgd", "adadelta", "adam")


@dataclass(frozen=True)
class OptimizerState:
    kind: str
    step: int
    lr: float
    hyper: dict = field(default_factory=dict)
    slots: dict = field(default_factory=dict)  # accumulator name -> {param -> array}


def init_optimizer(kind: str, params: ParamSet, lr: float | None = None, **hyper) -> OptimizerState:
    """Zero-initialized optimizer state for the given parameter shapes."""
    zeros = lambda: {name: np.zeros(params[name].shape) for name in params}
    if kind == "sgd":
        if lr is None:
            raise ValueError("sgd requires a learning rate")
        return OptimizerState("sgd", 0, float(lr), hyper, {})
    if kind == "adadelta":
        h = {"rho": 0.95, "eps": 1e-6}
        h.update(hyper)
        return OptimizerState("adadelta", 0, float(lr if lr is not None else 1.0), h,
                              {"sq_grad": zeros(), "sq_delta": zeros()})
    if kind == "adam":
        h = {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8}
        h.update(hyper)
        return OptimizerState("adam", 0, float(lr if lr is not None else 1e-3), h,
                              {"m": zeros(), "v": zeros()})
    raise ValueError(f"unknown optimizer kind {kind!r} (expected one of {OPTIMIZER_KINDS})")


def optimizer_step(state: OptimizerState, params: ParamSet,
                   grads: GradientMap) -> tuple[OptimizerState, ParamSet]:
    check_grads(params, grads)
    if state.kind == "sgd":
        new = {n: params[n] - state.lr * grads[n] for n in params}
        return replace(state, step=state.step + 1), ParamSet(new)

    if state.kind == "adadelta":
        rho, eps = state.hyper["rho"], state.hyper["eps"]
        sq_grad, sq_delta, new = {}, {}, {}
        for n in params:
            g = np.asarray(grads[n])
            eg = rho * state.slots["sq_grad"][n] + (1 - rho) * g * g
            delta = -np.sqrt(state.slots["sq_delta"][n] + eps) / np.sqrt(eg + eps) * g
            ed = rho * state.slots["sq_delta"][n] + (1 - rho) * delta * delta
            sq_grad[n], sq_delta[n] = eg, ed
            new[n] = params[n] + state.lr * delta
        next_state = replace(state, step=state.step + 1,
                             slots={"sq_grad": sq_grad, "sq_delta": sq_delta})
        return next_state, ParamSet(new)

    if state.kind == "adam":
        b1, b2, eps = state.hyper["beta1"], state.hyper["beta2"], state.hyper["eps"]
        t = state.step + 1
        ms, vs, new = {}, {}, {}
        for n in params:
            g = np.asarray(grads[n])
            m = b1 * state.slots["m"][n] + (1 - b1) * g
            v = b2 * state.slots["v"][n] + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            ms[n], vs[n] = m, v
            new[n] = params[n] - state.lr * m_hat / (np.sqrt(v_hat) + eps)
        return replace(state, step=t, slots={"m": ms, "v": vs}), ParamSet(new)

    raise ValueError(f"unknown optimizer kind {state.kind!r}")


def state_arrays(state: OptimizerState) -> dict[str, np.ndarray]:
    """Flatten accumulators for checkpointing, keyed slot/param."""
    return {f"{slot}/{name}": arr for slot, per in state.slots.items()
            for name, arr in per.items()}


def state_from_arrays(kind: str, lr: float, step: int, hyper: dict,
                      arrays: dict[str, np.ndarray]) -> OptimizerState:
    slots: dict = {}
    for key, arr in arrays.items():
        slot, name = key.split("/", 1)
        slots.setdefault(slot, {})[name] = np.asarray(arr, dtype=np.float64)
    return OptimizerState(kind, step, lr, hyper, slots)
