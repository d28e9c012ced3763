"""Training regimes over one model family: first-order meta-training across
source languages, joint multi-task training, target-language fine-tuning with
the improvement-driven extension schedule, and monolingual training.

The meta-update is deliberately first-order: a task episode simulates
adaptation with k plain gradient-descent steps on fresh K-example batches,
evaluates the gradient of a held-out batch at the adapted parameters, and
applies that gradient to the *original* parameters through the outer
optimizer. The second-order term is dropped.

All loops are driven by a single seeded generator stored in TrainState, so a
serialized state resumes into the exact run that would have happened without
the interruption.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import GradientMap, evaluate
from .config import MetaConfig
from .data import TaskDataset, sample_inner_batch
from .evaluation import predictions_for, word_accuracy
from .optim import OptimizerState, init_optimizer, optimizer_step, state_arrays, \
    state_from_arrays
from .params import ParamSet, clip_by_global_norm, load_checkpoint, save_checkpoint, \
    sgd_step


class TrainingDiverged(RuntimeError):
    """Raised when a loss stops being finite."""


@dataclass(frozen=True)
class TaskHandle:
    """One language's training task: its data splits under a shared model."""

    language: str
    train: TaskDataset
    dev: TaskDataset | None = None

    def __post_init__(self):
        if self.train.language != self.language:
            raise ValueError("train split belongs to a different language")
        if len(self.train) == 0:
            raise ValueError(f"task {self.language!r} has no training data")
        if self.dev is not None:
            if self.dev.language != self.language:
                raise ValueError("dev split belongs to a different language")
            overlap = set(self.train.examples) & set(self.dev.examples)
            if overlap:
                raise ValueError(
                    f"task {self.language!r}: train and dev share {len(overlap)} examples"
                )


@dataclass
class TrainState:
    params: ParamSet
    opt_state: OptimizerState | None
    epoch: int
    best_accuracy: float
    best_epoch: int
    best_params: ParamSet
    rng_state: dict
    history: list[dict] = field(default_factory=list)

    def rng(self) -> np.random.Generator:
        gen = np.random.default_rng(0)
        gen.bit_generator.state = self.rng_state
        return gen


def fresh_state(params: ParamSet, opt_state: OptimizerState | None, seed: int) -> TrainState:
    rng = np.random.default_rng(seed)
    return TrainState(params=params, opt_state=opt_state, epoch=0,
                      best_accuracy=-1.0, best_epoch=0, best_params=params,
                      rng_state=rng.bit_generator.state)


def save_train_state(path, state: TrainState, *, kind: str, vocab_hash: str,
                     config_hash: str, seed: int) -> None:
    arrays = {f"params/{n}": state.params[n] for n in state.params}
    arrays.update({f"best/{n}": state.best_params[n] for n in state.best_params})
    opt_meta = None
    if state.opt_state is not None:
        arrays.update({f"opt/{k}": v for k, v in state_arrays(state.opt_state).items()})
        opt_meta = {"kind": state.opt_state.kind, "lr": state.opt_state.lr,
                    "step": state.opt_state.step, "hyper": state.opt_state.hyper}
    extra = {
        "epoch": state.epoch,
        "best_accuracy": state.best_accuracy,
        "best_epoch": state.best_epoch,
        "rng_state": json.loads(json.dumps(state.rng_state)),
        "optimizer": opt_meta,
        "history": state.history,
    }
    save_checkpoint(path, ParamSet(arrays), kind=kind, vocab_hash=vocab_hash,
                    config_hash=config_hash, seed=seed, extra=extra)


def load_train_state(path) -> tuple[TrainState, dict]:
    blob, header = load_checkpoint(path)
    extra = header["extra"]
    params = ParamSet({n[len("params/"):]: blob[n] for n in blob if n.startswith("params/")})
    best = ParamSet({n[len("best/"):]: blob[n] for n in blob if n.startswith("best/")})
    opt_state = None
    if extra["optimizer"] is not None:
        meta = extra["optimizer"]
        opt_arrays = {n[len("opt/"):]: blob[n] for n in blob if n.startswith("opt/")}
        opt_state = state_from_arrays(meta["kind"], meta["lr"], meta["step"],
                                      meta["hyper"], opt_arrays)
    rng_state = extra["rng_state"]
    rng_state["state"] = {k: int(v) for k, v in rng_state["state"].items()}
    state = TrainState(params=params, opt_state=opt_state, epoch=extra["epoch"],
                       best_accuracy=extra["best_accuracy"],
                       best_epoch=extra["best_epoch"], best_params=best,
                       rng_state=rng_state, history=list(extra.get("history", [])))
    return state, header


# ---------------------------------------------------------------------------
# gradient sources

def model_grad_fn(model, vocab):
    """(params, examples) -> (loss, grads) through the model's loss graph."""

    def fn(params: ParamSet, examples) -> tuple[float, GradientMap]:
        encoded = model.encode_inputs(examples, vocab)
        targets = model.encode_targets(examples, vocab)
        graph, loss_ref = model.loss_graph(encoded, targets)
        values = evaluate(graph, params)
        loss = float(values[loss_ref.nid])
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss!r}")
        return loss, ad.backward(graph, loss_ref, values)

    return fn


def init_target_language_embedding(params: ParamSet, vocab, target_lang: str,
                                   mode: str = "mean", seed: int = 0) -> ParamSet:
    """Fill the unseen target language's embedding row before fine-tuning.

    Modes: "mean" of all other language rows (default), "random" (seeded
    uniform), or "copy:<language>" to clone a named source language's row.
    """
    if target_lang not in vocab.lang_ids:
        raise ValueError(f"language {target_lang!r} is not in the vocabulary")
    emb = np.array(params["emb"])
    target_row = vocab.lang_ids[target_lang]
    source_rows = [idx for lang, idx in vocab.lang_ids.items() if lang != target_lang]
    if mode == "mean":
        if not source_rows:
            raise ValueError("no source languages to average")
        emb[target_row] = emb[source_rows].mean(axis=0)
    elif mode == "random":
        emb[target_row] = np.random.default_rng(seed).uniform(-0.1, 0.1, emb.shape[1])
    elif mode.startswith("copy:"):
        source = mode.split(":", 1)[1]
        if source not in vocab.lang_ids:
            raise ValueError(f"copy source {source!r} is not in the vocabulary")
        emb[target_row] = emb[vocab.lang_ids[source]]
    else:
        raise ValueError(f"unknown embedding init mode {mode!r}")
    return params.updated({"emb": emb})


# ---------------------------------------------------------------------------
# fine-tune extension schedule

class ExtensionSchedule:
    """Run at least min_epochs; each time the dev score improved within the
    trailing window, extend the budget by one more window."""

    def __init__(self, min_epochs: int, extension: int):
        if min_epochs < 0 or extension < 0:
            raise ValueError("schedule lengths must be non-negative")
        self.min_epochs = min_epochs
        self.extension = extension
        self.budget = min_epochs
        self.last_improvement = 0

    def record(self, epoch: int, improved: bool) -> None:
        if improved:
            self.last_improvement = epoch
        if epoch == self.budget and self.extension > 0:
            if self.last_improvement > self.budget - self.extension:
                self.budget += self.extension

    def should_continue(self, next_epoch: int) -> bool:
        return next_epoch <= self.budget


def simulate_schedule(accuracies, min_epochs: int, extension: int) -> int:
    """Total epochs the schedule runs for a given dev-accuracy trace.

    The trace is consulted lazily and must cover the whole run.
    """
    schedule = ExtensionSchedule(min_epochs, extension)
    trace = iter(accuracies)
    best = float("-inf")
    epoch = 0
    while schedule.should_continue(epoch + 1):
        epoch += 1
        accuracy = next(trace)
        improved = accuracy > best
        best = max(best, accuracy)
        schedule.record(epoch, improved)
    return epoch


# ---------------------------------------------------------------------------
# the trainer

class Trainer:
    """Training regimes over an abstract gradient source.

    ``grad_fn(params, examples) -> (loss, grads)`` is usually a model's loss
    graph (see model_grad_fn), but anything differentiable works; the
    analytic verification oracles drive these loops with closed-form
    quadratic gradients.
    """

    def __init__(self, grad_fn, cfg: MetaConfig, dev_scorer=None):
        self.grad_fn = grad_fn
        self.cfg = cfg
        self.dev_scorer = dev_scorer  # (params, task, adapt: bool, rng) -> float

    # -- shared pieces ------------------------------------------------------

    def _clip(self, grads: GradientMap) -> GradientMap:
        if self.cfg.clip_norm is None:
            return grads
        return clip_by_global_norm(grads, self.cfg.clip_norm)

    def _init_opt(self, kind: str, params: ParamSet) -> OptimizerState:
        # plain sgd borrows the inner-loop step size; adam/adadelta use the
        # configured native_lr or fall back to their published defaults
        if kind == "sgd":
            return init_optimizer("sgd", params, lr=self.cfg.inner_lr)
        return init_optimizer(kind, params, lr=self.cfg.native_lr)

    def _step_batch(self, opt_state, params, examples):
        loss, grads = self.grad_fn(params, examples)
        opt_state, params = optimizer_step(opt_state, params, self._clip(grads))
        return opt_state, params, loss

    def _adapt_on_batches(self, theta: ParamSet, batches) -> ParamSet:
        adapted = theta
        for batch in batches:
            _, grads = self.grad_fn(adapted, batch)
            adapted = sgd_step(adapted, self._clip(grads), self.cfg.inner_lr)
        return adapted

    # -- meta-training ------------------------------------------------------

    def inner_adapt(self, theta: ParamSet, task: TaskHandle,
                    rng: np.random.Generator) -> ParamSet:
        """k simulated gradient-descent steps, each on a fresh K-example batch."""
        cfg = self.cfg
        batches = [sample_inner_batch(task.train, cfg.inner_batch, rng)
                   for _ in range(cfg.inner_steps)]
        return self._adapt_on_batches(theta, batches)

    def _episode_batches(self, task: TaskHandle, rng: np.random.Generator):
        """k inner batches plus one held-out batch, disjoint when possible."""
        cfg = self.cfg
        needed = (cfg.inner_steps + 1) * cfg.inner_batch
        if len(task.train) >= needed:
            picked = rng.choice(len(task.train), size=needed, replace=False)
            examples = [task.train.examples[i] for i in picked]
            batches = [examples[i * cfg.inner_batch: (i + 1) * cfg.inner_batch]
                       for i in range(cfg.inner_steps + 1)]
        else:  # tiny task: disjointness cannot hold, fall back to fresh draws
            batches = [sample_inner_batch(task.train, cfg.inner_batch, rng)
                       for _ in range(cfg.inner_steps + 1)]
        return batches[:-1], batches[-1]

    def meta_step(self, theta: ParamSet, task: TaskHandle, rng: np.random.Generator,
                  outer_state: OptimizerState) -> tuple[ParamSet, OptimizerState, float]:
        """One first-order meta-update of theta from one task episode."""
        inner_batches, held_out = self._episode_batches(task, rng)
        adapted = self._adapt_on_batches(theta, inner_batches)
        loss, grads = self.grad_fn(adapted, held_out)
        # first-order approximation: the held-out gradient at the adapted
        # parameters is applied directly to the original parameters
        outer_state, theta = optimizer_step(outer_state, theta, self._clip(grads))
        return theta, outer_state, loss

    def episodes_per_epoch(self, tasks) -> int:
        cfg = self.cfg
        mean_size = float(np.mean([len(t.train) for t in tasks]))
        return max(1, round(mean_size / (cfg.inner_steps * cfg.inner_batch)))

    def maml_train(self, tasks: list[TaskHandle], dev_tasks=None,
                   state: TrainState | None = None, init_params: ParamSet | None = None,
                   on_epoch=None) -> TrainState:
        cfg = self.cfg
        if not tasks:
            raise ValueError("meta-training needs at least one source task")
        if state is None:
            if init_params is None:
                raise ValueError("need initial parameters for a fresh run")
            outer = init_optimizer(cfg.outer_optimizer, init_params, lr=cfg.outer_lr)
            state = fresh_state(init_params, outer, cfg.seed)
        rng = state.rng()
        episodes = self.episodes_per_epoch(tasks)
        score_tasks = dev_tasks if dev_tasks else [t for t in tasks if t.dev]

        theta, outer = state.params, state.opt_state
        for epoch in range(state.epoch + 1, cfg.meta_epochs + 1):
            losses = []
            for _ in range(episodes):
                chosen = self._sample_tasks(tasks, rng)
                for task in chosen:
                    theta, outer, loss = self.meta_step(theta, task, rng, outer)
                    losses.append(loss)
            state = self._finish_epoch(
                state, theta, outer, rng, epoch, float(np.mean(losses)),
                score_tasks, adapt_for_dev=True, on_epoch=on_epoch,
            )
        return state

    def _sample_tasks(self, tasks, rng):
        if self.cfg.tasks_per_episode is None or self.cfg.tasks_per_episode >= len(tasks):
            return tasks
        picked = rng.choice(len(tasks), size=self.cfg.tasks_per_episode, replace=False)
        return [tasks[i] for i in sorted(picked)]

    # -- joint / monolingual training ----------------------------------------

    def _joint_epoch(self, params, opt_state, pool, rng):
        order = rng.permutation(len(pool))
        losses = []
        for start in range(0, len(order), self.cfg.batch_size):
            batch = [pool[i] for i in order[start: start + self.cfg.batch_size]]
            opt_state, params, loss = self._step_batch(opt_state, params, batch)
            losses.append(loss)
        return params, opt_state, float(np.mean(losses))

    def multitask_train(self, tasks: list[TaskHandle], optimizer_kind: str,
                        epochs: int | None = None, state: TrainState | None = None,
                        init_params: ParamSet | None = None, on_epoch=None) -> TrainState:
        """Joint training over the union of the given tasks' training data."""
        cfg = self.cfg
        if not tasks:
            raise ValueError("joint training needs at least one task")
        total_epochs = cfg.multitask_epochs if epochs is None else epochs
        if state is None:
            if init_params is None:
                raise ValueError("need initial parameters for a fresh run")
            opt = self._init_opt(optimizer_kind, init_params)
            state = fresh_state(init_params, opt, cfg.seed)
        rng = state.rng()
        pool = [ex for task in tasks for ex in task.train.examples]
        score_tasks = [t for t in tasks if t.dev]

        params, opt = state.params, state.opt_state
        for epoch in range(state.epoch + 1, total_epochs + 1):
            params, opt, mean_loss = self._joint_epoch(params, opt, pool, rng)
            state = self._finish_epoch(state, params, opt, rng, epoch, mean_loss,
                                       score_tasks, adapt_for_dev=False,
                                       on_epoch=on_epoch)
        return state

    def train_monolingual(self, task: TaskHandle, optimizer_kind: str,
                          init_params: ParamSet, state: TrainState | None = None,
                          on_epoch=None) -> TrainState:
        return self.multitask_train([task], optimizer_kind,
                                    epochs=self.cfg.mono_epochs, state=state,
                                    init_params=init_params, on_epoch=on_epoch)

    def finetune(self, params: ParamSet, target: TaskHandle, optimizer_kind: str,
                 state: TrainState | None = None, on_epoch=None) -> TrainState:
        """Continue training on the target task under the extension schedule."""
        cfg = self.cfg
        if state is None:
            if cfg.finetune_lr is not None and optimizer_kind != "sgd":
                opt = init_optimizer(optimizer_kind, params, lr=cfg.finetune_lr)
            else:
                opt = self._init_opt(optimizer_kind, params)
            state = fresh_state(params, opt, cfg.seed)
        rng = state.rng()
        pool = list(target.train.examples)
        score_tasks = [target] if target.dev else []

        schedule = ExtensionSchedule(cfg.finetune_min_epochs, cfg.finetune_extension)
        # replay improvements from a resumed history so the budget matches
        for entry in state.history:
            schedule.record(entry["epoch"], entry.get("improved", False))

        params, opt = state.params, state.opt_state
        epoch = state.epoch
        while schedule.should_continue(epoch + 1):
            epoch += 1
            params, opt, mean_loss = self._joint_epoch(params, opt, pool, rng)
            before = state.best_accuracy
            state = self._finish_epoch(state, params, opt, rng, epoch, mean_loss,
                                       score_tasks, adapt_for_dev=False,
                                       on_epoch=on_epoch)
            improved = state.best_accuracy > before
            state.history[-1]["improved"] = improved
            schedule.record(epoch, improved)
        return state

    # -- epoch bookkeeping ----------------------------------------------------

    def _dev_accuracy(self, params, tasks, adapt: bool, epoch: int) -> dict[str, float]:
        scores = {}
        for i, task in enumerate(tasks):
            scored_params = params
            if adapt:
                rng = np.random.default_rng([self.cfg.seed, 90_000 + epoch, i])
                scored_params = self.inner_adapt(params, task, rng)
            scores[task.language] = self.dev_scorer(scored_params, task)
        return scores

    def _finish_epoch(self, state, params, opt, rng, epoch, mean_loss, score_tasks,
                      adapt_for_dev, on_epoch):
        entry = {"epoch": epoch, "loss": mean_loss}
        accuracy = None
        if score_tasks and self.dev_scorer and self.cfg.eval_every_epoch:
            per_lang = self._dev_accuracy(params, score_tasks, adapt_for_dev, epoch)
            accuracy = float(np.mean(list(per_lang.values())))
            entry["dev_accuracy"] = accuracy
            entry["per_language"] = per_lang
            if adapt_for_dev:
                plain = self._dev_accuracy(params, score_tasks, False, epoch)
                entry["dev_accuracy_plain"] = float(np.mean(list(plain.values())))
        new_state = TrainState(
            params=params, opt_state=opt, epoch=epoch,
            best_accuracy=state.best_accuracy, best_epoch=state.best_epoch,
            best_params=state.best_params,
            rng_state=rng.bit_generator.state,
            history=state.history + [entry],
        )
        if accuracy is not None and accuracy > state.best_accuracy:
            new_state.best_accuracy = accuracy
            new_state.best_epoch = epoch
            new_state.best_params = params
        elif accuracy is None:
            # without a dev signal the latest parameters stand in for "best"
            new_state.best_params = params
            new_state.best_epoch = epoch
        if on_epoch:
            on_epoch(new_state, entry)
        return new_state


def greedy_dev_scorer(model, vocab):
    """Dev-set word accuracy under greedy decoding, for epoch-level tracking."""

    def score(params: ParamSet, task: TaskHandle) -> float:
        preds, _, _ = predictions_for(model, params, vocab, task.dev, "greedy")
        return word_accuracy(preds, [ex.form for ex in task.dev.examples])

    return score
