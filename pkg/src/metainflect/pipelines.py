"""End-to-end regime pipelines: vocabulary assembly, training, fine-tuning,
evaluation, and a disk cache so ablations sharing an initialization train it
once.

Regimes:
  maml          meta-train on the source languages (initialization only)
  maml+ft       meta-train, then fine-tune on the target language
  multitask     joint training with the target's data included
  multitask+ft  joint training on sources only, then fine-tune on the target
  mono          train on the target's own small dataset only

Vocabulary policy mirrors what each regime is allowed to see: fine-tuning
regimes build it from the source languages and only reserve a row for the
target language symbol; multitask-with-target and monolingual regimes build
it from everything they train on.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

from .config import MetaConfig, ModelConfig, config_hash
from .data import TaskDataset, Vocabulary, build_vocabulary, serialize_dataset
from .evaluation import EvalReport, evaluate_model
from .pg import model_for
from .training import (
    TaskHandle,
    Trainer,
    TrainState,
    greedy_dev_scorer,
    init_target_language_embedding,
    load_train_state,
    model_grad_fn,
    save_train_state,
)

REGIMES = ("maml", "maml+ft", "multitask", "multitask+ft", "mono")


def datasets_hash(datasets: list[TaskDataset]) -> str:
    blob = "".join(
        f"#{ds.language}/{ds.split}\n{serialize_dataset(ds)}"
        for ds in sorted(datasets, key=lambda d: (d.language, d.split))
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def split_table(datasets) -> dict[tuple[str, str], TaskDataset]:
    table = {}
    for ds in datasets:
        key = (ds.language, ds.split)
        if key in table:
            raise ValueError(f"duplicate dataset for {key}")
        table[key] = ds
    return table


def task_for(table, language: str) -> TaskHandle:
    train = table.get((language, "train"))
    if train is None:
        raise ValueError(f"no training split for language {language!r}")
    return TaskHandle(language, train, table.get((language, "dev")))


@dataclass
class RegimeOutcome:
    regime: str
    model_kind: str
    seed: int
    vocab: Vocabulary
    state: TrainState
    test_report: EvalReport | None = None

    @property
    def test_accuracy(self) -> float:
        return self.test_report.accuracy if self.test_report else float("nan")


# the config fields that actually shape each training stage; fine-tune knobs,
# for instance, must not invalidate a cached meta initialization
_STAGE_FIELDS = {
    "maml": ("inner_lr", "outer_lr", "inner_steps", "inner_batch", "meta_epochs",
             "tasks_per_episode", "seed", "inner_optimizer", "outer_optimizer",
             "clip_norm", "eval_every_epoch"),
    "multitask": ("batch_size", "multitask_epochs", "seed", "native_lr",
                  "clip_norm", "eval_every_epoch"),
    "mono": ("batch_size", "mono_epochs", "seed", "native_lr", "clip_norm",
             "eval_every_epoch"),
}


class InitCache:
    """Disk cache of trained initializations keyed by everything that shaped them."""

    def __init__(self, directory=None):
        self.directory = directory
        if directory:
            os.makedirs(directory, exist_ok=True)

    def key(self, stage: str, model_cfg, meta_cfg, seed: int, languages,
            data_hash: str) -> str:
        relevant = {f: getattr(meta_cfg, f) for f in _STAGE_FIELDS[stage]}
        blob = config_hash(model_cfg, relevant,
                           {"stage": stage, "seed": seed,
                            "languages": sorted(languages), "data": data_hash})
        return f"{stage}-{blob}"

    def load(self, key: str):
        if not self.directory:
            return None
        path = os.path.join(self.directory, key + ".ckpt")
        if os.path.exists(path):
            return load_train_state(path)[0]
        return None

    def store(self, key: str, state: TrainState, *, kind: str, vocab_hash: str,
              cfg_hash: str, seed: int) -> None:
        if not self.directory:
            return
        path = os.path.join(self.directory, key + ".ckpt")
        save_train_state(path, state, kind=kind, vocab_hash=vocab_hash,
                         config_hash=cfg_hash, seed=seed)


def _source_vocab(table, source_langs, target_lang):
    pool = [table[key] for key in table
            if key[0] in source_langs and key[1] in ("train", "dev")]
    return build_vocabulary(pool, extra_languages=[target_lang] if target_lang else ())


def _trainer(model, vocab, meta_cfg) -> Trainer:
    return Trainer(model_grad_fn(model, vocab), meta_cfg,
                   dev_scorer=greedy_dev_scorer(model, vocab))


def meta_initialization(model_cfg: ModelConfig, meta_cfg: MetaConfig, table,
                        source_langs, target_lang, dev_langs=(),
                        cache: InitCache | None = None,
                        on_epoch=None) -> tuple[TrainState, Vocabulary]:
    """First-order meta-training over the source tasks."""
    vocab = _source_vocab(table, source_langs, target_lang)
    data_hash = datasets_hash([table[k] for k in table if k[0] in source_langs])
    key = cache.key("maml", model_cfg, meta_cfg, meta_cfg.seed, source_langs,
                    data_hash) if cache else None
    if cache and (hit := cache.load(key)) is not None:
        return hit, vocab

    model = model_for(model_cfg.kind, model_cfg, len(vocab))
    tasks = [task_for(table, lang) for lang in source_langs]
    dev_tasks = [task_for(table, lang) for lang in dev_langs] or None
    trainer = _trainer(model, vocab, meta_cfg)
    state = trainer.maml_train(tasks, dev_tasks=dev_tasks,
                               init_params=model.init_params(meta_cfg.seed),
                               on_epoch=on_epoch)
    if cache:
        cache.store(key, state, kind=model_cfg.kind, vocab_hash=vocab.content_hash(),
                    cfg_hash=config_hash(model_cfg, meta_cfg), seed=meta_cfg.seed)
    return state, vocab


def multitask_initialization(model_cfg: ModelConfig, meta_cfg: MetaConfig, table,
                             languages, target_lang=None,
                             cache: InitCache | None = None,
                             on_epoch=None) -> tuple[TrainState, Vocabulary]:
    """Joint training over the given languages (sources, optionally + target)."""
    if target_lang and target_lang not in languages:
        vocab = _source_vocab(table, languages, target_lang)
    else:
        pool = [table[key] for key in table
                if key[0] in languages and key[1] in ("train", "dev")]
        vocab = build_vocabulary(pool)
    data_hash = datasets_hash([table[k] for k in table if k[0] in languages])
    key = cache.key("multitask", model_cfg, meta_cfg, meta_cfg.seed, languages,
                    data_hash) if cache else None
    if cache and (hit := cache.load(key)) is not None:
        return hit, vocab

    model = model_for(model_cfg.kind, model_cfg, len(vocab))
    tasks = [task_for(table, lang) for lang in languages]
    trainer = _trainer(model, vocab, meta_cfg)
    state = trainer.multitask_train(tasks, model.native_optimizer,
                                    init_params=model.init_params(meta_cfg.seed),
                                    on_epoch=on_epoch)
    if cache:
        cache.store(key, state, kind=model_cfg.kind, vocab_hash=vocab.content_hash(),
                    cfg_hash=config_hash(model_cfg, meta_cfg), seed=meta_cfg.seed)
    return state, vocab


def finetune_on_target(model_cfg: ModelConfig, meta_cfg: MetaConfig, table,
                       init_state: TrainState, vocab, target_lang,
                       on_epoch=None) -> TrainState:
    """Initialize the target language embedding, then fine-tune on its data."""
    model = model_for(model_cfg.kind, model_cfg, len(vocab))
    params = init_target_language_embedding(
        init_state.best_params, vocab, target_lang,
        mode=meta_cfg.embedding_init, seed=meta_cfg.seed,
    )
    optimizer = (model.native_optimizer if meta_cfg.finetune_optimizer == "native"
                 else meta_cfg.finetune_optimizer)
    trainer = _trainer(model, vocab, meta_cfg)
    return trainer.finetune(params, task_for(table, target_lang), optimizer,
                            on_epoch=on_epoch)


def mono_training(model_cfg: ModelConfig, meta_cfg: MetaConfig, table,
                  target_lang, cache: InitCache | None = None,
                  on_epoch=None) -> tuple[TrainState, Vocabulary]:
    pool = [table[key] for key in table
            if key[0] == target_lang and key[1] in ("train", "dev")]
    vocab = build_vocabulary(pool)
    data_hash = datasets_hash(pool)
    key = cache.key("mono", model_cfg, meta_cfg, meta_cfg.seed, [target_lang],
                    data_hash) if cache else None
    if cache and (hit := cache.load(key)) is not None:
        return hit, vocab
    model = model_for(model_cfg.kind, model_cfg, len(vocab))
    trainer = _trainer(model, vocab, meta_cfg)
    state = trainer.train_monolingual(task_for(table, target_lang),
                                      model.native_optimizer,
                                      init_params=model.init_params(meta_cfg.seed),
                                      on_epoch=on_epoch)
    if cache:
        cache.store(key, state, kind=model_cfg.kind, vocab_hash=vocab.content_hash(),
                    cfg_hash=config_hash(model_cfg, meta_cfg), seed=meta_cfg.seed)
    return state, vocab


def evaluate_on_test(model_cfg, state: TrainState, vocab, table, target_lang,
                     strategy="greedy", cfg_hash="") -> EvalReport:
    test = table.get((target_lang, "test"))
    if test is None:
        raise ValueError(f"no test split for {target_lang!r}")
    model = model_for(model_cfg.kind, model_cfg, len(vocab))
    return evaluate_model(model, state.best_params, vocab, test,
                          strategy=strategy, config_hash=cfg_hash)


def run_regime(regime: str, model_cfg: ModelConfig, meta_cfg: MetaConfig,
               datasets, source_langs, target_lang, dev_langs=(),
               cache: InitCache | None = None, evaluate: bool = True,
               on_epoch=None) -> RegimeOutcome:
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r} (expected one of {REGIMES})")
    table = split_table(datasets)
    cfg_hash = config_hash(model_cfg, meta_cfg)

    if regime != "maml" and not target_lang:
        raise ValueError(f"regime {regime!r} needs a target language")

    if regime == "maml":
        state, vocab = meta_initialization(model_cfg, meta_cfg, table, source_langs,
                                           target_lang, dev_langs, cache, on_epoch)
        evaluate = False
    elif regime == "maml+ft":
        init, vocab = meta_initialization(model_cfg, meta_cfg, table, source_langs,
                                          target_lang, dev_langs, cache)
        state = finetune_on_target(model_cfg, meta_cfg, table, init, vocab,
                                   target_lang, on_epoch)
    elif regime == "multitask":
        languages = list(source_langs) + [target_lang]
        state, vocab = multitask_initialization(model_cfg, meta_cfg, table,
                                                languages, cache=cache,
                                                on_epoch=on_epoch)
    elif regime == "multitask+ft":
        init, vocab = multitask_initialization(model_cfg, meta_cfg, table,
                                               list(source_langs), target_lang,
                                               cache=cache)
        state = finetune_on_target(model_cfg, meta_cfg, table, init, vocab,
                                   target_lang, on_epoch)
    else:  # mono
        state, vocab = mono_training(model_cfg, meta_cfg, table, target_lang,
                                     cache, on_epoch)

    report = None
    if evaluate:
        report = evaluate_on_test(model_cfg, state, vocab, table, target_lang,
                                  cfg_hash=cfg_hash)
    return RegimeOutcome(regime, model_cfg.kind, meta_cfg.seed, vocab, state, report)
