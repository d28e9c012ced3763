"""Dataclass configs for models, training regimes, and whole experiments,
plus stable hashing and the config-file loader (JSON documents with
environment-variable interpolation; command-line flags override fields)."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field


@dataclass(frozen=True)
class ModelConfig:
    kind: str                   # "med" | "pg"
    embed_dim: int
    hidden_dim: int
    attn_dim: int | None = None
    prob_floor: float = 1e-12
    max_len_margin: int = 20

    def __post_init__(self):
        if self.kind not in ("med", "pg"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ValueError("dimensions must be positive")
        if self.attn_dim is None:
            object.__setattr__(self, "attn_dim", self.hidden_dim)


def default_model_config(kind: str) -> ModelConfig:
    # published dimensions: MED 300-dim embeddings / 100-dim hidden,
    # PG 100-dim everywhere
    if kind == "med":
        return ModelConfig(kind="med", embed_dim=300, hidden_dim=100)
    if kind == "pg":
        return ModelConfig(kind="pg", embed_dim=100, hidden_dim=100)
    raise ValueError(f"unknown model kind {kind!r}")


@dataclass(frozen=True)
class MetaConfig:
    """Hyperparameters for meta-training, multi-task training, and fine-tuning."""

    inner_lr: float = 0.1           # eta: simulated task-adaptation step size
    outer_lr: float = 0.1           # eta': meta-update step size
    inner_steps: int = 5            # k
    inner_batch: int = 20           # K, examples per simulated gradient step
    meta_epochs: int = 60
    tasks_per_episode: int | None = None  # None: every source task each episode
    seed: int = 0
    inner_optimizer: str = "sgd"
    outer_optimizer: str = "sgd"
    finetune_optimizer: str = "native"    # architecture's own training optimizer
    finetune_min_epochs: int = 300
    finetune_extension: int = 100
    eval_every_epoch: bool = True
    batch_size: int = 20            # joint/monolingual/fine-tune batches
    multitask_epochs: int = 60
    mono_epochs: int = 300
    clip_norm: float | None = 5.0
    native_lr: float | None = None  # Adam/Adadelta step size; None: published default
    finetune_lr: float | None = None  # fine-tune step size; None: native_lr
    embedding_init: str = "mean"    # unseen-language row: mean | random | copy:<lang>

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.inner_batch < 1:
            raise ValueError("inner_batch must be >= 1")
        if self.inner_lr <= 0 or self.outer_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.embedding_init not in ("mean", "random") and \
                not self.embedding_init.startswith("copy:"):
            raise ValueError(f"unknown embedding_init {self.embedding_init!r}")


def config_hash(*configs) -> str:
    payload = [asdict(c) if hasattr(c, "__dataclass_fields__") else c for c in configs]
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


REGIME_NAMES = ("maml", "maml+ft", "multitask", "multitask+ft", "mono")


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: model, training hyperparameters, data paths, output."""

    model: ModelConfig
    training: MetaConfig
    languages: dict[str, dict[str, str]]  # language -> split -> TSV path
    sources: tuple[str, ...]
    target: str | None
    output_dir: str
    dev_languages: tuple[str, ...] = ()
    regime: str = "maml+ft"

    def referenced_languages(self) -> list[str]:
        langs = list(self.sources) + list(self.dev_languages)
        if self.target:
            langs.append(self.target)
        return list(dict.fromkeys(langs))

    def validate(self) -> None:
        if self.regime not in REGIME_NAMES:
            raise ConfigError(f"unknown regime {self.regime!r}")
        for lang in self.referenced_languages():
            if lang not in self.languages:
                raise ConfigError(f"no data section for language {lang!r}")
        for lang, splits in self.languages.items():
            for split, path in splits.items():
                if split not in ("train", "dev", "test"):
                    raise ConfigError(f"{lang}: unknown split {split!r}")
                if not os.path.exists(path):
                    raise ConfigError(f"{lang}/{split}: missing data path {path}")
        if not self.output_dir:
            raise ConfigError("output_dir must be set")


def _interpolate(value):
    if isinstance(value, str):
        expanded = os.path.expandvars(value)
        if "$" in expanded and "${" in value:
            raise ConfigError(f"unresolved environment variable in {value!r}")
        return expanded
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    return value


# flag name -> (section, field); flags win over the config document
OVERRIDABLE = {
    "seed": ("training", "seed"),
    "inner_lr": ("training", "inner_lr"),
    "outer_lr": ("training", "outer_lr"),
    "inner_steps": ("training", "inner_steps"),
    "inner_batch": ("training", "inner_batch"),
    "meta_epochs": ("training", "meta_epochs"),
    "multitask_epochs": ("training", "multitask_epochs"),
    "mono_epochs": ("training", "mono_epochs"),
    "batch_size": ("training", "batch_size"),
    "finetune_min_epochs": ("training", "finetune_min_epochs"),
    "finetune_extension": ("training", "finetune_extension"),
    "native_lr": ("training", "native_lr"),
    "clip_norm": ("training", "clip_norm"),
    "outer_optimizer": ("training", "outer_optimizer"),
    "embedding_init": ("training", "embedding_init"),
    "model_kind": ("model", "kind"),
    "embed_dim": ("model", "embed_dim"),
    "hidden_dim": ("model", "hidden_dim"),
    "output_dir": (None, "output_dir"),
    "regime": (None, "regime"),
    "target": (None, "target"),
}


def experiment_config_from_payload(payload: dict, overrides: dict | None = None):
    payload = _interpolate(payload)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    for flag, value in overrides.items():
        if flag not in OVERRIDABLE:
            raise ConfigError(f"unknown override {flag!r}")
        section, name = OVERRIDABLE[flag]
        if section is None:
            payload[name] = value
        else:
            payload.setdefault(section, {})[name] = value
    try:
        model_payload = dict(payload.get("model", {}))
        kind = model_payload.pop("kind", "pg")
        base = default_model_config(kind)
        model = ModelConfig(kind=kind, **{
            **{f: getattr(base, f) for f in ("embed_dim", "hidden_dim", "attn_dim",
                                             "prob_floor", "max_len_margin")},
            **model_payload,
        })
        training = MetaConfig(**payload.get("training", {}))
        config = ExperimentConfig(
            model=model,
            training=training,
            languages={lang: dict(splits)
                       for lang, splits in payload.get("languages", {}).items()},
            sources=tuple(payload.get("sources", ())),
            target=payload.get("target"),
            output_dir=str(payload.get("output_dir", "")),
            dev_languages=tuple(payload.get("dev_languages", ())),
            regime=str(payload.get("regime", "maml+ft")),
        )
    except (TypeError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"malformed experiment config: {err}") from err
    config.validate()
    return config


def load_experiment_config(path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file is not valid JSON: {err}") from err
    return experiment_config_from_payload(payload, overrides)


def experiment_config_to_payload(config: ExperimentConfig) -> dict:
    return {
        "model": asdict(config.model),
        "training": asdict(config.training),
        "languages": config.languages,
        "sources": list(config.sources),
        "target": config.target,
        "dev_languages": list(config.dev_languages),
        "output_dir": config.output_dir,
        "regime": config.regime,
    }
