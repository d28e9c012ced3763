"""Multi-seed synthetic-family experiments: the transfer comparison and the
source-language ablation. These are the desk-scale analogues of the paper-
style evaluations; scripts/ and the acceptance suite drive them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .ablation import AblationSpec, run_ablation
from .config import MetaConfig, ModelConfig
from .evaluation import format_accuracy_table
from .pipelines import InitCache, run_regime
from .synth import generate_synthetic_family, related_family_spec, two_family_spec

TRANSFER_REGIMES = ("maml+ft", "multitask", "multitask+ft", "mono")


def desk_model_config(kind: str = "pg") -> ModelConfig:
    return ModelConfig(kind=kind, embed_dim=16, hidden_dim=16)


def desk_meta_config(seed: int) -> MetaConfig:
    """Desk-scale budgets: meta and joint training get equal epoch counts
    (one epoch consumes each task's training set once in expectation)."""
    return MetaConfig(
        inner_lr=0.02, outer_lr=5e-3, inner_steps=3, inner_batch=20,
        meta_epochs=20, seed=seed, outer_optimizer="adam",
        batch_size=20, multitask_epochs=20, mono_epochs=300,
        finetune_min_epochs=40, finetune_extension=20, native_lr=5e-3,
    )


@dataclass
class ExperimentResult:
    per_seed: dict[str, list[float]] = field(default_factory=dict)
    seconds: float = 0.0

    def mean(self, name: str) -> float:
        return float(np.mean(self.per_seed[name]))

    def std(self, name: str) -> float:
        return float(np.std(self.per_seed[name]))

    def add(self, name: str, value: float) -> None:
        self.per_seed.setdefault(name, []).append(value)

    def summary(self) -> str:
        lines = []
        for name in self.per_seed:
            vals = ", ".join(f"{v:.3f}" for v in self.per_seed[name])
            lines.append(f"{name:14s} mean={self.mean(name):.3f} "
                         f"std={self.std(name):.3f}  [{vals}]")
        return "\n".join(lines)


def run_transfer_experiment(seeds=(1, 2, 3, 4, 5), data_seed: int = 13,
                            model_kind: str = "pg", cache_dir=None,
                            log=print) -> ExperimentResult:
    """The 3-language comparison: meta-learned + fine-tuned initialization
    against joint training (with the target included), joint training with
    fine-tuning, and training on the target alone."""
    spec = related_family_spec(source_train=2000, target_train=100, dev=50, test=500)
    datasets = generate_synthetic_family(spec, seed=data_seed)
    sources = ["alpha1", "alpha2"]
    target = "alpha_t"
    model_cfg = desk_model_config(model_kind)
    cache = InitCache(cache_dir)

    result = ExperimentResult()
    start = time.perf_counter()
    for seed in seeds:
        meta_cfg = desk_meta_config(seed)
        for regime in TRANSFER_REGIMES:
            t0 = time.perf_counter()
            out = run_regime(regime, model_cfg, meta_cfg, datasets, sources,
                             target, cache=cache)
            result.add(regime, out.test_accuracy)
            log(f"[transfer] seed={seed} {regime:14s} "
                f"acc={out.test_accuracy:.3f} ({time.perf_counter() - t0:.0f}s)")
    result.seconds = time.perf_counter() - start
    return result


def run_ablation_experiment(seeds=(1, 2, 3, 4, 5), data_seed: int = 13,
                            model_kind: str = "pg", regime: str = "maml+ft",
                            modes=("LF", "OtherLF", "SINGLE"), cache_dir=None,
                            log=print) -> ExperimentResult:
    """Source-set ablation on the 2-family setup (the target's own family
    against the unrelated one)."""
    spec = two_family_spec(source_train=2000, target_train=100, dev=50, test=500)
    datasets = generate_synthetic_family(spec, seed=data_seed)
    families = tuple((lang.name, lang.family) for lang in spec.languages)
    model_cfg = desk_model_config(model_kind)
    cache = InitCache(cache_dir)

    result = ExperimentResult()
    start = time.perf_counter()
    for seed in seeds:
        meta_cfg = desk_meta_config(seed)
        for mode in modes:
            ab = AblationSpec(target="alpha_t", mode=mode, families=families)
            t0 = time.perf_counter()
            report = run_ablation(ab, model_cfg, meta_cfg, datasets, regime,
                                  cache=cache)
            result.add(mode, report.accuracy)
            log(f"[ablation] seed={seed} {mode:8s} "
                f"acc={report.accuracy:.3f} ({time.perf_counter() - t0:.0f}s)")
    result.seconds = time.perf_counter() - start
    return result


def transfer_table(result: ExperimentResult) -> str:
    rows = {"alpha_t": {name: result.mean(name) for name in result.per_seed}}
    return format_accuracy_table(rows, regimes=list(result.per_seed))
