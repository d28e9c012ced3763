"""Source-language ablations: which languages feed the initialization.

Modes select the source set relative to the target's declared family:
ALL uses every source language, LF only the target's family, OtherLF every
family but the target's, and SINGLE trains on the target alone. Trained
initializations are cached by (source set, seed, config, data), so modes
sharing an initialization train it once.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import MetaConfig, ModelConfig
from .evaluation import EvalReport
from .pipelines import InitCache, run_regime

MODES = ("ALL", "LF", "OtherLF", "SINGLE")


@dataclass(frozen=True)
class AblationSpec:
    target: str
    mode: str
    families: tuple[tuple[str, str], ...]  # (language, family), exactly one each

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown ablation mode {self.mode!r}")
        langs = [lang for lang, _ in self.families]
        if len(set(langs)) != len(langs):
            raise ValueError("a language may appear in exactly one family")
        if self.target not in langs:
            raise ValueError(f"target {self.target!r} missing from family metadata")

    def family_of(self, language: str) -> str:
        for lang, family in self.families:
            if lang == language:
                return family
        raise KeyError(language)

    def source_languages(self) -> list[str]:
        target_family = self.family_of(self.target)
        sources = [lang for lang, _ in self.families if lang != self.target]
        if self.mode == "ALL":
            picked = sources
        elif self.mode == "LF":
            picked = [l for l in sources if self.family_of(l) == target_family]
        elif self.mode == "OtherLF":
            picked = [l for l in sources if self.family_of(l) != target_family]
        else:  # SINGLE
            return []
        if not picked:
            raise ValueError(f"mode {self.mode} selects no source languages")
        return picked


def run_ablation(spec: AblationSpec, model_cfg: ModelConfig, meta_cfg: MetaConfig,
                 datasets, regime: str = "maml+ft",
                 cache: InitCache | None = None) -> EvalReport:
    """Train under the mode's source set, fine-tune on the target, evaluate."""
    if regime not in ("maml+ft", "multitask+ft"):
        raise ValueError(f"ablations compare fine-tuned regimes, got {regime!r}")
    if spec.mode == "SINGLE":
        outcome = run_regime("mono", model_cfg, meta_cfg, datasets, [],
                             spec.target, cache=cache)
    else:
        outcome = run_regime(regime, model_cfg, meta_cfg, datasets,
                             spec.source_languages(), spec.target, cache=cache)
    return outcome.test_report
