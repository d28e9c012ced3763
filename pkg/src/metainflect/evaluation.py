"""Word-level exact-match evaluation and report plumbing.

Accuracy is all-or-nothing per word: a prediction counts only if it equals
the reference exactly after NFC normalization. Reports carry per-language
counts, truncation and unknown-symbol statistics, and the config/checkpoint
hashes that identify what produced them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .data import TaskDataset, count_unk, nfc
from .decoding import beam_decode, decode_strings, greedy_decode

EVAL_BATCH = 50


def exact_matches(predictions: list[str], references: list[str]) -> int:
    if len(predictions) != len(references):
        raise ValueError(
            f"got {len(predictions)} predictions for {len(references)} references"
        )
    return sum(1 for p, r in zip(predictions, references) if nfc(p) == nfc(r))


def word_accuracy(predictions: list[str], references: list[str]) -> float:
    """Fraction of predictions exactly matching their reference; no partial credit."""
    if not references:
        raise ValueError("accuracy over zero examples is undefined")
    return exact_matches(predictions, references) / len(references)


@dataclass
class EvalReport:
    model_kind: str
    strategy: str
    per_language: dict[str, dict] = field(default_factory=dict)
    truncated: int = 0
    unk_substitutions: int = 0
    config_hash: str = ""
    checkpoint_hash: str = ""

    @property
    def correct(self) -> int:
        return sum(entry["correct"] for entry in self.per_language.values())

    @property
    def total(self) -> int:
        return sum(entry["total"] for entry in self.per_language.values())

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def add_language(self, language: str, correct: int, total: int) -> None:
        entry = self.per_language.setdefault(language, {"correct": 0, "total": 0})
        entry["correct"] += correct
        entry["total"] += total
        entry["accuracy"] = entry["correct"] / entry["total"] if entry["total"] else 0.0

    def to_json(self) -> str:
        payload = {
            "model_kind": self.model_kind,
            "strategy": self.strategy,
            "per_language": self.per_language,
            "overall": {"correct": self.correct, "total": self.total,
                        "accuracy": self.accuracy},
            "truncated": self.truncated,
            "unk_substitutions": self.unk_substitutions,
            "config_hash": self.config_hash,
            "checkpoint_hash": self.checkpoint_hash,
        }
        return json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False)


def predictions_for(model, params, vocab, dataset: TaskDataset,
                    strategy: str = "greedy", beam_width: int = 5):
    """Decoded strings plus (truncation count, unk count) for one dataset."""
    examples = list(dataset.examples)
    outputs: list[str] = []
    truncated = 0
    unk = 0
    if strategy == "greedy":
        for start in range(0, len(examples), EVAL_BATCH):
            chunk = examples[start: start + EVAL_BATCH]
            encoded = model.encode_inputs(chunk, vocab)
            unk += sum(count_unk(seq) for part in encoded for seq in part)
            results = greedy_decode(model, params, encoded)
            truncated += sum(1 for r in results if r.truncated)
            outputs.extend(decode_strings(vocab, results))
    elif strategy == "beam":
        for ex in examples:
            encoded = model.encode_inputs([ex], vocab)
            unk += sum(count_unk(seq) for part in encoded for seq in part)
            result = beam_decode(model, params, encoded, width=beam_width)
            truncated += int(result.truncated)
            outputs.append(vocab.decode_string(result.ids))
    else:
        raise ValueError(f"unknown decode strategy {strategy!r}")
    return outputs, truncated, unk


def evaluate_datasets(model, params, vocab, datasets, strategy: str = "greedy",
                      beam_width: int = 5, config_hash: str = "",
                      checkpoint_hash: str = "",
                      expected_vocab_hash: str | None = None) -> EvalReport:
    if expected_vocab_hash is not None and expected_vocab_hash != vocab.content_hash():
        raise ValueError(
            "checkpoint was trained with a different vocabulary "
            f"({expected_vocab_hash} != {vocab.content_hash()})"
        )
    report = EvalReport(model_kind=model.kind, strategy=strategy,
                        config_hash=config_hash, checkpoint_hash=checkpoint_hash)
    for dataset in datasets:
        if len(dataset) == 0:
            raise ValueError(f"empty dataset {dataset.language}/{dataset.split}")
        preds, truncated, unk = predictions_for(model, params, vocab, dataset,
                                                strategy, beam_width)
        refs = [ex.form for ex in dataset.examples]
        report.add_language(dataset.language, exact_matches(preds, refs), len(refs))
        report.truncated += truncated
        report.unk_substitutions += unk
    return report


def evaluate_model(model, params, vocab, dataset: TaskDataset, **kwargs) -> EvalReport:
    return evaluate_datasets(model, params, vocab, [dataset], **kwargs)


def write_predictions_tsv(path, dataset: TaskDataset, predictions: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex, pred in zip(dataset.examples, predictions):
            fh.write(f"{ex.lemma}\t{';'.join(ex.tags)}\t{ex.form}\t{pred}\n")


def format_accuracy_table(rows: dict[str, dict[str, float]],
                          regimes: list[str] | None = None) -> str:
    """Plain-text accuracy grid: one row per language, one column per regime."""
    if regimes is None:
        regimes = sorted({r for cols in rows.values() for r in cols})
    width = max([len("language")] + [len(lang) for lang in rows])
    cols = {r: max(12, len(r) + 2) for r in regimes}
    header = "language".ljust(width) + "".join(f"{r:>{cols[r]}}" for r in regimes)
    lines = [header, "-" * len(header)]
    for lang in sorted(rows):
        cells = "".join(
            f"{rows[lang][r] * 100:>{cols[r] - 1}.2f}%" if r in rows[lang]
            else f"{'-':>{cols[r]}}"
            for r in regimes
        )
        lines.append(lang.ljust(width) + cells)
    if len(rows) > 1:
        avg = {
            r: sum(cols_[r] for cols_ in rows.values() if r in cols_)
            / max(sum(1 for cols_ in rows.values() if r in cols_), 1)
            for r in regimes
        }
        lines.append("-" * len(header))
        lines.append("average".ljust(width)
                     + "".join(f"{avg[r] * 100:>{cols[r] - 1}.2f}%" for r in regimes))
    return "\n".join(lines)
