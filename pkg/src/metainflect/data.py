"""Inflection corpus handling: records, vocabularies, encodings, sampling.

File format is the SIGMORPHON-style three-column TSV: lemma, inflected form,
semicolon-joined morphological tags, one example per line, UTF-8. All strings
are NFC-normalized at parse time; characters are Unicode scalar values.

The vocabulary keeps characters, morphological tags and language symbols in
one shared index space (language and tag symbols are ordinary input symbols
that happen never to appear in output strings), with four reserved entries:
PAD=0, BOS=1, EOS=2, UNK=3. Unknown symbols encode to UNK and are counted by
callers, never rejected.
"""

from __future__ import annotations

import hashlib
import json
import unicodedata
from dataclasses import dataclass, field

import numpy as np

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")

CHAR, TAG, LANG = "char", "tag", "lang"


class ParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def nfc(s: str) -> str:
    return unicodedata.normalize("NFC", s)


@dataclass(frozen=True)
class InflectionExample:
    """One (lemma, tag sequence, inflected form) record in one language."""

    lemma: str
    tags: tuple[str, ...]
    form: str
    language: str

    def __post_init__(self):
        if not self.lemma or not self.form:
            raise ValueError("lemma and form must be non-empty")
        if not self.tags:
            raise ValueError("tag list must be non-empty")
        object.__setattr__(self, "tags", tuple(self.tags))


@dataclass(frozen=True)
class Paradigm:
    """All known inflected forms of one lemma, keyed by tag sequence."""

    lemma: str
    slots: tuple[tuple[tuple[str, ...], str], ...]  # (tags, form) pairs

    def __post_init__(self):
        keys = [tags for tags, _ in self.slots]
        if len(set(keys)) != len(keys):
            raise ValueError(f"duplicate paradigm slots for lemma {self.lemma!r}")

    def examples(self, language: str) -> list[InflectionExample]:
        return [InflectionExample(self.lemma, tags, form, language) for tags, form in self.slots]


def paradigms_of(dataset: "TaskDataset") -> list[Paradigm]:
    by_lemma: dict[str, list] = {}
    for ex in dataset.examples:
        by_lemma.setdefault(ex.lemma, []).append((ex.tags, ex.form))
    return [Paradigm(lemma, tuple(slots)) for lemma, slots in by_lemma.items()]


@dataclass(frozen=True)
class TaskDataset:
    language: str
    split: str
    examples: tuple[InflectionExample, ...]

    def __post_init__(self):
        if self.split not in ("train", "dev", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        for ex in self.examples:
            if ex.language != self.language:
                raise ValueError(
                    f"example language {ex.language!r} does not match dataset {self.language!r}"
                )
        object.__setattr__(self, "examples", tuple(self.examples))

    def __len__(self):
        return len(self.examples)


def parse_dataset(text: str, language: str, split: str = "train") -> TaskDataset:
    """Parse TSV text into a TaskDataset, preserving line order."""
    examples = []
    for lineno, raw in enumerate(text.split("\n"), start=1):
        if not raw.strip():
            continue
        fields = raw.split("\t")
        if len(fields) != 3:
            raise ParseError(f"expected 3 tab-separated fields, got {len(fields)}", lineno)
        lemma, form, tag_field = (nfc(f.strip()) for f in fields)
        tags = tuple(t for t in tag_field.split(";") if t)
        if not lemma or not form or not tags:
            raise ParseError("empty lemma, form, or tag list", lineno)
        examples.append(InflectionExample(lemma, tags, form, nfc(language)))
    return TaskDataset(nfc(language), split, tuple(examples))


def serialize_dataset(dataset: TaskDataset) -> str:
    lines = [f"{ex.lemma}\t{ex.form}\t{';'.join(ex.tags)}" for ex in dataset.examples]
    return "\n".join(lines) + ("\n" if lines else "")


def load_dataset(path, language: str, split: str = "train") -> TaskDataset:
    with open(path, encoding="utf-8") as fh:
        return parse_dataset(fh.read(), language, split)


# ---------------------------------------------------------------------------
# vocabulary

@dataclass(frozen=True)
class Vocabulary:
    """Bidirectional symbol/index maps over one shared index space."""

    symbols: tuple[str, ...]            # index -> glyph
    kinds: tuple[str, ...]              # index -> reserved/char/tag/lang
    char_ids: dict[str, int] = field(compare=False)
    tag_ids: dict[str, int] = field(compare=False)
    lang_ids: dict[str, int] = field(compare=False)

    def __len__(self):
        return len(self.symbols)

    def char_id(self, c: str) -> int:
        return self.char_ids.get(c, UNK_ID)

    def tag_id(self, t: str) -> int:
        return self.tag_ids.get(t, UNK_ID)

    def lang_id(self, lang: str) -> int:
        return self.lang_ids.get(lang, UNK_ID)

    @property
    def languages(self) -> tuple[str, ...]:
        return tuple(self.lang_ids)

    def decode(self, ids) -> list[str]:
        return [self.symbols[i] for i in ids]

    def decode_string(self, ids) -> str:
        """Output character ids -> surface string; stops at EOS, skips PAD/BOS."""
        chars = []
        for i in ids:
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            chars.append(self.symbols[i])
        return "".join(chars)

    def to_json(self) -> str:
        payload = {
            "symbols": list(self.symbols),
            "kinds": list(self.kinds),
            "characters": self.char_ids,
            "morph_tags": self.tag_ids,
            "languages": self.lang_ids,
        }
        return json.dumps(payload, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        payload = json.loads(text)
        return cls(
            symbols=tuple(payload["symbols"]),
            kinds=tuple(payload["kinds"]),
            char_ids={k: int(v) for k, v in payload["characters"].items()},
            tag_ids={k: int(v) for k, v in payload["morph_tags"].items()},
            lang_ids={k: int(v) for k, v in payload["languages"].items()},
        )

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]


def build_vocabulary(datasets, extra_languages=(), extra_characters=()) -> Vocabulary:
    """Union vocabulary in first-seen order after the reserved block.

    ``extra_languages`` reserves symbols for languages that appear only at
    fine-tuning time, so a meta-trained checkpoint already carries rows for
    them. ``extra_characters`` does the same for characters.
    """
    datasets = list(datasets)
    if not datasets or all(len(d) == 0 for d in datasets):
        raise ValueError("cannot build a vocabulary from no examples")

    symbols = list(RESERVED)
    kinds = ["reserved"] * 4
    char_ids: dict[str, int] = {}
    tag_ids: dict[str, int] = {}
    lang_ids: dict[str, int] = {}

    def intern(table, glyph, kind):
        if glyph not in table:
            table[glyph] = len(symbols)
            symbols.append(glyph)
            kinds.append(kind)

    for ds in datasets:
        intern(lang_ids, ds.language, LANG)
        for ex in ds.examples:
            for c in ex.lemma:
                intern(char_ids, c, CHAR)
            for c in ex.form:
                intern(char_ids, c, CHAR)
            for t in ex.tags:
                intern(tag_ids, t, TAG)
    for lang in extra_languages:
        intern(lang_ids, nfc(lang), LANG)
    for c in extra_characters:
        intern(char_ids, nfc(c), CHAR)

    return Vocabulary(tuple(symbols), tuple(kinds), char_ids, tag_ids, lang_ids)


# ---------------------------------------------------------------------------
# model input encodings

def encode_med_input(ex: InflectionExample, vocab: Vocabulary) -> list[int]:
    """Single-sequence encoding: language, tags, then lemma characters."""
    ids = [BOS_ID, vocab.lang_id(ex.language)]
    ids.extend(vocab.tag_id(t) for t in ex.tags)
    ids.extend(vocab.char_id(c) for c in ex.lemma)
    ids.append(EOS_ID)
    return ids


def encode_pg_input(ex: InflectionExample, vocab: Vocabulary) -> tuple[list[int], list[int]]:
    """Dual-sequence encoding: (language+tags, lemma characters)."""
    tag_seq = [BOS_ID, vocab.lang_id(ex.language)]
    tag_seq.extend(vocab.tag_id(t) for t in ex.tags)
    tag_seq.append(EOS_ID)
    char_seq = [BOS_ID]
    char_seq.extend(vocab.char_id(c) for c in ex.lemma)
    char_seq.append(EOS_ID)
    return tag_seq, char_seq


def encode_target(ex: InflectionExample, vocab: Vocabulary) -> list[int]:
    ids = [BOS_ID]
    ids.extend(vocab.char_id(c) for c in ex.form)
    ids.append(EOS_ID)
    return ids


def count_unk(ids) -> int:
    return int(sum(1 for i in ids if i == UNK_ID))


# ---------------------------------------------------------------------------
# batch sampling

def sample_inner_batch(dataset: TaskDataset, k: int, rng: np.random.Generator):
    """Draw k examples: without replacement when possible, else with."""
    if k <= 0:
        raise ValueError(f"batch size must be positive, got {k}")
    if len(dataset) == 0:
        raise ValueError(f"dataset {dataset.language}/{dataset.split} is empty")
    n = len(dataset)
    if n >= k:
        idx = rng.choice(n, size=k, replace=False)
    else:
        idx = rng.integers(0, n, size=k)
    return [dataset.examples[i] for i in idx]
