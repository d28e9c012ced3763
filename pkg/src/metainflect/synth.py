"""Deterministic synthetic language families for transfer experiments.

A family spec declares, in one JSON document:

    {
      "alphabet": "abdegiklmnoprstuvz",     # stem alphabet
      "stem_len": [4, 8],                   # inclusive length range
      "slots": [["PRS", "PST"], ["SG", "PL"]],   # one tag drawn per slot
      "languages": [
        {
          "name": "alpha1",
          "family": "alpha",
          "substitutions": [["o", "u"]],    # charwise stem rewrites
          "suffix_rules": [
            ["PST", "ti"],                          # plain suffix
            ["PL", [["aeiou", "t"], ["", "et"]]],   # allomorphic: final-char
            ...                                     # context, first match wins
          ],
          "sizes": {"train": 2000, "dev": 50, "test": 500}
        },
        ...
      ]
    }

Every language must rule every slot tag exactly once (duplicate tags are an
error) and each rule needs a catch-all context. Languages declared to be in
the same family must share at least ``min_related_overlap`` of their rules.

Generation is driven by per-split streams shared across languages: language
i's example j uses the same stem and tag draw as language k's example j, so
two languages whose specs differ on one rule produce datasets that differ
only on that rule's forms. Stems never repeat anywhere in a generated
family, so test stems are unseen in every training split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import InflectionExample, TaskDataset, nfc

SPLITS = ("train", "dev", "test")

Rule = tuple[tuple[str, str], ...]  # ((final_char_context, suffix), ...)


class FamilySpecError(ValueError):
    pass


def normalize_rule(rule) -> Rule:
    """Plain string -> single catch-all clause; validate clause structure."""
    if isinstance(rule, str):
        return (("", rule),)
    clauses = []
    for entry in rule:
        context, suffix = entry
        clauses.append((str(context), str(suffix)))
    if not clauses or clauses[-1][0] != "":
        raise FamilySpecError("allomorphic rule needs a final catch-all clause")
    return tuple(clauses)


def apply_rule(stem: str, rule) -> str:
    """Append the suffix whose context matches the stem's final character."""
    clauses = normalize_rule(rule)
    final = stem[-1]
    for context, suffix in clauses:
        if context == "" or final in context:
            return stem + suffix
    raise FamilySpecError("no rule clause matched")  # unreachable: catch-all enforced


@dataclass(frozen=True)
class LanguageSpec:
    name: str
    family: str
    suffix_rules: tuple[tuple[str, Rule], ...]
    substitutions: tuple[tuple[str, str], ...]
    sizes: tuple[tuple[str, int], ...]

    def __post_init__(self):
        # canonical ordering so equality is independent of declaration order
        object.__setattr__(self, "suffix_rules", tuple(sorted(self.suffix_rules)))
        sized = dict(self.sizes)
        object.__setattr__(
            self, "sizes", tuple((s, sized[s]) for s in SPLITS if s in sized)
        )

    def rule_map(self) -> dict[str, Rule]:
        return dict(self.suffix_rules)

    def size_of(self, split: str) -> int:
        return dict(self.sizes).get(split, 0)


@dataclass(frozen=True)
class FamilySpec:
    alphabet: str
    stem_len: tuple[int, int]
    slots: tuple[tuple[str, ...], ...]
    languages: tuple[LanguageSpec, ...]
    min_related_overlap: float = 0.7
    # tag skew for the train split only (dev/test stay uniform): small training
    # sets then starve on rare slot values the way low-resource corpora do
    train_slot_weights: tuple[tuple[float, ...], ...] | None = None

    @property
    def slot_tags(self) -> tuple[str, ...]:
        return tuple(t for slot in self.slots for t in slot)

    def language(self, name: str) -> LanguageSpec:
        for lang in self.languages:
            if lang.name == name:
                return lang
        raise KeyError(name)

    def family_of(self, name: str) -> str:
        return self.language(name).family


def rule_overlap(a: LanguageSpec, b: LanguageSpec) -> float:
    ra, rb = a.rule_map(), b.rule_map()
    tags = set(ra) | set(rb)
    shared = sum(1 for t in tags if ra.get(t) == rb.get(t))
    return shared / len(tags)


def validate_spec(spec: FamilySpec) -> None:
    if len(spec.languages) < 2:
        raise FamilySpecError("a family spec needs at least 2 languages")
    if not spec.alphabet:
        raise FamilySpecError("empty stem alphabet")
    lo, hi = spec.stem_len
    if not (1 <= lo <= hi):
        raise FamilySpecError(f"bad stem length range {spec.stem_len}")
    tag_inventory = spec.slot_tags
    if len(set(tag_inventory)) != len(tag_inventory):
        raise FamilySpecError("duplicate tag across slots")

    names = [lang.name for lang in spec.languages]
    if len(set(names)) != len(names):
        raise FamilySpecError("duplicate language name")

    for lang in spec.languages:
        tags = [t for t, _ in lang.suffix_rules]
        if len(set(tags)) != len(tags):
            raise FamilySpecError(f"{lang.name}: colliding tags in suffix table")
        if set(tags) != set(tag_inventory):
            raise FamilySpecError(
                f"{lang.name}: suffix table must rule exactly the slot tags"
            )

    for i, a in enumerate(spec.languages):
        for b in spec.languages[i + 1:]:
            if a.family == b.family and rule_overlap(a, b) < spec.min_related_overlap:
                raise FamilySpecError(
                    f"{a.name} and {b.name} declared related but share "
                    f"{rule_overlap(a, b):.0%} of rules "
                    f"(< {spec.min_related_overlap:.0%})"
                )


# ---------------------------------------------------------------------------
# JSON loading

def _language_from_payload(payload) -> LanguageSpec:
    rules = tuple(
        (str(tag), normalize_rule(rule)) for tag, rule in payload["suffix_rules"]
    )
    subs = tuple((str(a), str(b)) for a, b in payload.get("substitutions", ()))
    sizes = tuple((split, int(n)) for split, n in payload.get("sizes", {}).items())
    for split, _ in sizes:
        if split not in SPLITS:
            raise FamilySpecError(f"unknown split {split!r} in sizes")
    return LanguageSpec(
        name=nfc(str(payload["name"])),
        family=str(payload["family"]),
        suffix_rules=rules,
        substitutions=subs,
        sizes=sizes,
    )


def spec_from_json(text: str) -> FamilySpec:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as err:
        raise FamilySpecError(f"invalid JSON: {err}") from err
    try:
        weights = payload.get("train_slot_weights")
        spec = FamilySpec(
            alphabet=str(payload["alphabet"]),
            stem_len=tuple(int(n) for n in payload["stem_len"]),
            slots=tuple(tuple(str(t) for t in slot) for slot in payload["slots"]),
            languages=tuple(_language_from_payload(p) for p in payload["languages"]),
            min_related_overlap=float(payload.get("min_related_overlap", 0.7)),
            train_slot_weights=None if weights is None else tuple(
                tuple(float(x) for x in w) for w in weights
            ),
        )
    except (KeyError, TypeError, ValueError) as err:
        if isinstance(err, FamilySpecError):
            raise
        raise FamilySpecError(f"malformed family spec: {err}") from err
    validate_spec(spec)
    return spec


def spec_to_json(spec: FamilySpec) -> str:
    payload = {
        "alphabet": spec.alphabet,
        "stem_len": list(spec.stem_len),
        "slots": [list(slot) for slot in spec.slots],
        "min_related_overlap": spec.min_related_overlap,
        "train_slot_weights": None if spec.train_slot_weights is None else [
            list(w) for w in spec.train_slot_weights
        ],
        "languages": [
            {
                "name": lang.name,
                "family": lang.family,
                "suffix_rules": [[t, [list(c) for c in r]] for t, r in lang.suffix_rules],
                "substitutions": [list(s) for s in lang.substitutions],
                "sizes": dict(lang.sizes),
            }
            for lang in spec.languages
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False)


def load_spec(path) -> FamilySpec:
    with open(path, encoding="utf-8") as fh:
        return spec_from_json(fh.read())


# ---------------------------------------------------------------------------
# generation

def _draw_stems(spec: FamilySpec, seed: int, count: int) -> list[str]:
    rng = np.random.default_rng([int(seed), 101])
    lo, hi = spec.stem_len
    letters = list(spec.alphabet)
    seen: set[str] = set()
    stems = []
    while len(stems) < count:
        for _ in range(1000):
            length = int(rng.integers(lo, hi + 1))
            stem = "".join(letters[i] for i in rng.integers(0, len(letters), size=length))
            if stem not in seen:
                break
        else:
            raise FamilySpecError("stem space too small to draw distinct stems")
        seen.add(stem)
        stems.append(stem)
    return stems


def _draw_tag_combos(spec: FamilySpec, seed: int, split: str,
                     count: int) -> list[tuple[str, ...]]:
    rng = np.random.default_rng([int(seed), 202, SPLITS.index(split)])
    weights = spec.train_slot_weights if split == "train" else None
    if weights is not None:
        if len(weights) != len(spec.slots) or any(
                len(w) != len(slot) for w, slot in zip(weights, spec.slots)):
            raise FamilySpecError("train_slot_weights must mirror the slots")
        probs = [np.asarray(w, dtype=np.float64) / np.sum(w) for w in weights]
    combos = []
    for _ in range(count):
        combo = []
        for j, slot in enumerate(spec.slots):
            if weights is None:
                combo.append(slot[int(rng.integers(0, len(slot)))])
            else:
                combo.append(slot[int(rng.choice(len(slot), p=probs[j]))])
        combos.append(tuple(combo))
    return combos


def make_example(spec: FamilySpec, lang: LanguageSpec, stem: str,
                 tags: tuple[str, ...]) -> InflectionExample:
    subs = dict(lang.substitutions)
    lemma = "".join(subs.get(c, c) for c in stem)
    rules = lang.rule_map()
    form = lemma
    for tag in tags:  # agglutinative: later slots see the current word end
        form = apply_rule(form, rules[tag])
    return InflectionExample(lemma, tags, form, lang.name)


def generate_synthetic_family(spec: FamilySpec, seed: int) -> list[TaskDataset]:
    """All languages' train/dev/test datasets, deterministically from the seed."""
    validate_spec(spec)
    split_sizes = {s: max(lang.size_of(s) for lang in spec.languages) for s in SPLITS}
    total = sum(split_sizes.values())
    stems = _draw_stems(spec, seed, total)

    pools: dict[str, list] = {}
    offset = 0
    for split in SPLITS:
        n = split_sizes[split]
        combos = _draw_tag_combos(spec, seed, split, n)
        pools[split] = list(zip(stems[offset:offset + n], combos))
        offset += n

    datasets = []
    for lang in spec.languages:
        for split in SPLITS:
            n = lang.size_of(split)
            if n == 0:
                continue
            examples = tuple(
                make_example(spec, lang, stem, tags) for stem, tags in pools[split][:n]
            )
            datasets.append(TaskDataset(lang.name, split, examples))
    return datasets


def index_datasets(datasets) -> dict[tuple[str, str], TaskDataset]:
    return {(ds.language, ds.split): ds for ds in datasets}


# ---------------------------------------------------------------------------
# benchmark specs used by the transfer and ablation experiments

_VOWELS = "aeiou"

_ALPHA_BASE = {
    "PRS": (("", ""),),
    "PST": ((_VOWELS, "ti"), ("", "iti")),
    "FUT": ((_VOWELS, "ra"), ("", "ora")),
    "HAB": ((_VOWELS, "mes"), ("", "emes")),
    "SG": (("", ""),),
    "PL": ((_VOWELS, "t"), ("", "et")),
    "DU": ((_VOWELS, "gu"), ("", "ugu")),
}

_BETA_BASE = {
    "PRS": ((_VOWELS, "k"), ("", "ak")),
    "PST": ((_VOWELS, "zda"), ("", "azda")),
    "FUT": ((_VOWELS, "vel"), ("", "ovel")),
    "HAB": ((_VOWELS, "dun"), ("", "udun")),
    "SG": (("", ""),),
    "PL": ((_VOWELS, "mi"), ("", "imi")),
    "DU": ((_VOWELS, "ski"), ("", "iski")),
}

_SLOTS = (("PRS", "PST", "FUT", "HAB"), ("SG", "PL", "DU"))
_TRAIN_SKEW = ((0.52, 0.26, 0.13, 0.09), (0.55, 0.30, 0.15))
_ALPHABET = "abdegiklmnoprstuvz"


def _rules(base: dict, **overrides) -> tuple:
    table = dict(base)
    for tag, rule in overrides.items():
        table[tag] = normalize_rule(rule)
    return tuple(sorted(table.items()))


def _sizes(train, dev, test):
    return (("train", train), ("dev", dev), ("test", test))


def related_family_spec(source_train: int = 2000, target_train: int = 100,
                        dev: int = 50, test: int = 500) -> FamilySpec:
    """One family, two big source languages plus one small target.

    The target shares 5 of 7 rules with each source; its two divergent rules
    are false friends in different slots (its FUT takes the family's PST
    ending, its PL the family's HAB ending, making PL/HAB syncretic). A
    jointly trained model has to learn two independent language-conditional
    reroutings against thousands of conflicting source examples, while
    fine-tuning just flips two rules; the skewed training distribution
    starves a target-only model on the rare slot values.
    """
    return FamilySpec(
        alphabet=_ALPHABET,
        stem_len=(4, 8),
        slots=_SLOTS,
        languages=(
            LanguageSpec("alpha1", "alpha", _rules(_ALPHA_BASE), (),
                         _sizes(source_train, dev, test)),
            LanguageSpec("alpha2", "alpha",
                         _rules(_ALPHA_BASE, FUT=((_VOWELS, "ro"), ("", "oro"))),
                         (("g", "k"),),
                         _sizes(source_train, dev, test)),
            LanguageSpec("alpha_t", "alpha",
                         _rules(_ALPHA_BASE,
                                FUT=((_VOWELS, "ti"), ("", "iti")),
                                PL=((_VOWELS, "mes"), ("", "emes"))),
                         (("z", "s"),),
                         _sizes(target_train, dev, test)),
        ),
        train_slot_weights=_TRAIN_SKEW,
    )


def two_family_spec(source_train: int = 2000, target_train: int = 100,
                    dev: int = 50, test: int = 500) -> FamilySpec:
    """Two unrelated families; the target belongs to the first one."""
    alpha = related_family_spec(source_train, target_train, dev, test)
    beta = (
        LanguageSpec("beta1", "beta", _rules(_BETA_BASE), (),
                     _sizes(source_train, dev, test)),
        LanguageSpec("beta2", "beta",
                     _rules(_BETA_BASE, HAB=((_VOWELS, "dor"), ("", "udor"))),
                     (("e", "i"),),
                     _sizes(source_train, dev, test)),
    )
    return FamilySpec(
        alphabet=alpha.alphabet,
        stem_len=alpha.stem_len,
        slots=alpha.slots,
        languages=alpha.languages + beta,
        train_slot_weights=alpha.train_slot_weights,
    )
