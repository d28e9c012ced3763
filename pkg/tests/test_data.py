import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metainflect.data import (
    BOS_ID,
    EOS_ID,
    UNK_ID,
    InflectionExample,
    Paradigm,
    ParseError,
    TaskDataset,
    Vocabulary,
    build_vocabulary,
    encode_med_input,
    encode_pg_input,
    encode_target,
    paradigms_of,
    parse_dataset,
    sample_inner_batch,
    serialize_dataset,
)


class TestParsing:
    def test_single_line(self):
        ds = parse_dataset("walk\twalked\tV;PST", "english")
        assert len(ds) == 1
        ex = ds.examples[0]
        assert ex.lemma == "walk"
        assert ex.form == "walked"
        assert ex.tags == ("V", "PST")
        assert ex.language == "english"

    def test_multi_tag_line(self):
        ds = parse_dataset("eat\teaten\tV;V.PTCP;PST", "english")
        assert ds.examples[0].tags == ("V", "V.PTCP", "PST")
        assert ds.examples[0].form == "eaten"

    def test_two_fields_raise_with_line_number(self):
        with pytest.raises(ParseError, match="line 1") as info:
            parse_dataset("a\tb", "english")
        assert info.value.line == 1

    def test_error_line_number_counts_all_lines(self):
        with pytest.raises(ParseError, match="line 3"):
            parse_dataset("a\tb\tT\n\nbad line", "english")

    def test_empty_file_is_empty_dataset(self):
        ds = parse_dataset("", "english")
        assert len(ds) == 0

    def test_nfc_normalization(self):
        # e + combining acute vs precomposed e-acute must parse identically
        decomposed = "café\tcafés\tN;PL"
        composed = "café\tcafés\tN;PL"
        a = parse_dataset(decomposed, "french")
        b = parse_dataset(composed, "french")
        assert a.examples[0] == b.examples[0]

    def test_round_trip(self):
        text = "walk\twalked\tV;PST\neat\teaten\tV;V.PTCP;PST\n"
        ds = parse_dataset(text, "english")
        assert serialize_dataset(ds) == text
        assert parse_dataset(serialize_dataset(ds), "english") == ds


class TestRecords:
    def test_rejects_empty_fields(self):
        with pytest.raises(ValueError):
            InflectionExample("", ("T",), "x", "l")
        with pytest.raises(ValueError):
            InflectionExample("x", (), "x", "l")
        with pytest.raises(ValueError):
            InflectionExample("x", ("T",), "", "l")

    def test_dataset_language_consistency(self):
        ex = InflectionExample("a", ("T",), "b", "lang1")
        with pytest.raises(ValueError, match="language"):
            TaskDataset("lang2", "train", (ex,))

    def test_paradigm_rejects_duplicate_slots(self):
        with pytest.raises(ValueError, match="duplicate"):
            Paradigm("walk", ((("V",), "walks"), (("V",), "walked")))

    def test_paradigms_group_by_lemma(self):
        ds = parse_dataset("walk\twalks\tV;3SG\nwalk\twalked\tV;PST\neat\tate\tV;PST", "en")
        paradigms = paradigms_of(ds)
        assert {p.lemma for p in paradigms} == {"walk", "eat"}
        walk = next(p for p in paradigms if p.lemma == "walk")
        assert len(walk.slots) == 2
        assert all(ex.language == "en" for ex in walk.examples("en"))


class TestVocabulary:
    def test_single_example_contents(self):
        ds = parse_dataset("walk\twalked\tV;PST", "english")
        vocab = build_vocabulary([ds])
        assert set(vocab.char_ids) == set("walked")
        assert set(vocab.tag_ids) == {"V", "PST"}
        assert set(vocab.lang_ids) == {"english"}
        assert vocab.symbols[:4] == ("<pad>", "<s>", "</s>", "<unk>")

    def test_shared_characters_interned_once(self):
        d1 = parse_dataset("ab\tabx\tT", "l1")
        d2 = parse_dataset("ba\tbay\tT", "l2")
        vocab = build_vocabulary([d1, d2])
        assert sorted(vocab.char_ids) == ["a", "b", "x", "y"]

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            build_vocabulary([])

    def test_deterministic_assignment(self):
        d1 = parse_dataset("walk\twalked\tV;PST\neat\tate\tV;PST", "en")
        v1 = build_vocabulary([d1])
        v2 = build_vocabulary([parse_dataset(serialize_dataset(d1), "en")])
        assert v1.symbols == v2.symbols
        assert v1.content_hash() == v2.content_hash()

    def test_reserved_language_rows(self):
        ds = parse_dataset("walk\twalked\tV;PST", "en")
        vocab = build_vocabulary([ds], extra_languages=["target"])
        assert "target" in vocab.lang_ids

    def test_json_round_trip(self):
        ds = parse_dataset("walk\twalked\tV;PST", "en")
        vocab = build_vocabulary([ds])
        back = Vocabulary.from_json(vocab.to_json())
        assert back.symbols == vocab.symbols
        assert back.char_ids == vocab.char_ids
        assert back.content_hash() == vocab.content_hash()

    def test_same_glyph_as_tag_and_char(self):
        ds = parse_dataset("V\tVs\tV", "en")
        vocab = build_vocabulary([ds])
        assert vocab.char_id("V") != vocab.tag_id("V")


class TestEncoding:
    @pytest.fixture
    def vocab(self):
        ds = parse_dataset("write\twrites\t3rd;Sg;Pres", "EN")
        return build_vocabulary([ds])

    def test_med_input_layout(self, vocab):
        ex = InflectionExample("write", ("3rd", "Sg", "Pres"), "writes", "EN")
        ids = encode_med_input(ex, vocab)
        expected = (
            [BOS_ID, vocab.lang_id("EN")]
            + [vocab.tag_id(t) for t in ("3rd", "Sg", "Pres")]
            + [vocab.char_id(c) for c in "write"]
            + [EOS_ID]
        )
        assert ids == expected

    def test_target_layout(self, vocab):
        ex = InflectionExample("write", ("3rd",), "writes", "EN")
        ids = encode_target(ex, vocab)
        assert ids[0] == BOS_ID and ids[-1] == EOS_ID
        assert vocab.decode_string(ids) == "writes"

    def test_pg_dual_sequences(self, vocab):
        ex = InflectionExample("write", ("3rd", "Sg", "Pres"), "writes", "EN")
        tag_seq, char_seq = encode_pg_input(ex, vocab)
        assert tag_seq == [BOS_ID, vocab.lang_id("EN"), vocab.tag_id("3rd"),
                           vocab.tag_id("Sg"), vocab.tag_id("Pres"), EOS_ID]
        assert char_seq == [BOS_ID] + [vocab.char_id(c) for c in "write"] + [EOS_ID]

    def test_single_char_lemma(self, vocab):
        ex = InflectionExample("a", ("3rd",), "as", "EN")
        _, char_seq = encode_pg_input(ex, vocab)
        assert len(char_seq) == 3

    def test_unknown_char_becomes_unk(self, vocab):
        ex = InflectionExample("straße", ("3rd",), "straßen", "EN")
        ids = encode_med_input(ex, vocab)
        assert UNK_ID in ids

    def test_decode_recovers_symbols_except_unk(self, vocab):
        ex = InflectionExample("write", ("3rd",), "writes", "EN")
        ids = encode_med_input(ex, vocab)
        glyphs = vocab.decode(ids)
        assert glyphs[1] == "EN"
        assert "".join(glyphs[3:-1]) == "write"


class TestSampling:
    @pytest.fixture
    def dataset(self):
        lines = "\n".join(f"lem{i}\tlem{i}x\tT{i % 3}" for i in range(10))
        return parse_dataset(lines, "en")

    def test_full_draw_is_permutation(self, dataset):
        batch = sample_inner_batch(dataset, 10, np.random.default_rng(0))
        assert sorted(ex.lemma for ex in batch) == sorted(ex.lemma for ex in dataset.examples)

    def test_same_seed_same_batch(self, dataset):
        b1 = sample_inner_batch(dataset, 4, np.random.default_rng(42))
        b2 = sample_inner_batch(dataset, 4, np.random.default_rng(42))
        assert b1 == b2

    def test_oversized_draw_uses_replacement(self, dataset):
        batch = sample_inner_batch(dataset, 25, np.random.default_rng(1))
        assert len(batch) == 25

    def test_nonpositive_k_rejected(self, dataset):
        with pytest.raises(ValueError):
            sample_inner_batch(dataset, 0, np.random.default_rng(0))

    def test_seed7_golden_indices(self):
        # frozen from the seeded generator itself: first draw of 20 from 10k
        lines = "\n".join(f"l{i}\tl{i}s\tT" for i in range(10000))
        big = parse_dataset(lines, "en")
        batch = sample_inner_batch(big, 20, np.random.default_rng(7))
        got = [ex.lemma for ex in batch]
        assert got == SEED7_GOLDEN_LEMMAS


# recorded once from sample_inner_batch(10k examples, K=20, seed 7); guards
# against silent RNG-stream changes
SEED7_GOLDEN_LEMMAS = [
    "l2998", "l9431", "l6239", "l6830", "l4995", "l2249", "l7969", "l554",
    "l4679", "l2848", "l8208", "l9119", "l1190", "l52", "l8957", "l8728",
    "l5774", "l8325", "l7745", "l1314",
]


@settings(max_examples=50, deadline=None)
@given(st.lists(
    st.tuples(
        st.text(alphabet="abcdef", min_size=1, max_size=6),
        st.text(alphabet="abcdef", min_size=1, max_size=8),
        st.lists(st.sampled_from(["V", "N", "PST", "PL"]), min_size=1, max_size=3),
    ),
    min_size=1, max_size=20,
))
def test_parse_serialize_round_trip_property(rows):
    text = "".join(f"{l}\t{f}\t{';'.join(t)}\n" for l, f, t in rows)
    ds = parse_dataset(text, "lang")
    assert serialize_dataset(ds) == text
