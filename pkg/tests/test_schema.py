import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jsonsynth.datasets import load_adult, movies, subsample
from jsonsynth.errors import SchemaError
from jsonsynth.grammar import JsonGrammar
from jsonsynth.schema import (
    DerivedSchema,
    PathConstraints,
    compile_mask_table,
    derive_schema,
    postprocess_record,
    postprocess_value,
    schema_masks_for_sequence,
    transform_schema_scaled,
    validate,
)
from jsonsynth.tokenizer import ARR_END, END, NUM, OBJ_END, STAR, build_vocab, fit_scalers
from jsonsynth.training import Artifacts

from conftest import RECORDS


def keywords(violations):
    return {v.keyword for v in violations}


class TestDerive:
    def test_enum_kinds_bounds(self):
        s = derive_schema([{"k": 1}, {"k": 2}, {"k": 5}], tau=3)
        c = s[("k",)]
        assert c.enum == [1, 2, 5]
        assert c.kinds == {"integer"}
        assert (c.minimum, c.maximum) == (1, 5)

    def test_required_only_when_always_present(self):
        s = derive_schema([{"a": 1, "b": 2}, {"a": 3}])
        assert s[()].required == ["a"]
        assert s[()].properties == ["a", "b"]

    def test_array_bounds(self):
        s = derive_schema([{"x": [1]}, {"x": [1, 2]}, {"x": [1, 2, 3]}])
        c = s[("x",)]
        assert (c.min_items, c.max_items) == (1, 3)
        assert c.unique_items
        assert s[("x", 0)] is s[("x", STAR)]

    def test_unique_items_off_on_repeat(self):
        s = derive_schema([{"x": [1, 1]}, {"x": [2]}])
        assert not s[("x",)].unique_items

    def test_enum_dropped_above_tau(self):
        s = derive_schema([{"k": i} for i in range(10)], tau=4)
        assert s[("k",)].enum is None

    def test_movies_mixed_kind(self, movie_records):
        s = derive_schema(movie_records)
        assert s[("awards", "wins")].kinds == {"integer", "string"}
        assert s[("awards",)].required == ["wins"]

    def test_closure_on_training_corpus(self):
        recs = subsample(load_adult("train"), 3000, seed=1) + movies()
        s = derive_schema(recs)
        assert all(validate(r, s) == [] for r in recs)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(RECORDS, min_size=1, max_size=6), st.integers(1, 6))
    def test_closure_property(self, records, tau):
        s = derive_schema(records, tau)
        for r in records:
            assert validate(r, s) == []


class TestScaledTransform:
    def test_bounds_standardized(self):
        corpus = [{"k": 0.0}, {"k": 10.0}]
        sc = fit_scalers(corpus, tau=1)
        s = transform_schema_scaled(derive_schema(corpus, tau=1), sc)
        c = s[("k",)]
        assert (c.minimum, c.maximum) == (-1.0, 1.0)
        assert c.scaled and c.enum is None

    def test_enum_removed_on_scaled_key(self):
        corpus = [{"k": float(i), "c": "x"} for i in range(5)]
        base = derive_schema(corpus, tau=10)
        assert base[("k",)].enum is not None
        sc = fit_scalers(corpus, tau=3)
        out = transform_schema_scaled(base, sc)
        assert out[("k",)].enum is None
        assert out[("c",)] == base[("c",)]

    def test_missing_schema_entry(self):
        corpus = [{"k": float(i)} for i in range(5)]
        sc = fit_scalers(corpus, tau=1)
        with pytest.raises(SchemaError):
            transform_schema_scaled(derive_schema([{"other": 1}]), sc)


class TestMaskTable:
    def test_enum_whitelist(self):
        corpus = [{"k": "yes"}, {"k": "no"}, {"j": "maybe"}]
        v = build_vocab(corpus)
        t = compile_mask_table(derive_schema(corpus), v)
        row = t.mask(("k",))
        values = {v.value_of(i) for i in v.value_range if row[i]}
        assert values == {"yes", "no"}

    def test_key_row_with_grammar(self):
        corpus = [{"o": {"a": 1, "b": 2}, "z": 0}]
        v = build_vocab(corpus)
        art = Artifacts.derive(corpus)
        s = art.encode(corpus[0])
        t = 2  # mask at OBJ_START governs the first key inside "o"
        eff = art.grammar.masks_for_sequence(s)[t] & schema_masks_for_sequence(s, art.table)[t]
        assert set(np.flatnonzero(eff)) == {v.key_ids["a"], v.key_ids["b"], OBJ_END}

    def test_row_zero_all_ones(self, movie_artifacts):
        t = movie_artifacts.table
        assert t.matrix[0].all()
        assert t.row(None) == 0
        assert t.row(("nope",)) == 0

    def test_every_row_enables_something(self, movie_artifacts, adult_small_artifacts):
        for art in (movie_artifacts, adult_small_artifacts):
            assert art.table.matrix.any(axis=1).all()

    def test_num_and_value_tokens_exclusive(self):
        corpus = [{"k": float(i), "c": 1.0} for i in range(10)]
        art = Artifacts.derive(corpus, tau=3)
        row = art.table.mask(("k",))
        assert row[NUM]
        assert not any(row[i] for i in art.vocab.value_range if isinstance(art.vocab.value_of(i), float))
        assert not art.table.mask(("c",))[NUM]

    def test_indices_share_a_row(self, movie_artifacts):
        t = movie_artifacts.table
        assert t.row(("genres", 0)) == t.row(("genres", 2)) != 0

    def test_array_element_row_allows_close(self, movie_artifacts):
        assert movie_artifacts.table.mask(("genres", 3))[ARR_END]

    def test_root_row_allows_end(self, movie_artifacts):
        assert movie_artifacts.table.mask(())[END]

    def test_unseen_value_disabled(self):
        corpus = [{"a": "x"}, {"b": "y"}]
        v = build_vocab(corpus)
        t = compile_mask_table(derive_schema(corpus), v)
        assert not t.mask(("a",))[v.value_id("y")]

    @pytest.mark.parametrize("which", ["movies", "adult"])
    def test_corpus_mask_consistency(self, which, movie_records, adult_small):
        recs = movie_records if which == "movies" else adult_small
        art = Artifacts.derive(recs)
        for r in recs:
            s = art.encode(r)
            eff = art.grammar.masks_for_sequence(s) & schema_masks_for_sequence(s, art.table)
            assert all(eff[t, s.tokens[t + 1]] for t in range(len(s) - 1))

    @settings(max_examples=150, deadline=None)
    @given(st.lists(RECORDS, min_size=1, max_size=5), st.integers(1, 6))
    def test_mask_consistency_property(self, records, tau):
        art = Artifacts.derive(records, tau=tau)
        g = JsonGrammar(art.vocab)
        for r in records:
            s = art.encode(r)
            eff = g.masks_for_sequence(s) & schema_masks_for_sequence(s, art.table)
            assert all(eff[t, s.tokens[t + 1]] for t in range(len(s) - 1))


class TestPostprocess:
    def test_round_integer(self):
        c = PathConstraints(kinds={"integer"}, minimum=0, maximum=10)
        assert postprocess_value(4.7, c) == 5
        assert isinstance(postprocess_value(4.7, c), int)

    def test_snap_to_enum(self):
        c = PathConstraints(kinds={"integer"}, enum=[1, 2, 5], minimum=1, maximum=5)
        assert postprocess_value(3.2, c) == 2

    def test_clip(self):
        c = PathConstraints(kinds={"number"}, minimum=0, maximum=10)
        assert postprocess_value(12.0, c) == 10

    def test_half_away_from_zero(self):
        c = PathConstraints(kinds={"integer"}, minimum=-10, maximum=10)
        assert postprocess_value(2.5, c) == 3
        assert postprocess_value(-2.5, c) == -3

    def test_enum_tie_takes_smaller(self):
        c = PathConstraints(kinds={"integer"}, enum=[2, 4], minimum=2, maximum=4)
        assert postprocess_value(3.0, c) == 2

    def test_clip_before_snap(self):
        # nearest member of 20.0 is 19 without clipping, 9 after clipping to [0, 10]
        c = PathConstraints(kinds={"integer"}, enum=[0, 9, 19], minimum=0, maximum=10)
        assert postprocess_value(20.0, c) == 9

    @settings(max_examples=300, deadline=None)
    @given(
        st.floats(-1e4, 1e4, allow_nan=False),
        st.lists(st.integers(-100, 100), min_size=1, max_size=5, unique=True),
        st.booleans(),
    )
    def test_idempotent(self, x, members, use_enum):
        lo, hi = min(members), max(members)
        c = PathConstraints(kinds={"integer"}, enum=sorted(members) if use_enum else None, minimum=lo, maximum=hi)
        once = postprocess_value(x, c)
        assert postprocess_value(once, c) == once
        assert lo <= once <= hi

    def test_record_recurses(self):
        corpus = [{"o": {"n": 1}, "a": [0, 3]}, {"o": {"n": 9}, "a": [2]}]
        s = derive_schema(corpus, tau=1)
        out = postprocess_record({"o": {"n": 12.4}, "a": [2.6, -1.0]}, s)
        assert out == {"o": {"n": 9}, "a": [3, 0]}


class TestValidate:
    def test_extra_key(self):
        s = derive_schema([{"a": 1}])
        assert "additionalProperties" in keywords(validate({"a": 1, "b": 2}, s))

    def test_max_items(self):
        s = derive_schema([{"a": [1, 2]}])
        assert "maxItems" in keywords(validate({"a": [1, 2, 1]}, s))

    def test_each_keyword(self):
        corpus = [{"e": "x", "n": 1, "l": [1, 2], "r": True}, {"e": "y", "n": 3, "l": [3], "r": False}]
        s = derive_schema(corpus)
        assert keywords(validate({"e": "z", "n": 2, "l": [1], "r": True}, s)) == {"enum"}
        assert keywords(validate({"e": "x", "n": "1", "l": [1], "r": True}, s)) == {"type"}
        assert keywords(validate({"e": "x", "n": 1, "l": [], "r": True}, s)) == {"minItems"}
        assert keywords(validate({"e": "x", "n": 1, "l": [1, 1], "r": True}, s)) == {"uniqueItems"}
        assert keywords(validate({"e": "x", "n": 1, "l": [1]}, s)) == {"required"}
        wide = derive_schema([{"n": float(i)} for i in range(100)], tau=5)
        assert keywords(validate({"n": 120.0}, wide)) == {"maximum"}
        assert keywords(validate({"n": -1.0}, wide)) == {"minimum"}


class TestJsonSchemaDocument:
    def test_round_trip(self, movie_records, adult_small):
        for recs in (movie_records, adult_small):
            s = derive_schema(recs)
            back = DerivedSchema.from_json_schema(s.to_json_schema())
            assert back.paths == s.paths

    def test_third_party_validator_agrees(self, movie_records, adult_small):
        for recs in (movie_records, adult_small[:300]):
            s = derive_schema(recs)
            validator = jsonschema.Draft202012Validator(s.to_json_schema())
            for r in recs:
                assert list(validator.iter_errors(r)) == []

    @settings(max_examples=200, deadline=None)
    @given(st.lists(RECORDS, min_size=1, max_size=5), RECORDS)
    def test_third_party_verdict_matches(self, records, probe):
        s = derive_schema(records, tau=64)
        validator = jsonschema.Draft202012Validator(s.to_json_schema())
        ours = validate(probe, s) == []
        theirs = validator.is_valid(probe)
        assert ours == theirs
