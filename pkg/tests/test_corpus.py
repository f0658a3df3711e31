import json
import random
import string

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xhate.corpus import (
    ClassWeights,
    Corpus,
    DatasetStats,
    RowProblem,
    Source,
    SplitSpec,
    TextSample,
    binarize_mlma_label,
    clean_samples,
    compute_class_weights,
    compute_stats,
    deduplicate,
    deduplicate_with_summary,
    merge,
    mlma_to_samples,
    normalize,
    parse_conan,
    parse_mlma,
    prepare_language,
    read_conan_json,
    read_jsonl,
    read_mlma_csv,
    should_discard,
    split_train_val,
    write_jsonl,
)
from xhate.errors import ConfigError, DataError, SchemaError

COLS = {"id": "HITId", "text": "tweet", "labels": "sentiment", "language": "lang"}


def sample(i, text, label=0, lang="en", source=Source.MLMA):
    return TextSample(f"s{i}", text, lang, label, source)


def corpus_of(labels, lang="en"):
    return Corpus([sample(i, f"text number {i}", y, lang) for i, y in enumerate(labels)])


# ---------------------------------------------------------------- parsing


def test_parse_mlma_single_tag():
    rows = [{"HITId": "1", "tweet": "some tweet", "sentiment": "normal", "lang": "en"}]
    (rec,) = parse_mlma(rows, COLS)
    assert rec.label_tags == {"normal"}
    assert rec.language == "en"


def test_parse_mlma_splits_tags_on_separator():
    rows = [{"HITId": "1", "tweet": "x", "sentiment": "offensive_hateful", "lang": "en"}]
    (rec,) = parse_mlma(rows, COLS, "_")
    assert rec.label_tags == set("offensive_hateful".split("_"))
    rows[0]["sentiment"] = "offensive|hateful"
    (rec,) = parse_mlma(rows, COLS, "|")
    assert rec.label_tags == {"offensive", "hateful"}


def test_parse_mlma_drops_other_languages():
    rows = [{"HITId": "1", "tweet": "نص", "sentiment": "normal", "lang": "ar"}]
    assert parse_mlma(rows, COLS) == []


def test_parse_mlma_missing_column_is_schema_error():
    rows = [{"HITId": "1", "text": "x", "sentiment": "normal", "lang": "en"}]
    with pytest.raises(SchemaError):
        parse_mlma(rows, COLS)


def test_parse_mlma_empty_cells_are_reported_and_skipped():
    rows = [
        {"HITId": "1", "tweet": "", "sentiment": "normal", "lang": "en"},
        {"HITId": "2", "tweet": "ok", "sentiment": "", "lang": "en"},
        {"HITId": "3", "tweet": "fine", "sentiment": "normal", "lang": "en"},
    ]
    problems = []
    out = parse_mlma(rows, COLS, problems=problems)
    assert [r.id for r in out] == ["3"]
    assert problems == [RowProblem(1, "empty text cell"), RowProblem(2, "empty label cell")]


def test_parse_mlma_fixed_language_without_column():
    rows = [{"HITId": "1", "tweet": "salut", "sentiment": "normal"}]
    (rec,) = parse_mlma(rows, {"id": "HITId", "text": "tweet", "labels": "sentiment"}, language="fr")
    assert rec.language == "fr"
    with pytest.raises(SchemaError):
        parse_mlma(rows, {"text": "tweet", "labels": "sentiment"})


def test_parse_mlma_rejects_empty_separator():
    with pytest.raises(ConfigError):
        parse_mlma([], COLS, "")


@pytest.mark.parametrize(
    "tags, label",
    [({"normal"}, 0), ({"offensive"}, 1), ({"normal", "offensive"}, 1), ({"Normal"}, 0), ({"hateful", "abusive"}, 1)],
)
def test_binarize(tags, label):
    assert binarize_mlma_label(tags) == label


def test_binarize_empty_is_error():
    with pytest.raises(DataError):
        binarize_mlma_label(set())


def test_parse_conan():
    fmap = {"text": "hate", "language": "lang", "id": "id"}
    recs = [
        {"id": 1, "hate": "islamophobic text", "lang": "fr", "cn": "reply"},
        {"id": 2, "hate": "testo", "lang": "it", "cn": "risposta"},
    ]
    (s,) = parse_conan(recs, fmap, {"fr"})
    assert (s.label, s.language, s.source) == (1, "fr", Source.CONAN)
    assert parse_conan(recs[1:], fmap) == []


def test_parse_conan_keeps_every_prototype_copy():
    recs = [{"hateSpeech": "same old text", "language": "EN"} for _ in range(50)]
    assert len(parse_conan(recs)) == 50


def test_parse_conan_missing_field():
    with pytest.raises(SchemaError):
        parse_conan([{"language": "en"}])


# ---------------------------------------------------------------- text rules


def test_normalize_examples():
    assert normalize("Hello  WORLD ") == "hello world"
    assert normalize("Déjà VU") == "déjà vu"
    assert normalize(" \t\n ") == ""


@given(st.text())
def test_normalize_idempotent(x):
    assert normalize(normalize(x)) == normalize(x)


@pytest.mark.parametrize(
    "text, discard",
    [
        ("go home #refugees", True),
        ("@user listen up", True),
        ("plain angry sentence", False),
        ("price @ 5", False),
        ("email bob@mail", False),
        ("c# is a language", False),
        ("(#tag)", True),
    ],
)
def test_should_discard(text, discard):
    assert should_discard(text) is discard


def test_deduplicate_keep_first():
    a, a2, b = sample(0, "a"), sample(1, "a"), sample(2, "b")
    assert deduplicate([a, a2, b]) == [a, b]


def test_dedup_conflict_counter_matches_scan():
    rng = random.Random(3)
    items = [sample(i, rng.choice("abcdef"), rng.randint(0, 1)) for i in range(200)]
    summary = deduplicate_with_summary(items)
    first = {}
    conflicts = 0
    for s in items:
        if s.text in first:
            conflicts += first[s.text] != s.label
        else:
            first[s.text] = s.label
    assert summary.n_label_conflicts == conflicts
    assert summary.n_dropped == len(items) - len(first)


words = st.lists(st.sampled_from(["a", "b", "Cé", "#x", "@y", "z z", "  "]), min_size=0, max_size=6)


@given(st.lists(st.tuples(words, st.integers(0, 1)), max_size=30))
def test_pipeline_idempotent_and_order_stable(rows):
    samples = [sample(i, " ".join(w), y) for i, (w, y) in enumerate(rows)]
    once = clean_samples(samples)
    assert clean_samples(once) == once
    positions = [int(s.id[1:]) for s in once]
    assert positions == sorted(positions)
    Corpus(once)  # every survivor satisfies the prepared-sample invariants


def test_merge_single_is_dedup():
    c = Corpus([sample(0, "a"), sample(1, "b")])
    assert merge([c]).samples == tuple(deduplicate(c.samples))


def test_merge_disjoint_sizes_add():
    a = Corpus([sample(0, "a"), sample(1, "b")])
    b = Corpus([TextSample("t0", "c", "en", 1, Source.CONAN)])
    assert len(merge([a, b])) == 3


def test_merge_renames_colliding_ids():
    a = Corpus([sample(0, "a")])
    b = Corpus([TextSample("s0", "b", "en", 1, Source.CONAN)])
    m = merge([a, b])
    assert m.ids == ["s0", "conan:s0"]


def test_corpus_rejects_unprepared_samples():
    with pytest.raises(DataError):
        Corpus([sample(0, "Upper")])
    with pytest.raises(DataError):
        Corpus([sample(0, "#tag here")])
    with pytest.raises(DataError):
        Corpus([sample(0, "a"), sample(1, "a")])


# ---------------------------------------------------------------- split


def test_split_sizes():
    tr, va = split_train_val(corpus_of([0, 1] * 50), SplitSpec(3, 1))
    assert (len(tr), len(va)) == (75, 25)
    tr, va = split_train_val(corpus_of([0, 0, 1, 1]), SplitSpec(3, 1, stratified=False))
    assert (len(tr), len(va)) == (3, 1)


def test_split_too_small():
    with pytest.raises(DataError):
        split_train_val(corpus_of([0, 1, 1]), SplitSpec(3, 1))


def test_stratified_split_all_seeds():
    c = corpus_of([0] * 60 + [1] * 40)
    for seed in range(100):
        tr, va = split_train_val(c, SplitSpec(3, 1, seed))
        n0 = tr.labels.count(0)
        n1 = tr.labels.count(1)
        assert abs(n0 - 45) <= 1 and abs(n1 - 30) <= 1
        assert set(tr.ids) | set(va.ids) == set(c.ids)
        assert not set(tr.ids) & set(va.ids)


@settings(max_examples=60)
@given(st.lists(st.integers(0, 1), min_size=8, max_size=80), st.integers(0, 10**6), st.integers(1, 5), st.integers(1, 5))
def test_split_properties(labels, seed, a, b):
    if labels.count(0) == 0 or labels.count(1) == 0:
        labels = labels + [0, 1]
    c = corpus_of(labels)
    spec = SplitSpec(a, b, seed)
    if len(c) < a + b:
        return
    tr, va = split_train_val(c, spec)
    tr2, va2 = split_train_val(c, spec)
    assert tr.to_jsonl() == tr2.to_jsonl() and va.to_jsonl() == va2.to_jsonl()
    for k in (0, 1):
        n_k = labels.count(k)
        assert abs(tr.labels.count(k) - n_k * a / (a + b)) < 1 + 1e-9
    assert sorted(tr.ids + va.ids) == sorted(c.ids)


# ---------------------------------------------------------------- stats and weights


def test_stats_empty():
    s = compute_stats(Corpus())
    assert s.n_total == 0 and s.n_per_class == {0: 0, 1: 0} and s.token_length_histogram == {}


def test_stats_histogram():
    s = compute_stats(Corpus([sample(0, "a b"), sample(1, "a b c", 1)]))
    assert s.token_length_histogram == {2: 1, 3: 1}
    assert s.n_per_class == {0: 1, 1: 1}
    assert DatasetStats.from_dict(json.loads(json.dumps(s.to_dict()))) == s


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(1, 6)), max_size=20), st.lists(st.tuples(st.integers(0, 1), st.integers(1, 6)), max_size=20))
def test_stats_additive(a, b):
    ca = Corpus([sample(i, " ".join(["a"] * n) + f" x{i}", y) for i, (y, n) in enumerate(a)])
    cb = Corpus([TextSample(f"t{i}", " ".join(["b"] * n) + f" y{i}", "fr", y, Source.CONAN) for i, (y, n) in enumerate(b)])
    assert compute_stats(merge([ca, cb])) == compute_stats(ca) + compute_stats(cb)


def test_class_weights_examples():
    assert compute_class_weights({0: 50, 1: 50}).w == (1.0, 1.0)
    assert compute_class_weights({0: 1, 1: 1}).w == (1.0, 1.0)
    w = compute_class_weights({0: 90, 1: 10}).w
    assert w[0] == pytest.approx(100 / 180, abs=1e-15) and w[1] == pytest.approx(5.0, abs=1e-15)


def test_class_weights_empty_class():
    with pytest.raises(ConfigError, match="disable class weighting"):
        compute_class_weights({0: 10, 1: 0})


@given(st.integers(1, 10**6), st.integers(1, 10**6))
def test_weight_identity(n0, n1):
    w = compute_class_weights({0: n0, 1: n1}).w
    assert abs(n0 * w[0] + n1 * w[1] - (n0 + n1)) <= 1e-9 * (n0 + n1)


def test_class_weights_invariant():
    with pytest.raises(ConfigError):
        ClassWeights((1.0, 0.0))


# ---------------------------------------------------------------- fixture files


def test_fixture_prepare_matches_golden(data_dir):
    rows, fields = read_mlma_csv(data_dir / "pipeline" / "mlma.csv")
    mlma = parse_mlma(rows, COLS, fieldnames=fields)
    conan = parse_conan(read_conan_json(data_dir / "pipeline" / "conan.json"))
    for lang in ("en", "fr"):
        c, _ = prepare_language(lang, mlma, conan)
        assert c.to_jsonl() == (data_dir / "pipeline" / f"{lang}.golden.jsonl").read_text(encoding="utf-8")


def test_jsonl_round_trip(tmp_path):
    c = Corpus([sample(0, "déjà vu", 0, "fr"), sample(1, "other", 1, "fr")])
    write_jsonl(c, tmp_path / "c.jsonl")
    back = read_jsonl(tmp_path / "c.jsonl")
    assert back.samples == c.samples
    assert "déjà" in (tmp_path / "c.jsonl").read_text(encoding="utf-8")


def test_read_jsonl_errors(tmp_path):
    with pytest.raises(DataError):
        read_jsonl(tmp_path / "missing.jsonl")
    (tmp_path / "bad.jsonl").write_text("{not json\n")
    with pytest.raises(DataError):
        read_jsonl(tmp_path / "bad.jsonl")


def test_conan_reader_formats(tmp_path):
    recs = [{"hateSpeech": "a", "language": "EN"}, {"hateSpeech": "b", "language": "FR"}]
    (tmp_path / "arr.json").write_text(json.dumps(recs))
    (tmp_path / "wrap.json").write_text(json.dumps({"conan": recs}))
    (tmp_path / "lines.json").write_text("\n".join(json.dumps(r) for r in recs))
    for name in ("arr.json", "wrap.json", "lines.json"):
        assert read_conan_json(tmp_path / name) == recs


def test_mlma_ids_are_namespaced():
    rows = [{"HITId": "9", "tweet": "x", "sentiment": "normal", "lang": "fr"}]
    (s,) = mlma_to_samples(parse_mlma(rows, COLS))
    assert s.id == "mlma-fr-9"


def test_random_unicode_text_survives_pipeline():
    rng = random.Random(0)
    alphabet = string.ascii_letters + "éàüß  \t#@"
    samples = [sample(i, "".join(rng.choice(alphabet) for _ in range(12))) for i in range(300)]
    Corpus(clean_samples(samples))
