from __future__ import annotations

import json
import logging
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cda_forge.data import (
    ColumnMap,
    Dataset,
    DatasetStats,
    Instance,
    Label,
    Original,
    compute_stats,
    dedup_key,
    find_matching_token,
    ingest_dataset,
    instance_id,
    merge_dedup,
    normalized_sentence_key,
    pct_half_up,
    render_qa,
    sample_balanced,
    stem_match,
    validate_instance,
)
from cda_forge.errors import (
    CorrectnessCoverageMismatchError,
    InsufficientClassCountError,
    MalformedRowError,
    UnknownLabelValueError,
)

from helpers import make_instance, make_synth_dataset


# --- stem matching and normalization ---

def test_stem_match_accepts_suffix_extension():
    assert stem_match("digested", "digest")
    assert stem_match("grasped", "grasp")
    assert stem_match("runs", "run")


def test_stem_match_rejects_irregular_forms():
    assert not stem_match("ran", "run")
    assert not stem_match("dig", "digest")


def test_stem_match_short_words_need_exact_match():
    assert stem_match("go", "go")
    assert not stem_match("gone", "go")  # |word| < 3 forbids prefix matching


def test_find_matching_token_returns_surface_form():
    assert find_matching_token("He digested the concept swiftly.", "digest") == "digested"
    assert find_matching_token("The sky wept.", "soar") is None


def test_normalized_key_ignores_case_punctuation_whitespace():
    a = normalized_sentence_key("He ran  fast, to catch the bus!")
    b = normalized_sentence_key("he ran fast to catch the bus")
    assert a == b


def test_dedup_key_keeps_word_order():
    assert dedup_key("the cat sat", "sat") != dedup_key("sat the cat", "sat")


# --- instances ---

def test_instance_id_deterministic_and_distinct():
    kwargs = dict(sentence="He grasped the concept quickly.", target_word="grasped")
    a = instance_id(**kwargs, label=Label.METAPHOR, provenance_kind="original")
    b = instance_id(**kwargs, label=Label.METAPHOR, provenance_kind="original")
    c = instance_id(**kwargs, label=Label.LITERAL, provenance_kind="original")
    d = instance_id(**kwargs, label=Label.METAPHOR, provenance_kind="augmented")
    assert a == b
    assert len({a, c, d}) == 3


def test_instance_id_injective_at_desk_scale():
    dataset = make_synth_dataset(2000)
    ids = [inst.id for inst in dataset]
    assert len(set(ids)) == len(ids)


def test_validate_instance_rejects_missing_target():
    inst = Instance.create(sentence="The sky wept.", target_word="soar",
                           label=Label.METAPHOR, provenance=Original("x", 0))
    with pytest.raises(ValueError, match="matches no token"):
        validate_instance(inst)


def test_dataset_rejects_duplicate_ids():
    inst = make_instance(1, Label.METAPHOR, 1)
    with pytest.raises(ValueError, match="duplicate instance id"):
        Dataset(name="d", instances=(inst, inst))


# --- QA rendering ---

def test_render_qa_matches_frozen_template():
    inst = Instance.create(
        sentence="He grasped the concept quickly.", target_word="grasped",
        label=Label.METAPHOR, provenance=Original("x", 0))
    qa = render_qa(inst)
    assert qa.instruction == (
        "Is the word 'grasped' in the sentence 'He grasped the concept quickly.' "
        "used metaphorically? Please answer with 'Yes' or 'No' only.")
    assert qa.input == ""
    assert qa.output == "Yes"


def test_render_qa_literal_flips_only_output():
    met = Instance.create(sentence="He grasped the concept quickly.",
                          target_word="grasped", label=Label.METAPHOR,
                          provenance=Original("x", 0))
    lit = Instance.create(sentence="He grasped the concept quickly.",
                          target_word="grasped", label=Label.LITERAL,
                          provenance=Original("x", 0))
    assert render_qa(met).instruction == render_qa(lit).instruction
    assert render_qa(lit).output == "No"


def test_render_qa_passes_apostrophes_through():
    inst = Instance.create(sentence="She couldn't grasp the rope.",
                           target_word="grasp", label=Label.LITERAL,
                           provenance=Original("x", 0))
    assert "She couldn't grasp the rope." in render_qa(inst).instruction


# --- ingestion ---

MAPPING = ColumnMap(sentence="text", target_word="verb", label="y")


def test_ingest_csv_maps_rows_to_instances(tmp_path):
    path = tmp_path / "src.csv"
    path.write_text("text,verb,y\n"
                    '"He ran fast to catch the bus.",ran,0\n'
                    '"He grasped the concept quickly.",grasped,1\n',
                    encoding="utf-8")
    ds = ingest_dataset(path, format="columnar-csv", mapping=MAPPING)
    assert len(ds) == 2
    first = ds.instances[0]
    assert first.label is Label.LITERAL
    assert first.provenance == Original("src", 0)
    assert ds.instances[1].label is Label.METAPHOR
    assert ds.instances[1].provenance.source_index == 1


def test_ingest_rejects_empty_sentence(tmp_path):
    path = tmp_path / "src.csv"
    path.write_text('text,verb,y\n"",ran,0\n', encoding="utf-8")
    with pytest.raises(MalformedRowError) as err:
        ingest_dataset(path, format="columnar-csv", mapping=MAPPING)
    assert err.value.row == 0


def test_ingest_collapses_byte_identical_rows(tmp_path, caplog):
    path = tmp_path / "src.csv"
    row = '"He ran fast to catch the bus.",ran,0\n'
    path.write_text("text,verb,y\n" + row + row, encoding="utf-8")
    with caplog.at_level(logging.WARNING):
        ds = ingest_dataset(path, format="columnar-csv", mapping=MAPPING)
    assert len(ds) == 1
    assert "1 duplicate row(s)" in caplog.text


def test_ingest_unknown_label_value(tmp_path):
    path = tmp_path / "src.csv"
    path.write_text('text,verb,y\n"He ran fast.",ran,maybe\n', encoding="utf-8")
    with pytest.raises(UnknownLabelValueError):
        ingest_dataset(path, format="columnar-csv", mapping=MAPPING)


def test_ingest_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        ingest_dataset(tmp_path / "nope.csv", format="columnar-csv", mapping=MAPPING)


def test_canonical_roundtrip_preserves_unknown_fields(tmp_path):
    path = tmp_path / "ds.jsonl"
    record = {"sentence": "He grasped the concept quickly.", "target_word": "grasped",
              "label": "metaphor", "pos": "VERB", "fragment_id": "kb71"}
    path.write_text(json.dumps(record) + "\n", encoding="utf-8")
    ds = ingest_dataset(path, format="canonical-jsonl")
    out = tmp_path / "out.jsonl"
    ds.save_jsonl(out)
    reloaded = json.loads(out.read_text(encoding="utf-8").strip())
    assert reloaded["pos"] == "VERB"
    assert reloaded["fragment_id"] == "kb71"
    again = Dataset.load_jsonl(out)
    assert again.instances[0] == ds.instances[0]


def test_canonical_roundtrip_is_stable(tmp_path):
    ds = make_synth_dataset(30)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    ds.save_jsonl(p1)
    Dataset.load_jsonl(p1).save_jsonl(p2)
    assert p1.read_bytes() == p2.read_bytes()


# --- sampling ---

def test_sample_balanced_all_instances_is_reorder():
    ds = make_synth_dataset(20)
    out = sample_balanced(ds, 10, seed=3)
    assert out.ids() == ds.ids()
    assert len(out) == 20


def test_sample_balanced_deterministic():
    ds = make_synth_dataset(20)
    a = sample_balanced(ds, 2, seed=7)
    b = sample_balanced(ds, 2, seed=7)
    assert [i.id for i in a] == [i.id for i in b]
    assert len(a) == 4


def test_sample_balanced_insufficient_class():
    instances = [make_instance(i, Label.METAPHOR, 1) for i in range(100)]
    instances += [make_instance(1000 + i, Label.LITERAL, 1) for i in range(150)]
    ds = Dataset(name="skewed", instances=tuple(instances))
    with pytest.raises(InsufficientClassCountError) as err:
        sample_balanced(ds, 150, seed=0)
    assert err.value.label == "metaphor"
    assert (err.value.have, err.value.need) == (100, 150)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=12), st.integers(min_value=0, max_value=2**31))
def test_sample_balanced_counts_property(n_per_class, seed):
    rng = random.Random(seed)
    n_met = rng.randint(n_per_class, n_per_class + 20)
    n_lit = rng.randint(n_per_class, n_per_class + 20)
    instances = [make_instance(i, Label.METAPHOR, 1) for i in range(n_met)]
    instances += [make_instance(10_000 + i, Label.LITERAL, 1) for i in range(n_lit)]
    ds = Dataset(name="r", instances=tuple(instances))
    out = sample_balanced(ds, n_per_class, seed=seed)
    assert out.label_count(Label.METAPHOR) == n_per_class
    assert out.label_count(Label.LITERAL) == n_per_class
    assert len(out.ids()) == 2 * n_per_class


# --- merging ---

def _single(sentence: str, target: str, i: int = 0,
            label: Label = Label.LITERAL) -> Instance:
    return Instance.create(sentence=sentence, target_word=target, label=label,
                           provenance=Original("m", i))


def test_merge_dedup_drops_key_equal_duplicates():
    base = Dataset(name="b", instances=(_single("He ran fast.", "ran"),))
    additions = Dataset(name="a", instances=(_single("He ran  fast.  ", "ran", 1),))
    merged = merge_dedup(base, additions)
    assert len(merged) == 1


def test_merge_dedup_deduplicates_within_additions():
    # the uppercased variant shares the dedup key even though its id differs
    base = Dataset(name="b", instances=(_single("s one here.", "one"),))
    additions = Dataset(name="a", instances=(
        _single("s two there.", "two", 1),
        _single("S TWO THERE.", "TWO", 2, label=Label.METAPHOR)))
    merged = merge_dedup(base, additions)
    assert len(merged) == 2
    assert [i.sentence for i in merged] == ["s one here.", "s two there."]


def test_merge_dedup_identity_on_distinct_keys():
    additions = make_synth_dataset(10, name="adds")
    merged = merge_dedup(Dataset(name="empty"), additions)
    assert [i.id for i in merged] == [i.id for i in additions]


def test_merge_dedup_idempotent_and_bounded():
    base = make_synth_dataset(10, name="base")
    additions = Dataset(name="a", instances=tuple(
        make_instance(100 + i, Label.METAPHOR, 1) for i in range(5)))
    once = merge_dedup(base, additions)
    twice = merge_dedup(once, additions)
    assert [i.id for i in once] == [i.id for i in twice]
    assert len(base) <= len(once) <= len(base) + len(additions)


def test_merge_dedup_never_drops_base():
    base = make_synth_dataset(8, name="base")
    additions = Dataset(name="a", instances=base.instances)
    merged = merge_dedup(base, additions)
    assert [i.id for i in merged] == [i.id for i in base]


# --- statistics ---

def test_compute_stats_reproduces_published_iteration_row():
    # 6000 instances, 3000 metaphor; 4117 predicted correctly, 2306 of them metaphor
    # -> 4117/6000 = 68.62%, 2306/4117 = 56.01% after half-up rounding.
    ds = make_synth_dataset(6000)
    metaphor_ids = [i.id for i in ds if i.label is Label.METAPHOR]
    literal_ids = [i.id for i in ds if i.label is Label.LITERAL]
    correct = set(metaphor_ids[:2306]) | set(literal_ids[:1811])
    correctness = {i.id: i.id in correct for i in ds}
    stats = compute_stats(ds, correctness)
    assert stats == DatasetStats(n_instances=6000, pct_metaphor=50.00,
                                 pct_correct=68.62, pct_correct_metaphor=56.01)


def test_compute_stats_without_correctness():
    ds = make_synth_dataset(4)
    stats = compute_stats(ds)
    assert stats == DatasetStats(n_instances=4, pct_metaphor=50.0)


def test_compute_stats_zero_correct_convention():
    ds = make_synth_dataset(2)
    stats = compute_stats(ds, {i.id: False for i in ds})
    assert stats.pct_correct == 0.0
    assert stats.pct_correct_metaphor == 0.0


def test_compute_stats_coverage_mismatch():
    ds = make_synth_dataset(4)
    with pytest.raises(CorrectnessCoverageMismatchError):
        compute_stats(ds, {ds.instances[0].id: True})


def test_pct_half_up_rounds_half_away_from_zero():
    assert pct_half_up(1, 800) == 0.13  # 0.125 rounds up
    assert pct_half_up(0, 0) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=1, max_value=400), st.integers(min_value=0, max_value=2**31))
def test_compute_stats_agrees_with_brute_force(n, seed):
    rng = random.Random(seed)
    instances = [make_instance(i, rng.choice([Label.METAPHOR, Label.LITERAL]),
                               rng.randint(1, 5)) for i in range(n)]
    ds = Dataset(name="r", instances=tuple(instances))
    correctness = {inst.id: rng.random() < 0.6 for inst in ds}
    stats = compute_stats(ds, correctness)

    # independent brute-force counters
    n_m = sum(1 for i in ds if i.label is Label.METAPHOR)
    n_c = sum(1 for i in ds if correctness[i.id])
    n_cm = sum(1 for i in ds if correctness[i.id] and i.label is Label.METAPHOR)
    assert stats.n_instances == n
    assert stats.pct_metaphor == pct_half_up(n_m, n)
    assert stats.pct_correct == pct_half_up(n_c, n)
    assert stats.pct_correct_metaphor == pct_half_up(n_cm, n_c)


def test_render_qa_roundtrip_yes_iff_metaphor():
    for inst in make_synth_dataset(40):
        assert (render_qa(inst).output == "Yes") == (inst.label is Label.METAPHOR)
