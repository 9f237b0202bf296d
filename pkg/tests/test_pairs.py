import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from synthiqa.agents import BUILTIN_AGENTS, preference
from synthiqa.distortions import CorpusManifest, DistortionRecipe, ManifestRecord
from synthiqa.errors import PairSamplingError, ValidationError
from synthiqa.imaging import load_image
from synthiqa.pairs import (
    DEFAULT_TYPE_MIX,
    Pair,
    PairRecord,
    agreement_histogram,
    full_agreement_fraction,
    label_pairs,
    majority_label,
    read_pairs,
    sample_pairs,
    validate_pair,
    write_pairs,
)

AGENTS = [BUILTIN_AGENTS[n] for n in ("gmsd", "mdsi", "srsim")]


def record(verdicts):
    return PairRecord("x", "y", "r", "r", 1, verdicts, [f"a{i}" for i in range(len(verdicts))])


def test_majority_label_examples():
    assert majority_label(record((1, 1, 1, 0, 0, 0))) == 1
    assert majority_label(record((0,) * 6)) == 0
    assert majority_label(record((1, 0, 0))) == 0
    assert majority_label((1, 1, 0)) == 1


@given(st.lists(st.integers(0, 1), min_size=1, max_size=12))
def test_majority_label_rule(verdicts):
    assert majority_label(verdicts) == int(sum(verdicts) >= len(verdicts) / 2)


def test_histogram_example():
    counts = agreement_histogram([record((1, 1, 1)), record((0, 0, 0)), record((1, 0, 1))])
    assert counts.tolist() == [1, 0, 1, 1]
    assert full_agreement_fraction(counts) == pytest.approx(2 / 3)
    with pytest.raises(ValidationError):
        agreement_histogram([record((1, 1)), record((1, 1, 1))])


@given(st.lists(st.lists(st.integers(0, 1), min_size=4, max_size=4), max_size=60))
def test_histogram_conservation(rows):
    counts = agreement_histogram([record(r) for r in rows])
    assert counts.sum() == len(rows)


def test_record_validation():
    with pytest.raises(ValidationError):
        record(())
    with pytest.raises(ValidationError):
        record((2,))
    with pytest.raises(ValidationError):
        PairRecord("x", "y", "r", "r", 5, (1,), ("a",))


def test_sampled_pairs_satisfy_their_types(small_corpus):
    pairs = sample_pairs(small_corpus, 500, rng=np.random.default_rng(0))
    assert {p.pair_type for p in pairs} == {1, 2, 3, 4}
    assert all(validate_pair(p, small_corpus) for p in pairs)


def test_validator_rejects_false_claims(small_corpus):
    pairs = sample_pairs(small_corpus, 200, rng=np.random.default_rng(1))
    t3 = next(p for p in pairs if p.pair_type == 3)
    t2 = next(p for p in pairs if p.pair_type == 2)
    assert not validate_pair(type(t3)(t3.x_path, t3.y_path, t3.ref_x_path, t3.ref_y_path, 2), small_corpus)
    assert not validate_pair(type(t2)(t2.x_path, t2.y_path, t2.ref_x_path, t2.ref_y_path, 3), small_corpus)


def test_sampling_is_seeded(small_corpus):
    a = sample_pairs(small_corpus, 100, rng=np.random.default_rng(4))
    b = sample_pairs(small_corpus, 100, rng=np.random.default_rng(4))
    assert a == b


def test_type_mix_frequencies(small_corpus):
    n = 100_000
    pairs = sample_pairs(small_corpus, n, rng=np.random.default_rng(2))
    freq = np.bincount([p.pair_type for p in pairs], minlength=5)[1:] / n
    assert np.all(np.abs(freq - DEFAULT_TYPE_MIX) <= 0.01)


def test_single_image_manifest(tmp_path):
    rec = ManifestRecord("ref.png", "d.png", DistortionRecipe((("jpeg", 2),)), 0)
    manifest = CorpusManifest([rec], tmp_path)
    pairs = sample_pairs(manifest, 10, type_mix=(0, 0, 0, 1), rng=np.random.default_rng(0))
    assert all(p.pair_type == 4 for p in pairs)
    with pytest.raises(PairSamplingError):
        sample_pairs(manifest, 1, type_mix=(0, 0, 1, 0), rng=np.random.default_rng(0), max_attempts=20)


def test_bad_type_mix(small_corpus):
    with pytest.raises(ValidationError):
        sample_pairs(small_corpus, 5, type_mix=(0.5, 0.5, 0.5, 0))


def test_labels_have_one_verdict_per_agent(small_pairs):
    assert all(r.M == 3 and r.agent_ids == ("gmsd", "mdsi", "srsim") for r in small_pairs)


def test_type4_pristine_vs_level5(small_corpus):
    worst = [r for r in small_corpus.distorted if max(r.recipe.levels) == 5][:10]
    assert worst
    pairs = []
    for r in worst:
        ref, dist = str(small_corpus.path(r.pristine)), str(small_corpus.path(r.distorted))
        pairs.append(Pair(ref, dist, ref, ref, 4))
    for rec in label_pairs(pairs, AGENTS):
        assert rec.verdicts == (1, 1, 1)


def test_identical_files_all_positive(small_corpus):
    r = small_corpus.distorted[0]
    d, ref = str(small_corpus.path(r.distorted)), str(small_corpus.path(r.pristine))
    (rec,) = label_pairs([Pair(d, d, ref, ref, 1)], AGENTS)
    assert rec.verdicts == (1, 1, 1)


def test_failing_pair_is_dropped(small_corpus, tmp_path, caplog):
    good = sample_pairs(small_corpus, 3, rng=np.random.default_rng(0))
    bad = Pair(str(tmp_path / "missing.png"), good[0].y_path, good[0].ref_x_path, good[0].ref_y_path, 3)
    out = label_pairs([good[0], bad, good[1]], AGENTS)
    assert len(out) == 2
    assert "missing.png" in caplog.text


def test_stored_verdicts_reproduce(small_pairs):
    rng = np.random.default_rng(0)
    for i in rng.choice(len(small_pairs), size=5, replace=False):
        r = small_pairs[i]
        got = [
            preference(a, load_image(r.ref_x_path), load_image(r.x_path), load_image(r.ref_y_path), load_image(r.y_path))
            for a in AGENTS
        ]
        assert tuple(got) == r.verdicts


def test_pair_file_round_trip(small_pairs, tmp_path):
    write_pairs(small_pairs, tmp_path / "sub" / "pairs.jsonl")
    again = read_pairs(tmp_path / "sub" / "pairs.jsonl")
    assert again == small_pairs
    text = (tmp_path / "sub" / "pairs.jsonl").read_text()
    assert str(tmp_path) not in text


def test_pair_file_errors(tmp_path):
    (tmp_path / "empty.jsonl").write_text("")
    with pytest.raises(ValidationError):
        read_pairs(tmp_path / "empty.jsonl")
    (tmp_path / "bad.jsonl").write_text('{"format": "other"}\n')
    with pytest.raises(ValidationError):
        read_pairs(tmp_path / "bad.jsonl")


def test_histogram_of_labeled_pairs(small_pairs):
    counts = agreement_histogram(small_pairs)
    assert counts.sum() == len(small_pairs) and len(counts) == 4
