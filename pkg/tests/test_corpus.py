"""Manifest parsing, fold stratification, fragment sampling, synthesis."""

import numpy as np
import pytest

from vocalscreen.audio import AudioBuffer, write_wav
from vocalscreen.corpus import (
    CorpusIndex,
    DuplicatePathError,
    FoldPlan,
    ManifestError,
    MissingColumnError,
    NoFragmentsError,
    Phq8OutOfRangeError,
    SpeakerRecord,
    SynthSpec,
    TooFewSpeakersError,
    load_manifest,
    make_folds,
    synth_corpus,
)
from vocalscreen.features import FrameSpec


def _write_tone_wav(path, seconds, seed, rate=8000):
    rng = np.random.default_rng(seed)
    n = int(seconds * rate)
    t = np.arange(n) / rate
    x = 0.3 * np.sin(2 * np.pi * rng.uniform(200, 800) * t)
    x += 0.05 * rng.normal(size=n)
    write_wav(path, AudioBuffer(np.clip(x, -1, 1), rate), "pcm16")


@pytest.fixture
def tiny_manifest(tmp_path):
    rows = [
        ("alice", "alice_a.wav", 4, 3.5),
        ("alice", "alice_b.wav", 4, 3.2),
        ("bob", "bob.wav", 15, 4.0),
        ("carol", "carol.wav", 9, 3.1),
        ("dave", "dave.wav", 10, 3.8),
    ]
    lines = ["speaker_id,audio_path,phq8"]
    for i, (sid, name, phq8, secs) in enumerate(rows):
        _write_tone_wav(tmp_path / name, secs, seed=i)
        lines.append(f"{sid},{name},{phq8}")
    path = tmp_path / "manifest.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_manifest_grouping_and_labels(tiny_manifest):
    records = load_manifest(tiny_manifest)
    by_id = {r.speaker_id: r for r in records}
    assert len(records) == 4
    assert len(by_id["alice"].audio_paths) == 2
    # binarization boundary: 9 -> 0, 10 -> 1
    assert by_id["carol"].label == 0
    assert by_id["dave"].label == 1
    assert by_id["bob"].label == 1
    assert by_id["alice"].label == 0


def test_manifest_missing_column(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("speaker_id,audio_path\ns1,a.wav\n")
    with pytest.raises(MissingColumnError):
        load_manifest(p)


def test_manifest_phq8_out_of_range(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("speaker_id,audio_path,phq8\ns1,a.wav,25\n")
    with pytest.raises(Phq8OutOfRangeError):
        load_manifest(p)
    p.write_text("speaker_id,audio_path,phq8\ns1,a.wav,oops\n")
    with pytest.raises(Phq8OutOfRangeError):
        load_manifest(p)


def test_manifest_duplicate_path(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("speaker_id,audio_path,phq8\ns1,a.wav,3\ns2,a.wav,11\n")
    with pytest.raises(DuplicatePathError):
        load_manifest(p)


def test_manifest_conflicting_phq8(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("speaker_id,audio_path,phq8\ns1,a.wav,3\ns1,b.wav,4\n")
    with pytest.raises(ManifestError):
        load_manifest(p)


def _dummy_records(n_pos, n_neg):
    recs = []
    for i in range(n_pos):
        recs.append(SpeakerRecord(f"p{i:03d}", 15, 1, []))
    for i in range(n_neg):
        recs.append(SpeakerRecord(f"n{i:03d}", 3, 0, []))
    return recs


def test_fold_sizes_match_reference_split():
    # 154 speakers, 44 positive, k=3: totals (52, 51, 51), positives (15, 15, 14)
    recs = _dummy_records(44, 110)
    plan = make_folds(recs, k=3, seed=42)
    sizes = [len(plan.speakers_in(f)) for f in range(3)]
    pos_sizes = [
        sum(1 for s in plan.speakers_in(f) if s.startswith("p")) for f in range(3)
    ]
    assert sorted(sizes) == [51, 51, 52]
    assert sorted(pos_sizes) == [14, 15, 15]


def test_fold_stratification_property():
    rng = np.random.default_rng(0)
    for trial in range(25):
        n_pos = int(rng.integers(3, 40))
        n_neg = int(rng.integers(3, 80))
        k = int(rng.integers(2, 6))
        if min(n_pos, n_neg) < k:
            continue
        plan = make_folds(_dummy_records(n_pos, n_neg), k=k, seed=trial)
        for cls in ("p", "n"):
            counts = [
                sum(1 for s in plan.speakers_in(f) if s.startswith(cls))
                for f in range(k)
            ]
            assert max(counts) - min(counts) <= 1
        assert sum(len(plan.speakers_in(f)) for f in range(k)) == n_pos + n_neg


def test_folds_deterministic_and_seed_sensitive():
    recs = _dummy_records(10, 20)
    a = make_folds(recs, k=3, seed=7)
    b = make_folds(recs, k=3, seed=7)
    c = make_folds(recs, k=3, seed=8)
    assert a.assignment == b.assignment
    assert a.assignment != c.assignment


def test_folds_too_few_speakers():
    with pytest.raises(TooFewSpeakersError):
        make_folds(_dummy_records(2, 30), k=3, seed=0)


def test_fold_plan_json_round_trip(tmp_path):
    plan = make_folds(_dummy_records(5, 9), k=3, seed=1)
    path = tmp_path / "folds.json"
    plan.to_json(path)
    back = FoldPlan.from_json(path)
    assert back.assignment == plan.assignment
    assert (back.k, back.seed) == (plan.k, plan.seed)


def test_index_pools_fragments_across_recordings(tiny_manifest):
    corpus = CorpusIndex(load_manifest(tiny_manifest)).build()
    alice = next(r for r in corpus.records if r.speaker_id == "alice")
    paths = {p for p, _ in alice.fragment_index}
    assert len(paths) == 2
    # 3.5 s -> 56 frames -> 41 fragments; 3.2 s -> 52 frames -> 37 fragments
    assert corpus.pool_size(alice) == 41 + 37


def test_short_recordings_are_excluded(tmp_path):
    _write_tone_wav(tmp_path / "short.wav", 2.0, seed=1)
    _write_tone_wav(tmp_path / "long.wav", 3.5, seed=2)
    (tmp_path / "m.csv").write_text(
        "speaker_id,audio_path,phq8\ns1,short.wav,2\ns2,long.wav,12\n"
    )
    corpus = CorpusIndex(load_manifest(tmp_path / "m.csv")).build()
    s1, s2 = corpus.records
    assert corpus.pool_size(s1) == 0
    assert corpus.pool_size(s2) > 0
    with pytest.raises(NoFragmentsError):
        corpus.sample_fragments(s1, 4, np.random.default_rng(0))


def test_sampling_with_and_without_replacement(tiny_manifest):
    corpus = CorpusIndex(load_manifest(tiny_manifest)).build()
    bob = next(r for r in corpus.records if r.speaker_id == "bob")
    pool = corpus.pool_size(bob)
    assert pool >= 30

    batch = corpus.sample_fragments(bob, 30, np.random.default_rng(5))
    assert batch.values.shape == (30, 128, 16)
    assert batch.values.dtype == np.float32
    assert len(set(batch.origins)) == 30  # without replacement: all distinct
    assert batch.label == 1 and batch.speaker_id == "bob"

    big = corpus.sample_fragments(bob, pool + 20, np.random.default_rng(5))
    assert big.values.shape[0] == pool + 20
    assert len(set(big.origins)) <= pool  # with replacement once pool is exceeded


def test_sampled_values_match_origins(tiny_manifest):
    corpus = CorpusIndex(load_manifest(tiny_manifest)).build()
    dave = next(r for r in corpus.records if r.speaker_id == "dave")
    batch = corpus.sample_fragments(dave, 8, np.random.default_rng(9))
    for j, (path, start) in enumerate(batch.origins):
        np.testing.assert_array_equal(batch.values[j], corpus.fragments_for(path)[start])


def test_sampling_uniformity_within_4_sigma(tmp_path):
    # 57250 samples -> ceil(57250 / 500) = 115 frames -> 100 fragments
    _write_tone_wav(tmp_path / "u.wav", 7.15625, seed=3)
    (tmp_path / "m.csv").write_text("speaker_id,audio_path,phq8\ns1,u.wav,12\n")
    corpus = CorpusIndex(load_manifest(tmp_path / "m.csv")).build()
    rec = corpus.records[0]
    pool = corpus.pool_size(rec)
    assert pool == 100

    rng = np.random.default_rng(123)
    draws = 10000
    counts = np.zeros(pool)
    for _ in range(draws):
        batch = corpus.sample_fragments(rec, 1, rng)
        start = batch.origins[0][1]
        counts[start] += 1
    p = 1.0 / pool
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) <= 4 * sigma)


def test_index_disk_cache_round_trip(tiny_manifest, tmp_path):
    cache = tmp_path / "cache"
    records = load_manifest(tiny_manifest)
    first = CorpusIndex(records, cache_dir=str(cache)).build()
    bob = next(r for r in first.records if r.speaker_id == "bob")
    direct = first.fragments_for(bob.audio_paths[0]).copy()
    assert any(cache.iterdir())

    second = CorpusIndex(load_manifest(tiny_manifest), cache_dir=str(cache)).build()
    bob2 = next(r for r in second.records if r.speaker_id == "bob")
    np.testing.assert_array_equal(second.fragments_for(bob2.audio_paths[0]), direct)


# --- synthetic corpus ---


def test_synth_counts_and_labels(tmp_path):
    spec = SynthSpec(n_speakers=6, depressed_fraction=0.30, duration_s=(3.2, 4.0),
                     sample_rate=8000, seed=5)
    assert spec.n_depressed() == 2
    manifest = synth_corpus(spec, tmp_path / "c")
    records = load_manifest(manifest)
    assert len(records) == 6
    dep = [r for r in records if r.label == 1]
    hea = [r for r in records if r.label == 0]
    assert len(dep) == 2
    assert all(10 <= r.phq8 <= 24 for r in dep)
    assert all(0 <= r.phq8 <= 9 for r in hea)


def test_synth_default_spec_depressed_count():
    assert SynthSpec().n_depressed() == 18  # 60 * 0.30


def test_synth_deterministic_bytes(tmp_path):
    spec = SynthSpec(n_speakers=3, duration_s=(3.2, 3.6), sample_rate=8000, seed=9)
    m1 = synth_corpus(spec, tmp_path / "a")
    m2 = synth_corpus(spec, tmp_path / "b")
    import pathlib

    for name in ["manifest.csv", "spk000.wav", "spk002.wav"]:
        a = (pathlib.Path(m1).parent / name).read_bytes()
        b = (pathlib.Path(m2).parent / name).read_bytes()
        assert a == b

    m3 = synth_corpus(SynthSpec(n_speakers=3, duration_s=(3.2, 3.6),
                                sample_rate=8000, seed=10), tmp_path / "c")
    assert (pathlib.Path(m1).parent / "spk000.wav").read_bytes() != (
        pathlib.Path(m3).parent / "spk000.wav"
    ).read_bytes()


def test_synth_band_marker_visible_in_mel_features(tmp_path):
    spec = SynthSpec(n_speakers=4, depressed_fraction=0.5, duration_s=(3.5, 4.0),
                     sample_rate=8000, marker_prevalence=1.0, seed=11)
    corpus = CorpusIndex(load_manifest(synth_corpus(spec, tmp_path / "c"))).build()
    lo, hi = spec.marker_band

    def band_level(rec):
        stacks = [corpus.fragments_for(p) for p in rec.audio_paths]
        return float(np.mean([s[:, lo : hi + 1, :].mean() for s in stacks]))

    dep = [band_level(r) for r in corpus.records if r.label == 1]
    hea = [band_level(r) for r in corpus.records if r.label == 0]
    assert min(dep) > max(hea)


def test_synth_null_prevalence_removes_marker(tmp_path):
    spec = SynthSpec(n_speakers=4, depressed_fraction=0.5, duration_s=(3.5, 4.0),
                     sample_rate=8000, marker_prevalence=0.0, seed=11)
    corpus = CorpusIndex(load_manifest(synth_corpus(spec, tmp_path / "c"))).build()
    lo, hi = spec.marker_band

    def band_level(rec):
        stacks = [corpus.fragments_for(p) for p in rec.audio_paths]
        return float(np.mean([s[:, lo : hi + 1, :].mean() for s in stacks]))

    dep = [band_level(r) for r in corpus.records if r.label == 1]
    hea = [band_level(r) for r in corpus.records if r.label == 0]
    # same generative process: class means overlap
    assert min(dep) < max(hea) + 0.02
