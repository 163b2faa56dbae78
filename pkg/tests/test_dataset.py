import csv
import math

import numpy as np
import pytest

from bugsong.audio import AudioClip, write_wav
from bugsong.dataset import (ChunkStore, DatasetManifest, ManifestEntry,
                             chunk_clip, chunk_manifest, chunk_samples,
                             expected_chunk_count, ingest, split_counts,
                             split_per_class)
from bugsong.errors import DataError

from conftest import make_tone, write_tone_corpus

SR = 44100


# ---------------------------------------------------------------------------
# split arithmetic

def oracle_counts(n):
    # brute-force restatement: test/val rounded half-up with a floor of 1
    test = max(1, math.floor(0.2 * n + 0.5))
    val = max(1, math.floor(0.1 * n + 0.5))
    return n - test - val, val, test


@pytest.mark.parametrize("n,expect", [
    (3, (1, 1, 1)),
    (4, (2, 1, 1)),
    (5, (3, 1, 1)),
    (10, (7, 1, 2)),
    (13, (9, 1, 3)),
    (20, (14, 2, 4)),
    (22, (16, 2, 4)),
])
def test_split_counts_anchors(n, expect):
    assert split_counts(n) == expect


def test_split_counts_oracle_sweep():
    for n in range(3, 200):
        got = split_counts(n)
        assert got == oracle_counts(n)
        assert sum(got) == n
        assert all(c >= 1 for c in got)


def test_split_counts_too_small():
    with pytest.raises(DataError):
        split_counts(2)


def _manifest(per_class: dict[str, int]) -> DatasetManifest:
    entries = []
    for species, n in per_class.items():
        for k in range(n):
            entries.append(ManifestEntry(path=f"{species}/f{k}.wav",
                                         species=species, duration_s=5.0,
                                         source_id=f"{species}{k:02d}"))
    return DatasetManifest(entries)


def test_split_per_class_counts_and_determinism():
    manifest = _manifest({"a": 10, "b": 4, "c": 3})
    out1 = split_per_class(manifest, seed=7)
    out2 = split_per_class(manifest, seed=7)
    assert [(e.path, e.split) for e in out1.entries] == \
           [(e.path, e.split) for e in out2.entries]
    for species, n in [("a", 10), ("b", 4), ("c", 3)]:
        splits = [e.split for e in out1.entries if e.species == species]
        train, val, test = split_counts(n)
        assert splits.count("train") == train
        assert splits.count("val") == val
        assert splits.count("test") == test


def test_split_per_class_is_class_independent():
    # adding a new class must not reshuffle an existing class's assignment
    base = split_per_class(_manifest({"a": 10, "b": 4}), seed=7)
    more = split_per_class(_manifest({"a": 10, "b": 4, "z": 5}), seed=7)
    a_base = {e.path: e.split for e in base.entries if e.species == "a"}
    a_more = {e.path: e.split for e in more.entries if e.species == "a"}
    assert a_base == a_more


def test_split_per_class_seed_changes_assignment():
    manifest = _manifest({"a": 12})
    s1 = [e.split for e in split_per_class(manifest, seed=1).entries]
    s2 = [e.split for e in split_per_class(manifest, seed=2).entries]
    assert s1 != s2   # 12 files, overwhelmingly unlikely to collide


def test_split_per_class_rejects_tiny_class():
    with pytest.raises(DataError):
        split_per_class(_manifest({"a": 4, "tiny": 2}), seed=0)


# ---------------------------------------------------------------------------
# chunking

@pytest.mark.parametrize("duration,expect", [
    (3.0, 1), (5.0, 4), (6.25, 5), (10.0, 8),
])
def test_chunk_count_anchors(duration, expect):
    x = np.zeros(int(duration * SR), dtype=np.float32)
    assert len(chunk_samples(x)) == expect
    assert expected_chunk_count(duration) == expect


def test_chunk_layout_ten_seconds():
    x = np.arange(10 * SR, dtype=np.float32)
    chunks = chunk_samples(x)
    starts = [s for _, s, _ in chunks]
    assert starts == [i * 1.25 for i in range(8)]
    wrapped = [w for _, _, w in chunks]
    assert wrapped == [False] * 5 + [True] * 3
    for samples, start, w in chunks:
        assert len(samples) == 5 * SR
        begin = int(round(start * SR))
        if not w:
            np.testing.assert_array_equal(samples, x[begin:begin + 5 * SR])
        else:
            expect = np.concatenate([x[begin:], x[:begin + 5 * SR - len(x)]])
            np.testing.assert_array_equal(samples, expect)


def test_chunk_short_clip_tiles():
    x = np.arange(SR, dtype=np.float32)  # 1 s
    chunks = chunk_samples(x)
    assert len(chunks) == 1
    samples, start, wrapped = chunks[0]
    assert start == 0.0 and wrapped
    np.testing.assert_array_equal(samples, np.resize(x, 5 * SR))


def test_chunk_empty_clip():
    with pytest.raises(DataError):
        chunk_samples(np.zeros(0, dtype=np.float32))


def test_expected_chunk_count_matches_actual(rng):
    for _ in range(60):
        dur = float(rng.uniform(0.2, 22.0))
        n = int(round(dur * SR))
        got = len(chunk_samples(np.zeros(n, dtype=np.float32)))
        assert got == expected_chunk_count(n / SR)


def test_chunk_clip_tail_extraction():
    x = np.arange(12 * SR, dtype=np.float32)
    clip = AudioClip(x, SR)
    recs = chunk_clip(clip, 0, "sp", "train", "src.wav", tail_extract_s=10.0)
    # only the last 10 s contribute; first chunk starts at the cut point
    np.testing.assert_array_equal(recs[0].samples, x[2 * SR:7 * SR])
    assert len(recs) == 8


def test_chunk_clip_silence_floor():
    loud = make_tone(1000, 5.0)              # ~ -9 dBFS rms
    silent = np.zeros(5 * SR, dtype=np.float32)
    clip = AudioClip(np.concatenate([loud, silent]), SR)
    kept = chunk_clip(clip, 0, "sp", "train", "s.wav", silence_floor_db=-60.0)
    all_recs = chunk_clip(clip, 0, "sp", "train", "s.wav")
    assert 0 < len(kept) < len(all_recs)
    for rec in kept:
        rms = np.sqrt(np.mean(rec.samples.astype(np.float64) ** 2))
        assert 20 * np.log10(rms) >= -60.0


# ---------------------------------------------------------------------------
# ingest + manifest + store

def test_ingest_scans_tree(tmp_path):
    write_tone_corpus(tmp_path, {"ant": 800.0, "bee": 2000.0})
    manifest = ingest(tmp_path)
    assert manifest.class_names == ["ant", "bee"]
    assert len(manifest.entries) == 8
    for e in manifest.entries:
        assert e.duration_s == pytest.approx(3.0)
        assert e.split == ""
        assert len(e.source_id) == 16


def test_ingest_skips_unreadable_and_warns(tmp_path):
    write_tone_corpus(tmp_path, {"ant": 800.0})
    (tmp_path / "ant" / "broken.wav").write_bytes(b"garbage")
    warnings = []
    manifest = ingest(tmp_path, warn=warnings.append)
    assert len(manifest.entries) == 4
    assert any("broken.wav" in w for w in warnings)


def test_ingest_drops_small_class(tmp_path):
    write_tone_corpus(tmp_path, {"ant": 800.0}, files_per_class=4)
    write_tone_corpus(tmp_path, {"rare": 3000.0}, files_per_class=2)
    warnings = []
    manifest = ingest(tmp_path, min_files_per_class=4, warn=warnings.append)
    assert manifest.class_names == ["ant"]
    assert any("rare" in w for w in warnings)


def test_ingest_empty_tree(tmp_path):
    (tmp_path / "only_dir").mkdir()
    with pytest.raises(DataError):
        ingest(tmp_path)


def test_manifest_round_trip(tmp_path):
    manifest = split_per_class(_manifest({"a": 5, "b": 3}), seed=1)
    manifest.save(tmp_path / "m.csv")
    back = DatasetManifest.load(tmp_path / "m.csv")
    assert [(e.path, e.species, e.split) for e in back.entries] == \
           [(e.path, e.species, e.split) for e in manifest.entries]
    assert back.class_names == manifest.class_names


def test_manifest_bad_header(tmp_path):
    (tmp_path / "m.csv").write_text("foo,bar\n1,2\n")
    with pytest.raises(DataError):
        DatasetManifest.load(tmp_path / "m.csv")


def test_chunk_manifest_builds_store(tmp_path):
    corpus = tmp_path / "corpus"
    write_tone_corpus(corpus, {"ant": 800.0, "bee": 2000.0},
                      files_per_class=4, duration_s=6.0)
    manifest = split_per_class(ingest(corpus), seed=3)
    store = ChunkStore(tmp_path / "chunks")
    rows = chunk_manifest(manifest, store)
    # 6 s -> 4 chunks per file
    assert len(rows) == 8 * 4
    back = store.chunk_rows()
    assert back == rows
    first = back[0]
    assert first["aug_gen"] == "original"
    samples = store.load_chunk(first)
    assert len(samples) == 5 * SR
    labels = {r["species"]: r["label_id"] for r in back}
    assert labels == {"ant": "0", "bee": "1"}


def test_chunk_manifest_requires_split(tmp_path):
    corpus = tmp_path / "corpus"
    write_tone_corpus(corpus, {"ant": 800.0})
    manifest = ingest(corpus)   # no split assigned
    with pytest.raises(DataError):
        chunk_manifest(manifest, ChunkStore(tmp_path / "chunks"))


def test_store_rejects_wrong_rate(tmp_path):
    store = ChunkStore(tmp_path / "chunks")
    write_wav(tmp_path / "chunks" / "x.wav",
              AudioClip(np.zeros(100, dtype=np.float32), 22050))
    with pytest.raises(DataError):
        store.load_chunk({"chunk_path": "x.wav"})


def test_store_missing_index(tmp_path):
    with pytest.raises(DataError, match="chunk stage"):
        ChunkStore(tmp_path / "nope").chunk_rows()
