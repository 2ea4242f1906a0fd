import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aigmdet.audio import load_wav
from aigmdet.data import (DataError, Manifest, ManifestEntry, TooFewEntries,
                          _apportion, render_track, split_dataset,
                          synth_dataset)


def make_manifest(n0, n1):
    entries = [ManifestEntry(f"a{i}.wav", 0) for i in range(n0)]
    entries += [ManifestEntry(f"b{i}.wav", 1) for i in range(n1)]
    return Manifest(entries)


# ---------------------------------------------------------------- manifest
def test_manifest_round_trip(tmp_path):
    m = make_manifest(3, 2)
    m.entries[0].split = "train"
    path = tmp_path / "m.csv"
    m.save(path)
    loaded = Manifest.load(path)
    assert [(e.path, e.label, e.split) for e in loaded.entries] == \
           [(e.path, e.label, e.split) for e in m.entries]


def test_manifest_rejects_duplicates_and_bad_labels():
    with pytest.raises(DataError):
        Manifest([ManifestEntry("x.wav", 0), ManifestEntry("x.wav", 1)])
    with pytest.raises(DataError):
        Manifest([ManifestEntry("x.wav", 2)])


def test_manifest_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("file,class\nx.wav,0\n")
    with pytest.raises(DataError):
        Manifest.load(path)


def test_manifest_subset():
    m = make_manifest(4, 0)
    m.entries[0].split = m.entries[1].split = "train"
    m.entries[2].split = "val"
    assert len(m.subset("train")) == 2
    assert len(m.subset("test")) == 0


# ---------------------------------------------------------------- apportion
def test_apportion_exact():
    assert _apportion(100, (8, 1, 1)) == [80, 10, 10]
    assert _apportion(50, (8, 1, 1)) == [40, 5, 5]


def test_apportion_remainders_favor_earlier_bins():
    # 11 * 0.8 = 8.8, 11 * 0.1 = 1.1 twice -> 9/1/1 (train takes leftover)
    assert _apportion(11, (8, 1, 1)) == [9, 1, 1]
    assert sum(_apportion(13, (8, 1, 1))) == 13


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500))
def test_apportion_sums_and_order(n):
    counts = _apportion(n, (8, 1, 1))
    assert sum(counts) == n
    assert all(c >= 0 for c in counts)


# ---------------------------------------------------------------- split
def test_split_8_1_1_stratified():
    m = make_manifest(50, 50)
    out = split_dataset(m)
    assert len(out.subset("train")) == 80
    assert len(out.subset("val")) == 10
    assert len(out.subset("test")) == 10
    for name, want in (("train", 40), ("val", 5), ("test", 5)):
        labels = [e.label for e in out.subset(name)]
        assert labels.count(0) == want and labels.count(1) == want


def test_split_deterministic_and_seed_sensitive():
    m = make_manifest(30, 30)
    a = split_dataset(m, seed=1)
    b = split_dataset(m, seed=1)
    c = split_dataset(m, seed=2)
    assert [e.split for e in a.entries] == [e.split for e in b.entries]
    assert [e.split for e in a.entries] != [e.split for e in c.entries]


def test_split_too_few():
    with pytest.raises(TooFewEntries):
        split_dataset(make_manifest(4, 4))


def test_split_preserves_paths_and_labels():
    m = make_manifest(20, 20)
    out = split_dataset(m)
    assert [(e.path, e.label) for e in out.entries] == \
           [(e.path, e.label) for e in m.entries]


# ---------------------------------------------------------------- synthesis
def test_render_track_shape_and_range():
    rng = np.random.default_rng(0)
    buf = render_track(0, 120, 16.0, 16000, rng)
    assert buf.frames == 16 * 16000
    assert buf.channels == 1
    assert np.abs(buf.samples).max() <= 0.8 + 1e-9


def test_render_track_class0_deterministic():
    a = render_track(0, 120, 8.0, 16000, np.random.default_rng(0))
    b = render_track(0, 120, 8.0, 16000, np.random.default_rng(99))
    # class 0 draws nothing from the rng
    assert np.array_equal(a.samples, b.samples)


def test_render_track_classes_differ():
    a = render_track(0, 120, 16.0, 16000, np.random.default_rng(0))
    b = render_track(1, 120, 16.0, 16000, np.random.default_rng(0))
    assert not np.array_equal(a.samples, b.samples)


def test_render_track_has_expected_tempo():
    from aigmdet.beats import estimate_tempo
    from aigmdet.dsp import log_mel, mel_filterbank, onset_envelope, stft
    buf = render_track(0, 124, 20.0, 16000, np.random.default_rng(0))
    env = onset_envelope(log_mel(stft(buf), mel_filterbank(40, 1024, 16000)))
    assert abs(estimate_tempo(env, 256 / 16000) - 124) <= 2.0


def test_synth_dataset_layout(tmp_path):
    m = synth_dataset(tmp_path / "ds", n_per_class=4, seed=0, duration_s=8.0)
    assert len(m.entries) == 8
    assert sum(e.label for e in m.entries) == 4
    assert (tmp_path / "ds" / "manifest.csv").exists()
    for e in m.entries:
        buf = load_wav(e.path)
        assert buf.frames == 8 * 16000


def test_synth_dataset_byte_stable(tmp_path):
    import hashlib
    digests = []
    for name in ("a", "b"):
        m = synth_dataset(tmp_path / name, n_per_class=4, seed=7, duration_s=4.0)
        h = hashlib.sha256()
        for e in m.entries:
            with open(e.path, "rb") as fh:
                h.update(fh.read())
        digests.append(h.hexdigest())
    assert digests[0] == digests[1]


def test_synth_dataset_minimum_size(tmp_path):
    with pytest.raises(DataError):
        synth_dataset(tmp_path / "tiny", n_per_class=3)
