import logging
from dataclasses import replace

import numpy as np
import pytest

from atisr.corpus import (EOB_ID, FIRST_CHAR_ID, SPECIALS, UNK_ID, Dataset, SyntheticSpec, Utterance,
                          Vocabulary, generate_synthetic, load_dataset, make_templates, mel_centers,
                          mel_features, read_features, save_dataset, synthetic_vocabulary,
                          write_features)
from atisr.errors import DataError, GenerationError, IntegrityError


SMALL = SyntheticSpec(n_train=6, n_dev=2, n_test=2, min_chars=3, max_chars=6)


def test_reserved_ids():
    v = Vocabulary("abc")
    assert v.tokens[:7] == ["<pad>", "<s>", "</s>", "<m>", "</m>", "<blank>", "<unk>"]
    assert v.index["a"] == FIRST_CHAR_ID
    assert v.index["</m>"] == EOB_ID


def test_vocab_round_trip(tmp_path):
    v = Vocabulary("zyx ab")
    ids = list(range(len(v)))
    assert v.encode(v.decode(ids)) == ids
    v.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(tmp_path / "vocab.txt") == v


def test_vocab_unknown_char_warns(caplog):
    v = Vocabulary("ab")
    with caplog.at_level(logging.WARNING):
        assert v.encode("aq") == [FIRST_CHAR_ID, UNK_ID]
    assert "not in vocabulary" in caplog.text


def test_vocab_file_without_specials(tmp_path):
    (tmp_path / "v.txt").write_text("a\nb\n")
    with pytest.raises(IntegrityError):
        Vocabulary.load(tmp_path / "v.txt")


def test_synthetic_deterministic():
    a, b = generate_synthetic(SMALL), generate_synthetic(SMALL)
    for da, db in zip(a, b):
        assert da.ids == db.ids
        for ua, ub in zip(da, db):
            assert ua.transcript == ub.transcript
            assert ua.features.tobytes() == ub.features.tobytes()


def test_synthetic_split_sizes_and_disjoint():
    tr, dv, te = generate_synthetic(SMALL)
    assert (len(tr), len(dv), len(te)) == (6, 2, 2)
    ids = tr.ids + dv.ids + te.ids
    assert len(set(ids)) == len(ids)


def test_synthetic_zero_noise_equals_templates():
    spec = replace(SMALL, noise=0.0)
    T = make_templates(spec)
    vocab = synthetic_vocabulary(spec)
    for u in generate_synthetic(spec)[0]:
        rows = {tuple(r) for r in u.features}
        assert rows <= {tuple(t) for t in T}
        # consecutive runs follow the transcript
        runs = [u.features[0]]
        for r in u.features[1:]:
            if not np.array_equal(r, runs[-1]):
                runs.append(r)
        got = [int(np.argmin(np.linalg.norm(T - r, axis=1))) for r in runs]
        assert got == [i - FIRST_CHAR_ID for i in vocab.encode(u.transcript)]


def test_synthetic_frame_ranges():
    for u in generate_synthetic(SMALL)[0]:
        n = len(u.transcript)
        assert SMALL.min_chars <= n <= SMALL.max_chars
        assert n * SMALL.min_frames_per_char <= u.frames <= n * SMALL.max_frames_per_char


def test_nearest_template_oracle():
    """Frame-level nearest-centroid classification of the default task."""
    spec = replace(SyntheticSpec(), n_train=20, n_dev=0, n_test=0)
    T = make_templates(spec)
    rng = np.random.default_rng(0)
    labels = rng.integers(spec.alphabet_size, size=5000)
    frames = T[labels] + spec.noise * rng.normal(size=(5000, spec.feat_dim))
    pred = np.argmin(((frames[:, None] - T[None]) ** 2).sum(-1), axis=1)
    assert (pred == labels).mean() >= 0.99


def test_templates_too_close():
    with pytest.raises(GenerationError):
        make_templates(SyntheticSpec(noise=5.0))


def test_mel_frame_count_one_second():
    assert mel_features(np.zeros(16000)).shape == (77, 80)


def test_mel_frame_count_formula():
    rng = np.random.default_rng(3)
    for n in rng.integers(800, 20000, size=100):
        assert mel_features(rng.normal(size=int(n)), n_mels=8).shape[0] == (n - 800) // 200 + 1


def test_mel_zero_waveform_at_floor():
    f = mel_features(np.zeros(4000), floor=1e-10)
    assert np.all(f == np.log(1e-10))


def test_mel_sine_at_center():
    centers = mel_centers(80, 16000)
    t = np.arange(16000) / 16000
    for k in (10, 40, 70):
        f = mel_features(np.sin(2 * np.pi * centers[k] * t))
        assert np.all(np.argmax(f, axis=1) == k)


def test_mel_too_short():
    with pytest.raises(DataError):
        mel_features(np.zeros(799))


def test_dataset_round_trip(tmp_path):
    tr = generate_synthetic(SMALL)[0]
    save_dataset(tr, tmp_path / "train.jsonl")
    back = load_dataset(tmp_path / "train.jsonl")
    assert back.ids == tr.ids
    for a, b in zip(tr, back):
        assert a.transcript == b.transcript
        assert np.array_equal(a.features.astype(np.float32), b.features)
    # a second save of the loaded data is bit-exact
    save_dataset(back, tmp_path / "again.jsonl")
    again = load_dataset(tmp_path / "again.jsonl")
    assert all(np.array_equal(a.features, b.features) for a, b in zip(back, again))


def test_truncated_feature_file(tmp_path):
    save_dataset(Dataset([Utterance("u1", np.ones((5, 3)), "ab")]), tmp_path / "d.jsonl")
    fp = tmp_path / "d_feats" / "u1.atfx"
    fp.write_bytes(fp.read_bytes()[:-4])
    with pytest.raises(IntegrityError, match="u1.atfx"):
        load_dataset(tmp_path / "d.jsonl")


def test_missing_feature_file(tmp_path):
    save_dataset(Dataset([Utterance("u1", np.ones((5, 3)), "ab")]), tmp_path / "d.jsonl")
    (tmp_path / "d_feats" / "u1.atfx").unlink()
    with pytest.raises(IntegrityError, match="u1.atfx"):
        load_dataset(tmp_path / "d.jsonl")


def test_hash_mismatch(tmp_path):
    save_dataset(Dataset([Utterance("u1", np.ones((5, 3)), "ab")]), tmp_path / "d.jsonl")
    write_features(tmp_path / "d_feats" / "u1.atfx", np.zeros((5, 3)))
    with pytest.raises(IntegrityError, match="hash"):
        load_dataset(tmp_path / "d.jsonl")


def test_feature_shape_mismatch(tmp_path):
    write_features(tmp_path / "f.atfx", np.zeros((4, 2)))
    with pytest.raises(IntegrityError):
        read_features(tmp_path / "f.atfx", frames=5, dim=2)
    assert read_features(tmp_path / "f.atfx").shape == (4, 2)
