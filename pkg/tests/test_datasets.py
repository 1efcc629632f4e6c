import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipsplat.datasets import (POLICIES, SplitPolicy, SplitSpec, SyntheticSpec, generate_synthetic, jaw_track,
                               load_dataset, load_manifest, load_mead_dir, load_vocaset_dir, make_splits,
                               resample_meshes, rms_envelope, save_dataset, select)
from lipsplat.encoder import Waveform, write_wav
from lipsplat.face_model import MeshSequence

SMALL = dict(n_subjects=2, n_sentences=3, duration=0.6)


@pytest.fixture(scope="module")
def voca(face):
    return generate_synthetic(SyntheticSpec(**SMALL, seed=3), face)


@pytest.fixture(scope="module")
def mead(face):
    return generate_synthetic(SyntheticSpec(**SMALL, seed=3, style="mead"), face)


def test_shapes_and_pairing(voca, face):
    assert len(voca) == 6 and voca.subjects == ["voca00", "voca01"] and voca.sentences == [1, 2, 3]
    for s in voca:
        assert s.vertices.shape == (18, face.n_vertices, 3)
        assert s.waveform.sample_rate == 16000 and len(s.waveform.samples) == int(0.6 * 16000)
        assert s.fps == 30.0
        s.validate()


def test_deterministic_and_seed_dependent(face, voca):
    again = generate_synthetic(SyntheticSpec(**SMALL, seed=3), face)
    for a, b in zip(voca, again):
        assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.waveform.samples, b.waveform.samples)
    other = generate_synthetic(SyntheticSpec(**SMALL, seed=4), face)
    assert not np.array_equal(voca.samples[0].vertices, other.samples[0].vertices)


def test_loudness_follows_jaw(face):
    spec = SyntheticSpec(n_subjects=1, n_sentences=4, duration=2.0, seed=11)
    ds = generate_synthetic(spec, face)
    for s in ds:
        jaw = jaw_track(s, spec, face)
        env = rms_envelope(s.waveform, s.n_frames)
        assert np.corrcoef(jaw, env)[0, 1] > 0.9


def test_same_sentence_same_script_across_subjects(voca, face):
    spec = SyntheticSpec(**SMALL, seed=3)
    a = jaw_track(voca.by_id("voca00_s002"), spec, face)
    b = jaw_track(voca.by_id("voca01_s002"), spec, face)
    assert np.array_equal(a, b)
    c = jaw_track(voca.by_id("voca00_s003"), spec, face)
    assert not np.array_equal(a, c)


def test_pseudo_gt_artifacts(face, mead):
    eye = face.topology.region_masks["eye"]
    clean = generate_synthetic(SyntheticSpec(**SMALL, seed=3, style="mead", noise_mm=0.0), face)
    for a, b in zip(mead, clean):
        d = (a.vertices - b.vertices)[:, ~eye]
        assert abs(d.std() * 1000 - 0.3) < 0.02
    voca = generate_synthetic(SyntheticSpec(**SMALL, seed=3), face)

    def eye_swing(ds):  # peak-to-peak vertical eye motion, mm
        return np.mean([np.ptp((s.vertices[:, eye, 1] - s.neutral[eye, 1]).mean(1)) for s in ds]) * 1000

    assert eye_swing(clean) > eye_swing(voca) + 0.5
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(**SMALL, style="mead", noise_mm=-1.0), face)
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(**SMALL, style="unknown"), face)


def test_mead_style_exaggerates_jaw(voca, mead):
    amp_v = np.mean([np.abs(s.offsets).max() for s in voca])
    amp_m = np.mean([np.abs(s.offsets).max() for s in mead])
    assert amp_m > 1.2 * amp_v


def test_resample_matches_interp(face):
    rng = np.random.default_rng(0)
    v = rng.normal(size=(21, face.n_vertices, 3))
    seq = MeshSequence(v, face.topology, 60.0)
    half = resample_meshes(seq, 30.0)
    assert half.fps == 30.0 and np.array_equal(half.vertices, v[::2])
    out = resample_meshes(MeshSequence(v, face.topology, 50.0), 30.0)
    t_src = np.arange(21) / 50.0
    t_dst = np.arange(len(out)) / 30.0
    assert t_dst[-1] <= t_src[-1] + 1e-12 and len(out) == 13
    ref = np.apply_along_axis(lambda col: np.interp(t_dst, t_src, col), 0, v)
    assert np.abs(out.vertices - ref).max() < 1e-12
    with pytest.raises(ValueError):
        resample_meshes(MeshSequence(v, face.topology, 24.0), 30.0)


@settings(max_examples=30, deadline=None)
@given(n_sub=st.integers(4, 14), n_sent=st.integers(2, 10), counts=st.tuples(st.integers(0, 4), st.integers(0, 4),
                                                                              st.integers(0, 4)))
def test_splits_are_subject_disjoint(n_sub, n_sent, counts):
    subjects = [f"p{i:02d}" for i in range(n_sub)]
    pol = SplitPolicy(counts, train_fraction=0.5)
    if sum(counts) > n_sub:
        with pytest.raises(ValueError):
            make_splits(subjects, range(1, n_sent + 1), pol)
        return
    sp = make_splits(subjects, range(1, n_sent + 1), pol)
    groups = [set(sp.train_subjects), set(sp.val_subjects), set(sp.test_subjects)]
    assert sum(map(len, groups)) == sum(counts) == len(set().union(*groups))
    assert not set(sp.train_sentences) & set(sp.eval_sentences)
    assert SplitSpec.from_dict(json.loads(json.dumps(sp.to_dict()))) == sp


def test_policies():
    subs = [f"m{i:02d}" for i in range(12)]
    sp = make_splits(subs, range(1, 41), "mead")
    assert len(sp.train_subjects) == 8 and sp.train_sentences == tuple(range(1, 31))
    assert sp.eval_sentences == tuple(range(31, 41))
    assert len(make_splits(subs, range(1, 41), "vocaset").test_subjects) == 2
    with pytest.raises(ValueError, match="sentences"):
        make_splits(subs, range(1, 20), "mead")
    d = make_splits(subs[:4], range(1, 13), "desk")
    assert (len(d.train_subjects), len(d.val_subjects), len(d.test_subjects)) == (2, 1, 1)
    assert d.train_sentences == tuple(range(1, 10))
    assert POLICIES["desk"].train_fraction == 0.75
    with pytest.raises(ValueError):
        SplitSpec(("a",), ("a",), ()).validate()


def test_select(voca):
    sp = make_splits(voca.subjects, voca.sentences, SplitPolicy((1, 0, 1), train_fraction=2 / 3))
    tr, te = select(voca, sp, "train"), select(voca, sp, "test")
    assert {s.subject for s in tr} == {"voca00"} and {s.sentence for s in tr} == {1, 2}
    assert {s.subject for s in te} == {"voca01"} and {s.sentence for s in te} == {3}
    assert select(voca, sp, "val") == []


def test_save_load_roundtrip(tmp_path, voca):
    sp = make_splits(voca.subjects, voca.sentences, SplitPolicy((1, 0, 1)))
    save_dataset(voca, tmp_path / "ds", sp)
    back, sp2 = load_dataset(tmp_path / "ds")
    assert sp2 == sp and len(back) == len(voca)
    for a, b in zip(voca, back):
        assert a.sequence_id == b.sequence_id and np.array_equal(a.vertices, b.vertices)
        assert np.array_equal(a.waveform.samples, b.waveform.samples) and a.meta == b.meta
    assert load_manifest(tmp_path / "ds")["schema"] == 1


def test_corruption_and_missing(tmp_path, voca):
    with pytest.raises(FileNotFoundError):
        save_dataset(voca, tmp_path / "no" / "such" / "ds")
    root = save_dataset(voca, tmp_path / "ds")
    f = root / "samples" / f"{voca.samples[0].sequence_id}.npz"
    data = bytearray(f.read_bytes())
    data[-20] ^= 0xFF
    f.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="checksum"):
        load_dataset(root)
    m = json.loads((root / "manifest.json").read_text())
    m["schema"] = 99
    (root / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ValueError, match="schema"):
        load_manifest(root)
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path)


def test_validate_rejects_mismatch(voca):
    from dataclasses import replace
    s = replace(voca.samples[0], vertices=voca.samples[0].vertices[:5])
    with pytest.raises(ValueError, match="frames"):
        s.validate()
    with pytest.raises(ValueError, match="fps"):
        replace(voca.samples[0], fps=60.0).validate()


def test_vocaset_layout(tmp_path, face):
    rng = np.random.default_rng(0)
    (tmp_path / "templates").mkdir()
    for subj in ("FaceTalk_A", "FaceTalk_B"):
        np.save(tmp_path / "templates" / f"{subj}.npy", face.template)
        (tmp_path / subj).mkdir()
        for k in (1, 2):
            np.save(tmp_path / subj / f"sentence{k:02d}.npy", face.template + rng.normal(0, 1e-3, (40, face.n_vertices, 3)))
            write_wav(tmp_path / subj / f"sentence{k:02d}.wav", Waveform(rng.normal(0, 0.1, 10560)))
    ds = load_vocaset_dir(tmp_path, face.spec)
    assert len(ds) == 4 and ds.subjects == ["FaceTalk_A", "FaceTalk_B"] and ds.sentences == [1, 2]
    for s in ds:
        assert s.n_frames == 20  # 40 frames at 60 FPS -> 20 at 30 FPS, audio 0.66 s
        s.validate()
    with pytest.raises(ValueError):
        load_vocaset_dir(tmp_path / "templates", face.spec)


def test_mead_layout_with_exclusion(tmp_path, face):
    rng = np.random.default_rng(1)
    for subj in ("M003", "M005", "W009"):
        (tmp_path / subj).mkdir()
        for k in (1, 31):
            np.savez(tmp_path / subj / f"{k:03d}.npz", vertices=face.template + rng.normal(0, 1e-3, (30, face.n_vertices, 3)),
                     fps=np.array(30.0), neutral=face.template)
            write_wav(tmp_path / subj / f"{k:03d}.wav", Waveform(rng.normal(0, 0.1, 16000)))
    ds = load_mead_dir(tmp_path, face.spec, exclude=("M005",))
    assert ds.subjects == ["M003", "W009"] and ds.sentences == [1, 31] and len(ds) == 4
