"""Paired audio / mesh-sequence data.

The synthetic generator builds "sentences" from syllables, each of which
picks a viseme from a shared codebook. A viseme fixes a mouth shape
(expression coefficients + jaw opening) and the centre frequency of the
noise band that is heard while it is articulated, so the audio carries both
timing (loudness follows the jaw) and content (spectrum follows the viseme).

Two styles mimic the data sources of a curriculum: ``voca`` is clean
scan-like data; ``mead`` exaggerates the jaw, perturbs the mouth shapes,
adds vertex noise and spurious eye motion, like tracked pseudo ground truth.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfiltfilt

from .encoder import Waveform, frame_count, read_wav
from .face_model import FaceModel, FaceModelParams, MeshSequence, ModelSpec, build_model, deform, neutral_mesh

SCHEMA_VERSION = 1
STYLES = {
    # jaw gain, codebook perturbation, vertex noise (mm), eye motion (mm)
    "voca": dict(jaw_gain=1.0, codebook_shift=0.0, noise_mm=0.0, eye_mm=0.0),
    "mead": dict(jaw_gain=1.45, codebook_shift=0.6, noise_mm=0.3, eye_mm=2.0),
}


@dataclass(frozen=True)
class SyntheticSpec:
    n_subjects: int = 4
    n_sentences: int = 12
    duration: float = 1.5
    fps: float = 30.0
    sample_rate: int = 16000
    seed: int = 0
    style: str = "voca"
    noise_mm: float | None = None  # None -> style default
    n_visemes: int = 8
    syllable_rate: float = 4.0
    language_seed: int = 7  # codebook shared by every dataset


@dataclass
class Sample:
    sequence_id: str
    subject: str
    sentence: int
    waveform: Waveform
    vertices: np.ndarray  # (T, V, 3) at 30 FPS
    neutral: np.ndarray  # (V, 3)
    identity: np.ndarray
    fps: float = 30.0
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.vertices.shape[0]

    @property
    def offsets(self) -> np.ndarray:
        return self.vertices - self.neutral[None]

    def validate(self):
        if self.fps != 30.0:
            raise ValueError(f"{self.sequence_id}: mesh fps must be 30, got {self.fps}")
        if abs(self.n_frames - self.waveform.duration * 30.0) > 1.0:
            raise ValueError(f"{self.sequence_id}: {self.n_frames} frames but "
                             f"{self.waveform.duration:.3f} s of audio")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError(f"{self.sequence_id}: non-finite vertices")


@dataclass
class Dataset:
    samples: list
    model_spec: ModelSpec
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def subjects(self) -> list:
        return sorted({s.subject for s in self.samples})

    @property
    def sentences(self) -> list:
        return sorted({s.sentence for s in self.samples})

    def by_id(self, seq_id: str) -> Sample:
        for s in self.samples:
            if s.sequence_id == seq_id:
                return s
        raise KeyError(seq_id)


# --- synthetic generation ----------------------------------------------------

@dataclass(frozen=True)
class Codebook:
    expression: np.ndarray  # (K, D_exp)
    jaw: np.ndarray  # (K,) radians
    band: np.ndarray  # (K,) Hz


def make_codebook(n_visemes: int, exp_dim: int, seed: int, shift: float = 0.0, shift_seed: int = 0) -> Codebook:
    rng = np.random.default_rng(seed)
    exp = rng.normal(0.0, 1.0, (n_visemes, exp_dim))
    jaw = np.linspace(0.03, 0.22, n_visemes)[rng.permutation(n_visemes)]
    band = np.geomspace(400.0, 4000.0, n_visemes)[rng.permutation(n_visemes)]
    if shift:
        srng = np.random.default_rng(shift_seed)
        exp = exp + shift * srng.normal(0.0, 1.0, exp.shape)
    return Codebook(exp, jaw, band)


def sentence_script(sentence_seed: int, duration: float, rate: float, n_visemes: int):
    """Syllables as (start s, length s, viseme) covering ``duration``."""
    rng = np.random.default_rng(sentence_seed)
    t = rng.uniform(0.0, 0.1)
    out = []
    mean = 1.0 / rate
    while t < duration:
        d = rng.uniform(0.7 * mean, 1.3 * mean)
        out.append((t, d, int(rng.integers(n_visemes))))
        t += d + rng.uniform(0.0, 0.3 * mean)  # short pauses between syllables
    return out


def _syllable_envelope(times, start, length):
    x = (times - start) / length
    return np.where((x > 0) & (x < 1), np.sin(np.pi * np.clip(x, 0, 1)) ** 2, 0.0)


def articulation(script, codebook: Codebook, times):
    """Expression (T, D_exp), jaw angle (T,) and per-syllable envelopes at ``times``."""
    exp = np.zeros((len(times), codebook.expression.shape[1]))
    jaw = np.zeros(len(times))
    for start, length, v in script:
        e = _syllable_envelope(times, start, length)
        exp += e[:, None] * codebook.expression[v]
        jaw += e * codebook.jaw[v]
    return exp, jaw


def synth_audio(script, codebook: Codebook, duration, sample_rate, rng):
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    out = np.zeros(n)
    carriers = {}
    for start, length, v in script:
        if v not in carriers:
            f = codebook.band[v]
            sos = butter(4, [0.7 * f, min(1.3 * f, 0.45 * sample_rate)], btype="band", fs=sample_rate, output="sos")
            c = sosfiltfilt(sos, rng.standard_normal(n))
            carriers[v] = c / (c.std() + 1e-12)
        # loudness follows the jaw opening of the syllable
        out += carriers[v] * _syllable_envelope(t, start, length) * codebook.jaw[v] / codebook.jaw.max()
    out += 0.01 * rng.standard_normal(n)
    return (0.3 * out).astype(np.float32)


def _subject_name(style, i):
    return f"{style}{i:02d}"


def generate_synthetic(spec: SyntheticSpec, model: FaceModel | None = None) -> Dataset:
    if spec.n_subjects <= 0 or spec.n_sentences <= 0:
        raise ValueError("need at least one subject and one sentence")
    if spec.duration <= 0 or spec.fps <= 0 or spec.sample_rate <= 0:
        raise ValueError("duration, fps and sample_rate must be positive")
    if spec.style not in STYLES:
        raise ValueError(f"unknown style {spec.style!r}; choose from {sorted(STYLES)}")
    model = model or build_model()
    style = STYLES[spec.style]
    noise_mm = style["noise_mm"] if spec.noise_mm is None else spec.noise_mm
    if noise_mm < 0:
        raise ValueError("noise_mm must be non-negative")
    codebook = make_codebook(spec.n_visemes, model.spec.exp_dim, spec.language_seed,
                             style["codebook_shift"], shift_seed=spec.seed + 1000)
    base_cb = make_codebook(spec.n_visemes, model.spec.exp_dim, spec.language_seed)
    T = frame_count(spec.duration, spec.fps)
    times = (np.arange(T) + 0.5) / spec.fps
    eye = model.topology.region_masks["eye"]
    ss = np.random.SeedSequence([spec.seed, sum(map(ord, spec.style))])
    subj_seeds, sent_seeds, audio_seeds, noise_seeds = ss.spawn(4)
    subj_rngs = [np.random.default_rng(s) for s in subj_seeds.spawn(spec.n_subjects)]
    sentence_seeds = [int(s.generate_state(1)[0]) for s in sent_seeds.spawn(spec.n_sentences)]
    audio_ss = audio_seeds.spawn(spec.n_subjects * spec.n_sentences)
    noise_ss = noise_seeds.spawn(spec.n_subjects * spec.n_sentences)

    samples = []
    for i, srng in enumerate(subj_rngs):
        identity = srng.normal(0.0, 1.0, model.spec.id_dim)
        jaw_gain = style["jaw_gain"] * (1.0 + srng.normal(0.0, 0.05))
        exp_gain = 1.0 + srng.normal(0.0, 0.05)
        neutral = neutral_mesh(model, identity)
        for j, sent_seed in enumerate(sentence_seeds):
            k = i * spec.n_sentences + j
            script = sentence_script(sent_seed, spec.duration, spec.syllable_rate, spec.n_visemes)
            exp, jaw = articulation(script, codebook, times)
            pose = np.zeros((T, 6))
            pose[:, 0] = jaw_gain * jaw
            verts = deform(model, FaceModelParams(np.broadcast_to(identity, (T, len(identity))),
                                                  exp_gain * exp, pose))
            # Pseudo-GT artifacts come from their own stream so the clean
            # trajectory does not depend on the noise level.
            nrng = np.random.default_rng(noise_ss[k])
            noise = nrng.normal(0.0, 1.0, verts.shape)
            if noise_mm > 0:
                verts = verts + 1e-3 * noise_mm * noise
            if style["eye_mm"] > 0:
                blink = np.sin(2 * np.pi * (times * nrng.uniform(0.3, 0.8) + nrng.uniform()))
                verts[:, eye, 1] += 1e-3 * style["eye_mm"] * blink[:, None]
            audio = synth_audio(script, base_cb, spec.duration, spec.sample_rate,
                                np.random.default_rng(audio_ss[k]))
            subject = _subject_name(spec.style, i)
            s = Sample(f"{subject}_s{j + 1:03d}", subject, j + 1, Waveform(audio, spec.sample_rate),
                       verts, neutral, identity, spec.fps,
                       meta=dict(style=spec.style, jaw_gain=float(jaw_gain), noise_mm=float(noise_mm),
                                 syllables=len(script)))
            s.validate()
            samples.append(s)
    return Dataset(samples, model.spec, info=dict(kind="synthetic", spec=asdict(spec)))


def jaw_track(sample: Sample, spec: SyntheticSpec, model: FaceModel) -> np.ndarray:
    """Clean jaw angle of a synthetic sample, recomputed from its script."""
    style = STYLES[spec.style]
    cb = make_codebook(spec.n_visemes, model.spec.exp_dim, spec.language_seed, style["codebook_shift"],
                       shift_seed=spec.seed + 1000)
    ss = np.random.SeedSequence([spec.seed, sum(map(ord, spec.style))])
    sent_seeds = ss.spawn(4)[1].spawn(spec.n_sentences)
    script = sentence_script(int(sent_seeds[sample.sentence - 1].generate_state(1)[0]), spec.duration,
                             spec.syllable_rate, spec.n_visemes)
    times = (np.arange(sample.n_frames) + 0.5) / spec.fps
    return articulation(script, cb, times)[1]


def rms_envelope(wave: Waveform, n_frames: int, fps: float = 30.0) -> np.ndarray:
    x = wave.samples.astype(np.float64)
    edges = np.round(np.arange(n_frames + 1) / fps * wave.sample_rate).astype(int)
    edges = np.clip(edges, 0, len(x))
    return np.array([np.sqrt(np.mean(x[a:b] ** 2)) if b > a else 0.0 for a, b in zip(edges[:-1], edges[1:])])


# --- resampling ---------------------------------------------------------------

def resample_meshes(seq: MeshSequence, target_fps: float) -> MeshSequence:
    """Linear interpolation of vertices onto a ``target_fps`` grid starting at frame 0."""
    if seq.fps <= 0 or target_fps <= 0:
        raise ValueError("fps must be positive")
    if target_fps > seq.fps:
        raise ValueError(f"cannot upsample from {seq.fps} to {target_fps} FPS")
    T = len(seq)
    if target_fps == seq.fps:
        return MeshSequence(seq.vertices.copy(), seq.topology, seq.fps)
    n_out = int(np.floor((T - 1) * target_fps / seq.fps + 1e-9)) + 1
    pos = np.arange(n_out) * (seq.fps / target_fps)
    lo = np.minimum(np.floor(pos + 1e-9).astype(int), T - 1)
    hi = np.minimum(lo + 1, T - 1)
    w = (pos - lo)[:, None, None]
    verts = seq.vertices[lo] * (1.0 - w) + seq.vertices[hi] * w
    return MeshSequence(verts, seq.topology, target_fps)


# --- splits ---------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPolicy:
    subject_counts: tuple  # (train, val, test)
    train_sentences: tuple | None = None  # explicit 1-based ids, or None
    eval_sentences: tuple | None = None
    train_fraction: float | None = None  # alternative to explicit ids


POLICIES = {
    "vocaset": SplitPolicy((8, 2, 2)),
    "mead": SplitPolicy((8, 2, 2), tuple(range(1, 31)), tuple(range(31, 41))),
    "desk": SplitPolicy((2, 1, 1), train_fraction=0.75),
}


@dataclass(frozen=True)
class SplitSpec:
    train_subjects: tuple
    val_subjects: tuple
    test_subjects: tuple
    train_sentences: tuple | None = None
    eval_sentences: tuple | None = None

    def validate(self):
        groups = [set(self.train_subjects), set(self.val_subjects), set(self.test_subjects)]
        if any(a & b for i, a in enumerate(groups) for b in groups[i + 1:]):
            raise ValueError("subject splits overlap")
        if self.train_sentences is not None and self.eval_sentences is not None:
            if set(self.train_sentences) & set(self.eval_sentences):
                raise ValueError("sentence splits overlap")

    def to_dict(self):
        return {k: list(v) if v is not None else None for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if v is not None else None for k, v in d.items()})


def make_splits(subjects, sentences, policy="desk") -> SplitSpec:
    """Subject-disjoint (and, if the policy says so, sentence-disjoint) splits.

    Subjects are taken in sorted order; sentences are 1-based ids.
    """
    pol = POLICIES[policy] if isinstance(policy, str) else policy
    subjects = sorted(subjects)
    sentences = sorted(sentences)
    n_tr, n_va, n_te = pol.subject_counts
    if n_tr + n_va + n_te > len(subjects) or min(pol.subject_counts) < 0:
        raise ValueError(f"policy needs {n_tr + n_va + n_te} subjects, dataset has {len(subjects)}")
    train_s = eval_s = None
    if pol.train_sentences is not None:
        missing = set(pol.train_sentences) | set(pol.eval_sentences or ())
        missing -= set(sentences)
        if missing:
            raise ValueError(f"policy references sentences {sorted(missing)[:5]} not in the dataset")
        train_s, eval_s = tuple(pol.train_sentences), tuple(pol.eval_sentences or ())
    elif pol.train_fraction is not None:
        k = int(round(pol.train_fraction * len(sentences)))
        if k < 1 or k >= len(sentences):
            raise ValueError(f"train_fraction={pol.train_fraction} leaves an empty sentence split")
        train_s, eval_s = tuple(sentences[:k]), tuple(sentences[k:])
    split = SplitSpec(tuple(subjects[:n_tr]), tuple(subjects[n_tr:n_tr + n_va]),
                      tuple(subjects[n_tr + n_va:n_tr + n_va + n_te]), train_s, eval_s)
    split.validate()
    return split


def select(dataset: Dataset, split: SplitSpec, part: str) -> list:
    """Samples of ``part`` (train | val | test) in dataset order."""
    subjects = dict(train=split.train_subjects, val=split.val_subjects, test=split.test_subjects)[part]
    sentences = split.train_sentences if part == "train" else split.eval_sentences
    return [s for s in dataset.samples
            if s.subject in subjects and (sentences is None or s.sentence in sentences)]


# --- storage --------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_sample(path, s: Sample):
    np.savez(path, audio=s.waveform.samples, sample_rate=np.array(s.waveform.sample_rate),
             vertices=s.vertices, neutral=s.neutral, identity=s.identity, fps=np.array(s.fps),
             subject=np.array(s.subject), sentence=np.array(s.sentence), sequence_id=np.array(s.sequence_id),
             meta=np.array(json.dumps(s.meta, sort_keys=True)))


def load_sample(path) -> Sample:
    with np.load(path, allow_pickle=False) as z:
        s = Sample(str(z["sequence_id"]), str(z["subject"]), int(z["sentence"]),
                   Waveform(z["audio"], int(z["sample_rate"])), z["vertices"], z["neutral"],
                   z["identity"], float(z["fps"]), json.loads(str(z["meta"])))
    s.validate()
    return s


def save_dataset(dataset: Dataset, out_dir, split: SplitSpec | None = None) -> Path:
    out = Path(out_dir)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory of {out} does not exist")
    (out / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in dataset.samples:
        rel = f"samples/{s.sequence_id}.npz"
        save_sample(out / rel, s)
        entries.append(dict(id=s.sequence_id, subject=s.subject, sentence=s.sentence, file=rel,
                            frames=s.n_frames, sha256=_sha256(out / rel)))
    manifest = dict(schema=SCHEMA_VERSION, fps=30.0, model_spec=asdict(dataset.model_spec),
                    info=dataset.info, samples=entries,
                    split=split.to_dict() if split is not None else None)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_manifest(root) -> dict:
    p = Path(root) / "manifest.json"
    if not p.exists():
        raise FileNotFoundError(f"no dataset manifest at {p}")
    m = json.loads(p.read_text())
    if m.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported dataset schema {m.get('schema')!r} in {p}")
    return m


def load_dataset(root, verify=True) -> tuple:
    """(Dataset, SplitSpec | None) from a directory written by ``save_dataset``."""
    root = Path(root)
    m = load_manifest(root)
    samples = []
    for e in m["samples"]:
        path = root / e["file"]
        if verify and _sha256(path) != e["sha256"]:
            raise ValueError(f"checksum mismatch for {path}")
        samples.append(load_sample(path))
    split = SplitSpec.from_dict(m["split"]) if m.get("split") else None
    return Dataset(samples, ModelSpec(**m["model_spec"]), m.get("info", {})), split


# --- external layouts ---------------------------------------------------------------

def load_vocaset_dir(root, model_spec: ModelSpec, source_fps: float = 60.0) -> Dataset:
    """VOCASET-style layout, resampled to 30 FPS.

    ``root/templates/<subject>.npy`` (V, 3) neutral meshes;
    ``root/<subject>/<sentence>.npy`` (T, V, 3) vertex tracks at ``source_fps``;
    ``root/<subject>/<sentence>.wav`` 16-bit PCM audio. Sentence names end in a number.
    """
    root = Path(root)
    topo = build_model(model_spec).topology
    samples = []
    for tmpl in sorted((root / "templates").glob("*.npy")):
        subject = tmpl.stem
        neutral = np.load(tmpl)
        for track in sorted((root / subject).glob("*.npy")):
            digits = "".join(ch for ch in track.stem if ch.isdigit())
            if not digits:
                raise ValueError(f"cannot parse sentence number from {track.name}")
            seq = resample_meshes(MeshSequence(np.load(track), topo, source_fps), 30.0)
            wave = read_wav(track.with_suffix(".wav"))
            T = min(len(seq), frame_count(wave.duration))
            samples.append(Sample(f"{subject}_{track.stem}", subject, int(digits), wave,
                                  seq.vertices[:T], neutral, np.zeros(model_spec.id_dim)))
    if not samples:
        raise ValueError(f"no VOCASET-style sequences under {root}")
    return Dataset(samples, model_spec, info=dict(kind="vocaset", root=str(root)))


def load_mead_dir(root, model_spec: ModelSpec, exclude=()) -> Dataset:
    """MEAD-style tracked data: ``root/<subject>/<NNN>.npz`` with ``vertices`` (T, V, 3),
    ``fps`` and ``neutral`` arrays plus ``<NNN>.wav``. Subjects in ``exclude`` are skipped."""
    root = Path(root)
    topo = build_model(model_spec).topology
    samples = []
    for subj_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if subj_dir.name in set(exclude):
            continue
        for f in sorted(subj_dir.glob("*.npz")):
            with np.load(f, allow_pickle=False) as z:
                verts, fps, neutral = z["vertices"], float(z["fps"]), z["neutral"]
            seq = resample_meshes(MeshSequence(verts, topo, fps), 30.0)
            wave = read_wav(f.with_suffix(".wav"))
            T = min(len(seq), frame_count(wave.duration))
            samples.append(Sample(f"{subj_dir.name}_{f.stem}", subj_dir.name, int(f.stem), wave,
                                  seq.vertices[:T], neutral, np.zeros(model_spec.id_dim)))
    if not samples:
        raise ValueError(f"no MEAD-style sequences under {root}")
    return Dataset(samples, model_spec, info=dict(kind="mead", root=str(root), exclude=list(exclude)))
