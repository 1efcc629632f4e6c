"""Audio (or text via TTS) to a 30 FPS feature sequence.

Frozen temporal-convolution front end, linear interpolation onto the video
frame grid, then a trainable transformer encoder. Two backends share that
split: a seeded desk-scale stack and an adapter around a pretrained
wav2vec 2.0 model from ``transformers``.
"""
from __future__ import annotations

import hashlib
import io
import json
import shlex
import subprocess
import urllib.request
import wave
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

FPS = 30.0

# (out_channels, kernel, stride) of the desk front end; total stride 320 = 20 ms at 16 kHz
CONV_LAYERS = ((32, 10, 5), (32, 8, 4), (32, 4, 4), (32, 4, 4))


class ProviderError(RuntimeError):
    """A waveform provider failed; the message carries its diagnostics."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains NaN or Inf")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureSequence:
    features: torch.Tensor  # (T, D)
    fps: float = FPS

    def __len__(self):
        return self.features.shape[0]


@dataclass(frozen=True)
class EncoderConfig:
    backend: str = "desk"  # desk | wav2vec
    sample_rate: int = 16000
    feat_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 128
    dropout: float = 0.1
    seed: int = 0
    pretrained: str = "facebook/wav2vec2-base-960h"


def frame_count(duration: float, fps: float = FPS) -> int:
    return int(round(duration * fps))


def receptive_field(layers=CONV_LAYERS):
    """(receptive field, total stride) of a strided conv stack, in samples."""
    rf, stride = 1, 1
    for _, k, s in layers:
        rf += (k - 1) * stride
        stride *= s
    return rf, stride


def interpolate_frames(feats: torch.Tensor, src_times: torch.Tensor, dst_times: torch.Tensor) -> torch.Tensor:
    """Piecewise-linear resampling of (S, C) features along time.

    Exact at source times, clamped to the first/last frame outside the range.
    """
    S = feats.shape[0]
    if S == 1:
        return feats.expand(len(dst_times), -1)
    src_times = src_times.to(feats.dtype)
    dst_times = dst_times.to(feats.dtype)
    hi = torch.searchsorted(src_times, dst_times, right=True).clamp(1, S - 1)
    lo = hi - 1
    w = ((dst_times - src_times[lo]) / (src_times[hi] - src_times[lo])).clamp(0.0, 1.0)
    return feats[lo] * (1.0 - w)[:, None] + feats[hi] * w[:, None]


class ConvFrontEnd(nn.Module):
    """Seeded strided conv stack; weights are drawn once and frozen."""

    def __init__(self, seed=0, layers=CONV_LAYERS):
        super().__init__()
        rng = np.random.default_rng(seed)
        mods = []
        c_in = 1
        for c_out, k, s in layers:
            conv = nn.Conv1d(c_in, c_out, k, stride=s)
            bound = np.sqrt(6.0 / (c_in * k))
            with torch.no_grad():
                conv.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, conv.weight.shape)))
                conv.bias.zero_()
            mods += [conv, nn.GELU()]
            c_in = c_out
        self.net = nn.Sequential(*mods)
        self.out_dim = c_in
        self.rf, self.stride = receptive_field(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):  # (N,) -> (S, C)
        if x.numel() < self.rf:
            x = torch.nn.functional.pad(x, (0, self.rf - x.numel()))
        return self.net(x[None, None])[0].T

    def frame_times(self, n, sample_rate):
        k = torch.arange(n, dtype=torch.float64)
        return (self.stride * k + (self.rf - 1) / 2.0) / sample_rate


class AudioEncoder(nn.Module):
    """Desk backend: frozen ConvFrontEnd, interpolation, trainable transformer."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.frontend = ConvFrontEnd(cfg.seed)
        self.proj = nn.Sequential(nn.LayerNorm(self.frontend.out_dim), nn.Linear(self.frontend.out_dim, cfg.feat_dim))
        layer = nn.TransformerEncoderLayer(cfg.feat_dim, cfg.n_heads, cfg.ff_dim, cfg.dropout, batch_first=True)
        self.transformer = nn.TransformerEncoder(layer, cfg.n_layers, enable_nested_tensor=False)

    def frozen_parameters(self):
        return {f"frontend.{k}": v for k, v in self.frontend.named_parameters()}

    def low_level(self, samples: torch.Tensor, n_frames: int) -> torch.Tensor:
        """Frozen features interpolated to ``n_frames`` at 30 FPS, before contextualization."""
        x = samples.float()
        x = (x - x.mean()) / (x.std(unbiased=False) + 1e-5)
        with torch.no_grad():
            h = self.frontend(x)
        src = self.frontend.frame_times(h.shape[0], self.cfg.sample_rate)
        dst = (torch.arange(n_frames, dtype=torch.float64) + 0.5) / FPS
        return interpolate_frames(h, src, dst)

    def forward(self, samples: torch.Tensor, n_frames: int) -> torch.Tensor:
        h = self.proj(self.low_level(samples, n_frames))
        return self.transformer(h[None])[0]


class Wav2VecEncoder(nn.Module):
    """Adapter around a ``transformers`` Wav2Vec2Model with the same split.

    The CNN feature extractor is frozen; its 50 Hz output is interpolated to
    30 FPS before the feature projection and transformer, which train.
    """

    def __init__(self, cfg: EncoderConfig = EncoderConfig(backend="wav2vec"), model=None):
        super().__init__()
        from transformers import Wav2Vec2Model

        self.cfg = cfg
        self.w2v = model if model is not None else Wav2Vec2Model.from_pretrained(cfg.pretrained)
        self.w2v.feature_extractor._freeze_parameters()
        conv = self.w2v.config
        self.rf, self.stride = receptive_field(list(zip(conv.conv_dim, conv.conv_kernel, conv.conv_stride)))
        self.out = nn.Linear(conv.hidden_size, cfg.feat_dim)

    def frozen_parameters(self):
        return {f"w2v.feature_extractor.{k}": v for k, v in self.w2v.feature_extractor.named_parameters()}

    def forward(self, samples: torch.Tensor, n_frames: int) -> torch.Tensor:
        x = samples.float()
        x = (x - x.mean()) / (x.std(unbiased=False) + 1e-5)
        if x.numel() < self.rf:
            x = torch.nn.functional.pad(x, (0, self.rf - x.numel()))
        with torch.no_grad():
            h = self.w2v.feature_extractor(x[None]).transpose(1, 2)[0]  # (S, C)
        k = torch.arange(h.shape[0], dtype=torch.float64)
        src = (self.stride * k + (self.rf - 1) / 2.0) / self.cfg.sample_rate
        dst = (torch.arange(n_frames, dtype=torch.float64) + 0.5) / FPS
        h = interpolate_frames(h, src, dst)[None]
        h, _ = self.w2v.feature_projection(h)
        h = self.w2v.encoder(h).last_hidden_state
        return self.out(h)[0]


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    if cfg.backend == "desk":
        return AudioEncoder(cfg)
    if cfg.backend == "wav2vec":
        return Wav2VecEncoder(cfg)
    raise ValueError(f"unknown encoder backend {cfg.backend!r}")


def encode_audio(wave_: Waveform, encoder: nn.Module, n_frames: int | None = None) -> FeatureSequence:
    """Encode a waveform; ``n_frames`` pins the length to a paired mesh sequence."""
    if len(wave_.samples) == 0:
        raise ValueError("empty waveform")
    if wave_.sample_rate != encoder.cfg.sample_rate:
        raise ValueError(f"sample rate {wave_.sample_rate} Hz does not match encoder "
                         f"({encoder.cfg.sample_rate} Hz)")
    T = frame_count(wave_.duration) if n_frames is None else int(n_frames)
    if T <= 0:
        raise ValueError("waveform shorter than one video frame")
    return FeatureSequence(encoder(torch.from_numpy(wave_.samples), T))


def encode_text(text: str, provider, encoder: nn.Module) -> FeatureSequence:
    wave_ = provider.synthesize(text)
    if len(wave_.samples) == 0:
        raise ProviderError(f"{type(provider).__name__} returned an empty waveform for {text!r}")
    return encode_audio(wave_, encoder)


# --- waveform I/O and providers ---------------------------------------------

def read_wav(source) -> Waveform:
    """16-bit PCM wave file (path, bytes or file object) to a float waveform."""
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    with wave.open(source if hasattr(source, "read") else str(source), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError("only 16-bit PCM wave files are supported")
        raw = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
        ch = w.getnchannels()
        sr = w.getframerate()
    x = raw.reshape(-1, ch).mean(1) / 32768.0
    return Waveform(x.astype(np.float32), sr)


def wav_bytes(wave_: Waveform) -> bytes:
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(wave_.sample_rate)
        w.writeframes((np.clip(wave_.samples, -1.0, 32767 / 32768) * 32768).astype("<i2").tobytes())
    return buf.getvalue()


def write_wav(path, wave_: Waveform):
    with open(path, "wb") as f:
        f.write(wav_bytes(wave_))


class StubProvider:
    """Deterministic offline stand-in for a TTS system.

    Produces amplitude-modulated noise whose length grows with the text
    (``seconds_per_char``) unless ``duration`` fixes it.
    """

    def __init__(self, duration: float | None = None, sample_rate=16000, seconds_per_char=0.06, empty=False):
        self.duration = duration
        self.sample_rate = sample_rate
        self.seconds_per_char = seconds_per_char
        self.empty = empty

    def synthesize(self, text: str) -> Waveform:
        if self.empty:
            return Waveform(np.zeros(0, np.float32), self.sample_rate)
        dur = self.duration if self.duration is not None else max(0.5, self.seconds_per_char * len(text))
        seed = int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")
        rng = np.random.default_rng(seed)
        n = int(round(dur * self.sample_rate))
        t = np.arange(n) / self.sample_rate
        env = 0.5 + 0.5 * np.sin(2 * np.pi * 4.0 * t + rng.uniform(0, 2 * np.pi))
        return Waveform((0.3 * env * rng.standard_normal(n)).astype(np.float32), self.sample_rate)


class SubprocessProvider:
    """Runs an external command; ``{text}`` in the template is replaced by the
    (shell-quoted) text. The command must write a PCM wave file to stdout."""

    def __init__(self, command: str, timeout=120.0):
        self.command = command
        self.timeout = timeout

    def synthesize(self, text: str) -> Waveform:
        argv = shlex.split(self.command.replace("{text}", shlex.quote(text)))
        try:
            res = subprocess.run(argv, capture_output=True, timeout=self.timeout, check=False)
        except (OSError, subprocess.TimeoutExpired) as e:
            raise ProviderError(f"provider command {argv[0]!r} failed to run: {e}") from e
        if res.returncode != 0:
            raise ProviderError(f"provider exited with {res.returncode}: "
                                f"{res.stderr.decode(errors='replace').strip()[:500]}")
        try:
            return read_wav(res.stdout)
        except (wave.Error, EOFError, ValueError) as e:
            raise ProviderError(f"provider output is not a PCM wave file: {e}") from e


class HTTPProvider:
    """POSTs ``{"text": ...}`` as JSON and expects wave bytes in the response."""

    def __init__(self, url: str, timeout=120.0):
        self.url = url
        self.timeout = timeout

    def synthesize(self, text: str) -> Waveform:
        req = urllib.request.Request(self.url, data=json.dumps({"text": text}).encode(),
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as r:
                body = r.read()
        except OSError as e:
            raise ProviderError(f"request to {self.url} failed: {e}") from e
        try:
            return read_wav(body)
        except (wave.Error, EOFError, ValueError) as e:
            raise ProviderError(f"response from {self.url} is not a PCM wave file: {e}") from e


def build_provider(kind: str, **kw):
    kinds = {"stub": StubProvider, "subprocess": SubprocessProvider, "http": HTTPProvider}
    if kind not in kinds:
        raise ValueError(f"unknown waveform provider {kind!r}")
    return kinds[kind](**kw)
