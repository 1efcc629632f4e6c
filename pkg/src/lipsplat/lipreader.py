"""Visual speech features for the perceptual loss.

``SurrogateLipReader`` is a small frozen network standing in for a
pretrained lip-reading front end: per-frame 2D convs, a projection to
``D_read`` and a temporal conv. Any module mapping (T, 96, 96) grayscale
frames to (T, D) features can be used instead (see ``ExternalLipReader``).
"""
from __future__ import annotations

import hashlib
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .renderer import LIP_SIZE


@dataclass(frozen=True)
class LipReaderConfig:
    backend: str = "surrogate"  # surrogate | external
    feat_dim: int = 32
    channels: tuple = (8, 16, 16)
    seed: int = 1234
    version: int = 1


@dataclass
class LipFeatureSequence:
    features: torch.Tensor  # (T, D)
    extractor_id: str

    def __len__(self):
        return self.features.shape[0]


def _check_frames(frames: torch.Tensor):
    if frames.ndim != 3 or tuple(frames.shape[1:]) != (LIP_SIZE, LIP_SIZE):
        raise ValueError(f"expected (T, {LIP_SIZE}, {LIP_SIZE}) grayscale frames, got {tuple(frames.shape)}")
    if frames.shape[0] < 1:
        raise ValueError("need at least one frame")


class SurrogateLipReader(nn.Module):
    def __init__(self, cfg: LipReaderConfig = LipReaderConfig()):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        convs = []
        c_in, size = 1, LIP_SIZE
        for i, c_out in enumerate(cfg.channels):
            k = 5 if i < 2 else 3
            convs.append(nn.Conv2d(c_in, c_out, k, stride=2))
            size = (size - k) // 2 + 1
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.fc = nn.Linear(c_in * size * size, cfg.feat_dim)
        self.temporal = nn.Conv1d(cfg.feat_dim, cfg.feat_dim, 3)
        with torch.no_grad():
            for m in [*self.convs, self.fc, self.temporal]:
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.from_numpy(rng.normal(0.0, np.sqrt(1.0 / fan_in), m.weight.shape)))
                m.bias.copy_(torch.from_numpy(rng.normal(0.0, 0.1, m.bias.shape)))
            # Mostly pass-through in time with a little neighbour mixing.
            self.temporal.weight[:, :, 1] += torch.eye(cfg.feat_dim, dtype=self.temporal.weight.dtype)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self._id = None

    @property
    def extractor_id(self) -> str:
        if self._id is None:
            h = hashlib.sha256(f"surrogate-v{self.cfg.version}".encode())
            for name, p in self.state_dict().items():
                h.update(name.encode())
                h.update(p.detach().cpu().numpy().astype("<f4").tobytes())
            self._id = h.hexdigest()[:16]
        return self._id

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        _check_frames(frames)
        x = frames.to(self.fc.weight.dtype)
        mu = x.mean((1, 2), keepdim=True)
        sd = x.std((1, 2), keepdim=True, unbiased=False)
        x = ((x - mu) / (sd + 0.05))[:, None]
        for conv in self.convs:
            x = torch.tanh(conv(x))
        h = self.fc(x.flatten(1))  # (T, D)
        h = F.pad(h.T[None], (1, 1), mode="replicate")
        return self.temporal(h)[0].T

    def extract(self, frames) -> LipFeatureSequence:
        return LipFeatureSequence(self(torch.as_tensor(frames)), self.extractor_id)


class ExternalLipReader(nn.Module):
    """Wraps a frozen external visual front end (frames in, features out)."""

    def __init__(self, module: nn.Module, extractor_id: str):
        super().__init__()
        self.module = module
        self.extractor_id = extractor_id
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, frames):
        _check_frames(frames)
        return self.module(frames)

    def extract(self, frames) -> LipFeatureSequence:
        return LipFeatureSequence(self(torch.as_tensor(frames)), self.extractor_id)


def build_lipreader(cfg: LipReaderConfig) -> nn.Module:
    if cfg.backend == "surrogate":
        return SurrogateLipReader(cfg)
    raise ValueError(f"lip reader backend {cfg.backend!r} needs an externally constructed module "
                     "(wrap it in ExternalLipReader)")


class StaleCacheError(RuntimeError):
    pass


class FeatureCache:
    """One npz file per sequence: ``features`` and the ``extractor_id`` it came from."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, sequence_id: str) -> Path:
        return self.root / f"{sequence_id}.npz"

    def save(self, sequence_id: str, feats: LipFeatureSequence):
        arr = feats.features.detach().cpu().numpy()
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp.npz")
        os.close(fd)
        try:
            np.savez(tmp, features=arr, extractor_id=np.array(feats.extractor_id))
            os.replace(tmp, self.path(sequence_id))
        finally:
            if os.path.exists(tmp):
                os.remove(tmp)

    def entry_id(self, sequence_id: str) -> str | None:
        p = self.path(sequence_id)
        if not p.exists():
            return None
        with np.load(p, allow_pickle=False) as z:
            return str(z["extractor_id"])

    def load(self, sequence_id: str, extractor_id: str | None = None) -> LipFeatureSequence:
        p = self.path(sequence_id)
        if not p.exists():
            raise KeyError(f"no cached features for {sequence_id!r} in {self.root}")
        with np.load(p, allow_pickle=False) as z:
            feats = LipFeatureSequence(torch.from_numpy(z["features"]), str(z["extractor_id"]))
        if extractor_id is not None and feats.extractor_id != extractor_id:
            raise StaleCacheError(f"cache entry {sequence_id!r} was built by extractor {feats.extractor_id}, "
                                  f"current extractor is {extractor_id}")
        return feats


def precompute_gt(items, extractor, cache: FeatureCache) -> dict:
    """Fill the cache for ``items``: iterable of (sequence_id, frames_fn).

    ``frames_fn()`` returns (T, 96, 96) grayscale GT frames; it is only called
    for missing or stale entries. Returns counts of computed/reused/stale.
    """
    report = dict(computed=0, reused=0, stale=0)
    for seq_id, frames_fn in items:
        current = cache.entry_id(seq_id)
        if current == extractor.extractor_id:
            report["reused"] += 1
            continue
        if current is not None:
            report["stale"] += 1
        with torch.no_grad():
            cache.save(seq_id, extractor.extract(frames_fn()))
        report["computed"] += 1
    return report


def sequence_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean per-frame cosine similarity, truncating to the shorter sequence."""
    T = min(a.shape[0], b.shape[0])
    return F.cosine_similarity(a[:T], b[:T], dim=-1, eps=1e-12).mean()


def similarity_matrix(set_a, set_b) -> np.ndarray:
    """Entry (i, j): mean per-frame cosine similarity of set_a[i] and set_b[j]."""
    if len(set_a) == 0 or len(set_b) == 0:
        raise ValueError("similarity_matrix needs non-empty sets")
    fa = [s.features if isinstance(s, LipFeatureSequence) else torch.as_tensor(s) for s in set_a]
    fb = [s.features if isinstance(s, LipFeatureSequence) else torch.as_tensor(s) for s in set_b]
    out = np.zeros((len(fa), len(fb)))
    for i, x in enumerate(fa):
        for j, y in enumerate(fb):
            out[i, j] = float(sequence_similarity(x.double(), y.double()))
    return out
