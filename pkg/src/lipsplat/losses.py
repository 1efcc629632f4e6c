"""Weighted vertex loss, lip-reading loss on rendered crops, and their mix."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .face_model import FaceTopology

STAGE1_WEIGHTS = dict(skin=1.0, lip=1.0, teeth=1.0, eye=1.0)
MASKED_WEIGHTS = dict(skin=1.0, lip=0.5, teeth=0.5, eye=0.0)


def vertex_weights(topology: FaceTopology, stage: int, overrides: dict | None = None) -> np.ndarray:
    """Per-vertex W_v: all ones in stage 1; stages 2-3 halve non-skin and zero the eyes."""
    if stage not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    table = dict(STAGE1_WEIGHTS if stage == 1 else MASKED_WEIGHTS)
    table.update(overrides or {})
    w = np.zeros(topology.vertex_count)
    for region, value in table.items():
        if value < 0:
            raise ValueError("vertex weights must be non-negative")
        w[topology.region_masks[region]] = value
    return w


def vertex_loss(pred: torch.Tensor, gt: torch.Tensor, weights) -> torch.Tensor:
    """sum_t sum_v ||pred - gt||^2 W_v over every leading axis (no averaging)."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if torch.isnan(pred).any() or torch.isnan(gt).any():
        raise ValueError("NaN in vertex loss inputs")
    w = torch.as_tensor(weights, dtype=pred.dtype)
    if w.shape != (pred.shape[-2],):
        raise ValueError(f"weights must have shape ({pred.shape[-2]},)")
    sq = ((pred - gt) ** 2).sum(-1)
    # Vertices with W_v = 0 are excluded outright, so their values cannot
    # leak in through 0 * inf or rounding.
    keep = w > 0
    return (sq[..., keep] * w[keep]).sum()


def cosine_distance(pred_feats: torch.Tensor, gt_feats: torch.Tensor, mode: str = "frame") -> torch.Tensor:
    """1 - CosSim over (T, D) features.

    ``frame``: mean of per-frame cosines. ``sequence``: one cosine between the
    flattened sequences.
    """
    if pred_feats.shape != gt_feats.shape:
        raise ValueError(f"feature shape mismatch: {tuple(pred_feats.shape)} vs {tuple(gt_feats.shape)}")
    if mode == "frame":
        sim = F.cosine_similarity(pred_feats, gt_feats, dim=-1, eps=1e-12).mean()
    elif mode == "sequence":
        sim = F.cosine_similarity(pred_feats.reshape(1, -1), gt_feats.reshape(1, -1), dim=-1, eps=1e-12)[0]
    else:
        raise ValueError(f"unknown cosine mode {mode!r}")
    return 1.0 - sim


def window_bounds(start: int, length: int, total: int):
    """Frames of a rendered window whose features equal full-sequence features.

    The extractor's temporal conv sees one neighbour on each side, so window
    edges that are not sequence edges are dropped.
    """
    if length < 1 or start < 0 or start + length > total:
        raise ValueError(f"window [{start}, {start + length}) outside sequence of {total} frames")
    lo = start if start == 0 else start + 1
    hi = start + length if start + length == total else start + length - 1
    if hi <= lo:
        raise ValueError("window too short to keep any interior frame")
    return lo, hi


def lipread_loss(pred_frames: torch.Tensor, gt_features, extractor, mode: str = "frame",
                 start: int = 0) -> torch.Tensor:
    """1 - CosSim(extractor(pred_frames), gt_features).

    ``pred_frames`` (w, 96, 96) may be a window starting at frame ``start``
    of the sequence the (T, D) ``gt_features`` describe.
    """
    if getattr(gt_features, "extractor_id", extractor.extractor_id) != extractor.extractor_id:
        raise ValueError(f"GT features come from extractor {gt_features.extractor_id}, "
                         f"loss uses {extractor.extractor_id}; rebuild the feature cache")
    gt = gt_features.features if hasattr(gt_features, "features") else torch.as_tensor(gt_features)
    T = gt.shape[0]
    w = pred_frames.shape[0]
    if start + w > T:
        raise ValueError(f"frame count mismatch: {w} rendered from frame {start} vs {T} GT feature frames")
    lo, hi = window_bounds(start, w, T)
    pred = extractor(pred_frames)[lo - start:hi - start]
    return cosine_distance(pred, gt[lo:hi].to(pred.dtype), mode)


@dataclass
class LossBreakdown:
    vert: torch.Tensor
    read: torch.Tensor | None
    total: torch.Tensor
    lambda_read: float

    def row(self) -> dict:
        return dict(vert=float(self.vert.detach()),
                    read=float(self.read.detach()) if self.read is not None else float("nan"),
                    total=float(self.total.detach()), lambda_read=self.lambda_read)


@dataclass
class ReadInputs:
    """Wiring for the stage-3 perceptual term of one sequence."""
    render_fn: Callable  # (w, V, 3) vertices -> (w, 96, 96) grayscale frames
    extractor: object
    gt_features: object
    start: int = 0
    length: int | None = None
    mode: str = "frame"


def total_loss(pred: torch.Tensor, gt: torch.Tensor, stage: int, weights,
               lambda_read: float = 1e-5, read: ReadInputs | None = None,
               reduction: str = "mean") -> LossBreakdown:
    """L = L_vert (stages 1-2) or L_vert + lambda * L_read (stage 3) for one sequence.

    ``reduction="mean"`` divides the weighted sum by the number of (frame,
    vertex) pairs, which puts L_vert on the scale lambda_read=1e-5 was tuned
    for; ``"sum"`` keeps the raw sum.
    """
    vert = vertex_loss(pred, gt, weights)
    if reduction == "mean":
        vert = vert / pred[..., 0].numel()
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    if stage in (1, 2):
        return LossBreakdown(vert, None, vert, 0.0)
    if stage != 3:
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    if read is None:
        raise ValueError("stage 3 needs renderer and extractor wiring (ReadInputs)")
    length = pred.shape[0] - read.start if read.length is None else read.length
    frames = read.render_fn(pred[read.start:read.start + length])
    lr = lipread_loss(frames, read.gt_features, read.extractor, read.mode, read.start)
    return LossBreakdown(vert, lr, vert + lambda_read * lr, lambda_read)
