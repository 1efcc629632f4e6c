"""Encoder + decoder bundle used by the trainer, evaluation and the CLI."""
from __future__ import annotations

import torch
import torch.nn as nn

from .decoder import DecoderConfig, OffsetDecoder
from .encoder import EncoderConfig, build_encoder


class AnimationModel(nn.Module):
    def __init__(self, n_vertices: int, enc_cfg: EncoderConfig = EncoderConfig(),
                 dec_cfg: DecoderConfig = DecoderConfig()):
        super().__init__()
        self.encoder = build_encoder(enc_cfg)
        self.decoder = OffsetDecoder(n_vertices, enc_cfg.feat_dim, dec_cfg)

    def frozen_parameters(self) -> dict:
        return {f"encoder.{k}": v for k, v in self.encoder.frozen_parameters().items()}

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def predict_offsets(self, audio: torch.Tensor, gt_offsets: torch.Tensor, neutral: torch.Tensor):
        """Teacher-forced offsets (T, V, 3) for one sequence."""
        feats = self.encoder(audio, gt_offsets.shape[0])
        return self.decoder.teacher_forced(gt_offsets[None].float(), neutral[None].float(), feats[None])[0]

    @torch.no_grad()
    def animate(self, audio: torch.Tensor, neutral: torch.Tensor, n_frames: int) -> torch.Tensor:
        """Autoregressive vertices (T, V, 3) = neutral + generated offsets."""
        feats = self.encoder(audio, n_frames)
        offsets = self.decoder.generate(neutral.float(), feats)
        return neutral.float()[None] + offsets
