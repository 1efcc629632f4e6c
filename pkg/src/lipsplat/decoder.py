"""Autoregressive vertex-offset decoder.

Past offsets are embedded to a 64-d motion space, summed with a speaker
embedding (a linear map of the flattened neutral mesh) and a periodic
positional encoding, then passed through one transformer decoder layer:
causal self-attention with a period-blocked ALiBi bias and cross-attention
restricted to the aligned input frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class DecoderConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 1
    dropout: float = 0.3
    ff_dim: int = 256
    period: int = 30
    max_len: int = 600
    # Offsets are handled internally in centimetres so Adam's step size
    # matches their magnitude; inputs/outputs stay in metres.
    unit_scale: float = 100.0


def init_biased_mask(n_head, max_seq_len, period):
    def get_slopes(n):
        def get_slopes_power_of_2(n):
            start = 2 ** (-2 ** -(math.log2(n) - 3))
            return [start * start ** i for i in range(n)]
        if math.log2(n).is_integer():
            return get_slopes_power_of_2(n)
        closest = 2 ** math.floor(math.log2(n))
        return get_slopes_power_of_2(closest) + get_slopes(2 * closest)[0::2][:n - closest]

    slopes = torch.tensor(get_slopes(n_head))
    bias = torch.arange(start=0, end=max_seq_len, step=period).unsqueeze(1).repeat(1, period).view(-1) // period
    bias = -torch.flip(bias, dims=[0])
    alibi = torch.zeros(max_seq_len, max_seq_len)
    for i in range(max_seq_len):
        alibi[i, :i + 1] = bias[-(i + 1):]
    alibi = slopes[:, None, None] * alibi[None]
    mask = (torch.triu(torch.ones(max_seq_len, max_seq_len)) == 1).transpose(0, 1)
    mask = mask.float().masked_fill(mask == 0, float("-inf")).masked_fill(mask == 1, 0.0)
    return mask[None] + alibi  # (heads, L, L)


def alignment_mask(T, S):
    """True where attention is blocked: frame t sees input frame t only."""
    mask = torch.ones(T, S, dtype=torch.bool)
    idx = torch.arange(min(T, S))
    mask[idx, idx] = False
    return mask


class PeriodicPositionalEncoding(nn.Module):
    def __init__(self, d_model, dropout=0.1, period=30, max_seq_len=600):
        super().__init__()
        self.dropout = nn.Dropout(p=dropout)
        pe = torch.zeros(period, d_model)
        position = torch.arange(0, period, dtype=torch.float).unsqueeze(1)
        div_term = torch.exp(torch.arange(0, d_model, 2).float() * (-math.log(10000.0) / d_model))
        pe[:, 0::2] = torch.sin(position * div_term)
        pe[:, 1::2] = torch.cos(position * div_term)
        repeat_num = max_seq_len // period + 1
        self.register_buffer("pe", pe.repeat(repeat_num, 1)[None])

    def forward(self, x):
        return self.dropout(x + self.pe[:, :x.size(1)])


class OffsetDecoder(nn.Module):
    def __init__(self, n_vertices: int, feat_dim: int, cfg: DecoderConfig = DecoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.n_vertices = n_vertices
        d = cfg.d_model
        self.audio_map = nn.Linear(feat_dim, d)
        self.motion_map = nn.Linear(3 * n_vertices, d)
        self.speaker_map = nn.Linear(3 * n_vertices, d)
        self.ppe = PeriodicPositionalEncoding(d, cfg.dropout, cfg.period, cfg.max_len)
        layer = nn.TransformerDecoderLayer(d, cfg.n_heads, cfg.ff_dim, cfg.dropout, batch_first=True)
        self.transformer = nn.TransformerDecoder(layer, cfg.n_layers)
        self.head = nn.Linear(d, 3 * n_vertices)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.register_buffer("bias_mask", init_biased_mask(cfg.n_heads, cfg.max_len, cfg.period), persistent=False)

    def describe(self) -> dict:
        """Hyperparameters read back from the constructed modules."""
        layers = list(self.transformer.layers)
        attn = layers[0].self_attn
        return dict(layers=len(layers), heads=attn.num_heads, dropout=layers[0].dropout.p,
                    attn_dropout=attn.dropout, motion_dim=self.motion_map.out_features,
                    ff_dim=layers[0].linear1.out_features, period=self.cfg.period)

    def speaker_embedding(self, neutral: torch.Tensor) -> torch.Tensor:
        return self.speaker_map(neutral.reshape(*neutral.shape[:-2], -1))

    def _decode(self, history, speaker, feats):
        # history: (B, L, V, 3) offsets fed to the decoder (start token included)
        B, L = history.shape[:2]
        S = feats.shape[1]
        if L > self.cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len={self.cfg.max_len}")
        x = self.motion_map(history.reshape(B, L, -1) * self.cfg.unit_scale) + speaker[:, None]
        x = self.ppe(x)
        mem = self.audio_map(feats)
        tgt_mask = self.bias_mask[:, :L, :L].repeat(B, 1, 1).to(x.dtype)
        mem_mask = alignment_mask(L, S)
        h = self.transformer(x, mem, tgt_mask=tgt_mask, memory_mask=mem_mask)
        return self.head(h).reshape(B, L, self.n_vertices, 3) / self.cfg.unit_scale

    def teacher_forced(self, gt_offsets, neutral, feats) -> torch.Tensor:
        """All frames in one pass, conditioned on shifted GT history.

        gt_offsets (B, T, V, 3), neutral (B, V, 3), feats (B, T, D) -> (B, T, V, 3).
        """
        if gt_offsets.shape[1] != feats.shape[1]:
            raise ValueError(f"offset length {gt_offsets.shape[1]} != input length {feats.shape[1]}")
        start = torch.zeros_like(gt_offsets[:, :1])
        history = torch.cat([start, gt_offsets[:, :-1]], 1)
        return self._decode(history, self.speaker_embedding(neutral), feats)

    def step(self, past, neutral, feats, t: int) -> torch.Tensor:
        """Offset for frame ``t`` given ``past`` (>= t frames, only the first t used).

        Unbatched: past (L, V, 3), neutral (V, 3), feats (T, D) -> (V, 3).
        """
        if t < 0 or t >= feats.shape[0]:
            raise ValueError(f"frame index {t} outside input of length {feats.shape[0]}")
        if t > past.shape[0]:
            raise ValueError(f"step({t}) needs at least {t} past frames, got {past.shape[0]}")
        if past.shape[-2:] != (self.n_vertices, 3):
            raise ValueError(f"past offsets must be (L, {self.n_vertices}, 3)")
        start = torch.zeros(1, self.n_vertices, 3, dtype=feats.dtype)
        history = torch.cat([start, past[:t].to(feats.dtype)], 0)[None]
        out = self._decode(history, self.speaker_embedding(neutral[None]), feats[None])
        return out[0, t]

    @torch.no_grad()
    def generate(self, neutral, feats) -> torch.Tensor:
        """Autoregressive rollout; returns offsets (T, V, 3)."""
        T = feats.shape[0]
        if T == 0:
            raise ValueError("empty input sequence")
        past = torch.zeros(0, self.n_vertices, 3, dtype=feats.dtype)
        for t in range(T):
            past = torch.cat([past, self.step(past, neutral, feats, t)[None]], 0)
        return past
