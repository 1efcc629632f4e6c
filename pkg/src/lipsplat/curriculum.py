"""The full three-stage curriculum in one process, with per-stage test evaluation."""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import torch

from . import config as C
from .cli import source_data
from .datasets import select
from .face_model import build_model
from .lipreader import FeatureCache, build_lipreader
from .metrics import evaluate_checkpoint
from .model import AnimationModel
from .pipeline import LipRenderer, subject_avatars
from .trainer import Trainer

log = logging.getLogger("lipsplat")


def run_curriculum(cfg: C.RunConfig, out=None, stages=(1, 2, 3), eval_split="test", render=True,
                   init_checkpoint=None, train_eval_stages=(2, 3)) -> dict:
    """Train ``stages`` in order and evaluate each final checkpoint.

    Returns ``{stage: {"test": metrics, "train": metrics, "train_s": ..,
    "eval_s": ..}}`` and writes the same to ``<out>/curriculum.json``.
    "test" scores ``eval_split``; "train" (only for ``train_eval_stages``)
    scores generated animations of the fine-tuning training sequences.
    ``init_checkpoint`` seeds the first listed stage when it is not stage 1.
    """
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    face = build_model(cfg.model)
    pre, pre_split = source_data(cfg, "pretrain", face, out)
    ft, ft_split = source_data(cfg, "finetune", face, out)
    train, test = select(ft, ft_split, "train"), select(ft, ft_split, eval_split)
    lip = LipRenderer(face, subject_avatars(face, ft.subjects, cfg.avatar), build_lipreader(cfg.lipreader))
    cache = FeatureCache(out / "cache")
    torch.manual_seed(cfg.seed)
    trainer = Trainer(AnimationModel(face.n_vertices, cfg.encoder, cfg.decoder), face.topology, out,
                      seed=cfg.seed, lip=lip, cache=cache)
    mask = face.topology.region_masks["lip"]
    results = {}
    prev = init_checkpoint
    for k in stages:
        t0 = time.time()
        if k == 3:
            lip.precompute(train, cache)
        samples = select(pre, pre_split, "train") if k == 1 else train
        state = trainer.run_stage(cfg.stage(k), samples, init_checkpoint=prev)
        t1 = time.time()
        (out / "eval").mkdir(exist_ok=True)
        results[k] = {}
        for name, split_samples in (("test", test), ("train", train)):
            if name == "train" and k not in train_eval_stages:
                continue
            report = evaluate_checkpoint(state.checkpoint, split_samples, lip, mask, label=f"stage{k}", render=render)
            results[k][name] = report.aggregate()
            (out / "eval" / f"stage{k}_{name}.tsv").write_text(report.to_tsv())
        results[k].update(train_s=t1 - t0, eval_s=time.time() - t1)
        log.info("stage %d: %s", k, results[k])
        prev = state.checkpoint
    (out / "curriculum.json").write_text(json.dumps({str(k): v for k, v in results.items()}, indent=1))
    return results
