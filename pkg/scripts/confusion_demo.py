"""Lip-feature similarity matrix between two renderings of the same sequences.

Rows render the pseudo-GT meshes through avatars with a different appearance
draw, columns through the training avatars. A well-behaved extractor puts
the largest values on the diagonal.

    python scripts/confusion_demo.py --out runs/confusion --sequences 8
"""
import argparse
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from lipsplat import config as C
from lipsplat.cli import source_data
from lipsplat.face_model import build_model
from lipsplat.lipreader import build_lipreader, similarity_matrix
from lipsplat.metrics import save_confusion_plot
from lipsplat.pipeline import LipRenderer, subject_avatars


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--out", default="runs/confusion")
    p.add_argument("--sequences", type=int, default=8)
    p.add_argument("--appearance-seed", type=int, default=1000)
    args = p.parse_args()

    cfg = C.load_config(args.config)
    face = build_model(cfg.model)
    ds, _ = source_data(cfg, "finetune", face)
    samples = ds.samples[:args.sequences]
    reader = build_lipreader(cfg.lipreader)
    ref = LipRenderer(face, subject_avatars(face, ds.subjects, cfg.avatar), reader)
    other = LipRenderer(face, subject_avatars(face, ds.subjects, replace(cfg.avatar, seed=args.appearance_seed)),
                        reader)
    with torch.no_grad():
        rows = [reader(other.gt_frames(s).float()) for s in samples]
        cols = [reader(ref.gt_frames(s).float()) for s in samples]
    m = similarity_matrix(rows, cols)
    diag = float(np.mean(np.diag(m)))
    off = float((m.sum() - np.trace(m)) / (m.size - len(m)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = [s.sequence_id for s in samples]
    save_confusion_plot(m, out / "similarity.png", ids, ids, title="shifted appearance vs training avatar")
    (out / "summary.json").write_text(json.dumps(dict(ids=ids, diagonal_mean=diag, off_diagonal_mean=off), indent=1))
    np.set_printoptions(precision=3, suppress=True, linewidth=160)
    print(m)
    print(f"diagonal mean {diag:.4f}, off-diagonal mean {off:.4f} -> {out}")


if __name__ == "__main__":
    main()
