"""lipsplat command line: synthesize, train, infer, evaluate, confusion.

Exit codes: 0 ok, 2 configuration error, 3 data/artifact error (missing or
corrupt inputs, checkpoints or provider failures), 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import config as C
from .avatar import build_avatar
from .datasets import (SplitPolicy, SyntheticSpec, generate_synthetic, load_dataset, make_splits, save_dataset,
                       select)
from .encoder import FPS, ProviderError, StubProvider, build_provider, encode_audio, frame_count, read_wav
from .face_model import build_model
from .lipreader import FeatureCache, build_lipreader, similarity_matrix
from .metrics import LPIPSAdapter, evaluate_model, save_confusion_plot
from .model import AnimationModel
from .pipeline import LipRenderer, subject_avatars
from .renderer import face_camera, render_sequence, save_frames
from .trainer import CheckpointError, NumericalError, Trainer, model_from_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
log = logging.getLogger("lipsplat")


class DataError(RuntimeError):
    pass


def set_deterministic(seed: int, on: bool):
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    if on:
        torch.use_deterministic_algorithms(True)


# --- data ----------------------------------------------------------------------

def source_data(cfg: C.RunConfig, which: str, face=None, run_dir=None):
    """(Dataset, SplitSpec) for the pretrain or finetune source.

    An explicit ``path`` wins; otherwise a dataset written by ``synthesize``
    into ``<run_dir>/data/<which>`` is reused, else the data is generated.
    """
    src = getattr(cfg.data, which)
    path = src.path
    if path is None and run_dir is not None and (Path(run_dir) / "data" / which / "manifest.json").exists():
        path = str(Path(run_dir) / "data" / which)
    if path is not None:
        try:
            ds, split = load_dataset(path)
        except (FileNotFoundError, ValueError, KeyError) as e:
            raise DataError(f"cannot load {which} dataset from {path}: {e}") from e
        if ds.model_spec != cfg.model:
            raise DataError(f"{path} was generated for a different face model spec")
    else:
        spec = SyntheticSpec(n_subjects=src.n_subjects, n_sentences=src.n_sentences, duration=src.duration,
                             seed=src.seed, style=src.style)
        ds, split = generate_synthetic(spec, face or build_model(cfg.model)), None
    if split is None:
        policy = SplitPolicy((len(ds.subjects), 0, 0)) if src.split == "all-train" else src.split
        try:
            split = make_splits(ds.subjects, ds.sentences, policy)
        except (KeyError, ValueError) as e:
            raise C.ConfigError(f"data.{which}.split: {e}") from e
    return ds, split


def _lip(cfg, face, subjects):
    return LipRenderer(face, subject_avatars(face, subjects, cfg.avatar), build_lipreader(cfg.lipreader))


def _new_model(cfg, face):
    return AnimationModel(face.n_vertices, cfg.encoder, cfg.decoder)


# --- commands ----------------------------------------------------------------------

def cmd_synthesize(cfg, args):
    run = Path(args.out or cfg.out)
    if not run.parent.exists():
        raise DataError(f"parent directory {run.parent} does not exist")
    out = run / "data"
    out.mkdir(parents=True, exist_ok=True)
    face = build_model(cfg.model)
    written = {}
    for which in ("pretrain", "finetune"):
        ds, split = source_data(cfg, which, face)  # always regenerate, never reload
        root = save_dataset(ds, out / which, split)
        written[which] = str(root)
        print(f"{which}: {len(ds)} sequences -> {root}")
    return written


def cmd_train(cfg, args):
    stage = args.stage
    if stage is None:
        raise C.ConfigError("train needs --stage 1, 2 or 3")
    scfg = cfg.stage(stage)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    C.save_config(cfg, out / "config.yaml")
    face = build_model(cfg.model)
    ds, split = source_data(cfg, "pretrain" if stage == 1 else "finetune", face, out)
    samples = select(ds, split, "train")
    if not samples:
        raise DataError("the training split is empty")
    init = args.checkpoint
    if init is None and stage > 1:
        init = out / "checkpoints" / f"stage{stage - 1}_final.npz"
    lip = cache = None
    if stage == 3:
        lip = _lip(cfg, face, ds.subjects)
        cache = FeatureCache(out / "cache")
        rep = lip.precompute(samples, cache)
        log.info("GT lip features: %s", rep)
    model = _new_model(cfg, face)
    trainer = Trainer(model, face.topology, out, seed=cfg.seed, lip=lip, cache=cache)
    state = trainer.run_stage(scfg, samples, init_checkpoint=init if stage > 1 else args.checkpoint,
                              resume=args.resume, max_steps=args.max_steps)
    print(f"stage {stage}: {state.step} steps, checkpoint {state.checkpoint}")
    return state


def cmd_infer(cfg, args):
    if args.checkpoint is None:
        raise C.ConfigError("infer needs --checkpoint")
    if (args.audio is None) == (args.text is None):
        raise C.ConfigError("infer needs exactly one of --audio or --text")
    run = Path(args.out or cfg.out)
    if not run.parent.exists():
        raise DataError(f"parent directory {run.parent} does not exist")
    out = run / "infer" / args.name
    out.parent.mkdir(parents=True, exist_ok=True)
    model, ck = model_from_checkpoint(args.checkpoint)
    face = build_model(cfg.model)
    if model.decoder.n_vertices != face.n_vertices:
        raise DataError(f"checkpoint expects {model.decoder.n_vertices} vertices, face model has {face.n_vertices}")
    if args.audio is not None:
        try:
            wave = read_wav(args.audio)
        except (OSError, EOFError, ValueError) as e:
            raise DataError(f"cannot read {args.audio}: {e}") from e
    else:
        provider = StubProvider() if cfg.tts.kind == "stub" else build_provider(cfg.tts.kind, **cfg.tts.options)
        wave = provider.synthesize(args.text)
        if len(wave.samples) == 0:
            raise ProviderError(f"provider returned an empty waveform for {args.text!r}")
    if args.subject is not None:
        ds, _ = source_data(cfg, "finetune", face, run)
        match = [s for s in ds.samples if s.subject == args.subject]
        if not match:
            raise DataError(f"unknown subject {args.subject!r}; have {ds.subjects}")
        neutral = match[0].neutral
        cloud = subject_avatars(face, ds.subjects, cfg.avatar)[args.subject]
    else:
        neutral = face.template
        cloud = build_avatar(face, cfg.avatar)
    T = frame_count(wave.duration)
    model.eval()
    feats = encode_audio(wave, model.encoder, T).features
    with torch.no_grad():
        verts = (torch.as_tensor(neutral, dtype=torch.float32)[None]
                 + model.decoder.generate(torch.as_tensor(neutral, dtype=torch.float32), feats)).numpy()
        frames = render_sequence(torch.as_tensor(verts), face.topology, cloud,
                                 face_camera(neutral, face.topology, size=args.size))
    # Build everything in a sibling temp dir and move it into place at the end,
    # so a failure never leaves a half-written output.
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}.tmp"))
    try:
        np.savez(tmp / "meshes.npz", vertices=verts, fps=np.array(FPS), neutral=neutral)
        save_frames(frames, tmp / "frames", fps=FPS)
        (tmp / "manifest.json").write_text(json.dumps(dict(
            checkpoint=str(args.checkpoint), frames=int(T), fps=FPS, audio=args.audio, text=args.text,
            subject=args.subject, duration=wave.duration), indent=1, sort_keys=True))
        if out.exists():
            shutil.rmtree(out)
        tmp.rename(out)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)
    print(f"{T} frames -> {out}")
    return out


def _eval_samples(cfg, args, face):
    ds, split = source_data(cfg, "finetune", face, args.out or cfg.out)
    samples = select(ds, split, args.split)
    if not samples:
        raise DataError(f"the {args.split} split is empty")
    return ds, samples


def cmd_evaluate(cfg, args):
    face = build_model(cfg.model)
    ds, samples = _eval_samples(cfg, args, face)
    if args.gt:
        model = _new_model(cfg, face)
        preds = {s.sequence_id: s.vertices for s in samples}
        label = "pseudo-GT vertices"
    else:
        if args.checkpoint is None:
            raise C.ConfigError("evaluate needs --checkpoint (or --gt)")
        model, _ = model_from_checkpoint(args.checkpoint)
        if model.decoder.n_vertices != face.n_vertices:
            raise DataError(f"checkpoint expects {model.decoder.n_vertices} vertices, "
                            f"data has {face.n_vertices}")
        preds = None
        label = Path(args.checkpoint).stem
    lpips_fn = LPIPSAdapter() if cfg.lpips else None
    report = evaluate_model(model, samples, _lip(cfg, face, ds.subjects), face.topology.region_masks["lip"],
                            label, lpips_fn=lpips_fn, render=not args.no_render, predictions=preds)
    out = Path(args.out or cfg.out) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    stem = args.name or label.replace(" ", "_")
    (out / f"{stem}.tsv").write_text(report.to_tsv())
    (out / f"{stem}.json").write_text(report.to_json())
    print(report.to_tsv(), end="")
    return report


def cmd_confusion(cfg, args):
    face = build_model(cfg.model)
    ds, samples = _eval_samples(cfg, args, face)
    samples = samples[:args.max_sequences]
    lip = _lip(cfg, face, ds.subjects)
    with torch.no_grad():
        gt = [lip.extractor(lip.gt_frames(s).float()) for s in samples]
        if args.checkpoint is not None:
            model, _ = model_from_checkpoint(args.checkpoint)
            model.eval()
            pred = []
            for s in samples:
                v = model.animate(torch.from_numpy(s.waveform.samples), torch.as_tensor(s.neutral), s.n_frames)
                pred.append(lip.extractor(lip.frames(s, v).float()))
            rows_label = "generated"
        else:
            # GT meshes through avatars with a different appearance draw: a
            # stand-in for the gap between real footage and our renders
            shifted = LipRenderer(face, subject_avatars(face, ds.subjects, replace(cfg.avatar,
                                                                                seed=cfg.avatar.seed + 1000)),
                                  lip.extractor)
            pred = [lip.extractor(shifted.gt_frames(s).float()) for s in samples]
            rows_label = "appearance-shifted pseudo-GT"
    m = similarity_matrix(pred, gt)
    out = Path(args.out or cfg.out) / "confusion"
    out.mkdir(parents=True, exist_ok=True)
    ids = [s.sequence_id for s in samples]
    np.savetxt(out / "similarity.tsv", m, delimiter="\t", fmt="%.6f", header="\t".join(ids))
    save_confusion_plot(m, out / "similarity.png", ids, ids, title=f"{rows_label} vs pseudo-GT")
    diag = float(np.mean(np.diag(m)))
    off = float((m.sum() - np.trace(m)) / max(1, m.size - len(m)))
    (out / "summary.json").write_text(json.dumps(dict(rows=rows_label, ids=ids, diagonal_mean=diag,
                                                      off_diagonal_mean=off), indent=1))
    print(f"diagonal mean {diag:.4f}, off-diagonal mean {off:.4f} -> {out}")
    return m


# --- entry point ----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="lipsplat", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (LIPSPLAT_* env vars override keys)")
    common.add_argument("--out", help="run directory (default: config 'out')")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--deterministic", action="store_true", help="force deterministic torch kernels")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synthesize", parents=[common], help="write the synthetic datasets to <out>/data")

    t = sub.add_parser("train", parents=[common], help="run one curriculum stage")
    t.add_argument("--stage", type=int, choices=(1, 2, 3))
    t.add_argument("--checkpoint", help="initial weights (default for stage k>1: <out>/checkpoints/stage{k-1}_final.npz)")
    t.add_argument("--resume", help="continue an interrupted run of this stage from its checkpoint")
    t.add_argument("--max-steps", type=int)

    i = sub.add_parser("infer", parents=[common], help="animate and render from audio or text")
    i.add_argument("--checkpoint")
    i.add_argument("--audio", help="16-bit PCM wave file")
    i.add_argument("--text", help="text routed through the configured waveform provider")
    i.add_argument("--subject", help="finetune-set subject to animate (default: template identity)")
    i.add_argument("--size", type=int, default=128, help="render size in pixels")
    i.add_argument("--name", default="sample", help="output goes to <out>/infer/<name>")

    for name, helptext in (("evaluate", "LVE and image metrics on an eval split"),
                           ("confusion", "lip-feature cosine similarity matrix")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--checkpoint")
        e.add_argument("--split", default="test", choices=("train", "val", "test"))
        if name == "evaluate":
            e.add_argument("--gt", action="store_true", help="evaluate the pseudo-GT meshes themselves")
            e.add_argument("--no-render", action="store_true", help="LVE only")
            e.add_argument("--name", help="report file stem")
        else:
            e.add_argument("--max-sequences", type=int, default=12)
    return p


COMMANDS = dict(synthesize=cmd_synthesize, train=cmd_train, infer=cmd_infer, evaluate=cmd_evaluate,
                confusion=cmd_confusion)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = C.load_config(args.config, seed=args.seed, out=args.out,
                            deterministic=True if args.deterministic else None)
        set_deterministic(cfg.seed, cfg.deterministic)
        COMMANDS[args.command](cfg, args)
    except C.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, ProviderError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
