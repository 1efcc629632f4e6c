"""Three-stage curriculum: geometry pretraining, masked fine-tuning, then
fine-tuning with the rendered lip-reading loss.

Checkpoints are npz files holding ``param/<name>`` arrays, Adam state under
``optim/<index>/<key>``, the torch RNG state and a JSON ``meta`` record
(stage, epoch, step, seed, model and stage config). The metrics log is a
TSV with columns step, stage, epoch, vert, read, total, lambda.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .losses import ReadInputs, total_loss, vertex_weights
from .model import AnimationModel

LOG_COLUMNS = ("step", "stage", "epoch", "vert", "read", "total", "lambda")


class NumericalError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class MissingCheckpointError(CheckpointError):
    pass


@dataclass(frozen=True)
class StageConfig:
    stage: int
    epochs: int
    batch_size: int
    grad_accum: int = 1
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    lambda_read: float = 1e-5
    dataset: str = "pretrain"  # pretrain | finetune
    read_mode: str = "frame"  # frame | sequence
    read_window: int | None = None  # frames rendered per sequence in stage 3; None = all
    vert_reduction: str = "mean"  # mean over (frame, vertex) pairs | sum
    checkpoint_every: int = 1

    def validate(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.epochs < 0 or self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and grad_accum >= 1 required")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.read_window is not None and self.read_window < 3:
            raise ValueError("read_window must be at least 3 frames")
        if self.vert_reduction not in ("mean", "sum"):
            raise ValueError(f"vert_reduction must be 'mean' or 'sum', got {self.vert_reduction!r}")


def effective_batch(cfg: StageConfig) -> int:
    return cfg.batch_size * cfg.grad_accum


PRESETS = {
    "full": {
        1: StageConfig(1, epochs=250, batch_size=4, grad_accum=1, dataset="pretrain"),
        2: StageConfig(2, epochs=250, batch_size=4, grad_accum=1, dataset="finetune"),
        3: StageConfig(3, epochs=100, batch_size=1, grad_accum=4, dataset="finetune"),
    },
    "desk": {
        1: StageConfig(1, epochs=25, batch_size=4, grad_accum=1, dataset="pretrain"),
        2: StageConfig(2, epochs=25, batch_size=4, grad_accum=1, dataset="finetune"),
        3: StageConfig(3, epochs=10, batch_size=1, grad_accum=4, dataset="finetune", read_window=12),
    },
}


@dataclass
class RunState:
    stage: int
    seed: int
    epoch: int = 0  # epochs completed
    step: int = 0  # optimizer steps taken in this stage
    batch_in_epoch: int = 0  # optimizer steps taken in the current epoch
    history: list = field(default_factory=list)
    checkpoint: str | None = None


# --- checkpoints -------------------------------------------------------------

def _atomic_savez(path: Path, arrays: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp.npz")
    os.close(fd)
    try:
        np.savez(tmp, **arrays)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def model_meta(model: AnimationModel) -> dict:
    return dict(n_vertices=model.decoder.n_vertices, encoder=asdict(model.encoder.cfg),
                decoder=asdict(model.decoder.cfg))


def build_from_meta(meta: dict) -> AnimationModel:
    enc = meta["encoder"]
    return AnimationModel(meta["n_vertices"], EncoderConfig(**enc), DecoderConfig(**meta["decoder"]))


def save_checkpoint(path, model: AnimationModel, optimizer=None, meta: dict | None = None):
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    m = dict(model=model_meta(model), **(meta or {}))
    if optimizer is not None:
        sd = optimizer.state_dict()
        for idx, st in sd["state"].items():
            for k, v in st.items():
                arrays[f"optim/{idx}/{k}"] = v.detach().cpu().numpy() if torch.is_tensor(v) else np.array(v)
        m["optim_groups"] = [{k: v for k, v in g.items()} for g in sd["param_groups"]]
    arrays["rng/torch"] = torch.get_rng_state().numpy()
    arrays["meta"] = np.array(json.dumps(m, sort_keys=True))
    _atomic_savez(Path(path), arrays)


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpointError(f"checkpoint {path} does not exist")
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
        meta = json.loads(str(data.pop("meta")))
    except (zipfile.BadZipFile, KeyError, ValueError, OSError, EOFError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    params = {k[6:]: torch.from_numpy(v) for k, v in data.items() if k.startswith("param/")}
    optim = {}
    for k, v in data.items():
        if k.startswith("optim/"):
            _, idx, key = k.split("/", 2)
            optim.setdefault(int(idx), {})[key] = torch.from_numpy(v)
    return dict(params=params, optim=optim, rng=data.get("rng/torch"), meta=meta, path=str(path))


def model_from_checkpoint(path) -> tuple:
    ck = load_checkpoint(path)
    try:
        model = build_from_meta(ck["meta"]["model"])
        model.load_state_dict(ck["params"])
    except (KeyError, RuntimeError, TypeError) as e:
        raise CheckpointError(f"checkpoint {path} does not match the model: {e}") from e
    return model, ck


def _restore_optimizer(optimizer, ck):
    sd = optimizer.state_dict()
    state = {idx: {k: (v if k != "step" else v.reshape(())) for k, v in st.items()}
             for idx, st in ck["optim"].items()}
    groups = ck["meta"].get("optim_groups", sd["param_groups"])
    for g, g0 in zip(groups, sd["param_groups"]):
        g["params"] = g0["params"]
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    optimizer.load_state_dict(dict(state=state, param_groups=groups))


# --- training ------------------------------------------------------------------

@dataclass
class SeqTensors:
    audio: torch.Tensor
    vertices: torch.Tensor
    offsets: torch.Tensor
    neutral: torch.Tensor


def _tensors(sample) -> SeqTensors:
    return SeqTensors(torch.from_numpy(sample.waveform.samples),
                      torch.as_tensor(sample.vertices, dtype=torch.float32),
                      torch.as_tensor(sample.offsets, dtype=torch.float32),
                      torch.as_tensor(sample.neutral, dtype=torch.float32))


def epoch_generator(seed: int, stage: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, epoch])


class MetricsLog:
    def __init__(self, path: Path | None):
        self.path = path
        if path is not None and not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("\t".join(LOG_COLUMNS) + "\n")

    def write(self, row: dict):
        if self.path is None:
            return
        with open(self.path, "a") as f:
            f.write("\t".join(_fmt(row[c]) for c in LOG_COLUMNS) + "\n")

    def truncate_after(self, stage: int, step: int):
        """Drop rows of ``stage`` beyond ``step`` (used when resuming)."""
        if self.path is None or not self.path.exists():
            return
        lines = self.path.read_text().splitlines()
        keep = [lines[0]] + [ln for ln in lines[1:]
                             if not (int(ln.split("\t")[1]) == stage and int(ln.split("\t")[0]) > step)]
        self.path.write_text("\n".join(keep) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def read_log(path) -> list:
    lines = Path(path).read_text().splitlines()
    cols = lines[0].split("\t")
    return [{c: (float(x) if c not in ("step", "stage", "epoch") else int(x)) for c, x in zip(cols, ln.split("\t"))}
            for ln in lines[1:]]


class _NonFinite(Exception):
    pass


class Trainer:
    """Runs one curriculum stage at a time over a list of samples.

    ``lip`` (a ``pipeline.LipRenderer``) and ``cache`` (a ``FeatureCache``)
    are required for stage 3 only.
    """

    def __init__(self, model: AnimationModel, topology, out_dir=None, seed: int = 0,
                 lip=None, cache=None, log_name="metrics.tsv"):
        self.model = model
        self.topology = topology
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.seed = seed
        self.lip = lip
        self.cache = cache
        self.log = MetricsLog(self.out_dir / log_name if self.out_dir is not None else None)
        self._tensors = {}
        self._cameras = {}

    def checkpoint_path(self, stage: int, tag: str) -> Path | None:
        if self.out_dir is None:
            return None
        return self.out_dir / "checkpoints" / f"stage{stage}_{tag}.npz"

    def _seq(self, sample) -> SeqTensors:
        if sample.sequence_id not in self._tensors:
            self._tensors[sample.sequence_id] = _tensors(sample)
        return self._tensors[sample.sequence_id]

    def make_optimizer(self, cfg: StageConfig):
        return torch.optim.Adam(self.model.trainable_parameters(), lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps)

    def sample_loss(self, sample, cfg: StageConfig, weights, window_start=None):
        seq = self._seq(sample)
        offsets = self.model.predict_offsets(seq.audio, seq.offsets, seq.neutral)
        pred = seq.neutral[None] + offsets
        if not torch.isfinite(pred).all():
            raise _NonFinite
        read = None
        if cfg.stage == 3:
            if self.lip is None or self.cache is None:
                raise ValueError("stage 3 needs a lip renderer and a GT feature cache")
            gt_feats = self.cache.load(sample.sequence_id, self.lip.extractor.extractor_id)
            if sample.sequence_id not in self._cameras:
                self._cameras[sample.sequence_id] = self.lip.camera(sample)
            cam = self._cameras[sample.sequence_id]
            T = pred.shape[0]
            w = T if cfg.read_window is None else min(cfg.read_window, T)
            read = ReadInputs(lambda v: self.lip.frames(sample, v, cam), self.lip.extractor, gt_feats,
                              start=0 if window_start is None else window_start, length=w, mode=cfg.read_mode)
        return total_loss(pred, seq.vertices, cfg.stage, weights, cfg.lambda_read, read, cfg.vert_reduction)

    def run_stage(self, cfg: StageConfig, samples, init_checkpoint=None, resume=None,
                  max_steps: int | None = None) -> RunState:
        """Train ``cfg.stage``.

        Stages 2 and 3 start from ``init_checkpoint`` (written by the previous
        stage) with a fresh optimizer. ``resume`` continues an interrupted
        run of the same stage from one of its own checkpoints.
        """
        cfg.validate()
        if not samples:
            raise ValueError("no training samples")
        if resume is not None:
            ck = load_checkpoint(resume)
            if ck["meta"].get("stage") != cfg.stage:
                raise CheckpointError(f"{resume} belongs to stage {ck['meta'].get('stage')}, not {cfg.stage}")
            self.model.load_state_dict(ck["params"])
        elif cfg.stage > 1:
            if init_checkpoint is None:
                raise MissingCheckpointError(f"stage {cfg.stage} needs the stage-{cfg.stage - 1} checkpoint "
                                             f"(e.g. stage{cfg.stage - 1}_final.npz)")
            ck = load_checkpoint(init_checkpoint)
            if ck["meta"].get("stage") != cfg.stage - 1:
                raise MissingCheckpointError(f"stage {cfg.stage} needs a stage-{cfg.stage - 1} checkpoint, "
                                             f"{init_checkpoint} is from stage {ck['meta'].get('stage')}")
            self.model.load_state_dict(ck["params"])
        elif init_checkpoint is not None:
            self.model.load_state_dict(load_checkpoint(init_checkpoint)["params"])

        frozen_before = {k: v.clone() for k, v in self.model.frozen_parameters().items()}
        opt = self.make_optimizer(cfg)
        state = RunState(cfg.stage, self.seed)
        torch.manual_seed(self.seed * 1000 + cfg.stage)
        if resume is not None:
            _restore_optimizer(opt, ck)
            m = ck["meta"]
            state = RunState(cfg.stage, m["seed"], m["epoch"], m["step"], m["batch_in_epoch"], checkpoint=str(resume))
            torch.set_rng_state(torch.from_numpy(ck["rng"]))
            self.log.truncate_after(cfg.stage, state.step)

        weights = vertex_weights(self.topology, cfg.stage)
        group = effective_batch(cfg)
        n = len(samples)
        self.model.train()
        done = False
        for epoch in range(state.epoch, cfg.epochs):
            rng = epoch_generator(state.seed, cfg.stage, epoch)
            perm = rng.permutation(n)
            starts = rng.random(n)  # stage-3 window positions, one per sample
            groups = [perm[i:i + group] for i in range(0, n, group)]
            for b in range(state.batch_in_epoch, len(groups)):
                if max_steps is not None and state.step >= max_steps:
                    done = True
                    break
                idx = groups[b]
                opt.zero_grad(set_to_none=True)
                sums = dict(vert=0.0, read=0.0, total=0.0)
                for m0 in range(0, len(idx), cfg.batch_size):
                    micro = idx[m0:m0 + cfg.batch_size]
                    loss = 0.0
                    for i in micro:
                        s = samples[i]
                        ws = None
                        if cfg.stage == 3 and cfg.read_window is not None:
                            T = s.n_frames
                            ws = int(starts[i] * (T - min(cfg.read_window, T) + 1))
                        try:
                            br = self.sample_loss(s, cfg, weights, ws)
                        except _NonFinite:
                            self._dump_nan(cfg, state, s, None)
                        if not torch.isfinite(br.total):
                            self._dump_nan(cfg, state, s, br)
                        loss = loss + br.total / len(idx)
                        sums["vert"] += br.vert.item() / len(idx)
                        sums["read"] += (br.read.item() if br.read is not None else 0.0) / len(idx)
                        sums["total"] += br.total.item() / len(idx)
                    loss.backward()
                opt.step()
                state.step += 1
                state.batch_in_epoch = b + 1
                row = dict(step=state.step, stage=cfg.stage, epoch=epoch, vert=sums["vert"],
                           read=sums["read"] if cfg.stage == 3 else float("nan"),
                           total=sums["total"], **{"lambda": cfg.lambda_read if cfg.stage == 3 else 0.0})
                state.history.append(row)
                self.log.write(row)
            if done:
                break
            state.epoch = epoch + 1
            state.batch_in_epoch = 0
            if self.out_dir is not None and (state.epoch % cfg.checkpoint_every == 0 or state.epoch == cfg.epochs):
                self._save(cfg, state, opt, "last")
        if self.out_dir is not None:
            self._save(cfg, state, opt, "final")
        for k, v in self.model.frozen_parameters().items():
            if not torch.equal(v, frozen_before[k]):
                raise RuntimeError(f"frozen parameter {k} changed during training")
        self.model.eval()
        self.optimizer = opt
        return state

    def _save(self, cfg, state, opt, tag):
        path = self.checkpoint_path(cfg.stage, tag)
        save_checkpoint(path, self.model, opt, dict(stage=cfg.stage, epoch=state.epoch, step=state.step,
                                                    batch_in_epoch=state.batch_in_epoch, seed=state.seed,
                                                    stage_config=asdict(cfg)))
        state.checkpoint = str(path)

    def _dump_nan(self, cfg, state, sample, br):
        info = dict(stage=cfg.stage, epoch=state.epoch, step=state.step, sequence_id=sample.sequence_id,
                    loss=br.row() if br is not None else "non-finite prediction", param_norms={k: float(p.detach().norm()) for k, p in self.model.named_parameters()})
        where = ""
        if self.out_dir is not None:
            p = self.out_dir / f"nan_dump_step{state.step}.json"
            p.write_text(json.dumps(info, indent=1, default=str))
            where = f"; diagnostics in {p}"
        raise NumericalError(f"non-finite loss at stage {cfg.stage} step {state.step} "
                             f"({sample.sequence_id}){where}")


def stage_config(preset: str, stage: int, **overrides) -> StageConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    return replace(PRESETS[preset][stage], **overrides)
