"""Lip vertex error, image metrics and evaluation reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0


def lve(pred, gt, lip_mask, unit_scale: float = 1000.0) -> float:
    """Mean over frames of the max lip-vertex L2 error; metres -> mm by default."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(lip_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim != 3 or mask.shape != (pred.shape[1],):
        raise ValueError("expected (T, V, 3) sequences and a (V,) lip mask")
    if not mask.any():
        raise ValueError("lip mask is empty")
    err = np.linalg.norm(pred[:, mask] - gt[:, mask], axis=-1)
    return float(err.max(1).mean() * unit_scale)


def psnr(pred, gt, peak: float = 1.0) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mse = np.mean((pred - gt) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak ** 2 / mse)))


def gaussian_window(size=11, sigma=1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def ssim(pred, gt, data_range: float = 1.0, size=11, sigma=1.5, k1=0.01, k2=0.03) -> float:
    """Mean SSIM with a separable Gaussian window; (H, W) or (H, W, C), channels averaged."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    g = gaussian_window(size, sigma)

    def blur(a):
        return correlate1d(correlate1d(a, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for c in range(x.shape[-1]):
        a, b = x[..., c], y[..., c]
        mu_a, mu_b = blur(a), blur(b)
        saa = blur(a * a) - mu_a ** 2
        sbb = blur(b * b) - mu_b ** 2
        sab = blur(a * b) - mu_a * mu_b
        s = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def image_metrics(pred_frames, gt_frames, lpips_fn=None) -> dict:
    """Per-frame PSNR/SSIM averaged over a sequence; LPIPS only if a backend is given."""
    pred_frames = np.asarray(pred_frames)
    gt_frames = np.asarray(gt_frames)
    if pred_frames.shape != gt_frames.shape:
        raise ValueError(f"frame shape mismatch: {pred_frames.shape} vs {gt_frames.shape}")
    out = dict(psnr=float(np.mean([psnr(p, g) for p, g in zip(pred_frames, gt_frames)])),
               ssim=float(np.mean([ssim(p, g) for p, g in zip(pred_frames, gt_frames)])))
    if lpips_fn is not None:
        out["lpips"] = float(np.mean([lpips_fn(p, g) for p, g in zip(pred_frames, gt_frames)]))
    return out


class LPIPSAdapter:
    """Calls the ``lpips`` package when installed (its weights are external)."""

    def __init__(self, net="alex"):
        import lpips  # noqa: F401  (optional dependency)
        import torch

        self._torch = torch
        self.model = lpips.LPIPS(net=net, verbose=False).eval()

    def __call__(self, a, b) -> float:
        t = self._torch
        x = t.as_tensor(np.asarray(a), dtype=t.float32).permute(2, 0, 1)[None] * 2 - 1
        y = t.as_tensor(np.asarray(b), dtype=t.float32).permute(2, 0, 1)[None] * 2 - 1
        with t.no_grad():
            return float(self.model(x, y))


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # one dict per sequence
    label: str = ""

    FIELDS = ("lve_mm", "psnr_db", "ssim", "lpips", "feat_cos")

    def add(self, sequence_id: str, **values):
        self.rows.append(dict(sequence_id=sequence_id, **values))

    def aggregate(self) -> dict:
        out = {}
        for k in self.FIELDS:
            vals = [r[k] for r in self.rows if k in r]
            if vals:
                out[k] = float(np.mean(vals))
        return out

    def to_tsv(self) -> str:
        keys = [k for k in self.FIELDS if any(k in r for r in self.rows)]
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["sequence_id", *keys])
        for r in self.rows:
            w.writerow([r["sequence_id"], *(f"{r[k]:.6f}" for k in keys)])
        agg = self.aggregate()
        w.writerow(["mean", *(f"{agg[k]:.6f}" for k in keys)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(dict(label=self.label, rows=self.rows, mean=self.aggregate()), indent=1, sort_keys=True)


def save_confusion_plot(matrix, path, labels_a=None, labels_b=None, title="cosine similarity"):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    m = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(1.0 + 0.45 * m.shape[1], 0.8 + 0.45 * m.shape[0]))
    im = ax.imshow(m, vmin=-1.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(m.shape[1]))
    ax.set_yticks(range(m.shape[0]))
    if labels_b is not None:
        ax.set_xticklabels(labels_b, rotation=90, fontsize=7)
    if labels_a is not None:
        ax.set_yticklabels(labels_a, fontsize=7)
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def evaluate_model(model, samples, lip, lip_mask, label="", lpips_fn=None, render=True,
                   predictions: dict | None = None) -> EvalReport:
    """Generate every sample autoregressively and score it against its GT.

    ``lip`` is a ``pipeline.LipRenderer``; with ``render=False`` only LVE is
    computed. ``predictions`` maps sequence ids to precomputed (T, V, 3)
    vertices (e.g. GT meshes for a self-evaluation row).
    """
    import torch

    from .lipreader import sequence_similarity

    report = EvalReport(label=label)
    model.eval()
    for s in samples:
        if predictions is not None and s.sequence_id in predictions:
            pred = np.asarray(predictions[s.sequence_id], dtype=np.float64)
        else:
            pred = model.animate(torch.from_numpy(s.waveform.samples), torch.as_tensor(s.neutral),
                                 s.n_frames).numpy()
        row = dict(lve_mm=lve(pred, s.vertices, lip_mask))
        if render:
            cam = lip.camera(s)
            rgb_p = lip.rgb(s, pred.astype(np.float32), cam)
            rgb_g = lip.rgb(s, s.vertices.astype(np.float32), cam)
            m = image_metrics(rgb_p, rgb_g, lpips_fn)
            row.update(psnr_db=m["psnr"], ssim=m["ssim"])
            if "lpips" in m:
                row["lpips"] = m["lpips"]
            with torch.no_grad():
                gray = torch.as_tensor(np.tensordot(np.stack([rgb_p, rgb_g]), (0.299, 0.587, 0.114), axes=(-1, 0)))
                fp, fg = lip.extractor(gray[0].float()), lip.extractor(gray[1].float())
            row["feat_cos"] = float(sequence_similarity(fp.double(), fg.double()))
        report.add(s.sequence_id, **row)
    return report


def evaluate_checkpoint(checkpoint, samples, lip, lip_mask, label="", **kw) -> EvalReport:
    from .trainer import model_from_checkpoint

    model, ck = model_from_checkpoint(checkpoint)
    if model.decoder.n_vertices != len(lip_mask):
        raise ValueError(f"checkpoint expects {model.decoder.n_vertices} vertices, data has {len(lip_mask)}")
    return evaluate_model(model, samples, lip, lip_mask, label or Path(str(checkpoint)).stem, **kw)
