"""Software Gaussian-splat rasterizer with an analytic backward pass.

Pipeline: bind splats to the mesh, transform to camera space, project
means and covariances (first-order perspective Jacobian), depth-sort
globally by camera z, then alpha-composite front to back per pixel.
Pixel centers sit at integer coordinates; the background is black.

Compositing only visits (splat, pixel) pairs inside each splat's 3-sigma
ellipse, binned per pixel into a padded depth-ordered table, so the cost
scales with covered area rather than splats x pixels.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .avatar import GaussianCloud, bind_to_mesh
from .face_model import FaceTopology

LUMA = (0.299, 0.587, 0.114)
LIP_SIZE = 96


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))  # world -> camera
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal length must be positive")
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8")
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def project(self, points) -> np.ndarray:
        """Pixel coordinates and depth of world points, shape (..., 3)."""
        p = np.asarray(points) @ self.R.T + self.t
        u = self.fx * p[..., 0] / p[..., 2] + self.cx
        v = self.fy * p[..., 1] / p[..., 2] + self.cy
        return np.stack([u, v, p[..., 2]], -1)

    def to_dict(self):
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width,
                    height=self.height, R=self.R.tolist(), t=self.t.tolist())

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "R": np.asarray(d["R"]), "t": np.asarray(d["t"])})

    @classmethod
    def look_at(cls, eye, target, up, focal, width, height):
        eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        y = -(up - up.dot(z) * z)
        ny = np.linalg.norm(y)
        if ny < 1e-9:
            raise ValueError("up vector parallel to viewing direction")
        y /= ny
        x = np.cross(y, z)
        R = np.stack([x, y, z])
        return cls(focal, focal, width / 2.0, height / 2.0, width, height, R, -R @ eye)


@dataclass
class RenderedImage:
    pixels: torch.Tensor  # (H, W, 3)
    alpha: torch.Tensor  # (H, W)


def _take(t, idx):
    return t.index_select(0, idx)


class _Rasterize(torch.autograd.Function):
    """Front-to-back compositing of depth-sorted 2D Gaussians.

    Inputs are already sorted front to back. ``conic`` holds (a, b, c) of
    the inverse 2D covariance, so the exponent is
    ``-0.5 * (a dx^2 + 2 b dx dy + c dy^2)``.

    Pairs are kept as a flat list grouped by pixel (depth order inside each
    group). Transmittance is a segmented exclusive cumsum of log(1 - alpha),
    computed in float64 whatever the input dtype.
    """

    @staticmethod
    def forward(ctx, means2d, conic, opacity, color, height, width, min_transmittance, cutoff):
        out_dtype = means2d.dtype
        f64 = torch.float64
        H, W = height, width
        P = H * W
        N = means2d.shape[0]
        m2, cn, op, col = (t.detach().to(f64) for t in (means2d, conic, opacity, color))
        a, b, c = cn[:, 0], cn[:, 1], cn[:, 2]
        det = (a * c - b * b).clamp_min(1e-30)
        hx = cutoff * torch.sqrt(c / det)
        hy = cutoff * torch.sqrt(a / det)
        mx, my = m2[:, 0], m2[:, 1]
        x0 = torch.ceil(mx - hx).clamp(0, W).long()
        x1 = torch.floor(mx + hx).clamp(-1, W - 1).long()
        y0 = torch.ceil(my - hy).clamp(0, H).long()
        y1 = torch.floor(my + hy).clamp(-1, H - 1).long()
        wx = (x1 - x0 + 1).clamp_min(0)
        n_pix = wx * (y1 - y0 + 1).clamp_min(0)

        # Enumerate bounding-box pixels splat by splat (already depth order).
        sid = torch.repeat_interleave(torch.arange(N), n_pix)
        start = torch.cumsum(n_pix, 0) - n_pix
        local = torch.arange(sid.numel()) - _take(start, sid)
        wxs = _take(wx, sid).clamp_min(1)
        px = _take(x0, sid) + local % wxs
        py = _take(y0, sid) + local // wxs
        dx = px.to(f64) - _take(mx, sid)
        dy = py.to(f64) - _take(my, sid)
        q = _take(a, sid) * dx * dx + 2 * _take(b, sid) * dx * dy + _take(c, sid) * dy * dy
        inside = (q <= cutoff * cutoff).nonzero()[:, 0]
        pix = _take(py, inside) * W + _take(px, inside)
        # Stable sort by pixel keeps depth order within each pixel.
        order = _take(inside, torch.sort(pix, stable=True).indices)
        sid, dx, dy, q = _take(sid, order), _take(dx, order), _take(dy, order), _take(q, order)
        pix = _take(py, order) * W + _take(px, order)

        gauss = torch.exp(-0.5 * q)
        alpha = _take(op, sid) * gauss
        log1m = torch.log1p(-alpha.clamp_max(1.0 - 1e-12))
        counts = torch.bincount(pix, minlength=P)
        first = torch.cumsum(counts, 0) - counts
        excl = torch.cumsum(log1m, 0) - log1m
        logT = excl - _take(excl, _take(first, pix)) if pix.numel() else excl
        keep = logT >= np.log(min_transmittance)
        T = torch.exp(logT) * keep
        w = alpha * T
        image = torch.zeros(P, 3, dtype=f64).index_add_(0, pix, w[:, None] * _take(col, sid))
        logT_final = torch.zeros(P, dtype=f64).index_add_(0, pix, log1m * keep)
        T_final = torch.exp(logT_final)

        ctx.save_for_backward(cn, col, sid, pix, first, dx, dy, gauss, alpha, T, keep, T_final)
        ctx.meta = (H, W, N, out_dtype)
        return (image.reshape(H, W, 3).to(out_dtype), (1.0 - T_final).reshape(H, W).to(out_dtype))

    @staticmethod
    def backward(ctx, g_image, g_alpha):
        cn, col, sid, pix, first, dx, dy, gauss, alpha, T, keep, T_final = ctx.saved_tensors
        H, W, N, out_dtype = ctx.meta
        f64 = torch.float64
        P = H * W
        gC = g_image.reshape(P, 3).to(f64)
        gA = g_alpha.reshape(P).to(f64)
        G = (_take(col, sid) * _take(gC, pix)).sum(1)  # colour . upstream grad, per pair
        wG = alpha * T * G
        # Suffix sum of wG strictly behind each pair within its pixel.
        incl = torch.cumsum(wG, 0)
        seg_start = _take(incl - wG, _take(first, pix)) if pix.numel() else incl
        seg_total = torch.zeros(P, dtype=f64).index_add_(0, pix, wG)
        behind = _take(seg_total, pix) - (incl - seg_start)
        inv = 1.0 / (1.0 - alpha).clamp_min(1e-12)
        d_alpha = keep * (T * G - behind * inv + _take(gA, pix) * _take(T_final, pix) * inv)

        a, b, c = _take(cn, sid).unbind(1)
        g_op = torch.zeros(N, dtype=f64).index_add_(0, sid, d_alpha * gauss)
        coef = d_alpha * alpha
        g_mean = torch.zeros(N, 2, dtype=f64).index_add_(
            0, sid, torch.stack([coef * (a * dx + b * dy), coef * (b * dx + c * dy)], 1))
        g_conic = torch.zeros(N, 3, dtype=f64).index_add_(
            0, sid, -0.5 * coef[:, None] * torch.stack([dx * dx, 2 * dx * dy, dy * dy], 1))
        g_color = torch.zeros(N, 3, dtype=f64).index_add_(0, sid, (alpha * T)[:, None] * _take(gC, pix))
        return (g_mean.to(out_dtype), g_conic.to(out_dtype), g_op.to(out_dtype), g_color.to(out_dtype),
                None, None, None, None)


def rasterize(means2d, conic, opacity, color, height, width, min_transmittance=1e-3, cutoff=3.0):
    """Composite depth-sorted 2D Gaussians; returns (image (H,W,3), alpha (H,W))."""
    return _Rasterize.apply(means2d, conic, opacity, color, height, width, min_transmittance, cutoff)


def project_gaussians(mean, cov, camera: Camera, dilation=0.3, near=0.01):
    """Camera-space depth, 2D means and 2D covariances of world Gaussians."""
    dtype = mean.dtype
    R = torch.as_tensor(camera.R, dtype=dtype)
    t = torch.as_tensor(camera.t, dtype=dtype)
    p = mean @ R.T + t
    z = p[:, 2]
    zs = torch.where(z > near, z, torch.ones_like(z))
    x, y = p[:, 0], p[:, 1]
    means2d = torch.stack([camera.fx * x / zs + camera.cx, camera.fy * y / zs + camera.cy], 1)
    zero = torch.zeros_like(z)
    J = torch.stack([
        torch.stack([camera.fx / zs, zero, -camera.fx * x / zs ** 2], 1),
        torch.stack([zero, camera.fy / zs, -camera.fy * y / zs ** 2], 1),
    ], 1)
    JR = J @ R
    cov2d = JR @ cov @ JR.transpose(1, 2) + dilation * torch.eye(2, dtype=dtype)
    return z, means2d, cov2d


def render(verts, topology: FaceTopology, cloud: GaussianCloud, camera: Camera,
           dilation=0.3, min_transmittance=1e-3, cutoff=3.0) -> RenderedImage:
    """Render a single mesh frame ``verts`` (V, 3) through ``camera``."""
    verts = torch.as_tensor(verts)
    if not verts.is_floating_point():
        verts = verts.double()
    if not torch.isfinite(verts).all():
        raise ValueError("mesh vertices contain NaN or Inf")
    H, W = camera.height, camera.width
    if len(cloud) == 0:
        zero = verts.sum() * 0.0
        return RenderedImage(zero + torch.zeros(H, W, 3, dtype=verts.dtype),
                             zero + torch.zeros(H, W, dtype=verts.dtype))
    g = bind_to_mesh(cloud, verts, topology.faces)
    if not (torch.isfinite(g.opacity).all() and torch.isfinite(g.color).all()):
        raise ValueError("splat opacity or color contains NaN")
    z, means2d, cov2d = project_gaussians(g.mean, g.cov, camera, dilation)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    with torch.no_grad():
        hx = cutoff * torch.sqrt(a)
        hy = cutoff * torch.sqrt(c)
        visible = (z > 0.01) & (det > 0) \
            & (means2d[:, 0] + hx >= 0) & (means2d[:, 0] - hx <= W - 1) \
            & (means2d[:, 1] + hy >= 0) & (means2d[:, 1] - hy <= H - 1)
        idx = visible.nonzero()[:, 0]
        idx = idx[torch.sort(z.detach()[idx], stable=True).indices]
    conic = torch.stack([c / det, -b / det, a / det], 1)[idx]
    image, alpha = rasterize(means2d[idx], conic, g.opacity[idx], g.color[idx], H, W,
                             min_transmittance, cutoff)
    return RenderedImage(image, alpha)


def render_sequence(verts, topology, cloud, camera, **kw) -> torch.Tensor:
    """Render (T, V, 3) vertices into (T, H, W, 3) pixels."""
    return torch.stack([render(v, topology, cloud, camera, **kw).pixels for v in verts])


def vertex_normals(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v = np.asarray(verts, dtype=np.float64)
    fn = np.cross(v[faces[:, 1]] - v[faces[:, 0]], v[faces[:, 2]] - v[faces[:, 0]])
    vn = np.zeros_like(v)
    for k in range(3):
        np.add.at(vn, faces[:, k], fn)
    return vn / np.maximum(np.linalg.norm(vn, axis=1, keepdims=True), 1e-30)


def _region_camera(verts, topology, mask, size, fill, focal):
    v = np.asarray(torch.as_tensor(verts).detach().cpu().numpy() if torch.is_tensor(verts) else verts,
                   dtype=np.float64)
    pts = v[mask]
    if len(pts) == 0:
        raise ValueError("region mask is empty")
    center = pts.mean(0)
    radius = np.linalg.norm(pts - center, axis=1).max()
    if radius < 1e-9:
        raise ValueError("degenerate region: zero spread")
    n = vertex_normals(v, topology.faces)[mask].sum(0)
    if np.linalg.norm(n) < 1e-12:
        raise ValueError("degenerate region: undefined mean normal")
    n /= np.linalg.norm(n)
    half = np.arctan(0.5 * fill * size / focal)
    dist = radius / np.sin(half)
    up = np.array([0.0, 1.0, 0.0])
    if abs(up.dot(n)) > 0.99:
        up = np.array([0.0, 0.0, 1.0])
    return Camera.look_at(center + dist * n, center, up, focal, size, size)


def lip_camera(verts, topology: FaceTopology, size=LIP_SIZE, fill=0.7, focal=None) -> Camera:
    """Camera looking at the lip centroid along the mean lip normal.

    The lip bounding sphere spans ``fill`` of the frame width.
    """
    focal = 2.5 * size if focal is None else focal
    return _region_camera(verts, topology, topology.region_masks["lip"], size, fill, focal)


def face_camera(verts, topology: FaceTopology, size=128, fill=0.95, focal=None) -> Camera:
    focal = 2.5 * size if focal is None else focal
    return _region_camera(verts, topology, ~topology.region_masks["teeth"], size, fill, focal)


def lip_crop_grayscale(image) -> torch.Tensor:
    """Rec.601 luma of a 96x96 RGB lip render; accepts (..., 96, 96, 3)."""
    pixels = image.pixels if isinstance(image, RenderedImage) else torch.as_tensor(image)
    if pixels.shape[-3:] != (LIP_SIZE, LIP_SIZE, 3):
        raise ValueError(f"lip crop must be {LIP_SIZE}x{LIP_SIZE}x3, got {tuple(pixels.shape)}")
    w = torch.tensor(LUMA, dtype=pixels.dtype)
    return (pixels * w).sum(-1)


def save_frames(frames, out_dir, fps=30.0, prefix="frame") -> Path:
    """Write (T, H, W[, 3]) frames in [0, 1] as 8-bit PNGs plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arr = frames.detach().cpu().numpy() if torch.is_tensor(frames) else np.asarray(frames)
    names = []
    for i, f in enumerate(arr):
        name = f"{prefix}_{i:05d}.png"
        Image.fromarray(np.round(np.clip(f, 0.0, 1.0) * 255).astype(np.uint8)).save(out / name)
        names.append(name)
    manifest = dict(fps=fps, count=len(names), height=int(arr.shape[1]) if len(arr) else 0,
                    width=int(arr.shape[2]) if len(arr) else 0, frames=names)
    (out / "frames.json").write_text(json.dumps(manifest, indent=1))
    return out


def load_frames(frame_dir) -> tuple[np.ndarray, float]:
    d = Path(frame_dir)
    manifest = json.loads((d / "frames.json").read_text())
    frames = [np.asarray(Image.open(d / n), dtype=np.float64) / 255.0 for n in manifest["frames"]]
    return np.stack(frames), float(manifest["fps"])
