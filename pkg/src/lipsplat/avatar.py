"""Gaussian splats bound to mesh triangles.

Each splat lives in the local frame of its parent triangle: origin at the
centroid, x along the first edge, z along the normal, unit length
``sqrt(area)``. Moving the mesh moves the splats.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .face_model import REGIONS, FaceModel

PALETTE = {
    "skin": (0.86, 0.66, 0.55),
    "lip": (0.70, 0.30, 0.33),
    "eye": (0.15, 0.12, 0.10),
    "teeth": (0.95, 0.94, 0.88),
}
# Tie-break order when a triangle touches several regions.
REGION_PRIORITY = ("teeth", "lip", "eye", "skin")


@dataclass(frozen=True)
class AvatarSpec:
    splats_per_face: int = 1
    seed: int = 0
    opacity: float = 0.95
    extent: float = 0.9  # in-plane std relative to the triangle's vertex spread
    thickness: float = 0.05
    color_jitter: float = 0.04


@dataclass
class GaussianCloud:
    parent_face: np.ndarray  # (N,) int64
    local_position: np.ndarray  # (N, 3)
    local_rotation: np.ndarray  # (N, 4) unit quaternion, (w, x, y, z)
    log_scale: np.ndarray  # (N, 3)
    opacity: np.ndarray  # (N,)
    color: np.ndarray  # (N, 3)
    region: np.ndarray  # (N,) index into REGIONS

    def __len__(self):
        return len(self.parent_face)

    def validate(self, n_faces: int | None = None):
        if len(self) and self.parent_face.min() < 0:
            raise ValueError("negative parent face index")
        if n_faces is not None and len(self) and self.parent_face.max() >= n_faces:
            raise ValueError("parent face index exceeds mesh face count")
        op = np.asarray(self.opacity)
        if np.any(op < 0) or np.any(op > 1):
            raise ValueError("opacity must lie in [0, 1]")
        q = np.linalg.norm(np.asarray(self.local_rotation), axis=1)
        if np.any(np.abs(q - 1.0) > 1e-6):
            raise ValueError("local rotations must be unit quaternions")

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(*(np.asarray(getattr(self, f))[idx] for f in _FIELDS))


_FIELDS = ("parent_face", "local_position", "local_rotation", "log_scale", "opacity", "color", "region")


@dataclass
class WorldGaussians:
    mean: torch.Tensor  # (..., N, 3)
    cov: torch.Tensor  # (..., N, 3, 3)
    opacity: torch.Tensor  # (N,)
    color: torch.Tensor  # (N, 3)


def face_regions(model: FaceModel) -> np.ndarray:
    """Region index per triangle: majority vote over its vertices."""
    topo = model.topology
    counts = np.stack([topo.region_masks[r][topo.faces].sum(1) for r in REGIONS], 1)
    best = counts.max(1, keepdims=True)
    out = np.empty(topo.n_faces, dtype=np.int64)
    for f in range(topo.n_faces):
        for name in REGION_PRIORITY:
            k = REGIONS.index(name)
            if counts[f, k] == best[f, 0]:
                out[f] = k
                break
    return out


def triangle_frames(verts, faces):
    """Centroid, rotation (columns x, y, z), scale and area of each triangle."""
    v0, v1, v2 = verts[..., faces[:, 0], :], verts[..., faces[:, 1], :], verts[..., faces[:, 2], :]
    centroid = (v0 + v1 + v2) / 3.0
    e1 = v1 - v0
    n = torch.linalg.cross(e1, v2 - v0)
    n_len = torch.linalg.norm(n, dim=-1, keepdim=True)
    area = 0.5 * n_len[..., 0]
    x = e1 / torch.linalg.norm(e1, dim=-1, keepdim=True).clamp_min(1e-30)
    z = n / n_len.clamp_min(1e-30)
    y = torch.linalg.cross(z, x)
    rot = torch.stack([x, y, z], dim=-1)
    return centroid, rot, torch.sqrt(area), area


def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], -1).reshape(q.shape[:-1] + (3, 3))


def build_avatar(model: FaceModel, spec: AvatarSpec = AvatarSpec()) -> GaussianCloud:
    """Deterministic synthetic avatar with ``splats_per_face`` splats on every triangle."""
    k = spec.splats_per_face
    if k <= 0:
        raise ValueError("splats_per_face must be positive")
    rng = np.random.default_rng(spec.seed)
    faces = model.topology.faces
    F = len(faces)
    parent = np.repeat(np.arange(F), k)

    verts = torch.as_tensor(model.template, dtype=torch.float64)
    centroid, rot, scale, _ = triangle_frames(verts, torch.as_tensor(faces))
    if k == 1:
        local = np.zeros((F, 3))
    else:
        bary = rng.dirichlet(np.ones(3), size=F * k)
        tri = model.template[faces[parent]]  # (N, 3, 3)
        p = np.einsum("nk,nkc->nc", bary, tri)
        R = rot.numpy()[parent]
        local = np.einsum("nji,nj->ni", R, p - centroid.numpy()[parent]) / scale.numpy()[parent, None]
    # In-plane shape follows the triangle's vertex spread, so slivers get
    # elongated splats instead of round ones that leave gaps.
    tri_local = torch.einsum("fji,fkj->fki", rot, verts[faces] - centroid[:, None]) / scale[:, None, None]
    spread = torch.einsum("fki,fkj->fij", tri_local[..., :2], tri_local[..., :2]).numpy() / 3.0
    ev, evec = np.linalg.eigh(spread)
    angle = np.arctan2(evec[:, 1, 1], evec[:, 0, 1])[parent]  # major axis -> local x
    quat = np.stack([np.cos(angle / 2), np.zeros_like(angle), np.zeros_like(angle), np.sin(angle / 2)], 1)
    std = spec.extent * np.sqrt(np.maximum(ev[:, ::-1], 1e-8))[parent] / np.sqrt(k)
    log_scale = np.log(np.concatenate([std, np.full((F * k, 1), spec.thickness)], 1)) \
        + rng.normal(0.0, 0.05, size=(F * k, 3))

    region = face_regions(model)[parent]
    base = np.array([PALETTE[r] for r in REGIONS])
    tone = rng.normal(0.0, spec.color_jitter, size=3)
    color = np.clip(base[region] + tone + rng.normal(0.0, spec.color_jitter, size=(F * k, 3)), 0.0, 1.0)
    opacity = np.full(F * k, spec.opacity)
    cloud = GaussianCloud(parent, local, quat, log_scale, opacity, color, region)
    cloud.validate(F)
    return cloud


def bind_to_mesh(cloud: GaussianCloud, verts: torch.Tensor, faces) -> WorldGaussians:
    """Place splats on a posed mesh. ``verts`` may have leading batch axes."""
    verts = torch.as_tensor(verts)
    dtype = verts.dtype if verts.is_floating_point() else torch.float64
    verts = verts.to(dtype)
    faces = torch.as_tensor(np.asarray(faces), dtype=torch.long)
    parent = torch.as_tensor(cloud.parent_face, dtype=torch.long)
    if len(cloud) and int(parent.max()) >= len(faces):
        raise ValueError("cloud binding references faces missing from the mesh")
    used = torch.unique(parent)
    centroid, rot, scale, area = triangle_frames(verts, faces[used])
    small = (area.detach() < 1e-12).reshape(-1, len(used)).any(0)
    if bool(small.any()):
        bad = int(used[small.nonzero()[0, 0]])
        raise ValueError(f"degenerate triangle (area < 1e-12 m^2) at face {bad}")
    lookup = torch.full((len(faces),), -1, dtype=torch.long)
    lookup[used] = torch.arange(len(used))
    slot = lookup[parent]
    centroid, rot, scale = centroid[..., slot, :], rot[..., slot, :, :], scale[..., slot]

    local = torch.as_tensor(cloud.local_position, dtype=dtype)
    R_local = quat_to_matrix(torch.as_tensor(cloud.local_rotation, dtype=dtype))
    s2 = torch.exp(2.0 * torch.as_tensor(cloud.log_scale, dtype=dtype))
    mean = centroid + scale[..., None] * torch.einsum("...nij,nj->...ni", rot, local)
    M = rot @ R_local
    cov = (scale ** 2)[..., None, None] * (M * s2[..., None, :]) @ M.transpose(-1, -2)
    cov = 0.5 * (cov + cov.transpose(-1, -2))
    return WorldGaussians(mean, cov,
                          torch.as_tensor(cloud.opacity, dtype=dtype),
                          torch.as_tensor(cloud.color, dtype=dtype))


def save_avatar(path, cloud: GaussianCloud):
    np.savez(path, **{f: np.asarray(getattr(cloud, f)) for f in _FIELDS})


def load_avatar(path) -> GaussianCloud:
    with np.load(path, allow_pickle=False) as z:
        cloud = GaussianCloud(*(z[f] for f in _FIELDS))
    cloud.validate()
    return cloud
