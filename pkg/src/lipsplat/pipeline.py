"""Mesh -> lip crop -> feature plumbing shared by training, evaluation and the CLI."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .avatar import AvatarSpec, GaussianCloud, build_avatar
from .face_model import FaceModel
from .lipreader import FeatureCache, precompute_gt
from .renderer import Camera, lip_camera, lip_crop_grayscale, render


def subject_avatars(model: FaceModel, subjects, spec: AvatarSpec = AvatarSpec()) -> dict:
    """One synthetic avatar per subject; the palette jitter is seeded by subject order."""
    return {s: build_avatar(model, replace(spec, seed=spec.seed + i)) for i, s in enumerate(sorted(subjects))}


@dataclass
class LipRenderer:
    """Renders lip crops of a sample's meshes through its subject's avatar.

    The lip camera is fixed per sequence from the subject's neutral mesh.
    """
    model: FaceModel
    avatars: dict
    extractor: object

    def camera(self, sample) -> Camera:
        return lip_camera(sample.neutral, self.model.topology)

    def frames(self, sample, verts, camera: Camera | None = None) -> torch.Tensor:
        """(T, V, 3) vertices -> (T, 96, 96) grayscale crops, differentiable."""
        cam = camera or self.camera(sample)
        cloud: GaussianCloud = self.avatars[sample.subject]
        verts = torch.as_tensor(verts)
        return torch.stack([lip_crop_grayscale(render(v, self.model.topology, cloud, cam)) for v in verts])

    def rgb(self, sample, verts, camera: Camera | None = None) -> np.ndarray:
        cam = camera or self.camera(sample)
        cloud = self.avatars[sample.subject]
        with torch.no_grad():
            return np.stack([render(torch.as_tensor(v), self.model.topology, cloud, cam).pixels.numpy()
                             for v in verts])

    def gt_frames(self, sample) -> torch.Tensor:
        with torch.no_grad():
            return self.frames(sample, torch.as_tensor(sample.vertices, dtype=torch.float32))

    def precompute(self, samples, cache: FeatureCache) -> dict:
        return precompute_gt(((s.sequence_id, (lambda s=s: self.gt_frames(s))) for s in samples),
                             self.extractor, cache)
