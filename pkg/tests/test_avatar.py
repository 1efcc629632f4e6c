import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from lipsplat.avatar import (PALETTE, AvatarSpec, GaussianCloud, bind_to_mesh, build_avatar, face_regions,
                             load_avatar, save_avatar, triangle_frames)
from lipsplat.face_model import REGIONS

from conftest import toy_scene


def test_one_splat_per_face(face, cloud):
    assert len(cloud) == face.topology.n_faces
    cloud.validate(face.topology.n_faces)


def test_several_splats_per_face(face):
    c = build_avatar(face, AvatarSpec(splats_per_face=3))
    assert len(c) == 3 * face.topology.n_faces
    with pytest.raises(ValueError):
        build_avatar(face, AvatarSpec(splats_per_face=0))


def test_avatar_deterministic(face):
    a, b = build_avatar(face), build_avatar(face)
    for f in ("local_position", "local_rotation", "log_scale", "opacity", "color"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    c = build_avatar(face, AvatarSpec(seed=5))
    assert not np.array_equal(a.color, c.color)


def test_palette_follows_region_masks(face, cloud):
    # nearest palette entry of each splat colour == majority region of its triangle
    pal = np.array([PALETTE[r] for r in REGIONS])
    nearest = np.argmin(((cloud.color[:, None] - pal[None]) ** 2).sum(-1), 1)
    regions = face_regions(face)[cloud.parent_face]
    assert np.array_equal(nearest, regions)
    lip = REGIONS.index("lip")
    assert (regions == lip).sum() > 20


def test_local_origin_is_centroid(scene):
    verts, topo, cloud, _ = scene
    cloud.local_position[:] = 0
    g = bind_to_mesh(cloud, torch.as_tensor(verts), topo.faces)
    assert np.allclose(g.mean.numpy(), verts[topo.faces].mean(1), atol=1e-15)


def test_translation_equivariance(scene):
    verts, topo, cloud, _ = scene
    t = np.array([0.3, -1.2, 2.0])
    a = bind_to_mesh(cloud, torch.as_tensor(verts), topo.faces)
    b = bind_to_mesh(cloud, torch.as_tensor(verts + t), topo.faces)
    assert np.allclose(b.mean.numpy(), a.mean.numpy() + t, atol=1e-12)
    assert np.allclose(b.cov.numpy(), a.cov.numpy(), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(rv=st.lists(st.floats(-3, 3), min_size=3, max_size=3), seed=st.integers(0, 1000))
def test_rotation_equivariance(rv, seed):
    verts, topo, cloud, _ = toy_scene(6, seed)
    R = Rotation.from_rotvec(rv).as_matrix()
    t = np.array([0.1, 0.2, -0.3])
    a = bind_to_mesh(cloud, torch.as_tensor(verts), topo.faces)
    b = bind_to_mesh(cloud, torch.as_tensor(verts @ R.T + t), topo.faces)
    scale = np.abs(a.cov.numpy()).max()
    assert np.abs(b.mean.numpy() - (a.mean.numpy() @ R.T + t)).max() < 1e-6 * np.abs(a.mean.numpy()).max() + 1e-12
    assert np.abs(b.cov.numpy() - R @ a.cov.numpy() @ R.T).max() < 1e-6 * scale


def test_uniform_scale(scene):
    verts, topo, cloud, _ = scene
    s = 2.5
    a = bind_to_mesh(cloud, torch.as_tensor(verts), topo.faces)
    b = bind_to_mesh(cloud, torch.as_tensor(verts * s), topo.faces)
    assert np.allclose(b.mean.numpy(), s * a.mean.numpy(), rtol=1e-12, atol=1e-14)
    ea = np.linalg.eigvalsh(a.cov.numpy())
    eb = np.linalg.eigvalsh(b.cov.numpy())
    assert np.allclose(eb, s ** 2 * ea, rtol=1e-9)


@settings(max_examples=30, deadline=None)
@given(ls=st.lists(st.floats(-8, 3), min_size=3, max_size=3))
def test_covariance_spd(ls):
    verts, topo, cloud, _ = toy_scene(4, 1)
    cloud.log_scale[:] = ls
    g = bind_to_mesh(cloud, torch.as_tensor(verts), topo.faces)
    cov = g.cov.numpy()
    assert np.allclose(cov, np.swapaxes(cov, 1, 2), rtol=1e-12, atol=1e-30)
    assert (np.linalg.eigvalsh(cov) > 0).all()


def test_mean_jacobian_matches_finite_differences(scene):
    verts, topo, cloud, _ = scene
    v = torch.as_tensor(verts).clone().requires_grad_()
    J = torch.autograd.functional.jacobian(lambda x: bind_to_mesh(cloud, x, topo.faces).mean, v)
    J = J.reshape(-1, v.numel()).numpy()
    eps = 1e-6
    fd = np.zeros_like(J)
    flat = verts.reshape(-1)
    for k in range(flat.size):
        d = np.zeros_like(flat)
        d[k] = eps
        hi = bind_to_mesh(cloud, torch.as_tensor((flat + d).reshape(verts.shape)), topo.faces).mean
        lo = bind_to_mesh(cloud, torch.as_tensor((flat - d).reshape(verts.shape)), topo.faces).mean
        fd[:, k] = ((hi - lo) / (2 * eps)).reshape(-1).numpy()
    assert np.abs(J - fd).max() / np.abs(fd).max() < 1e-4


def test_degenerate_triangle_named(scene):
    verts, topo, cloud, _ = scene
    bad = verts.copy()
    bad[3 * 5 + 2] = bad[3 * 5 + 1]  # collapse face 5
    with pytest.raises(ValueError, match="face 5"):
        bind_to_mesh(cloud, torch.as_tensor(bad), topo.faces)


def test_invalid_cloud_rejected():
    c = toy_scene(3, 0)[2]
    c.opacity[0] = 1.5
    with pytest.raises(ValueError, match="opacity"):
        c.validate()
    c = toy_scene(3, 0)[2]
    c.local_rotation[0] *= 2
    with pytest.raises(ValueError, match="quaternion"):
        c.validate()
    c = toy_scene(3, 0)[2]
    with pytest.raises(ValueError):
        c.validate(n_faces=2)


def test_frames_are_orthonormal(face):
    _, R, _, _ = triangle_frames(torch.as_tensor(face.template), torch.as_tensor(face.topology.faces))
    RtR = R.transpose(-1, -2) @ R
    assert torch.allclose(RtR, torch.eye(3, dtype=R.dtype).expand_as(RtR), atol=1e-12)


def test_save_load(cloud, tmp_path):
    save_avatar(tmp_path / "a.npz", cloud)
    c2 = load_avatar(tmp_path / "a.npz")
    assert isinstance(c2, GaussianCloud)
    for f in ("parent_face", "local_position", "local_rotation", "log_scale", "opacity", "color", "region"):
        assert np.array_equal(getattr(c2, f), getattr(cloud, f))
