import numpy as np
import pytest
import torch

from lipsplat.avatar import GaussianCloud, build_avatar
from lipsplat.face_model import FaceTopology, build_model
from lipsplat.renderer import Camera


@pytest.fixture(scope="session")
def face():
    return build_model()


@pytest.fixture(scope="session")
def cloud(face):
    return build_avatar(face)


def toy_scene(n_splats=12, seed=0, size=8, focal=8.0, dist=2.0, opacity=(0.3, 0.9)):
    """Separate triangles in front of an on-axis camera, one splat each.

    Returns (verts (3n, 3) float64, topology, cloud, camera). About 1 m of
    the z=0 plane maps to 4 px, splat footprints are 1-2 px.
    """
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-0.8, 0.8, (n_splats, 3)) * np.array([1.0, 1.0, 0.2])
    verts = []
    for c in centers:
        ang = rng.uniform(0, 2 * np.pi) + np.array([0, 2.1, 4.2]) + rng.normal(0, 0.2, 3)
        r = rng.uniform(0.3, 0.5, 3)
        tri = c + np.stack([r * np.cos(ang), r * np.sin(ang), rng.normal(0, 0.05, 3)], 1)
        verts.append(tri)
    verts = np.concatenate(verts)
    faces = np.arange(3 * n_splats).reshape(n_splats, 3)
    masks = {k: np.zeros(3 * n_splats, bool) for k in ("lip", "eye", "teeth")}
    masks["skin"] = np.ones(3 * n_splats, bool)
    topo = FaceTopology(faces, 3 * n_splats, masks, n_splats)
    angle = rng.uniform(-np.pi, np.pi, n_splats)
    quat = np.stack([np.cos(angle / 2), 0 * angle, 0 * angle, np.sin(angle / 2)], 1)
    cloud = GaussianCloud(
        parent_face=np.arange(n_splats),
        local_position=rng.normal(0, 0.1, (n_splats, 3)),
        local_rotation=quat,
        log_scale=np.log(np.stack([rng.uniform(0.5, 0.9, n_splats), rng.uniform(0.5, 0.9, n_splats),
                                   np.full(n_splats, 0.05)], 1)),
        opacity=rng.uniform(*opacity, n_splats),
        color=rng.uniform(0, 1, (n_splats, 3)),
        region=np.ones(n_splats, dtype=np.int64),
    )
    cam = Camera(focal, focal, size / 2.0, size / 2.0, size, size, np.eye(3), np.array([0.0, 0.0, dist]))
    return verts, topo, cloud, cam


def cutoff_margin(verts, topo, cloud, cam, cutoff=3.0):
    """Smallest |q - cutoff^2| over pixel/splat pairs (q = squared Mahalanobis distance).

    Finite differences are only meaningful when no pixel sits on a splat's
    truncation boundary inside the stencil.
    """
    from lipsplat.avatar import bind_to_mesh
    from lipsplat.renderer import project_gaussians

    g = bind_to_mesh(cloud, torch.as_tensor(verts), topo.faces)
    _, m2, c2 = project_gaussians(g.mean, g.cov, cam)
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    pix = np.stack([xs, ys], -1).reshape(-1, 2).astype(np.float64)
    d = pix[:, None] - m2.numpy()[None]
    q = np.einsum("pni,nij,pnj->pn", d, np.linalg.inv(c2.numpy()), d)
    return float(np.abs(q - cutoff ** 2).min())


def smooth_scene(n_splats=16, margin=1e-2, **kw):
    """First toy scene (by seed) whose pixels all keep ``margin`` from the cutoff."""
    for seed in range(100):
        sc = toy_scene(n_splats, seed, **kw)
        if cutoff_margin(*sc) > margin:
            return sc
    raise RuntimeError("no toy scene clear of the truncation boundary")


@pytest.fixture
def scene():
    return toy_scene()


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


# acceptance-criterion lines, printed together at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
