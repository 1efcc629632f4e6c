"""Procedural FLAME-style linear head model.

The template is a warped UV grid shaped into a face patch, with a mouth slit,
two eye disks and an appended teeth block (upper block fixed to the skull,
lower block rigidly attached to the jaw). Identity and expression
blendshapes are seeded smooth random fields, orthonormalized column-wise.

Units are meters. Pose is ``[jaw (3, axis-angle), global (3, axis-angle)]``;
component 0 is jaw pitch and positive values open the mouth.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

REGIONS = ("lip", "skin", "eye", "teeth")

TEETH_STATIONS = 8
TEETH_RING = 4


@dataclass(frozen=True)
class ModelSpec:
    vertex_count: int = 512
    id_dim: int = 16
    exp_dim: int = 8
    pose_dim: int = 6
    seed: int = 0
    width: float = 0.16
    height: float = 0.22
    depth: float = 0.05
    mouth_half_width: float = 0.026
    id_scale: float = 0.12
    exp_scale: float = 0.06
    blur: float = 2.0


@dataclass(frozen=True)
class FaceTopology:
    faces: np.ndarray
    vertex_count: int
    region_masks: dict
    teeth_face_start: int

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def mask(self, name: str) -> np.ndarray:
        return self.region_masks[name]

    def validate(self):
        if self.faces.min() < 0 or self.faces.max() >= self.vertex_count:
            raise ValueError("face index out of range")
        stacked = np.stack([self.region_masks[r] for r in REGIONS])
        if stacked.shape[1] != self.vertex_count:
            raise ValueError("region mask length does not match vertex count")
        if not np.all(stacked.sum(0) == 1):
            raise ValueError("region masks must partition the vertices")
        teeth = self.region_masks["teeth"]
        in_teeth = teeth[self.faces].all(axis=1)
        expected = np.arange(self.n_faces) >= self.teeth_face_start
        if not np.array_equal(in_teeth, expected):
            raise ValueError("teeth faces must form the appended block")


@dataclass
class FaceModelParams:
    identity: np.ndarray
    expression: np.ndarray
    pose: np.ndarray

    @classmethod
    def zeros(cls, model: "FaceModel") -> "FaceModelParams":
        s = model.spec
        return cls(np.zeros(s.id_dim), np.zeros(s.exp_dim), np.zeros(s.pose_dim))


@dataclass
class MeshSequence:
    vertices: np.ndarray  # (T, V, 3)
    topology: FaceTopology
    fps: float = 30.0

    def __post_init__(self):
        if self.vertices.ndim != 3 or self.vertices.shape[2] != 3:
            raise ValueError(f"vertices must be (T, V, 3), got {self.vertices.shape}")
        if self.vertices.shape[1] != self.topology.vertex_count:
            raise ValueError("vertex count does not match topology")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh sequence contains NaN or Inf")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    def __len__(self):
        return self.vertices.shape[0]


@dataclass(frozen=True)
class FaceModel:
    spec: ModelSpec
    template: np.ndarray  # (V, 3)
    id_basis: np.ndarray  # (V, 3, D_id)
    exp_basis: np.ndarray  # (V, 3, D_exp)
    jaw_weights: np.ndarray  # (V,)
    jaw_pivot: np.ndarray
    head_center: np.ndarray
    topology: FaceTopology
    teeth_upper: np.ndarray
    teeth_lower: np.ndarray
    grid_shape: tuple = field(default=(0, 0))

    @property
    def n_vertices(self) -> int:
        return self.template.shape[0]


def _grid_shape(n: int) -> tuple:
    best = None
    for rows in range(8, int(np.sqrt(n)) + 1):
        if n % rows:
            continue
        cols = n // rows
        score = abs(np.log(cols / rows) - np.log(2.0))
        if best is None or score < best[0]:
            best = (score, rows, cols)
    if best is None:
        raise ValueError(f"vertex_count={n} has no rows x cols factorization with both >= 8")
    return best[1], best[2]


def _warped_axis(n, lo, hi, center, width, gain):
    # Node positions concentrated around `center`.
    fine = np.linspace(lo, hi, 4001)
    density = 1.0 + gain * np.exp(-(((fine - center) / width) ** 2))
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (density[1:] + density[:-1]) * np.diff(fine))])
    cdf /= cdf[-1]
    return np.interp(np.linspace(0.0, 1.0, n), cdf, fine)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _orthonormal_columns(mat, scale):
    q, r = np.linalg.qr(mat)
    q = q * np.sign(np.diag(r))[None, :]
    return q * scale[None, :]


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Rotation matrices from axis-angle vectors of shape (..., 3)."""
    aa = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    safe = np.where(theta > 1e-12, theta, 1.0)
    k = aa / safe
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    zero = np.zeros_like(kx)
    K = np.stack([
        np.stack([zero, -kz, ky], -1),
        np.stack([kz, zero, -kx], -1),
        np.stack([-ky, kx, zero], -1),
    ], -2)
    th = theta[..., None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    R = eye + np.sin(th) * K + (1.0 - np.cos(th)) * (K @ K)
    return np.where(theta[..., None] > 1e-12, R, eye)


def build_model(spec: ModelSpec = ModelSpec()) -> FaceModel:
    """Deterministically construct the procedural head model for ``spec``."""
    for name in ("vertex_count", "id_dim", "exp_dim"):
        if getattr(spec, name) <= 0:
            raise ValueError(f"{name} must be positive, got {getattr(spec, name)}")
    if spec.pose_dim != 6:
        raise ValueError("pose_dim must be 6 (jaw + global axis-angle)")
    rows, cols = _grid_shape(spec.vertex_count)
    rng = np.random.default_rng(spec.seed)
    W, H, D = spec.width, spec.height, spec.depth
    mw = spec.mouth_half_width
    y_mouth = -0.2 * H

    ys = _warped_axis(rows, H / 2, -H / 2, y_mouth, 0.025, 6.0)
    xs = _warped_axis(cols, -W / 2, W / 2, 0.0, 0.035, 2.0)
    r_m = int(np.nonzero(ys >= y_mouth)[0].max())
    r_m = min(r_m, rows - 2)
    y_mouth = 0.5 * (ys[r_m] + ys[r_m + 1])

    X, Y = np.meshgrid(xs, ys)
    # Close the lips towards the mouth line, leaving a ~1.5 mm gap at the center.
    closure = np.clip(1.0 - (xs / mw) ** 2, 0.0, 1.0) * 0.8
    Y[r_m] = Y[r_m] + (y_mouth + 0.00075 - Y[r_m]) * closure
    Y[r_m + 1] = Y[r_m + 1] + (y_mouth - 0.00075 - Y[r_m + 1]) * closure

    Z = D * (1.0 - 0.9 * (X / (W / 2)) ** 2 - 0.35 * (Y / (H / 2)) ** 2)
    Z += 0.004 * np.exp(-((X / 0.03) ** 2 + ((Y - y_mouth) / 0.012) ** 2))
    Z += 0.015 * np.exp(-((X / 0.012) ** 2 + (Y / 0.03) ** 2))
    grid = np.stack([X, Y, Z], -1).reshape(-1, 3)

    faces = []
    for i in range(rows - 1):
        for j in range(cols - 1):
            if i == r_m and abs(xs[j]) < mw and abs(xs[j + 1]) < mw:
                continue  # mouth slit
            a, b, c, d = i * cols + j, (i + 1) * cols + j, i * cols + j + 1, (i + 1) * cols + j + 1
            faces.append((a, b, c))
            faces.append((c, b, d))
    n_grid = rows * cols
    teeth_face_start = len(faces)

    # Teeth: two bars of TEETH_STATIONS rings of TEETH_RING vertices each.
    z_lip = D * (1.0 - 0.35 * (y_mouth / (H / 2)) ** 2) + 0.004
    station_x = np.linspace(-0.8 * mw, 0.8 * mw, TEETH_STATIONS)
    teeth_verts = []
    blocks = []
    for y_top, y_bot in ((y_mouth + 0.0068, y_mouth + 0.0008), (y_mouth - 0.0008, y_mouth - 0.0068)):
        base = n_grid + len(teeth_verts)
        for x in station_x:
            zf = z_lip - 0.006 - 0.5 * x * x / 0.05
            zb = zf - 0.004
            teeth_verts += [(x, y_top, zf), (x, y_top, zb), (x, y_bot, zb), (x, y_bot, zf)]
        idx = lambda k, a: base + TEETH_RING * k + (a % TEETH_RING)  # noqa: E731
        for k in range(TEETH_STATIONS - 1):
            for a in range(TEETH_RING):
                p, q, r, s = idx(k, a), idx(k, a + 1), idx(k + 1, a), idx(k + 1, a + 1)
                faces.append((p, r, q))
                faces.append((q, r, s))
        last = TEETH_STATIONS - 1
        faces += [(idx(0, 0), idx(0, 1), idx(0, 2)), (idx(0, 0), idx(0, 2), idx(0, 3))]
        faces += [(idx(last, 0), idx(last, 2), idx(last, 1)), (idx(last, 0), idx(last, 3), idx(last, 2))]
        blocks.append(np.arange(base, base + TEETH_STATIONS * TEETH_RING))
    teeth_upper, teeth_lower = blocks
    template = np.concatenate([grid, np.asarray(teeth_verts)], 0)
    V = template.shape[0]
    faces = np.asarray(faces, dtype=np.int64)

    teeth = np.zeros(V, bool)
    teeth[n_grid:] = True
    gx, gy = grid[:, 0], grid[:, 1]
    eye = np.zeros(V, bool)
    for cx in (-0.033, 0.033):
        eye[:n_grid] |= (gx - cx) ** 2 + (gy - 0.035) ** 2 <= 0.013 ** 2
    lip = np.zeros(V, bool)
    lip[:n_grid] = (np.abs(gy - y_mouth) <= 0.011) & (np.abs(gx) <= mw + 0.006) & ~eye[:n_grid]
    skin = ~(teeth | eye | lip)
    topology = FaceTopology(faces, V, {"lip": lip, "skin": skin, "eye": eye, "teeth": teeth},
                            teeth_face_start)
    topology.validate()

    jaw = np.zeros(V)
    below = (np.arange(n_grid) // cols) > r_m
    jaw[:n_grid] = below * _smoothstep((mw + 0.02 - np.abs(gx)) / 0.02)
    jaw[teeth_lower] = 1.0
    jaw_pivot = np.array([0.0, y_mouth + 0.04, D - 0.09])
    head_center = np.array([0.0, 0.0, D - 0.1])

    upper_lip = lip[:n_grid] & ~below
    lower_lip = lip[:n_grid] & below

    def smooth_fields(n, envelope, split=None):
        f = rng.standard_normal((n, rows, cols, 3))
        f = gaussian_filter(f, sigma=(0, spec.blur, spec.blur, 0), mode="nearest")
        f = f * envelope[None, :, :, None]
        if split is not None:
            g = rng.standard_normal((n, rows, cols, 3))
            g = gaussian_filter(g, sigma=(0, spec.blur, spec.blur, 0), mode="nearest")
            f = f + g * split[None, :, :, None]
        return f.reshape(n, n_grid, 3)

    def assemble(fields, teeth_mode):
        n = fields.shape[0]
        full = np.zeros((n, V, 3))
        full[:, :n_grid] = fields
        if teeth_mode == "translate":
            full[:, teeth_upper] = fields[:, upper_lip].mean(1, keepdims=True)
            full[:, teeth_lower] = fields[:, lower_lip].mean(1, keepdims=True)
        return full.reshape(n, -1).T  # (3V, n)

    ones = np.ones((rows, cols))
    id_mat = assemble(smooth_fields(spec.id_dim, ones), "translate")
    mouth_env = 0.3 + 0.7 * np.exp(-(X ** 2 + (Y - y_mouth) ** 2) / (2 * 0.03 ** 2))
    side = np.where(np.arange(rows)[:, None] > r_m, -1.0, 1.0)
    lip_split = side * np.exp(-(X ** 2 + (Y - y_mouth) ** 2) / (2 * 0.015 ** 2))
    exp_mat = assemble(smooth_fields(spec.exp_dim, mouth_env, lip_split), "none")
    if spec.id_dim > 3 * V or spec.exp_dim > 3 * V:
        raise ValueError("basis dimension exceeds 3 * vertex count")

    decay_id = spec.id_scale / np.sqrt(np.arange(1, spec.id_dim + 1))
    decay_exp = spec.exp_scale / np.sqrt(np.arange(1, spec.exp_dim + 1))
    id_basis = _orthonormal_columns(id_mat, decay_id).reshape(V, 3, spec.id_dim)
    exp_basis = _orthonormal_columns(exp_mat, decay_exp).reshape(V, 3, spec.exp_dim)

    return FaceModel(spec, template, id_basis, exp_basis, jaw, jaw_pivot, head_center,
                     topology, teeth_upper, teeth_lower, (rows, cols))


def _check_params(model: FaceModel, params: FaceModelParams):
    s = model.spec
    for name, dim in (("identity", s.id_dim), ("expression", s.exp_dim), ("pose", s.pose_dim)):
        v = np.asarray(getattr(params, name))
        if v.shape[-1] != dim:
            raise ValueError(f"{name} has dimension {v.shape[-1]}, model expects {dim}")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{name} contains NaN or Inf")


def deform(model: FaceModel, params: FaceModelParams) -> np.ndarray:
    """Vertices for ``params``; expression and pose may carry leading batch axes.

    Returns an array of shape ``(..., V, 3)``.
    """
    _check_params(model, params)
    beta = np.asarray(params.identity, dtype=np.float64)
    psi = np.asarray(params.expression, dtype=np.float64)
    theta = np.asarray(params.pose, dtype=np.float64)
    v = (model.template
         + np.einsum("vcd,...d->...vc", model.id_basis, beta)
         + np.einsum("vcd,...d->...vc", model.exp_basis, psi))
    # Written as v + (R - I)(v - pivot) so a zero pose returns v bit-exactly.
    eye = np.eye(3)
    R_jaw = rodrigues(theta[..., 0:3]) - eye
    v = v + model.jaw_weights[:, None] * np.einsum("...ij,...vj->...vi", R_jaw, v - model.jaw_pivot)
    R_glob = rodrigues(theta[..., 3:6]) - eye
    return v + np.einsum("...ij,...vj->...vi", R_glob, v - model.head_center)


def neutral_mesh(model: FaceModel, identity: np.ndarray) -> np.ndarray:
    s = model.spec
    return deform(model, FaceModelParams(identity, np.zeros(s.exp_dim), np.zeros(s.pose_dim)))


def save_model(path, model: FaceModel):
    """Write the model to the npz container (also the format for external assets)."""
    t = model.topology
    arrays = dict(
        template=model.template, id_basis=model.id_basis, exp_basis=model.exp_basis,
        jaw_weights=model.jaw_weights, jaw_pivot=model.jaw_pivot, head_center=model.head_center,
        faces=t.faces, teeth_face_start=np.array(t.teeth_face_start),
        teeth_upper=model.teeth_upper, teeth_lower=model.teeth_lower,
        grid_shape=np.array(model.grid_shape),
        spec=np.array(json.dumps(asdict(model.spec))),
    )
    for r in REGIONS:
        arrays[f"region_{r}"] = t.region_masks[r]
    np.savez(path, **arrays)


def load_model(path) -> FaceModel:
    """Load a model from the npz container.

    Required arrays: ``template (V,3)``, ``id_basis (V,3,D_id)``,
    ``exp_basis (V,3,D_exp)``, ``jaw_weights (V,)``, ``jaw_pivot (3,)``,
    ``faces (F,3)``, ``region_{lip,skin,eye,teeth} (V,) bool``,
    ``teeth_upper``/``teeth_lower`` vertex indices, ``teeth_face_start``.
    ``head_center``, ``grid_shape`` and ``spec`` (JSON) are optional.
    """
    with np.load(Path(path), allow_pickle=False) as z:
        d = {k: z[k] for k in z.files}
    id_basis, exp_basis = d["id_basis"], d["exp_basis"]
    V = d["template"].shape[0]
    if "spec" in d:
        spec = ModelSpec(**json.loads(str(d["spec"])))
    else:
        spec = ModelSpec(vertex_count=V, id_dim=id_basis.shape[2], exp_dim=exp_basis.shape[2])
    topology = FaceTopology(d["faces"].astype(np.int64), V,
                            {r: d[f"region_{r}"].astype(bool) for r in REGIONS},
                            int(d["teeth_face_start"]))
    topology.validate()
    return FaceModel(
        spec, d["template"], id_basis, exp_basis, d["jaw_weights"], d["jaw_pivot"],
        d.get("head_center", d["template"].mean(0)), topology,
        d["teeth_upper"], d["teeth_lower"], tuple(int(x) for x in d.get("grid_shape", (0, 0))),
    )
