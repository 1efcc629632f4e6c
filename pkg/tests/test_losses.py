import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lipsplat.lipreader import SurrogateLipReader
from lipsplat.losses import (LossBreakdown, ReadInputs, cosine_distance, lipread_loss, total_loss, vertex_loss,
                             vertex_weights, window_bounds)
from lipsplat.renderer import lip_crop_grayscale, render

from conftest import cutoff_margin, rel_err, toy_scene


@pytest.fixture(scope="module")
def reader():
    # float64 copy: same weights and extractor id, exact enough for oracles
    return SurrogateLipReader().double()


def _vertex_loss_loop(pred, gt, w):
    total = 0.0
    for t in range(pred.shape[0]):
        for v in range(pred.shape[1]):
            sq = 0.0
            for c in range(3):
                sq += (pred[t, v, c] - gt[t, v, c]) ** 2
            total += sq * w[v]
    return total


@settings(max_examples=25, deadline=None)
@given(T=st.integers(1, 6), V=st.integers(1, 12), seed=st.integers(0, 10_000))
def test_vertex_loss_matches_triple_loop(T, V, seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.normal(size=(2, T, V, 3))
    w = rng.uniform(0, 2, V)
    got = float(vertex_loss(torch.as_tensor(pred), torch.as_tensor(gt), w))
    ref = _vertex_loss_loop(pred, gt, w)
    assert abs(got - ref) <= 1e-9 * max(1.0, abs(ref))


def test_vertex_weights_per_stage(face):
    topo = face.topology
    m = topo.region_masks
    w1 = vertex_weights(topo, 1)
    assert np.all(w1 == 1.0)
    for stage in (2, 3):
        w = vertex_weights(topo, stage)
        assert np.all(w[m["skin"]] == 1.0) and np.all(w[m["lip"]] == 0.5) and np.all(w[m["teeth"]] == 0.5)
        assert np.all(w[m["eye"]] == 0.0)
    assert np.all(vertex_weights(topo, 2, dict(lip=2.0))[m["lip"]] == 2.0)
    with pytest.raises(ValueError):
        vertex_weights(topo, 4)
    with pytest.raises(ValueError):
        vertex_weights(topo, 2, dict(lip=-1.0))


@settings(max_examples=20, deadline=None)
@given(stage=st.sampled_from([2, 3]), scale=st.floats(1e-6, 1e6), seed=st.integers(0, 1000))
def test_eye_vertices_do_not_count(face, stage, scale, seed):
    rng = np.random.default_rng(seed)
    T, V = 3, face.n_vertices
    gt = torch.as_tensor(rng.normal(size=(T, V, 3)))
    pred = gt + torch.as_tensor(rng.normal(size=(T, V, 3))) * 0.01
    w = vertex_weights(face.topology, stage)
    base = vertex_loss(pred, gt, w)
    moved = pred.clone()
    eye = torch.as_tensor(face.topology.region_masks["eye"])
    moved[:, eye] += scale * torch.as_tensor(rng.normal(size=(T, int(eye.sum()), 3)))
    assert torch.equal(vertex_loss(moved, gt, w), base)
    moved[:, eye] = float("inf")
    assert torch.equal(vertex_loss(moved, gt, w), base)


@settings(max_examples=20, deadline=None)
@given(k=st.floats(1.01, 100.0), seed=st.integers(0, 1000))
def test_single_vertex_error_scales_quadratically(k, seed):
    rng = np.random.default_rng(seed)
    gt = torch.zeros(1, 5, 3, dtype=torch.float64)
    pred = gt.clone()
    pred[0, 2] = torch.as_tensor(rng.normal(size=3))
    w = np.ones(5)
    a = vertex_loss(pred, gt, w)
    b = vertex_loss(pred * k, gt, w)
    assert abs(float(b) / float(a) - k * k) < 1e-9 * k * k


def test_vertex_loss_errors():
    with pytest.raises(ValueError):
        vertex_loss(torch.zeros(2, 3, 3), torch.zeros(2, 4, 3), np.ones(3))
    with pytest.raises(ValueError, match="NaN"):
        vertex_loss(torch.full((1, 2, 3), float("nan")), torch.zeros(1, 2, 3), np.ones(2))
    with pytest.raises(ValueError):
        vertex_loss(torch.zeros(1, 2, 3), torch.zeros(1, 2, 3), np.ones(3))


def test_cosine_distance_exact_values():
    a = torch.tensor([[1.0, 2.0, -0.5], [0.3, 0.0, 4.0]], dtype=torch.float64)
    orth = torch.stack([torch.linalg.cross(a[0], torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)),
                        torch.linalg.cross(a[1], torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64))])
    assert float(cosine_distance(a, a)) == 0.0
    assert float(cosine_distance(a, orth)) == 1.0
    assert float(cosine_distance(a, -a)) == 2.0
    e = torch.eye(4, dtype=torch.float64)
    assert float(cosine_distance(e, e)) == 0.0
    assert float(cosine_distance(e, e.roll(1, 0))) == 1.0
    assert float(cosine_distance(e, -e)) == 2.0


def test_cosine_modes_differ_and_validate():
    a = torch.tensor([[1.0, 0.0], [0.0, 10.0]], dtype=torch.float64)
    b = torch.tensor([[1.0, 0.0], [10.0, 0.0]], dtype=torch.float64)
    assert float(cosine_distance(a, b, "frame")) == 0.5
    assert abs(float(cosine_distance(a, b, "sequence")) - (1 - 1 / 101)) < 1e-12
    with pytest.raises(ValueError):
        cosine_distance(a, b, "bogus")
    with pytest.raises(ValueError):
        cosine_distance(a, b[:1])


def _frames(T, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(T, 96, 96, generator=g, dtype=torch.float64)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000))
def test_lipread_loss_bounds(reader, seed):
    f = _frames(3, seed)
    gt = reader.extract(_frames(3, seed + 1))
    val = float(lipread_loss(f, gt, reader))
    assert 0.0 <= val <= 2.0
    assert abs(float(lipread_loss(f, reader.extract(f), reader))) < 1e-12


@pytest.mark.parametrize("start,length,T", [(0, 5, 10), (3, 5, 10), (5, 5, 10), (0, 10, 10)])
def test_window_features_match_full_sequence(reader, start, length, T):
    f = _frames(T, 4)
    g = _frames(T, 5)
    gt = reader.extract(g)
    lo, hi = window_bounds(start, length, T)
    full_pred = reader(f)
    ref = cosine_distance(full_pred[lo:hi], gt.features[lo:hi])
    got = lipread_loss(f[start:start + length], gt, reader, start=start)
    assert abs(float(got) - float(ref)) < 1e-12


def test_window_bounds():
    assert window_bounds(0, 10, 10) == (0, 10)
    assert window_bounds(0, 4, 10) == (0, 3)
    assert window_bounds(6, 4, 10) == (7, 10)
    assert window_bounds(2, 4, 10) == (3, 5)
    with pytest.raises(ValueError):
        window_bounds(8, 4, 10)
    with pytest.raises(ValueError):
        window_bounds(2, 2, 10)


def test_lipread_loss_rejects_foreign_features(reader):
    from lipsplat.lipreader import LipReaderConfig
    other = SurrogateLipReader(LipReaderConfig(seed=3))
    with pytest.raises(ValueError, match="extractor"):
        lipread_loss(_frames(3, 0), other.extract(_frames(3, 1)), reader)
    with pytest.raises(ValueError, match="frame count"):
        lipread_loss(_frames(4, 0), reader.extract(_frames(3, 1)), reader)


def _read_inputs(reader, T=4, seed=0):
    return ReadInputs(lambda v: _frames(v.shape[0], seed + 7) + 0.0 * v.sum(), reader, reader.extract(_frames(T, seed)))


def test_total_loss_composition(reader):
    rng = np.random.default_rng(0)
    pred, gt = (torch.as_tensor(x) for x in rng.normal(size=(2, 4, 6, 3)))
    w = np.ones(6)
    s1 = total_loss(pred, gt, 1, w)
    assert s1.read is None and torch.equal(s1.total, s1.vert)
    assert abs(float(s1.vert) - _vertex_loss_loop(pred.numpy(), gt.numpy(), w) / 24) < 1e-12
    summed = total_loss(pred, gt, 1, w, reduction="sum")
    assert abs(float(summed.vert) - 24 * float(s1.vert)) < 1e-9
    read = _read_inputs(reader)
    s3 = total_loss(pred, gt, 3, w, read=read)
    vert = vertex_loss(pred, gt, w) / 24
    lr = lipread_loss(read.render_fn(pred), read.gt_features, reader)
    assert float(s3.total) == pytest.approx(float(vert + 1e-5 * lr), abs=1e-15)
    s3_0 = total_loss(pred, gt, 3, w, lambda_read=0.0, read=read)
    assert float(s3_0.total) == float(total_loss(pred, gt, 2, w).total)
    assert set(s3.row()) == {"vert", "read", "total", "lambda_read"}
    assert np.isnan(s1.row()["read"])
    with pytest.raises(ValueError):
        total_loss(pred, gt, 3, w)
    with pytest.raises(ValueError):
        total_loss(pred, gt, 4, w)
    with pytest.raises(ValueError):
        total_loss(pred, gt, 1, w, reduction="max")
    assert isinstance(s3, LossBreakdown)


def test_identical_prediction_gives_zero(reader):
    gt = torch.randn(3, 6, 3, dtype=torch.float64)
    assert float(total_loss(gt, gt, 1, np.ones(6)).total) == 0.0


def test_end_to_end_read_gradient_matches_finite_differences(reader):
    # small footprints on the 96 x 96 crop; both frames kept clear of the truncation ring
    for seed in range(100):
        verts, topo, cloud, cam = toy_scene(16, seed, size=96, focal=8.0)
        frames = np.stack([verts, verts + np.random.default_rng(seed).normal(0, 0.02, verts.shape)])
        if min(cutoff_margin(f, topo, cloud, cam) for f in frames) > 1e-2:
            break
    else:
        pytest.fail("no toy scene clear of the truncation ring")
    gt = reader.extract(torch.stack([lip_crop_grayscale(render(torch.as_tensor(v), topo, cloud, cam))
                                     for v in frames[::-1].copy()]))

    def loss(x):
        imgs = torch.stack([lip_crop_grayscale(render(v, topo, cloud, cam)) for v in x])
        return lipread_loss(imgs, gt, reader)

    x = torch.as_tensor(frames).clone().requires_grad_()
    loss(x).backward()
    ana = x.grad.numpy().reshape(-1)
    eps = 1e-4
    flat = frames.reshape(-1)
    fd = np.zeros_like(flat)
    with torch.no_grad():
        for k in range(flat.size):
            d = np.zeros_like(flat)
            d[k] = eps
            fd[k] = (float(loss(torch.as_tensor((flat + d).reshape(frames.shape))))
                     - float(loss(torch.as_tensor((flat - d).reshape(frames.shape))))) / (2 * eps)
    assert rel_err(ana, fd) < 1e-2
