import numpy as np
import pytest

from heartmesh4d.mesh import DegenerateFaceError, build_edge_list
from heartmesh4d.regularizers import (
    RegularizerWeights,
    edge_loss,
    face_adjacency,
    normal_loss,
    temporal_jerk_loss,
    third_difference,
)

from conftest import random_rotation, sphere_mesh


def central_diff(fn, x, coords, step):
    out = []
    for c in coords:
        orig = x[c]
        x[c] = orig + step
        fp = fn(x)[0]
        x[c] = orig - step
        fm = fn(x)[0]
        x[c] = orig
        out.append((fp - fm) / (2 * step))
    return np.array(out)


def sample_coords(rng, shape, n):
    flat = rng.choice(int(np.prod(shape)), size=n, replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def rel_error(a, b):
    big = np.maximum(np.abs(a), np.abs(b))
    mask = big > 1e-10
    rel = np.abs(a - b)[mask] / big[mask]
    return rel.max() if rel.size else 0.0


def test_weights_nonnegative():
    with pytest.raises(ValueError):
        RegularizerWeights(lambda_norm=-0.1)


def test_edge_loss_rest_state():
    mesh = sphere_mesh(2)
    loss, grad = edge_loss(mesh.vertices, build_edge_list(mesh))
    assert loss == 0.0 and not grad.any()


def test_edge_loss_uniform_scale():
    mesh = sphere_mesh(2, 4.0)
    el = build_edge_list(mesh)
    s = 1.3
    loss, _ = edge_loss(mesh.vertices * s, el)
    assert loss == pytest.approx(np.mean(((s - 1) * el.rest_lengths) ** 2), rel=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_edge_gradient(seed):
    rng = np.random.default_rng(seed)
    mesh = sphere_mesh(1, 5.0)
    el = build_edge_list(mesh)
    x = mesh.vertices + rng.normal(scale=0.5, size=mesh.vertices.shape)
    _, g = edge_loss(x, el)
    coords = sample_coords(rng, x.shape, 30)
    num = central_diff(lambda y: edge_loss(y, el), x, coords, 1e-4)
    assert rel_error(np.array([g[c] for c in coords]), num) < 1e-5


def test_normal_loss_flat_and_folded():
    flat = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    assert normal_loss(flat, faces)[0] == pytest.approx(0.0, abs=1e-15)
    folded = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    faces = np.array([[0, 1, 2], [0, 3, 1]])
    assert normal_loss(folded, faces)[0] == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_normal_gradient(seed):
    rng = np.random.default_rng(seed)
    mesh = sphere_mesh(1, 5.0)
    pairs = face_adjacency(mesh.faces)
    x = mesh.vertices + rng.normal(scale=0.3, size=mesh.vertices.shape)
    _, g = normal_loss(x, mesh.faces, pairs)
    coords = sample_coords(rng, x.shape, 30)
    num = central_diff(lambda y: normal_loss(y, mesh.faces, pairs), x, coords, 1e-5)
    assert rel_error(np.array([g[c] for c in coords]), num) < 1e-4


def test_normal_loss_names_degenerate_face():
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], float)
    faces = np.array([[0, 1, 3], [0, 2, 1]])
    with pytest.raises(DegenerateFaceError):
        normal_loss(v, faces)


def test_face_adjacency_closed_surface():
    mesh = sphere_mesh(2)
    pairs = face_adjacency(mesh.faces)
    assert len(pairs) == len(build_edge_list(mesh).edges)
    assert np.all(pairs[:, 0] < pairs[:, 1])


def test_regularizers_rigid_invariant(rng):
    mesh = sphere_mesh(2, 6.0)
    el = build_edge_list(mesh)
    x = mesh.vertices + rng.normal(scale=0.4, size=mesh.vertices.shape)
    moved = x @ random_rotation(rng).T + rng.normal(size=3) * 40
    for fn in (lambda y: edge_loss(y, el), lambda y: normal_loss(y, mesh.faces)):
        a, b = fn(x)[0], fn(moved)[0]
        assert abs(a - b) <= 1e-9 * abs(a)


def test_frame_axis_is_averaged(rng):
    mesh = sphere_mesh(1, 5.0)
    el = build_edge_list(mesh)
    frames = mesh.vertices + rng.normal(scale=0.3, size=(3,) + mesh.vertices.shape)
    per = [edge_loss(f, el)[0] for f in frames]
    assert edge_loss(frames, el)[0] == pytest.approx(np.mean(per), rel=1e-12)


def test_jerk_static_and_quadratic():
    static = np.ones((6, 5, 3))
    assert temporal_jerk_loss(static) == (0.0, pytest.approx(np.zeros_like(static)))
    t = np.arange(8.0)[:, None, None]
    quad = 1.0 + 2.0 * t + 0.5 * t**2 + np.zeros((8, 4, 3))
    assert np.abs(third_difference(quad, cyclic=False)).max() < 1e-12
    assert temporal_jerk_loss(quad, cyclic=False)[0] < 1e-20


def test_jerk_matches_bruteforce(rng):
    n = 25
    t = np.arange(n)
    amp = rng.uniform(1, 5, size=(10, 3))
    x = amp[None] * np.sin(2 * np.pi * t / n)[:, None, None]
    brute = 0.0
    for k in range(n):
        j = x[(k + 2) % n] - 3 * x[(k + 1) % n] + 3 * x[k] - x[(k - 1) % n]
        brute += np.sum(j**2)
    brute /= n * 10
    assert temporal_jerk_loss(x)[0] == pytest.approx(brute, rel=1e-12)
    # a pure sinusoid picks up the factor (2 sin(pi/N))^6 per unit amplitude
    expected = np.sum(amp**2) / 10 * 0.5 * (2 * np.sin(np.pi / n)) ** 6
    assert temporal_jerk_loss(x)[0] == pytest.approx(expected, rel=1e-9)


@pytest.mark.parametrize("cyclic", [True, False])
def test_jerk_gradient(rng, cyclic):
    x = rng.normal(size=(6, 4, 3))
    _, g = temporal_jerk_loss(x, cyclic)
    coords = sample_coords(rng, x.shape, 40)
    num = central_diff(lambda y: temporal_jerk_loss(y, cyclic), x, coords, 1e-3)
    assert rel_error(np.array([g[c] for c in coords]), num) < 1e-8


def test_jerk_needs_four_frames():
    with pytest.raises(ValueError, match="at least 4"):
        temporal_jerk_loss(np.zeros((3, 2, 3)))
