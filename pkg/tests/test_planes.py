import json

import numpy as np
import pytest

from heartmesh4d.planes import (
    PlaneError,
    pixel_to_world,
    plane_from_affine,
    planes_from_json,
    planes_to_json,
    polyline_area,
    polyline_length,
    signed_plane_distance,
    slice_mesh_with_plane,
    vertex_plane_distance,
    world_to_pixel,
)

from conftest import axial_plane, random_rotation, sphere_mesh


def rotation_affine(rot, spacing=(1.2, 1.2), origin=(3.0, -4.0, 5.0)):
    m = np.eye(4)
    m[:3, 0] = rot[:, 0] * spacing[0]
    m[:3, 1] = rot[:, 1] * spacing[1]
    m[:3, 2] = rot[:, 2]
    m[:3, 3] = origin
    return m


def test_identity_affine():
    p = plane_from_affine(np.eye(4), "4CH", (150, 150))
    assert np.array_equal(p.origin, [0, 0, 0])
    assert np.allclose(p.normal, [0, 0, 1])
    assert p.spacing == (1.0, 1.0)
    assert p.extent == (150, 150)


def test_scaled_affine_spacing():
    m = np.diag([1.5, 1.5, 1.5, 1.0])
    p = plane_from_affine(m, "2CH")
    assert p.spacing == (1.5, 1.5)
    assert np.allclose(p.axis_u, [1, 0, 0]) and np.allclose(p.axis_v, [0, 1, 0])


def test_rotation_affine_normal(rng):
    for _ in range(10):
        rot = random_rotation(rng)
        p = plane_from_affine(rotation_affine(rot), "SAX0")
        assert np.max(np.abs(p.normal - rot[:, 2])) < 1e-12


def test_singular_and_skewed_affines_rejected():
    m = np.eye(4)
    m[:3, 0] = 0.0
    with pytest.raises(PlaneError, match="near-singular"):
        plane_from_affine(m, "x")
    skew = np.eye(4)
    skew[:3, 1] = [np.sin(0.01), np.cos(0.01), 0.0]
    with pytest.raises(PlaneError, match="angle"):
        plane_from_affine(skew, "x")


def test_distance_examples(rng):
    p = plane_from_affine(rotation_affine(random_rotation(rng)), "3CH")
    c, n, u = p.origin, p.normal, p.axis_u
    assert vertex_plane_distance(c, p) == 0.0
    assert vertex_plane_distance(c + 2 * n, p) == pytest.approx(2.0, abs=1e-12)
    assert vertex_plane_distance(c + 3 * u + 4 * n, p) == pytest.approx(4.0, abs=1e-12)


def test_world_to_pixel_examples(rng):
    p = plane_from_affine(rotation_affine(random_rotation(rng)), "3CH")
    assert np.allclose(world_to_pixel(p.origin, p), (0, 0), atol=1e-12)
    row, col = world_to_pixel(p.origin + 5 * p.spacing[0] * p.axis_u, p)
    assert row == pytest.approx(0, abs=1e-12) and col == pytest.approx(5, abs=1e-12)


def test_pixel_world_round_trip(rng):
    p = plane_from_affine(rotation_affine(random_rotation(rng)), "4CH")
    rows = rng.uniform(-10, 160, 500)
    cols = rng.uniform(-10, 160, 500)
    r2, c2 = world_to_pixel(pixel_to_world(rows, cols, p), p)
    assert np.max(np.abs(r2 - rows)) < 1e-9 and np.max(np.abs(c2 - cols)) < 1e-9


def test_reconstruction_from_projection_and_offset(rng):
    p = plane_from_affine(rotation_affine(random_rotation(rng)), "4CH")
    v = rng.normal(size=(200, 3)) * 40
    row, col = world_to_pixel(v, p)
    back = pixel_to_world(row, col, p, signed_plane_distance(v, p))
    assert np.max(np.abs(back - v)) < 1e-9


def test_distance_rigid_invariance(rng):
    p = plane_from_affine(rotation_affine(random_rotation(rng)), "2CH")
    v = rng.normal(size=(100, 3)) * 30
    rot, shift = random_rotation(rng), rng.normal(size=3) * 20
    moved = p.transformed(rot, shift)
    d0 = vertex_plane_distance(v, p)
    d1 = vertex_plane_distance(v @ rot.T + shift, moved)
    assert np.max(np.abs(d0 - d1)) < 1e-9


def test_slice_sphere_through_centre():
    r = 20.0
    mesh = sphere_mesh(3, r)
    loops = slice_mesh_with_plane(mesh, axial_plane(0.0))["LV"]
    assert len(loops) == 1
    assert abs(polyline_length(loops[0]) - 2 * np.pi * r) / (2 * np.pi * r) < 0.02


@pytest.mark.parametrize("d", [0.0, 3.0, 6.5, 8.0])
def test_slice_area_matches_cross_section(d):
    r = 10.0
    loops = slice_mesh_with_plane(sphere_mesh(3, r), axial_plane(d))["LV"]
    exact = np.pi * (r * r - d * d)
    assert abs(sum(polyline_area(p) for p in loops) - exact) / exact < 0.03


def test_slice_miss_and_tangent():
    mesh = sphere_mesh(3, 10.0)
    assert slice_mesh_with_plane(mesh, axial_plane(10.5))["LV"] == []
    top = mesh.vertices[:, 2].max()
    loops = slice_mesh_with_plane(mesh, axial_plane(top))["LV"]
    assert len(loops) <= 1


def test_json_round_trip(rng):
    planes = [
        plane_from_affine(rotation_affine(random_rotation(rng)), f"SAX{i}", (150, 120))
        for i in range(3)
    ]
    text = json.dumps(planes_to_json(planes))
    back = planes_from_json(json.loads(text))
    for a, b in zip(planes, back):
        assert a.view == b.view and a.extent == b.extent
        assert np.max(np.abs(a.affine() - b.affine())) < 1e-12


def test_json_errors_name_the_entry():
    with pytest.raises(PlaneError, match=r"planes\[0\]"):
        planes_from_json([{"view": "x"}])
    entry = {"view": "x", "affine": list(np.eye(4).ravel()), "rows": 5, "cols": 5}
    with pytest.raises(PlaneError, match="duplicate"):
        planes_from_json([entry, entry])
