"""Imaging-plane geometry: affine headers, projections, and mesh slicing."""

import json
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

DEFAULT_EXTENT = (150, 150)

_ORTHO_TOL = 1e-9


class PlaneError(ValueError):
    pass


class SliceError(ValueError):
    """Plane intersection could not be chained into closed loops."""


@dataclass(frozen=True, eq=False)
class PlaneFrame:
    """One imaging plane in world coordinates.

    ``origin`` is the world position of the centre of pixel (0, 0).
    Columns advance along ``axis_u`` and rows along ``axis_v``;
    ``spacing`` is ``(mm per column, mm per row)`` and ``extent`` is
    ``(rows, cols)``.
    """

    view: str
    origin: np.ndarray
    normal: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    spacing: tuple = (1.0, 1.0)
    extent: tuple = DEFAULT_EXTENT

    def __post_init__(self):
        for name in ("origin", "normal", "axis_u", "axis_v"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != (3,):
                raise PlaneError(f"{name} must be a 3-vector")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        basis = np.stack([self.axis_u, self.axis_v, self.normal])
        if np.max(np.abs(basis @ basis.T - np.eye(3))) > _ORTHO_TOL:
            raise PlaneError(f"plane {self.view!r}: axes are not orthonormal")
        su, sv = (float(s) for s in self.spacing)
        if su <= 0 or sv <= 0:
            raise PlaneError(f"plane {self.view!r}: spacing must be positive")
        rows, cols = (int(e) for e in self.extent)
        if rows < 1 or cols < 1:
            raise PlaneError(f"plane {self.view!r}: extent must be positive")
        object.__setattr__(self, "spacing", (su, sv))
        object.__setattr__(self, "extent", (rows, cols))

    @property
    def n_pixels(self):
        return self.extent[0] * self.extent[1]

    def affine(self):
        """4x4 header mapping (col, row, slice, 1) to world mm."""
        m = np.eye(4)
        m[:3, 0] = self.axis_u * self.spacing[0]
        m[:3, 1] = self.axis_v * self.spacing[1]
        m[:3, 2] = self.normal
        m[:3, 3] = self.origin
        return m

    def transformed(self, rotation, translation):
        """Plane moved by the rigid map ``x -> rotation @ x + translation``."""
        rotation = np.asarray(rotation, dtype=np.float64)
        return PlaneFrame(
            self.view,
            rotation @ self.origin + translation,
            rotation @ self.normal,
            rotation @ self.axis_u,
            rotation @ self.axis_v,
            self.spacing,
            self.extent,
        )


def plane_from_affine(header, view, extent=DEFAULT_EXTENT):
    """Recover the plane of a 4x4 (col, row, slice, 1) -> world header."""
    m = np.asarray(header, dtype=np.float64)
    if m.shape != (4, 4):
        raise PlaneError(f"affine must be 4x4, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise PlaneError("affine contains non-finite values")
    col_dir, row_dir = m[:3, 0], m[:3, 1]
    su, sv = np.linalg.norm(col_dir), np.linalg.norm(row_dir)
    if su < 1e-9 or sv < 1e-9:
        raise PlaneError(
            f"near-singular affine: in-plane column norms ({su:.3g}, {sv:.3g})"
        )
    if abs(np.linalg.det(m)) < 1e-12:
        raise PlaneError("affine is not invertible")
    u = col_dir / su
    v = row_dir / sv
    cosang = float(np.dot(u, v))
    if abs(cosang) > 1e-6:
        angle = math.degrees(math.acos(max(-1.0, min(1.0, cosang))))
        raise PlaneError(
            f"plane {view!r}: in-plane axes are not orthogonal (angle {angle:.6f} deg)"
        )
    # remove the sub-tolerance skew so the frame is orthonormal to 1e-9
    v = v - cosang * u
    v /= np.linalg.norm(v)
    n = np.cross(u, v)
    n /= np.linalg.norm(n)
    return PlaneFrame(view, m[:3, 3].copy(), n, u, v, (su, sv), extent)


def signed_plane_distance(points, plane):
    return (np.asarray(points, dtype=np.float64) - plane.origin) @ plane.normal


def vertex_plane_distance(v, plane):
    """Absolute normal distance |n . (v - c)| in mm (vectorised over rows)."""
    return np.abs(signed_plane_distance(v, plane))


def world_to_pixel(v, plane):
    """Fractional ``(row, col)`` of the orthogonal projection of ``v``.

    Works on a single point or an (..., 3) array; results are not clipped.
    """
    rel = np.asarray(v, dtype=np.float64) - plane.origin
    col = rel @ plane.axis_u / plane.spacing[0]
    row = rel @ plane.axis_v / plane.spacing[1]
    return row, col


def pixel_to_world(row, col, plane, offset=0.0):
    """World point at fractional pixel ``(row, col)``, ``offset`` mm along n."""
    row = np.asarray(row, dtype=np.float64)[..., None]
    col = np.asarray(col, dtype=np.float64)[..., None]
    offset = np.asarray(offset, dtype=np.float64)[..., None]
    return (
        plane.origin
        + col * plane.spacing[0] * plane.axis_u
        + row * plane.spacing[1] * plane.axis_v
        + offset * plane.normal
    )


def polyline_area(poly):
    """Unsigned shoelace area of a closed (K, 2) polyline."""
    poly = np.asarray(poly, dtype=np.float64)
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def polyline_length(poly, closed=True):
    poly = np.asarray(poly, dtype=np.float64)
    if closed:
        poly = np.vstack([poly, poly[:1]])
    return float(np.sum(np.linalg.norm(np.diff(poly, axis=0), axis=1)))


def slice_mesh_with_plane(mesh, plane):
    """Intersect each labelled component with ``plane``.

    Returns ``{component: [polyline, ...]}`` where each polyline is a
    closed (K, 2) array of fractional ``(row, col)`` pixel coordinates
    (first point not repeated). Components that miss the plane map to an
    empty list. Vertices lying exactly on the plane are treated as being
    on its positive side, so tangent contact yields no loop.
    """
    d = signed_plane_distance(mesh.vertices, plane)
    above = d >= 0
    out = {}
    for comp in mesh.components():
        faces = mesh.component_faces(comp)
        loops = _slice_faces(mesh.vertices, faces, d, above)
        polys = []
        for loop in loops:
            row, col = world_to_pixel(loop, plane)
            polys.append(np.stack([row, col], axis=1))
        out[comp] = polys
    return out


def _slice_faces(vertices, faces, d, above):
    fa = above[faces]
    crossing = np.any(fa, axis=1) & ~np.all(fa, axis=1)
    faces = faces[crossing]
    if len(faces) == 0:
        return []

    # every crossing face has exactly two sign-changing edges
    neighbours = defaultdict(list)
    points = {}
    for tri in faces.tolist():
        keys = []
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            if above[a] != above[b]:
                key = (a, b) if a < b else (b, a)
                keys.append(key)
                if key not in points:
                    points[key] = _edge_point(vertices, d, above, key)
        k0, k1 = keys
        neighbours[k0].append(k1)
        neighbours[k1].append(k0)

    for key, nb in neighbours.items():
        if len(nb) != 2:
            raise SliceError(
                f"non-manifold crossing at edge {key}: {len(nb)} incident segments"
            )

    loops = []
    visited = set()
    for start in sorted(neighbours):
        if start in visited:
            continue
        loop = [start]
        visited.add(start)
        prev, cur = start, neighbours[start][0]
        while cur != start:
            if cur in visited:
                raise SliceError(f"segment chain revisits edge {cur}")
            visited.add(cur)
            loop.append(cur)
            a, b = neighbours[cur]
            prev, cur = cur, (b if a == prev else a)
        loops.append(np.array([points[k] for k in loop]))
    return loops


def _edge_point(vertices, d, above, key):
    a, b = key
    if not above[a]:
        a, b = b, a
    # d[a] >= 0 > d[b]
    t = d[a] / (d[a] - d[b])
    return vertices[a] + t * (vertices[b] - vertices[a])


# --------------------------------------------------------------------------
# plane config files

def planes_to_json(planes):
    return [
        {
            "view": p.view,
            "affine": [float(x) for x in p.affine().ravel()],
            "rows": p.extent[0],
            "cols": p.extent[1],
        }
        for p in planes
    ]


def planes_from_json(entries):
    planes = []
    for i, entry in enumerate(entries):
        try:
            view = entry["view"]
            affine = np.array(entry["affine"], dtype=np.float64)
            extent = (int(entry["rows"]), int(entry["cols"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise PlaneError(f"planes[{i}]: malformed entry ({exc})") from None
        if affine.size != 16:
            raise PlaneError(f"planes[{i}].affine: expected 16 numbers, got {affine.size}")
        planes.append(plane_from_affine(affine.reshape(4, 4), view, extent))
    views = [p.view for p in planes]
    if len(set(views)) != len(views):
        raise PlaneError(f"duplicate view names in plane config: {views}")
    return planes


def save_planes(planes, path):
    with open(path, "w") as fh:
        json.dump(planes_to_json(planes), fh, indent=1)
        fh.write("\n")


def load_planes(path):
    with open(path) as fh:
        return planes_from_json(json.load(fh))
