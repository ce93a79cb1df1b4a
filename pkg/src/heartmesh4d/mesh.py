"""Labeled triangle meshes, OBJ + label sidecar I/O, and derived geometry."""

import logging
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

COMPONENTS = ("LV", "LV_MYO", "RV", "LA", "RA")
ALL = "ALL"

MM3_PER_ML = 1000.0


class MeshError(ValueError):
    """Invalid mesh content (bad indices, degenerate faces, bad labels)."""


class MeshFormatError(MeshError):
    """Parse failure in a mesh or label file."""

    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class DegenerateFaceError(MeshError):
    def __init__(self, face_index, message="zero-area face"):
        self.face_index = int(face_index)
        super().__init__(f"{message} (face {self.face_index})")


class OpenSurfaceError(MeshError):
    """A surface expected to be closed has a boundary edge."""


@dataclass(frozen=True, eq=False)
class LabeledMesh:
    """Triangle surface with one component tag per vertex.

    Parameters
    ----------
    vertices : array_like, shape (V, 3)
        Vertex positions in world millimetres.
    faces : array_like, shape (F, 3)
        Vertex-index triples; winding defines the outward normal.
    labels : sequence of str, length V
        Component tag per vertex, each one of ``COMPONENTS``.
    """

    vertices: np.ndarray
    faces: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=np.float64)
        faces = np.array(self.faces, dtype=np.int64)
        labels = np.array(self.labels, dtype=object)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError(f"vertices must have shape (V, 3), got {vertices.shape}")
        if faces.size == 0:
            faces = faces.reshape(0, 3)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshError(f"faces must have shape (F, 3), got {faces.shape}")
        if labels.shape != (len(vertices),):
            raise MeshError(
                f"expected {len(vertices)} labels, got {labels.shape[0] if labels.ndim else 0}"
            )
        if not np.all(np.isfinite(vertices)):
            raise MeshError("vertices contain non-finite coordinates")
        _check_faces(faces, len(vertices))
        bad = [lab for lab in set(labels.tolist()) if lab not in COMPONENTS]
        if bad:
            raise MeshError(f"unknown component labels {sorted(bad)}; expected {COMPONENTS}")
        vertices.setflags(write=False)
        faces.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "labels", labels)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def with_vertices(self, vertices):
        """Same connectivity and labels, new positions."""
        return LabeledMesh(vertices, self.faces, self.labels)

    def component_mask(self, component):
        if component == ALL:
            return np.ones(self.n_vertices, dtype=bool)
        if component not in COMPONENTS:
            raise MeshError(f"unknown component {component!r}")
        return self.labels == component

    def component_faces(self, component):
        """Faces whose three vertices all carry ``component``."""
        if component == ALL:
            return self.faces
        vmask = self.component_mask(component)
        return self.faces[np.all(vmask[self.faces], axis=1)]

    def components(self):
        return [c for c in COMPONENTS if np.any(self.labels == c)]


def _check_faces(faces, n_vertices):
    if faces.size == 0:
        return
    out = np.nonzero((faces < 0) | (faces >= n_vertices))
    if len(out[0]):
        f = out[0][0]
        raise MeshError(
            f"face {f} references vertex index {faces[f, out[1][0]]} "
            f"outside [0, {n_vertices})"
        )
    degenerate = np.nonzero(
        (faces[:, 0] == faces[:, 1])
        | (faces[:, 1] == faces[:, 2])
        | (faces[:, 0] == faces[:, 2])
    )[0]
    if len(degenerate):
        raise DegenerateFaceError(degenerate[0], "face repeats a vertex index")


@dataclass(frozen=True, eq=False)
class MeshSequence:
    """Time-ordered vertex sets sharing one connectivity.

    ``frames`` has shape (N, V, 3); ``topology`` carries faces and labels
    (its own vertex positions are not used).
    """

    frames: np.ndarray
    topology: LabeledMesh

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[2] != 3:
            raise MeshError(f"frames must have shape (N, V, 3), got {frames.shape}")
        if frames.shape[0] < 1:
            raise MeshError("a sequence needs at least one frame")
        if frames.shape[1] != self.topology.n_vertices:
            raise MeshError(
                f"frames have {frames.shape[1]} vertices, topology has "
                f"{self.topology.n_vertices}"
            )
        if not np.all(np.isfinite(frames)):
            raise MeshError("frames contain non-finite coordinates")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @classmethod
    def repeat(cls, mesh, n_frames):
        frames = np.broadcast_to(mesh.vertices, (n_frames,) + mesh.vertices.shape)
        return cls(frames, mesh)

    @classmethod
    def from_meshes(cls, meshes):
        meshes = list(meshes)
        first = meshes[0]
        for t, m in enumerate(meshes[1:], start=1):
            if not (
                np.array_equal(m.faces, first.faces)
                and np.array_equal(m.labels, first.labels)
            ):
                raise MeshError(f"frame {t} does not share the connectivity of frame 0")
        return cls(np.stack([m.vertices for m in meshes]), first)

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def faces(self):
        return self.topology.faces

    @property
    def labels(self):
        return self.topology.labels

    def mesh(self, t):
        return self.topology.with_vertices(self.frames[t])

    def __len__(self):
        return self.n_frames


@dataclass(frozen=True, eq=False)
class EdgeList:
    edges: np.ndarray
    rest_lengths: np.ndarray = field(repr=False)


def unique_edges(faces):
    """Sorted (E, 2) array of undirected edges, each listed once."""
    faces = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def build_edge_list(mesh):
    edges = unique_edges(mesh.faces)
    v = mesh.vertices
    rest = np.linalg.norm(v[edges[:, 1]] - v[edges[:, 0]], axis=1)
    if np.any(rest <= 0):
        i = int(np.argmin(rest))
        raise MeshError(f"edge {tuple(edges[i])} has zero rest length")
    return EdgeList(edges, rest)


def face_normals(mesh_or_vertices, faces=None):
    """Unit normals following face winding.

    Accepts a ``LabeledMesh`` or a ``(vertices, faces)`` pair.
    """
    if faces is None:
        vertices, faces = mesh_or_vertices.vertices, mesh_or_vertices.faces
    else:
        vertices = np.asarray(mesh_or_vertices, dtype=np.float64)
    v0 = vertices[faces[:, 0]]
    cross = np.cross(vertices[faces[:, 1]] - v0, vertices[faces[:, 2]] - v0)
    norm = np.linalg.norm(cross, axis=1)
    zero = np.nonzero(norm == 0)[0]
    if len(zero):
        raise DegenerateFaceError(zero[0])
    return cross / norm[:, None]


def boundary_edges(faces):
    """Directed edges without an opposite partner (empty for closed surfaces)."""
    faces = np.asarray(faces, dtype=np.int64)
    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    n = int(directed.max()) + 1 if len(directed) else 0
    fwd = directed[:, 0] * n + directed[:, 1]
    rev = directed[:, 1] * n + directed[:, 0]
    fwd_unique, counts = np.unique(fwd, return_counts=True)
    if np.any(counts > 1):
        k = fwd_unique[np.argmax(counts > 1)]
        raise MeshError(f"directed edge ({k // n}, {k % n}) used by more than one face")
    missing = ~np.isin(rev, fwd_unique)
    return directed[missing]


def signed_volume(mesh, component=ALL):
    """Enclosed volume in mL via the divergence theorem.

    Negative totals (inward orientation) emit a warning and the absolute
    value is returned.
    """
    faces = mesh.component_faces(component)
    if len(faces) == 0:
        raise OpenSurfaceError(f"component {component!r} has no faces")
    open_edges = boundary_edges(faces)
    if len(open_edges):
        a, b = open_edges[0]
        raise OpenSurfaceError(
            f"component {component!r} is not closed: boundary edge ({a}, {b})"
        )
    vol = _volume_mm3(mesh.vertices, faces) / MM3_PER_ML
    if vol < 0:
        warnings.warn(
            f"component {component!r} has inward orientation "
            f"(signed volume {vol:.6g} mL); returning magnitude",
            stacklevel=2,
        )
        vol = -vol
    return float(vol)


def _volume_mm3(vertices, faces):
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    return np.sum(np.einsum("ij,ij->i", v0, np.cross(v1, v2))) / 6.0


def icosphere(subdivisions=3, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Vertices and outward-wound faces of a subdivided icosahedron.

    Vertex count is ``10 * 4**k + 2`` and face count ``20 * 4**k``.
    """
    t = (1.0 + 5.0**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = np.array(verts, dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(faces, dtype=np.int64)
    for _ in range(subdivisions):
        verts, faces = _subdivide(verts, faces)
    return verts * radius + np.asarray(center, dtype=np.float64), faces


def _subdivide(verts, faces):
    edges = unique_edges(faces)
    n = len(verts)
    mid = verts[edges[:, 0]] + verts[edges[:, 1]]
    mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    key = edges[:, 0] * n + edges[:, 1]
    order = np.argsort(key)
    key = key[order]

    def midpoint(a, b):
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        return n + order[np.searchsorted(key, lo * n + hi)]

    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
    new_faces = np.concatenate(
        [
            np.stack([a, ab, ca], axis=1),
            np.stack([b, bc, ab], axis=1),
            np.stack([c, ca, bc], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ]
    )
    return np.concatenate([verts, mid]), new_faces


# --------------------------------------------------------------------------
# I/O

def labels_path(path):
    return os.path.splitext(str(path))[0] + ".labels"


def load_mesh(path, labels_file=None):
    """Read an OBJ (``v``/``f`` records only) plus its ``.labels`` sidecar."""
    path = str(path)
    vertices, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshFormatError(path, lineno, "vertex needs 3 coordinates")
                try:
                    vertices.append([float(x) for x in parts[1:4]])
                except ValueError as exc:
                    raise MeshFormatError(path, lineno, str(exc)) from None
            elif tag == "f":
                if len(parts) != 4:
                    raise MeshFormatError(
                        path, lineno, f"only triangles supported, got {len(parts) - 1} indices"
                    )
                try:
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                except ValueError as exc:
                    raise MeshFormatError(path, lineno, str(exc)) from None
                if any(i == 0 for i in idx):
                    raise MeshFormatError(path, lineno, "OBJ indices are 1-based")
                # negative indices are relative to the vertices read so far
                idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
                n = len(vertices)
                for i in idx:
                    if i < 0 or i >= n:
                        raise MeshFormatError(
                            path, lineno, f"vertex index {i + 1} out of range (V={n})"
                        )
                faces.append(idx)
            else:
                raise MeshFormatError(path, lineno, f"unsupported record {tag!r}")

    labels_file = labels_file or labels_path(path)
    labels = _read_labels(labels_file)
    if len(labels) != len(vertices):
        raise MeshError(
            f"{labels_file}: {len(labels)} labels for {len(vertices)} vertices"
        )
    verts = np.array(vertices, dtype=np.float64).reshape(-1, 3)
    return LabeledMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3), labels)


def _read_labels(path):
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tag = line.strip()
            if not tag:
                continue
            if tag not in COMPONENTS:
                raise MeshFormatError(path, lineno, f"unknown label {tag!r}")
            labels.append(tag)
    return labels


def save_mesh(mesh, path):
    """Write OBJ + sidecar with round-trip exact coordinates."""
    path = str(path)
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in (mesh.faces + 1).tolist():
            fh.write(f"f {a} {b} {c}\n")
    with open(labels_path(path), "w") as fh:
        fh.write("\n".join(mesh.labels.tolist()))
        fh.write("\n")
