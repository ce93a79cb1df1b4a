"""Edge-length, normal-consistency and temporal-jerk penalties.

Each function returns ``(loss, gradient)``. Vertex inputs may carry a
leading frame axis, in which case the loss is the mean over frames.
"""

from dataclasses import dataclass

import numpy as np

from ._kernels import edge_loss_kernel, normal_loss_kernel
from .mesh import DegenerateFaceError


@dataclass(frozen=True)
class RegularizerWeights:
    lambda_edge: float = 0.8
    lambda_norm: float = 0.8
    lambda_temp: float = 0.1

    def __post_init__(self):
        for name in ("lambda_edge", "lambda_norm", "lambda_temp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def _as_frames(vertices):
    v = np.asarray(vertices, dtype=np.float64)
    if v.ndim == 2:
        return v[None], True
    return v, False


def edge_loss(vertices, edge_list):
    """Mean squared deviation of edge lengths from their rest lengths."""
    v, single = _as_frames(vertices)
    loss, grad = edge_loss_kernel(
        np.ascontiguousarray(v), edge_list.edges, np.asarray(edge_list.rest_lengths, np.float64)
    )
    return float(loss), (grad[0] if single else grad)


def face_adjacency(faces):
    """(K, 2) pairs of face indices sharing an edge, sorted."""
    faces = np.asarray(faces, dtype=np.int64)
    n_faces = len(faces)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    owner = np.tile(np.arange(n_faces), 3)
    n_v = int(faces.max()) + 1
    key = e[:, 0] * n_v + e[:, 1]
    order = np.lexsort((owner, key))
    key, owner = key[order], owner[order]
    same = key[1:] == key[:-1]
    pairs = np.stack([owner[:-1][same], owner[1:][same]], axis=1)
    # edges with more than two faces pair every consecutive owner; fine for a penalty
    return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]


def normal_loss(vertices, faces, pairs=None):
    """Mean of ``1 - cos(angle)`` between normals of edge-adjacent faces."""
    v, single = _as_frames(vertices)
    faces = np.asarray(faces, dtype=np.int64)
    if pairs is None:
        pairs = face_adjacency(faces)
    if len(pairs) == 0:
        return 0.0, np.zeros_like(np.asarray(vertices, dtype=np.float64))
    loss, grad, bad = normal_loss_kernel(np.ascontiguousarray(v), faces, pairs)
    if bad >= 0:
        raise DegenerateFaceError(bad, "zero-area face in normal_loss")
    return float(loss), (grad[0] if single else grad)


def third_difference(frames, cyclic=True):
    """``x[t+2] - 3 x[t+1] + 3 x[t] - x[t-1]`` along axis 0.

    Cyclic mode returns N rows (indices wrap); otherwise the N - 3 rows
    with all four samples in range.
    """
    x = np.asarray(frames, dtype=np.float64)
    if cyclic:
        return (np.roll(x, -2, 0) - np.roll(x, 1, 0)) - 3.0 * (np.roll(x, -1, 0) - x)
    # grouped so that constant trajectories cancel exactly
    return (x[3:] - x[:-3]) - 3.0 * (x[2:-1] - x[1:-2])


def temporal_jerk_loss(frames, cyclic=True):
    """Mean over vertices and frames of the squared third difference norm."""
    frames = np.asarray(getattr(frames, "frames", frames), dtype=np.float64)
    n = frames.shape[0]
    if n < 4:
        raise ValueError(f"temporal jerk needs at least 4 frames, got {n}")
    j = third_difference(frames, cyclic)
    count = j.shape[0] * j.shape[1]
    loss = np.sum(j**2) / count
    gj = 2.0 * j / count
    grad = np.zeros_like(frames)
    if cyclic:
        # adjoint of the stencil: x[t] appears in j[t-2], j[t-1], j[t], j[t+1]
        grad = np.roll(gj, 2, 0) - 3.0 * np.roll(gj, 1, 0) + 3.0 * gj - np.roll(gj, -1, 0)
    else:
        grad[3:] += gj
        grad[2:-1] -= 3.0 * gj
        grad[1:-2] += 3.0 * gj
        grad[:-3] -= gj
    return float(loss), grad

