"""Soft vertex renderer and boundary loss for plane-wise contour supervision.

A vertex at normal distance ``R`` from a plane is weighted by a falling
sigmoid window, mapped to an association probability
``q = 1 - exp(-mu * window(R))`` and bilinearly splatted at its projected
pixel position. Splats are combined per pixel by probabilistic OR and the
resulting map is scored against a signed distance map of the observed
mask. Gradients with respect to vertex positions are analytic.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.special import expit
from skimage.measure import find_contours

from ._kernels import render_plane_kernel

logger = logging.getLogger(__name__)

Q_MIN = 1e-6

SUPERVISION_MODES = ("band", "region")


class RenderError(ValueError):
    pass


class MissingObservationError(RenderError):
    def __init__(self, view, frame):
        self.view, self.frame = view, frame
        super().__init__(f"no observation for view {view!r}, frame {frame}")


@dataclass(frozen=True)
class RendererConfig:
    """Renderer hyperparameters.

    ``window_halfwidth`` and ``window_softness`` are in mm. ``supervision``
    chooses how a mask becomes a distance map: ``"band"`` scores distance
    to the mask boundary minus ``band_halfwidth`` pixels, ``"region"``
    uses the plain signed distance (negative inside).
    """

    mu: float = 8.0
    window_halfwidth: float = 2.5
    window_softness: float = 0.5
    splat: str = "bilinear"
    supervision: str = "band"
    band_halfwidth: float = 1.0

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be > 0, got {self.mu}")
        if not self.window_halfwidth > 0:
            raise ValueError(f"window_halfwidth must be > 0, got {self.window_halfwidth}")
        if not self.window_softness > 0:
            raise ValueError(f"window_softness must be > 0, got {self.window_softness}")
        if self.splat != "bilinear":
            raise ValueError(f"unsupported splat {self.splat!r}")
        if self.supervision not in SUPERVISION_MODES:
            raise ValueError(f"supervision must be one of {SUPERVISION_MODES}")
        if not self.band_halfwidth > 0:
            raise ValueError("band_halfwidth must be > 0")

    @property
    def cutoff_distance(self):
        """Distance beyond which q <= Q_MIN."""
        ell = -np.log1p(-Q_MIN) / self.mu
        return self.window_halfwidth + self.window_softness * np.log(1.0 / ell - 1.0)


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    view: str
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class ViewObservation:
    """Observed binary mask of one plane at one frame plus its distance map."""

    view: str
    frame: int
    mask: np.ndarray
    sdm: np.ndarray

    @classmethod
    def from_mask(cls, view, frame, mask, config=None):
        config = config or RendererConfig()
        mask = np.asarray(mask, dtype=bool)
        if config.supervision == "region":
            sdm = signed_distance_map(mask)
        else:
            sdm = boundary_band_map(mask, config.band_halfwidth)
        mask.setflags(write=False)
        sdm.setflags(write=False)
        return cls(view, int(frame), mask, sdm)


def _boundary_pixels(mask):
    """Inside pixels with a 4-neighbour outside (image border counts as outside)."""
    padded = np.pad(mask, 1, constant_values=False)
    eroded = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(2, 1))
    return (padded & ~eroded)[1:-1, 1:-1]


def signed_distance_map(mask):
    """Euclidean distance to the nearest boundary pixel, negative inside.

    Zero exactly on boundary pixels. An empty mask maps to a constant
    ``+diagonal`` (no boundary anywhere).
    """
    mask = np.asarray(mask, dtype=bool)
    boundary = _boundary_pixels(mask)
    if not boundary.any():
        return np.full(mask.shape, float(np.hypot(*mask.shape)))
    dist = ndimage.distance_transform_edt(~boundary)
    return np.where(mask, -dist, dist)


def boundary_band_map(mask, halfwidth=1.0):
    """Distance (pixels) to the sub-pixel mask edge minus ``halfwidth``.

    The edge is the 0.5 iso-contour of the mask, so the map is negative
    only within ``halfwidth`` of it and rises linearly on both sides.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any() or mask.all():
        return np.full(mask.shape, float(np.hypot(*mask.shape)))
    padded = np.pad(mask.astype(np.float64), 1)
    edge = []
    for c in find_contours(padded, 0.5):
        c = c - 1.0
        seg = np.linalg.norm(np.diff(c, axis=0), axis=1)
        # densify so the nearest sample is within 0.05 px of the polyline
        n = np.maximum(np.ceil(seg / 0.1).astype(int), 1)
        t = np.concatenate([np.arange(k) / k for k in n])
        i = np.repeat(np.arange(len(seg)), n)
        edge.append(c[i] + t[:, None] * (c[i + 1] - c[i]))
    rows, cols = mask.shape
    grid = np.stack(np.mgrid[0:rows, 0:cols], axis=-1).reshape(-1, 2).astype(np.float64)
    dist, _ = cKDTree(np.concatenate(edge)).query(grid)
    return dist.reshape(rows, cols) - halfwidth


def _border(shape):
    b = np.zeros(shape, dtype=bool)
    b[0, :] = b[-1, :] = b[:, 0] = b[:, -1] = True
    return b


def sigmoid_window(R, config):
    """Falling sigmoid ``1 / (1 + exp((R - h) / tau))``."""
    z = (np.asarray(R, dtype=np.float64) - config.window_halfwidth) / config.window_softness
    return expit(-z)


def association_probability(R, config):
    return -np.expm1(-config.mu * sigmoid_window(R, config))


# --------------------------------------------------------------------------
# splatting

def _splat_terms(row, col, rows, cols):
    """Bilinear corner indices, weights and weight derivatives.

    Returns arrays of shape (4, K): corner row/col, weight, dw/drow, dw/dcol.
    """
    r0 = np.floor(row)
    c0 = np.floor(col)
    fr = row - r0
    fc = col - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    gr, gc = 1.0 - fr, 1.0 - fc
    rr = np.stack([r0, r0, r0 + 1, r0 + 1])
    cc = np.stack([c0, c0 + 1, c0, c0 + 1])
    w = np.stack([gr * gc, gr * fc, fr * gc, fr * fc])
    dw_drow = np.stack([-gc, -fc, gc, fc])
    dw_dcol = np.stack([-gr, gr, -fr, fr])
    valid = (rr >= 0) & (rr < rows) & (cc >= 0) & (cc < cols)
    return rr, cc, w, dw_drow, dw_dcol, valid


def splat_probability_map(mesh_vertices, plane, config):
    """Probability map of one plane for one vertex set."""
    verts = np.asarray(mesh_vertices, dtype=np.float64).reshape(1, -1, 3)
    q_map = _render_plane(verts, plane, config, sdm=None)[0]
    return ProbabilityMap(plane.view, q_map.reshape(plane.extent))


def boundary_loss(Q, obs):
    """``sum(sdm * Q) / n_pixels``."""
    values = Q.values if isinstance(Q, ProbabilityMap) else np.asarray(Q)
    if values.shape != obs.sdm.shape:
        raise RenderError(
            f"extent mismatch for view {obs.view!r}: map {values.shape}, "
            f"observation {obs.sdm.shape}"
        )
    return float(np.sum(obs.sdm * values) / values.size)


def _render_plane(frames, plane, config, sdm):
    """Render all frames of one plane; optionally score and differentiate.

    ``frames`` is (N, V, 3). With ``sdm`` None returns ``(Q,)`` with Q of
    shape (N, P). Otherwise ``sdm`` is (N, P) and the return value is
    ``(per_frame_loss (N,), grad (N, V, 3))`` for the boundary loss of
    each frame.
    """
    n_frames, n_verts, _ = frames.shape
    rows, cols = plane.extent
    n_pix = rows * cols

    d = (frames - plane.origin) @ plane.normal
    R = np.abs(d)
    active = R < config.cutoff_distance
    fi, vi = np.nonzero(active)
    R = R[fi, vi]
    ell = sigmoid_window(R, config)
    q = -np.expm1(-config.mu * ell)
    keep = q > Q_MIN
    fi, vi, R, ell, q = fi[keep], vi[keep], R[keep], ell[keep], q[keep]

    rel = frames[fi, vi] - plane.origin
    col = rel @ plane.axis_u / plane.spacing[0]
    row = rel @ plane.axis_v / plane.spacing[1]
    rr, cc, w, dw_drow, dw_dcol, valid = _splat_terms(row, col, rows, cols)

    key = fi[None, :] * n_pix + rr * cols + cc
    a = w * q[None, :]
    key_v, a_v = key[valid], a[valid]
    log_keep = np.bincount(key_v, weights=np.log1p(-a_v), minlength=n_frames * n_pix)
    Q = -np.expm1(log_keep)
    if sdm is None:
        return (Q.reshape(n_frames, n_pix),)

    sdm_flat = np.asarray(sdm, dtype=np.float64).reshape(-1)
    per_pixel = sdm_flat * Q
    losses = per_pixel.reshape(n_frames, n_pix).sum(axis=1) / n_pix

    grad = np.zeros((n_frames, n_verts, 3))
    if len(q) == 0:
        return losses, grad
    # dL/da at every corner; invalid corners contribute nothing
    g = np.zeros_like(a)
    g[valid] = sdm_flat[key_v] / n_pix * (1.0 - Q[key_v]) / (1.0 - a_v)
    dL_dq = np.sum(g * w, axis=0)
    dL_dw = g * q[None, :]
    dL_drow = np.sum(dL_dw * dw_drow, axis=0)
    dL_dcol = np.sum(dL_dw * dw_dcol, axis=0)

    dq_dR = config.mu * (1.0 - q) * (-ell * (1.0 - ell) / config.window_softness)
    sign = np.sign(d[fi, vi])
    g_vert = (
        (dL_dq * dq_dR * sign)[:, None] * plane.normal
        + (dL_drow / plane.spacing[1])[:, None] * plane.axis_v
        + (dL_dcol / plane.spacing[0])[:, None] * plane.axis_u
    )
    # (fi, vi) pairs are unique, so plain fancy-index assignment is safe
    grad[fi, vi] = g_vert
    return losses, grad


def check_observations(planes, observations, n_frames):
    """Raise ``MissingObservationError`` for the first absent (view, frame)."""
    for t in range(n_frames):
        for plane in planes:
            obs = observations.get((plane.view, t))
            if obs is None:
                raise MissingObservationError(plane.view, t)
            if obs.sdm.shape != plane.extent:
                raise RenderError(
                    f"observation {plane.view!r} frame {t} has extent "
                    f"{obs.sdm.shape}, plane expects {plane.extent}"
                )


def render_loss(frames, planes, observations, config, threads=1):
    """Mean over frames of the summed per-plane boundary loss.

    ``frames`` is a ``MeshSequence`` or an (N, V, 3) array; ``observations``
    maps ``(view, frame)`` to ``ViewObservation``. Returns
    ``(loss, gradient)`` with gradient of shape (N, V, 3). Per-plane work
    may run on ``threads`` workers; each plane adds exactly one term per
    vertex and buffers are reduced in plane order, so results do not
    depend on the thread count.
    """
    frames = getattr(frames, "frames", frames)
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    n_frames = frames.shape[0]
    check_observations(planes, observations, n_frames)
    sdms = [
        np.stack([observations[(p.view, t)].sdm for t in range(n_frames)]).reshape(n_frames, -1)
        for p in planes
    ]

    def work(plane, sdm, grad):
        return render_plane_kernel(
            frames, plane.origin, plane.normal, plane.axis_u, plane.axis_v,
            plane.spacing[0], plane.spacing[1], plane.extent[0], plane.extent[1],
            config.window_halfwidth, config.window_softness, config.mu,
            config.cutoff_distance, Q_MIN, sdm, grad,
        )

    per_frame = np.zeros(n_frames)
    if threads > 1 and len(planes) > 1:
        buffers = [np.zeros_like(frames) for _ in planes]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            losses = list(pool.map(work, planes, sdms, buffers))
        grad = np.zeros_like(frames)
        for loss, buf in zip(losses, buffers):
            per_frame += loss
            grad += buf
    else:
        grad = np.zeros_like(frames)
        for plane, sdm in zip(planes, sdms):
            per_frame += work(plane, sdm, grad)
    return float(per_frame.sum() / n_frames), grad / n_frames


def render_loss_reference(frames, planes, observations, config):
    """Vectorised NumPy evaluation of ``render_loss`` (slower; used for cross-checks)."""
    frames = np.asarray(getattr(frames, "frames", frames), dtype=np.float64)
    n_frames = frames.shape[0]
    check_observations(planes, observations, n_frames)
    per_frame = np.zeros(n_frames)
    grad = np.zeros_like(frames)
    for plane in planes:
        sdm = np.stack([observations[(plane.view, t)].sdm for t in range(n_frames)])
        losses, g = _render_plane(frames, plane, config, sdm.reshape(n_frames, -1))
        per_frame += losses
        grad += g
    return float(per_frame.sum() / n_frames), grad / n_frames


def render_maps(frames, planes, config):
    """``{(view, t): ProbabilityMap}`` for every plane and frame."""
    frames = np.asarray(getattr(frames, "frames", frames), dtype=np.float64)
    out = {}
    for plane in planes:
        (Q,) = _render_plane(frames, plane, config, sdm=None)
        for t in range(frames.shape[0]):
            out[(plane.view, t)] = ProbabilityMap(plane.view, Q[t].reshape(plane.extent))
    return out
