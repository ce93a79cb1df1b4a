"""Evaluation metrics for fitted mesh sequences.

Distances are in mm. Point-set nearest neighbours come from a k-d tree,
but every reported distance is recomputed with the same arithmetic as a
brute-force double loop, so results match an O(n^2) scan bit for bit.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from skimage.measure import find_contours

from .mesh import ALL, COMPONENTS, MeshSequence, signed_volume
from .planes import slice_mesh_with_plane
from .regularizers import third_difference

FULL = "FullMesh"
STRUCTURES = (FULL,) + COMPONENTS


class MetricError(ValueError):
    pass


def _frames(seq):
    return np.asarray(getattr(seq, "frames", seq), dtype=np.float64)


def _check_pair(pred, ref):
    p, r = _frames(pred), _frames(ref)
    if p.shape != r.shape:
        raise MetricError(f"correspondence mismatch: pred {p.shape} vs ref {r.shape}")
    return p, r


def structure_masks(labels):
    """``{structure: boolean vertex mask}``; absent components are skipped."""
    labels = np.asarray(labels)
    out = {FULL: np.ones(len(labels), dtype=bool)}
    for c in COMPONENTS:
        m = labels == c
        if m.any():
            out[c] = m
    return out


# --------------------------------------------------------------------------
# vertex-wise and point-set distances

def vertexwise_errors(pred, ref, labels=None):
    """``{structure: (MAE mm, MSE mm^2)}`` under vertex correspondence.

    Without ``labels`` (and without a ``MeshSequence`` to take them from)
    only the full-mesh entry is returned.
    """
    p, r = _check_pair(pred, ref)
    if labels is None and isinstance(ref, MeshSequence):
        labels = ref.labels
    sq = np.sum((p - r) ** 2, axis=-1)
    dist = np.sqrt(sq)
    masks = structure_masks(labels) if labels is not None else {FULL: slice(None)}
    return {name: (float(dist[..., m].mean()), float(sq[..., m].mean())) for name, m in masks.items()}


def _directed(a, b, tree=None):
    """Exact nearest distance from each row of ``a`` to the set ``b``."""
    tree = tree or cKDTree(b)
    d0, _ = tree.query(a)
    # gather every candidate the tree could have tied with, then take the
    # minimum using the brute-force formula
    radius = d0 * (1.0 + 1e-9) + 1e-12
    out = np.empty(len(a))
    for i, cand in enumerate(tree.query_ball_point(a, radius)):
        diff = a[i] - b[cand]
        out[i] = np.min(np.sqrt(np.sum(diff * diff, axis=-1)))
    return out


def nearest_distances_bruteforce(a, b):
    """O(n m) reference used by the tests."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty(len(a))
    for i in range(len(a)):
        diff = a[i] - b
        out[i] = np.min(np.sqrt(np.sum(diff * diff, axis=-1)))
    return out


def chamfer_hausdorff(pred_points, ref_points):
    """Symmetric Chamfer distance and Hausdorff distance between point sets.

    CD is ``(mean_a min_b |a-b| + mean_b min_a |a-b|) / 2`` with unsquared
    distances; HD is the larger of the two directed maxima.
    """
    a = np.asarray(pred_points, dtype=np.float64)
    b = np.asarray(ref_points, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise MetricError("chamfer_hausdorff needs two nonempty point sets")
    da = _directed(a, b)
    db = _directed(b, a)
    cd = (da.mean() + db.mean()) / 2.0
    hd = max(da.max(), db.max())
    return float(cd), float(hd)


def sequence_chamfer(pred, ref, labels=None):
    """``{structure: (CD, HD)}`` averaged over frames."""
    p, r = _check_pair(pred, ref)
    if labels is None and isinstance(ref, MeshSequence):
        labels = ref.labels
    masks = structure_masks(labels) if labels is not None else {FULL: np.ones(p.shape[1], bool)}
    out = {}
    for name, m in masks.items():
        vals = np.array([chamfer_hausdorff(p[t][m], r[t][m]) for t in range(len(p))])
        out[name] = (float(vals[:, 0].mean()), float(vals[:, 1].mean()))
    return out


# --------------------------------------------------------------------------
# contours

def resample_polyline(poly, step=0.5, closed=True):
    """Uniform arc-length resampling with spacing at most ``step``."""
    poly = np.asarray(poly, dtype=np.float64)
    if len(poly) < 2:
        return poly.copy()
    pts = np.vstack([poly, poly[:1]]) if closed else poly
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    if total == 0.0:
        return poly[:1].copy()
    n = max(int(np.ceil(total / step)), 1)
    s = np.arange(n) * (total / n) if closed else np.linspace(0.0, total, n + 1)
    return np.stack([np.interp(s, arc, pts[:, k]) for k in range(pts.shape[1])], axis=1)


def mask_contours(mask):
    """Marching-squares boundary of a binary mask at level 0.5, (row, col)."""
    mask = np.asarray(mask, dtype=np.float64)
    if not mask.any():
        return []
    padded = np.pad(mask, 1)
    return [c - 1.0 for c in find_contours(padded, 0.5)]


def _closed(poly):
    return len(poly) > 2 and np.array_equal(poly[0], poly[-1])


def _contour_points(contours, step):
    pts = []
    for c in contours:
        c = np.asarray(c, dtype=np.float64)
        if _closed(c):
            c = c[:-1]
        pts.append(resample_polyline(c, step, closed=True))
    return np.concatenate(pts) if pts else np.zeros((0, 2))


def contour_metrics(pred_contours, ref_contours, spacing=1.0, threshold_px=1.0, step=0.5):
    """Mean contour distance (mm) and boundary F-score (%) between contour sets.

    Contours are (row, col) polylines in pixels. ``spacing`` is a scalar or
    a (col, row) pair in mm per pixel. Returns ``(None, None)`` when either
    side has no contour.
    """
    a = _contour_points(pred_contours, step)
    b = _contour_points(ref_contours, step)
    if len(a) == 0 or len(b) == 0:
        return None, None
    su, sv = (float(spacing), float(spacing)) if np.ndim(spacing) == 0 else map(float, spacing)
    scale = np.array([sv, su])
    a_mm, b_mm = a * scale, b * scale
    da = _directed(a_mm, b_mm)
    db = _directed(b_mm, a_mm)
    mcd = (da.mean() + db.mean()) / 2.0
    tol = threshold_px * np.sqrt(su * sv)
    precision = np.mean(da <= tol)
    recall = np.mean(db <= tol)
    bf = 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)
    return float(mcd), float(100.0 * bf)


def view_contour_metrics(pred, planes, masks, threshold_px=1.0):
    """``{view: (MCD, BF)}`` averaged over frames where both sides have contours."""
    out = {}
    for plane in planes:
        vals = []
        for t in range(pred.n_frames):
            loops = slice_mesh_with_plane(pred.mesh(t), plane)
            pc = [p for comp in loops.values() for p in comp]
            rc = mask_contours(masks[(plane.view, t)])
            m, b = contour_metrics(pc, rc, plane.spacing, threshold_px)
            if m is not None:
                vals.append((m, b))
        out[plane.view] = tuple(map(float, np.mean(vals, axis=0))) if vals else (None, None)
    return out


# --------------------------------------------------------------------------
# volumes and jitter

def volume_curve(seq, component=ALL):
    return np.array([signed_volume(seq.mesh(t), component) for t in range(seq.n_frames)])


def volume_error(pred, ref):
    """Mean over frames of the absolute whole-heart volume difference (mL)."""
    _check_pair(pred, ref)
    return float(np.mean(np.abs(volume_curve(pred) - volume_curve(ref))))


def mesh_jitter(seq, labels=None, cyclic=True):
    """``{structure: J_m}``: mean norm of the third temporal difference."""
    x = _frames(seq)
    if x.shape[0] < 4:
        raise MetricError(f"mesh jitter needs at least 4 frames, got {x.shape[0]}")
    if labels is None and isinstance(seq, MeshSequence):
        labels = seq.labels
    norms = np.linalg.norm(third_difference(x, cyclic), axis=-1)
    masks = structure_masks(labels) if labels is not None else {FULL: slice(None)}
    return {name: float(norms[:, m].mean()) for name, m in masks.items()}


# --------------------------------------------------------------------------
# report

CSV_COLUMNS = ("scope", "name", "metric", "value")


@dataclass
class MetricReport:
    """Flat table of ``(scope, name, metric, value)`` rows.

    ``scope`` is ``structure`` or ``view``; ``value`` is None when a metric
    is absent (no contour on either side for every frame).
    """

    rows: list = field(default_factory=list)
    volumes: dict = field(default_factory=dict)

    def add(self, scope, name, metric, value):
        self.rows.append((scope, name, metric, None if value is None else float(value)))

    def get(self, scope, name, metric):
        for s, n, m, v in self.rows:
            if (s, n, m) == (scope, name, metric):
                return v
        raise KeyError((scope, name, metric))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for s, n, m, v in self.rows:
                w.writerow([s, n, m, "NA" if v is None else repr(v)])

    def write_volumes(self, path):
        """Per-frame volume curves (mL), one column per structure and source."""
        keys = list(self.volumes)
        n = len(next(iter(self.volumes.values()))) if keys else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame"] + keys)
            for t in range(n):
                w.writerow([t] + [repr(float(self.volumes[k][t])) for k in keys])


def evaluate(pred, ref, planes=None, masks=None, threshold_px=1.0):
    """Full metric suite of ``pred`` against reference meshes and masks."""
    _check_pair(pred, ref)
    if not np.array_equal(pred.faces, ref.faces):
        raise MetricError("correspondence mismatch: pred and ref faces differ")
    report = MetricReport()
    labels = ref.labels
    errors = vertexwise_errors(pred, ref, labels)
    chamfer = sequence_chamfer(pred, ref, labels)
    jitter = mesh_jitter(pred, labels) if pred.n_frames >= 4 else {}
    for name in errors:
        report.add("structure", name, "MAE_mm", errors[name][0])
        report.add("structure", name, "MSE_mm2", errors[name][1])
        report.add("structure", name, "CD_mm", chamfer[name][0])
        report.add("structure", name, "HD_mm", chamfer[name][1])
        if name in jitter:
            report.add("structure", name, "Jm_mm_per_frame3", jitter[name])
    report.add("structure", FULL, "Evol_mL", volume_error(pred, ref))

    for comp in COMPONENTS:
        if comp in structure_masks(labels):
            report.volumes[f"pred_{comp}"] = volume_curve(pred, comp)
            report.volumes[f"ref_{comp}"] = volume_curve(ref, comp)

    if planes is not None and masks is not None:
        for view, (mcd, bf) in view_contour_metrics(pred, planes, masks, threshold_px).items():
            report.add("view", view, "MCD_mm", mcd)
            report.add("view", view, "BF_pct", bf)
    return report
