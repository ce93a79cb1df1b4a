"""Synthetic beating-heart datasets with exact ground truth.

Chambers are ellipsoids (icosphere-derived) scaled radially over a cosine
cardiac cycle. The LV myocardium is a two-sheet shell around the LV
cavity whose wall volume stays constant, so it thickens in systole.
Planes follow the usual cine layout: three long-axis views rotated about
the LV long axis and a short-axis stack along it.
"""

import dataclasses
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation
from skimage.measure import points_in_poly

from .mesh import LabeledMesh, MeshSequence, icosphere, unique_edges
from .planes import DEFAULT_EXTENT, PlaneFrame, slice_mesh_with_plane

logger = logging.getLogger(__name__)

CHAMBERS = ("LV", "RV", "LA", "RA")

# heart-frame layout: z is the LV long axis (apex at -z), LV cavity centred at 0
_CENTERS = {
    "LV": (0.0, 0.0, 0.0),
    "RV": (-46.0, 0.0, 5.0),
    "LA": (0.0, 0.0, 70.0),
    "RA": (-46.0, 0.0, 65.0),
}

# long-axis views by in-plane angle of their normal about the long axis
_LAX_ANGLES = {"3CH": 30.0, "4CH": 90.0, "2CH": 150.0}


def _default_radii():
    return {"LV": [20.0, 20.0, 42.0], "RV": [12.0, 18.0, 31.0], "LA": [14.0] * 3, "RA": [14.0] * 3}


def _default_amplitudes():
    return {"LV": 0.25, "RV": 0.20, "LA": 0.15, "RA": 0.15}


def _default_phases():
    # fraction of a cycle; atria in antiphase with the ventricles
    return {"LV": 0.0, "RV": 0.0, "LA": 0.5, "RA": 0.5}


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of a synthetic dataset. Lengths in mm.

    ``radii`` are end-diastolic ellipsoid semi-axes per chamber;
    ``amplitudes`` the fractional radial contraction; ``phases`` the
    time (fraction of the cycle) of maximal size.
    """

    seed: int = 0
    frames: int = 25
    sax_slices: int = 9
    sax_gap: float = 10.0
    radii: dict = field(default_factory=_default_radii)
    amplitudes: dict = field(default_factory=_default_amplitudes)
    phases: dict = field(default_factory=_default_phases)
    myo_thickness: float = 10.0
    myo_gap: float = 1.0
    extent: tuple = DEFAULT_EXTENT
    spacing: float = 1.2
    max_edge_px: float = 2.0
    max_subdivision: int = 4
    random_pose: bool = True

    def __post_init__(self):
        object.__setattr__(self, "extent", tuple(int(e) for e in self.extent))
        self.validate()

    def validate(self):
        def fail(path, msg):
            raise SynthConfigError(f"{path}: {msg}")

        if int(self.frames) != self.frames or self.frames < 4:
            fail("frames", f"must be an integer >= 4, got {self.frames}")
        if int(self.sax_slices) != self.sax_slices or self.sax_slices < 1:
            fail("sax_slices", f"must be an integer >= 1, got {self.sax_slices}")
        if not self.sax_gap > 0:
            fail("sax_gap", "must be > 0")
        for name, table in (("radii", self.radii), ("amplitudes", self.amplitudes),
                            ("phases", self.phases)):
            missing = [c for c in CHAMBERS if c not in table]
            if missing:
                fail(name, f"missing chamber(s) {missing}")
            extra = sorted(set(table) - set(CHAMBERS))
            if extra:
                fail(name, f"unknown chamber(s) {extra}")
        for c in CHAMBERS:
            r = self.radii[c]
            if len(r) != 3:
                fail(f"radii.{c}", "needs three semi-axes")
            if not all(x > 0 for x in r):
                fail(f"radii.{c}", f"must be > 0, got {r}")
            a = self.amplitudes[c]
            if not 0 <= a < 0.5:
                fail(f"amplitudes.{c}", f"must lie in [0, 0.5), got {a}")
        if not self.myo_thickness > 0:
            fail("myo_thickness", "must be > 0")
        if not self.myo_gap > 0:
            fail("myo_gap", "must be > 0")
        if len(self.extent) != 2 or min(self.extent) < 1:
            fail("extent", f"must be two positive integers, got {self.extent}")
        if not self.spacing > 0:
            fail("spacing", "must be > 0")
        if not self.max_edge_px > 0:
            fail("max_edge_px", "must be > 0")
        if self.max_subdivision < 0:
            fail("max_subdivision", "must be >= 0")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["extent"] = list(self.extent)
        return d

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise SynthConfigError(f"unknown synth config field(s): {unknown}")
        kwargs = dict(data)
        for key in ("radii", "amplitudes", "phases"):
            if key in kwargs:
                merged = {"radii": _default_radii, "amplitudes": _default_amplitudes,
                          "phases": _default_phases}[key]()
                if not isinstance(kwargs[key], dict):
                    raise SynthConfigError(f"{key}: must be an object keyed by chamber")
                merged.update(kwargs[key])
                kwargs[key] = merged
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise SynthConfigError(str(exc)) from None


# --------------------------------------------------------------------------
# geometry

def _pose(config):
    if not config.random_pose:
        return np.eye(3), np.zeros(3)
    rng = np.random.default_rng(config.seed)
    rot = Rotation.random(random_state=rng).as_matrix()
    shift = rng.uniform(-10.0, 10.0, size=3)
    return rot, shift


def _pick_subdivision(semi_axes, max_edge, max_subdivision):
    unit_v, unit_f = icosphere(0)
    for k in range(max_subdivision + 1):
        if k:
            unit_v, unit_f = icosphere(k)
        e = unique_edges(unit_f)
        pts = unit_v * semi_axes
        if np.max(np.linalg.norm(pts[e[:, 0]] - pts[e[:, 1]], axis=1)) <= max_edge:
            return k
    return max_subdivision


def _ellipsoid(semi_axes, center, subdivision, inward=False):
    v, f = icosphere(subdivision)
    v = v * np.asarray(semi_axes) + np.asarray(center)
    if inward:
        f = f[:, [0, 2, 1]]
    return v, f


@dataclass(frozen=True, eq=False)
class _Part:
    """One closed sheet of the heart and the chamber whose cycle drives it."""

    label: str
    driver: str
    center: np.ndarray
    semi_axes: np.ndarray
    vertices: np.ndarray
    faces: np.ndarray
    # for an epicardial sheet: volume ratio (enclosed inner sheet / this sheet)
    inner_ratio: float = 0.0

    def scale(self, config, t):
        s = scale_factor(config, self.driver, t)
        if not self.inner_ratio:
            return s
        # the wall between the sheets keeps its volume, so it thickens as the cavity shrinks
        return float(np.cbrt(1.0 - (1.0 - s**3) * self.inner_ratio))


def _heart_parts(config):
    max_edge = config.max_edge_px * config.spacing
    parts = []
    lv = np.asarray(config.radii["LV"], dtype=float)
    endo = lv + config.myo_gap
    epi = endo + config.myo_thickness
    specs = [
        ("LV", "LV", _CENTERS["LV"], lv, False),
        ("LV_MYO", "LV", _CENTERS["LV"], epi, False),
        ("LV_MYO", "LV", _CENTERS["LV"], endo, True),
        ("RV", "RV", _CENTERS["RV"], np.asarray(config.radii["RV"], float), False),
        ("LA", "LA", _CENTERS["LA"], np.asarray(config.radii["LA"], float), False),
        ("RA", "RA", _CENTERS["RA"], np.asarray(config.radii["RA"], float), False),
    ]
    for label, driver, center, semi, inward in specs:
        k = _pick_subdivision(semi, max_edge, config.max_subdivision)
        v, f = _ellipsoid(semi, center, k, inward)
        ratio = float(np.prod(endo) / np.prod(epi)) if semi is epi else 0.0
        parts.append(_Part(label, driver, np.asarray(center, float), semi, v, f, ratio))
    return parts


def scale_factor(config, chamber, t):
    """Radial scale of ``chamber`` at frame ``t`` (1 at maximal size)."""
    a = config.amplitudes[chamber]
    phase = 2.0 * np.pi * (t / config.frames - config.phases[chamber])
    return 1.0 - a * (1.0 - np.cos(phase)) / 2.0


def generate_heart(config=None):
    """Beating five-component heart as a ``MeshSequence`` in world mm."""
    config = config or SynthConfig()
    parts = _heart_parts(config)
    rot, shift = _pose(config)

    verts, faces, labels = [], [], []
    offset = 0
    for p in parts:
        verts.append(p.vertices)
        faces.append(p.faces + offset)
        labels.extend([p.label] * len(p.vertices))
        offset += len(p.vertices)
    faces = np.concatenate(faces)

    frames = []
    for t in range(config.frames):
        frame = []
        for p in parts:
            frame.append(p.center + p.scale(config, t) * (p.vertices - p.center))
        frames.append(np.concatenate(frame) @ rot.T + shift)
    frames = np.stack(frames)

    _check_overlap(parts, config)
    topology = LabeledMesh(frames[0], faces, labels)
    return MeshSequence(frames, topology)


def _check_overlap(parts, config):
    """Warn when a chamber group's vertices enter another group's envelope.

    Groups are keyed by driving chamber; the envelope of a group is its
    largest ellipsoid (the epicardial sheet for the LV).
    """
    groups = {}
    for p in parts:
        groups.setdefault(p.driver, []).append(p)
    hull = {k: max(v, key=lambda p: float(np.prod(p.semi_axes))) for k, v in groups.items()}
    for t in range(config.frames):
        for a, members in groups.items():
            pts = np.concatenate([p.center + p.scale(config, t) * (p.vertices - p.center) for p in members])
            for b, env in hull.items():
                if b == a:
                    continue
                z = (pts - env.center) / (env.semi_axes * env.scale(config, t))
                n_in = int(np.count_nonzero(np.sum(z * z, axis=1) < 1.0))
                if n_in:
                    warnings.warn(
                        f"frame {t}: {n_in} {a} vertices inside the {b} envelope",
                        stacklevel=3,
                    )
                    return


def long_axis(config=None):
    """World-space ``(point, direction)`` of the LV long axis."""
    config = config or SynthConfig()
    rot, shift = _pose(config)
    return rot @ np.asarray(_CENTERS["LV"]) + shift, rot @ np.array([0.0, 0.0, 1.0])


def _plane(view, center, axis_u, axis_v, config):
    rows, cols = config.extent
    s = config.spacing
    n = np.cross(axis_u, axis_v)
    origin = center - ((cols - 1) / 2.0) * s * axis_u - ((rows - 1) / 2.0) * s * axis_v
    return PlaneFrame(view, origin, n, axis_u, axis_v, (s, s), (rows, cols))


def generate_planes(config=None):
    """Three long-axis planes and a short-axis stack, in world coordinates.

    Long-axis planes contain the LV long axis and are 60 degrees apart;
    short-axis planes are orthogonal to it, ``sax_gap`` mm apart and
    centred on the LV cavity.
    """
    config = config or SynthConfig()
    rot, shift = _pose(config)
    zhat = np.array([0.0, 0.0, 1.0])
    center = np.array([-13.5, 0.0, 15.0])
    planes = []
    for view in ("2CH", "3CH", "4CH"):
        theta = np.radians(_LAX_ANGLES[view])
        n = np.array([np.cos(theta), np.sin(theta), 0.0])
        v = -zhat
        u = np.cross(v, n)
        c = center - np.dot(center, n) * n
        planes.append(_plane(view, c, u, v, config))
    k = config.sax_slices
    for i in range(k):
        z = (i - (k - 1) / 2.0) * config.sax_gap + _CENTERS["LV"][2]
        c = np.array([center[0], center[1], z])
        planes.append(_plane(f"SAX{i}", c, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), config))
    return [p.transformed(rot, shift) for p in planes]


def fill_polylines(polylines, extent):
    """Even-odd fill of closed (row, col) polylines sampled at pixel centres."""
    rows, cols = extent
    rr, cc = np.mgrid[0:rows, 0:cols]
    pts = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
    inside = np.zeros(rows * cols, dtype=bool)
    for poly in polylines:
        if len(poly) < 3:
            continue
        lo = np.floor(poly.min(axis=0)).astype(int)
        hi = np.ceil(poly.max(axis=0)).astype(int)
        box = (
            (pts[:, 0] >= lo[0]) & (pts[:, 0] <= hi[0])
            & (pts[:, 1] >= lo[1]) & (pts[:, 1] <= hi[1])
        )
        idx = np.nonzero(box)[0]
        if len(idx):
            inside[idx] ^= points_in_poly(pts[idx], poly)
    return inside.reshape(rows, cols)


def render_ground_truth(sequence, planes):
    """Binary masks ``{(view, t): (rows, cols) bool}`` by slicing and filling."""
    masks = {}
    for t in range(sequence.n_frames):
        mesh = sequence.mesh(t)
        for plane in planes:
            loops = slice_mesh_with_plane(mesh, plane)
            polys = [p for comp in loops.values() for p in comp]
            masks[(plane.view, t)] = fill_polylines(polys, plane.extent)
    return masks


@dataclass(eq=False)
class Dataset:
    """Meshes (optional), planes and masks of one case."""

    planes: list
    masks: dict
    sequence: MeshSequence = None
    config: dict = None

    @property
    def n_frames(self):
        return 1 + max(t for _, t in self.masks)

    def observations(self, renderer=None):
        from .renderer import ViewObservation

        return {
            key: ViewObservation.from_mask(key[0], key[1], mask, renderer)
            for key, mask in self.masks.items()
        }


def generate_dataset(config=None):
    config = config or SynthConfig()
    seq = generate_heart(config)
    planes = generate_planes(config)
    masks = render_ground_truth(seq, planes)
    return Dataset(planes, masks, seq, config.to_dict())
