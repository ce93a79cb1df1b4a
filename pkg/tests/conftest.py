import numpy as np
import pytest

from heartmesh4d.mesh import LabeledMesh, icosphere
from heartmesh4d.planes import PlaneFrame


def sphere_mesh(subdivisions=3, radius=10.0, center=(0.0, 0.0, 0.0), label="LV"):
    v, f = icosphere(subdivisions, radius, center)
    return LabeledMesh(v, f, [label] * len(v))


def unit_cube():
    v = np.array(
        [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
         [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=float
    )
    f = np.array(
        [[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7], [0, 1, 5], [0, 5, 4],
         [2, 3, 7], [2, 7, 6], [1, 2, 6], [1, 6, 5], [0, 4, 7], [0, 7, 3]]
    )
    return LabeledMesh(v, f, ["LV"] * 8)


def axial_plane(z=0.0, view="SAX0", spacing=1.0, extent=(150, 150), center=(0.0, 0.0)):
    """Plane z = const whose pixel grid is centred on ``center``."""
    rows, cols = extent
    origin = np.array(
        [center[0] - spacing * (cols - 1) / 2, center[1] - spacing * (rows - 1) / 2, z]
    )
    return PlaneFrame(view, origin, [0, 0, 1], [1, 0, 0], [0, 1, 0], (spacing, spacing), extent)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_dataset():
    from heartmesh4d.synth import SynthConfig, generate_dataset

    return generate_dataset(SynthConfig())


@pytest.fixture(scope="session")
def small_dataset():
    """Four-frame case with coarse meshes; cheap enough for per-test fits."""
    from heartmesh4d.synth import SynthConfig, generate_dataset

    return generate_dataset(SynthConfig(frames=4, sax_slices=3, max_subdivision=3))


def random_problem(seed=0, n_frames=4, reference=True):
    """About 200 vertices, four planes, masks sliced from a displaced copy."""
    from heartmesh4d.mesh import MeshSequence
    from heartmesh4d.optim import FitProblem
    from heartmesh4d.renderer import RendererConfig
    from heartmesh4d.synth import render_ground_truth

    rng = np.random.default_rng(seed)
    a = sphere_mesh(2, 9.0, label="LV")
    b = sphere_mesh(1, 5.0, center=(14.0, 0, 3.0), label="RA")
    verts = np.concatenate([a.vertices, b.vertices])
    faces = np.concatenate([a.faces, b.faces + a.n_vertices])
    verts = verts + rng.normal(scale=0.4, size=verts.shape)
    template = LabeledMesh(verts, faces, list(a.labels) + list(b.labels))
    planes = [
        axial_plane(z, f"Z{k}", spacing=1.1, extent=(40, 50), center=(4.0, 0.0))
        for k, z in enumerate((-4.0, 0.3, 4.1))
    ]
    side = PlaneFrame(
        "Y0", [-20, 0.7, 15], [0, 1, 0], [1, 0, 0], [0, 0, -1], (1.2, 1.2), (35, 40)
    )
    planes.append(side)
    truth = np.stack([
        verts * (1.0 + 0.05 * np.sin(2 * np.pi * t / n_frames)) + rng.normal(scale=0.3, size=3)
        for t in range(n_frames)
    ])
    truth_seq = MeshSequence(truth, template)
    cfg = RendererConfig()
    masks = render_ground_truth(truth_seq, planes)
    from heartmesh4d.renderer import ViewObservation

    obs = {k: ViewObservation.from_mask(k[0], k[1], m, cfg) for k, m in masks.items()}
    return FitProblem(
        template, planes, obs, n_frames, cfg, reference=truth_seq if reference else None
    )


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
