import numpy as np
import pytest

from heartmesh4d.mesh import LabeledMesh, MeshSequence, signed_volume
from heartmesh4d.metrics import (
    FULL,
    MetricError,
    MetricReport,
    _directed,
    chamfer_hausdorff,
    contour_metrics,
    evaluate,
    mask_contours,
    mesh_jitter,
    nearest_distances_bruteforce,
    resample_polyline,
    sequence_chamfer,
    vertexwise_errors,
    volume_curve,
    volume_error,
)

from conftest import random_rotation, sphere_mesh


def two_part_sequence(rng, n_frames=5):
    a = sphere_mesh(2, 6.0, label="LV")
    b = sphere_mesh(1, 4.0, center=(20, 0, 0), label="RA")
    v = np.concatenate([a.vertices, b.vertices])
    f = np.concatenate([a.faces, b.faces + a.n_vertices])
    mesh = LabeledMesh(v, f, list(a.labels) + list(b.labels))
    frames = v + rng.normal(scale=0.2, size=(n_frames,) + v.shape)
    return MeshSequence(frames, mesh)


def circle(r, n=400, centre=(50.0, 50.0)):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.column_stack([centre[0] + r * np.sin(t), centre[1] + r * np.cos(t)])


def test_vertexwise_examples(rng):
    seq = two_part_sequence(rng)
    assert vertexwise_errors(seq, seq)[FULL] == (0.0, 0.0)
    moved = MeshSequence(seq.frames + [2.0, 0, 0], seq.mesh(0))
    mae, mse = vertexwise_errors(moved, seq)[FULL]
    assert mae == pytest.approx(2.0, abs=1e-12) and mse == pytest.approx(4.0, abs=1e-12)


def test_vertexwise_matches_loops(rng):
    seq = two_part_sequence(rng)
    pred = MeshSequence(seq.frames + rng.normal(size=seq.frames.shape), seq.mesh(0))
    out = vertexwise_errors(pred, seq)
    for name in (FULL, "LV", "RA"):
        d, d2 = [], []
        for t in range(seq.n_frames):
            for i in range(len(seq.labels)):
                if name != FULL and seq.labels[i] != name:
                    continue
                e = pred.frames[t, i] - seq.frames[t, i]
                s = e[0] * e[0] + e[1] * e[1] + e[2] * e[2]
                d.append(np.sqrt(s))
                d2.append(s)
        assert abs(out[name][0] - np.mean(d)) < 1e-12
        assert abs(out[name][1] - np.mean(d2)) < 1e-12


def test_vertexwise_shape_mismatch(rng):
    seq = two_part_sequence(rng)
    with pytest.raises(MetricError, match="correspondence"):
        vertexwise_errors(seq.frames[:2], seq.frames)


def test_chamfer_examples():
    assert chamfer_hausdorff([[0, 0, 0]], [[3, 4, 0]]) == (5.0, 5.0)
    pts = np.random.default_rng(0).normal(size=(50, 3))
    assert chamfer_hausdorff(pts, pts) == (0.0, 0.0)
    with pytest.raises(MetricError):
        chamfer_hausdorff(np.zeros((0, 3)), pts)


@pytest.mark.parametrize("seed", range(50))
def test_spatial_index_equals_bruteforce(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(100, 3)) * 10, rng.normal(size=(100, 3)) * 10
    assert np.array_equal(_directed(a, b), nearest_distances_bruteforce(a, b))
    da, db = nearest_distances_bruteforce(a, b), nearest_distances_bruteforce(b, a)
    cd, hd = chamfer_hausdorff(a, b)
    assert cd == (da.mean() + db.mean()) / 2.0
    assert hd == max(da.max(), db.max())


def test_chamfer_properties(rng):
    a, b = rng.normal(size=(80, 3)), rng.normal(size=(60, 3)) + 1
    cd, hd = chamfer_hausdorff(a, b)
    assert (cd, hd) == chamfer_hausdorff(b, a)
    assert hd >= cd
    rot, shift = random_rotation(rng), rng.normal(size=3) * 10
    cd2, hd2 = chamfer_hausdorff(a @ rot.T + shift, b @ rot.T + shift)
    assert abs(cd2 - cd) < 1e-9 and abs(hd2 - hd) < 1e-9


def test_sequence_chamfer_structures(rng):
    seq = two_part_sequence(rng)
    out = sequence_chamfer(seq, seq)
    assert set(out) == {FULL, "LV", "RA"}
    assert all(v == (0.0, 0.0) for v in out.values())


def test_resample_spacing():
    poly = circle(10, n=7)
    res = resample_polyline(poly, 0.5)
    steps = np.linalg.norm(np.diff(np.vstack([res, res[:1]]), axis=0), axis=1)
    assert steps.max() <= 0.5 + 1e-12


def test_contour_identical_and_disjoint():
    c = [circle(10)]
    assert contour_metrics(c, c, spacing=1.2) == (0.0, 100.0)
    far = [circle(5, centre=(300.0, 300.0))]
    assert contour_metrics(c, far)[1] == 0.0
    assert contour_metrics([], c) == (None, None)


def test_contour_concentric_circles():
    r, d, spacing = 20.0, 3.0, 1.2
    mcd, _ = contour_metrics([circle(r, 4000)], [circle(r + d, 4000)], spacing=spacing, step=0.05)
    assert abs(mcd - d * spacing) / (d * spacing) < 0.02


def test_bf_tends_to_100_with_threshold():
    _, bf = contour_metrics([circle(10)], [circle(14)], threshold_px=1e6)
    assert bf == 100.0


def test_mask_contours_of_square():
    mask = np.zeros((20, 20), bool)
    mask[5:15, 5:15] = True
    (c,) = mask_contours(mask)
    assert c[:, 0].min() == 4.5 and c[:, 0].max() == 14.5
    assert mask_contours(np.zeros((4, 4), bool)) == []


def test_volume_error_scaling(rng):
    ref = MeshSequence.repeat(sphere_mesh(2, 10.0), 3)
    s = 1.01
    pred = MeshSequence(ref.frames * s, ref.mesh(0))
    vol = signed_volume(ref.mesh(0))
    assert volume_error(pred, ref) == pytest.approx(abs(s**3 - 1) * vol, rel=1e-9)
    assert volume_error(ref, ref) == 0.0


def test_volume_curve_composes_signed_volume(rng):
    seq = two_part_sequence(rng)
    curve = volume_curve(seq)
    for t in range(seq.n_frames):
        assert abs(curve[t] - signed_volume(seq.mesh(t))) < 1e-12


def test_jitter_bruteforce(rng):
    n = 12
    t = np.arange(n)
    x = rng.uniform(1, 3, size=(1, 8, 3)) * np.sin(2 * np.pi * t / n)[:, None, None]
    total = 0.0
    for k in range(n):
        for i in range(8):
            j = x[(k + 2) % n, i] - 3 * x[(k + 1) % n, i] + 3 * x[k, i] - x[(k - 1) % n, i]
            total += np.sqrt(np.sum(j * j))
    assert abs(mesh_jitter(x)[FULL] - total / (n * 8)) < 1e-12


def test_jitter_static_and_linear():
    assert mesh_jitter(np.ones((5, 3, 3)))[FULL] == 0.0
    lin = np.arange(6.0)[:, None, None] * np.ones((6, 2, 3))
    assert mesh_jitter(lin, cyclic=False)[FULL] == 0.0
    with pytest.raises(MetricError):
        mesh_jitter(np.ones((3, 2, 3)))


def test_report_csv(tmp_path):
    rep = MetricReport()
    rep.add("structure", FULL, "CD_mm", 1.5)
    rep.add("view", "SAX0", "MCD_mm", None)
    rep.write_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines == ["scope,name,metric,value", "structure,FullMesh,CD_mm,1.5", "view,SAX0,MCD_mm,NA"]
    assert rep.get("structure", FULL, "CD_mm") == 1.5


def test_evaluate_self_is_perfect(small_dataset):
    ds = small_dataset
    rep = evaluate(ds.sequence, ds.sequence, ds.planes, ds.masks)
    for scope, name, metric, value in rep.rows:
        if metric in ("MAE_mm", "MSE_mm2", "CD_mm", "HD_mm", "Evol_mL"):
            assert value == 0.0
        if metric == "BF_pct" and value is not None:
            assert value > 95.0
        if metric == "MCD_mm" and value is not None:
            assert value < 0.5


def test_evaluate_translated(small_dataset):
    ds = small_dataset
    moved = MeshSequence(ds.sequence.frames + [2.0, 0, 0], ds.sequence.mesh(0))
    rep = evaluate(moved, ds.sequence, ds.planes, ds.masks)
    assert rep.get("structure", FULL, "MAE_mm") == pytest.approx(2.0, abs=1e-12)
    assert all(v > 0 for s, n, m, v in rep.rows if m == "MCD_mm" and v is not None)
