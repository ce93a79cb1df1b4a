"""On-disk dataset layout, binary PGM masks and pre-flight validation.

A dataset directory holds::

    manifest.json            config echo, frame count, views, sha256 per file
    planes.json              plane affines (see ``planes.planes_to_json``)
    masks/<view>_f<t>.pgm    8-bit binary masks (0 / 255)
    meshes/f<t>.obj          ground-truth meshes with .labels sidecars (optional)
"""

import hashlib
import json
import os
import re
from pathlib import Path

import numpy as np

from .mesh import MeshError, MeshSequence, load_mesh, save_mesh
from .planes import PlaneError, load_planes, save_planes
from .synth import Dataset

MANIFEST = "manifest.json"
PLANES = "planes.json"
FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Pre-flight failure; ``problems`` lists every offending file."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("dataset validation failed:\n  " + "\n  ".join(self.problems))


# --------------------------------------------------------------------------
# PGM

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def write_pgm(path, mask):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    data = np.where(mask.astype(bool), 255, 0).astype(np.uint8)
    rows, cols = data.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (cols, rows))
        fh.write(data.tobytes())


def read_pgm(path):
    """Binary (P5) 8-bit PGM as a boolean array (nonzero = inside)."""
    raw = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _PGM_TOKEN.match(raw, pos)
        if m is None:
            raise ValueError(f"{path}: truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    try:
        cols, rows, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ValueError(f"{path}: malformed PGM header") from None
    if not 0 < maxval < 256:
        raise ValueError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    body = raw[pos:]
    if len(body) != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(rows, cols) > 0


# --------------------------------------------------------------------------
# mesh sequences

def mesh_name(t):
    return f"f{t}.obj"


def mask_name(view, t):
    return f"{view}_f{t}.pgm"


def save_sequence(seq, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in range(seq.n_frames):
        p = directory / mesh_name(t)
        save_mesh(seq.mesh(t), p)
        paths += [p, p.with_suffix(".labels")]
    return paths


def _frame_index(name):
    m = re.fullmatch(r"f(\d+)\.obj", name)
    return int(m.group(1)) if m else None


def load_sequence(directory):
    """Read ``f0.obj .. f<N-1>.obj``; frame numbers must be contiguous from 0."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError([f"{directory}: mesh directory not found"])
    found = sorted(
        (t, n) for n in os.listdir(directory) if (t := _frame_index(n)) is not None
    )
    if not found:
        raise DatasetError([f"{directory}: no f<t>.obj meshes"])
    ts = [t for t, _ in found]
    if ts != list(range(len(ts))):
        missing = sorted(set(range(max(ts) + 1)) - set(ts))
        raise DatasetError([f"{directory / mesh_name(t)}: missing" for t in missing])
    problems, meshes = [], []
    for t, name in found:
        try:
            meshes.append(load_mesh(directory / name))
        except (OSError, MeshError) as exc:
            problems.append(f"{directory / name}: {exc}")
    if problems:
        raise DatasetError(problems)
    try:
        return MeshSequence.from_meshes(meshes)
    except MeshError as exc:
        raise DatasetError([f"{directory}: {exc}"]) from None


# --------------------------------------------------------------------------
# datasets

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_dataset(dataset, directory):
    """Write ``dataset`` in the documented layout and return the manifest dict."""
    directory = Path(directory)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    written = []
    save_planes(dataset.planes, directory / PLANES)
    written.append(directory / PLANES)
    for (view, t), mask in sorted(dataset.masks.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        p = directory / "masks" / mask_name(view, t)
        write_pgm(p, mask)
        written.append(p)
    if dataset.sequence is not None:
        written += save_sequence(dataset.sequence, directory / "meshes")
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": dataset.config,
        "frames": dataset.n_frames,
        "views": [p.view for p in dataset.planes],
        "has_meshes": dataset.sequence is not None,
        "files": {
            p.relative_to(directory).as_posix(): sha256_file(p) for p in sorted(written)
        },
    }
    with open(directory / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def expected_files(manifest):
    views, n = manifest["views"], manifest["frames"]
    files = [PLANES] + [f"masks/{mask_name(v, t)}" for t in range(n) for v in views]
    if manifest.get("has_meshes"):
        for t in range(n):
            files += [f"meshes/f{t}.obj", f"meshes/f{t}.labels"]
    return files


def validate_dataset(directory, require_meshes=False):
    """Check presence, checksums and decodability of every file; no compute.

    Returns the manifest. Raises ``DatasetError`` listing every problem.
    """
    directory = Path(directory)
    mpath = directory / MANIFEST
    if not mpath.is_file():
        raise DatasetError([f"{mpath}: missing"])
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
        n, views = int(manifest["frames"]), list(manifest["views"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DatasetError([f"{mpath}: unreadable manifest ({exc})"]) from None
    if n < 1:
        raise DatasetError([f"{mpath}: frames must be >= 1"])
    if require_meshes and not manifest.get("has_meshes"):
        raise DatasetError([f"{directory}: dataset has no reference meshes"])

    problems = []
    checksums = manifest.get("files", {})
    for rel in expected_files(manifest):
        p = directory / rel
        if not p.is_file():
            problems.append(f"{p}: missing")
        elif rel in checksums and sha256_file(p) != checksums[rel]:
            problems.append(f"{p}: checksum mismatch (file corrupted or modified)")
    if problems:
        raise DatasetError(problems)

    try:
        planes = load_planes(directory / PLANES)
    except (OSError, ValueError, PlaneError) as exc:
        raise DatasetError([f"{directory / PLANES}: {exc}"]) from None
    if [p.view for p in planes] != views:
        problems.append(f"{directory / PLANES}: views {[p.view for p in planes]} != manifest {views}")
    for plane in planes:
        for t in range(n):
            p = directory / "masks" / mask_name(plane.view, t)
            try:
                shape = read_pgm(p).shape
            except (OSError, ValueError) as exc:
                problems.append(str(exc))
                continue
            if shape != tuple(plane.extent):
                problems.append(f"{p}: shape {shape} does not match plane extent {plane.extent}")
    if problems:
        raise DatasetError(problems)
    return manifest


def load_dataset(directory, require_meshes=False, validate=True):
    directory = Path(directory)
    manifest = validate_dataset(directory, require_meshes) if validate else json.loads(
        (directory / MANIFEST).read_text()
    )
    planes = load_planes(directory / PLANES)
    n = int(manifest["frames"])
    masks = {
        (p.view, t): read_pgm(directory / "masks" / mask_name(p.view, t))
        for t in range(n)
        for p in planes
    }
    seq = None
    if manifest.get("has_meshes"):
        seq = load_sequence(directory / "meshes")
        if seq.n_frames != n:
            raise DatasetError([f"{directory / 'meshes'}: {seq.n_frames} meshes for {n} frames"])
    return Dataset(planes, masks, seq, manifest.get("config"))
