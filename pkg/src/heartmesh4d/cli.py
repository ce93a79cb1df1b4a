"""Command-line entry points: ``synth``, ``fit``, ``eval`` and ``gradcheck``.

Exit codes: 0 success, 1 invalid input or usage, 2 non-finite values during
optimisation, 3 gradient check over tolerance. Every run writes
``run_manifest.json`` next to its outputs.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    DatasetError,
    load_dataset,
    load_sequence,
    save_dataset,
    save_sequence,
    sha256_file,
)
from .mesh import MeshError, load_mesh
from .metrics import MetricError, evaluate
from .optim import TERMS, FitConfig, FitProblem, NumericalError, fit, gradcheck
from .planes import PlaneError
from .synth import SynthConfig, SynthConfigError, generate_dataset

logger = logging.getLogger("heartmesh4d")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_TOLERANCE = 0, 1, 2, 3
MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; 2 is reserved for numerical failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# config helpers

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data, pairs):
    """Apply ``key=value`` strings; dotted keys address nested objects."""
    data = json.loads(json.dumps(data))
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"--set {key}: {p!r} is not an object")
        node[leaf] = _parse_value(value)
    return data


def _read_json(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return data


def canonical_sha256(obj):
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _file_checksums(paths, root=None):
    out = {}
    for p in sorted(Path(p) for p in paths):
        key = p.relative_to(root).as_posix() if root else str(p)
        out[key] = sha256_file(p)
    return out


def _tree_files(directory):
    return sorted(p for p in Path(directory).rglob("*") if p.is_file())


def write_manifest(out_dir, subcommand, config, inputs, outputs, wall_time):
    out_dir = Path(out_dir)
    manifest = {
        "subcommand": subcommand,
        "tool_version": __version__,
        "config": config,
        "config_sha256": canonical_sha256(config),
        "inputs": inputs,
        "outputs": _file_checksums([p for p in outputs if Path(p).name != MANIFEST_NAME], out_dir),
        "wall_time_s": wall_time,
    }
    with open(out_dir / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def _threads(value):
    return max(1, os.cpu_count() or 1) if value is None else value


# --------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    start = time.perf_counter()
    data = apply_overrides(_read_json(args.config), args.set)
    config = SynthConfig.from_dict(data)
    out = Path(args.out)
    dataset = generate_dataset(config)
    save_dataset(dataset, out)
    logger.info("wrote %d planes x %d frames to %s", len(dataset.planes), dataset.n_frames, out)
    inputs = {"config_file": sha256_file(args.config)} if args.config else {}
    write_manifest(out, "synth", config.to_dict(), inputs, _tree_files(out),
                   time.perf_counter() - start)
    return EXIT_OK


def _fit_config(args):
    data = apply_overrides(_read_json(args.config), args.set)
    if getattr(args, "steps", None) is not None:
        data["steps"] = args.steps
    try:
        return FitConfig.from_dict(data)
    except ValueError as exc:
        raise UsageError(f"fit config: {exc}") from None


def _template(args, dataset):
    if args.init == "ground-truth-ed":
        if dataset.sequence is None:
            raise UsageError("--init ground-truth-ed needs reference meshes in the dataset")
        return dataset.sequence.mesh(0)
    if args.template is None:
        raise UsageError("--init template needs --template MESH.obj")
    return load_mesh(args.template)


def cmd_fit(args):
    start = time.perf_counter()
    config = _fit_config(args)
    # pre-flight: every input is read and checked before the first step
    needs_meshes = args.reference or args.init == "ground-truth-ed"
    dataset = load_dataset(args.dataset, require_meshes=needs_meshes)
    template = _template(args, dataset)
    reference = dataset.sequence if args.reference else None
    problem = FitProblem(
        template, dataset.planes, dataset.observations(config.renderer), dataset.n_frames,
        config.renderer, reference=reference,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    every = max(1, config.steps // 20)

    def progress(step, total):
        if step % every == 0:
            logger.info("step %d/%d loss %.6g", step, config.steps, total)

    report = fit(problem, config, threads=_threads(args.threads), progress=progress)
    outputs = save_sequence(report.sequence, out / "meshes")
    report.write_trace(out / "trace.csv")
    with open(out / "fit_config.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    summary = {
        "steps": config.steps,
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "final_terms": report.final_terms,
        "converged": report.converged,
        "improved": report.improved,
    }
    with open(out / "report.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    outputs += [out / "trace.csv", out / "fit_config.json", out / "report.json"]
    logger.info("loss %.6g -> %.6g in %.1fs", report.initial_loss, report.final_loss,
                report.wall_time)
    inputs = {"dataset": _file_checksums(_tree_files(args.dataset), Path(args.dataset))}
    if args.template:
        inputs["template"] = sha256_file(args.template)
    run_config = dict(config.to_dict(), init=args.init, reference=args.reference)
    write_manifest(out, "fit", run_config, inputs, outputs, time.perf_counter() - start)
    return EXIT_OK


def _pred_sequence(path):
    path = Path(path)
    return load_sequence(path / "meshes" if (path / "meshes").is_dir() else path)


def cmd_eval(args):
    start = time.perf_counter()
    reference = load_dataset(args.reference, require_meshes=True)
    pred = _pred_sequence(args.pred)
    ref = reference.sequence
    if pred.frames.shape != ref.frames.shape:
        raise MetricError(
            f"correspondence mismatch: prediction has {pred.n_frames} frames x "
            f"{pred.frames.shape[1]} vertices, reference {ref.n_frames} x {ref.frames.shape[1]}"
        )
    report = evaluate(pred, ref, reference.planes, reference.masks, args.threshold_px)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    volumes = Path(args.volumes) if args.volumes else out.with_name(out.stem + "_volumes.csv")
    report.write_volumes(volumes)
    for scope, name, metric, value in report.rows:
        if scope == "structure" and name == "FullMesh":
            logger.info("%s %s", metric, "NA" if value is None else f"{value:.4f}")
    inputs = {
        "pred": _file_checksums(_tree_files(args.pred), Path(args.pred)),
        "reference": _file_checksums(_tree_files(args.reference), Path(args.reference)),
    }
    write_manifest(out.parent, "eval", {"threshold_px": args.threshold_px}, inputs,
                   [out, volumes], time.perf_counter() - start)
    return EXIT_OK


def cmd_gradcheck(args):
    start = time.perf_counter()
    config = _fit_config(args)
    dataset = load_dataset(args.dataset)
    if args.template:
        template = load_mesh(args.template)
    elif dataset.sequence is not None:
        template = dataset.sequence.mesh(0)
    else:
        raise UsageError("dataset has no meshes; pass --template MESH.obj")
    n = dataset.n_frames
    problem = FitProblem(
        template, dataset.planes, dataset.observations(config.renderer), n, config.renderer,
        reference=dataset.sequence if dataset.sequence is not None
        and dataset.sequence.frames.shape[1] == template.n_vertices else None,
    )
    rng = np.random.default_rng(config.seed)
    point = problem.initial_frames() + rng.normal(scale=args.jitter, size=(n, template.n_vertices, 3))
    results = gradcheck(problem, config.weights, args.n_coords, args.step, seed=config.seed,
                        point=point, threads=_threads(args.threads), saturation=args.saturation)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    failed = []
    header = ("term", "max_rel_error", "max_abs_error_small", "n_checked", "n_skipped", "pass")
    rows = []
    for name in TERMS:
        r = results.get(name)
        if r is None:
            continue
        ok = r.passed(args.tol, args.atol)
        if not ok:
            failed.append(name)
        rows.append((name, repr(float(r.max_rel_error)), repr(float(r.max_abs_error_small)),
                     r.n_checked, r.n_skipped, "yes" if ok else "no"))
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    print(f"{'term':<6} {'max rel err':>12} {'max abs err':>12} {'checked':>8} {'skipped':>8}  pass")
    for name, rel, ab, nc, ns, ok in rows:
        print(f"{name:<6} {float(rel):12.3e} {float(ab):12.3e} {nc:8d} {ns:8d}  {ok}")
    run_config = dict(config.to_dict(), n_coords=args.n_coords, step=args.step, tol=args.tol,
                      atol=args.atol, jitter=args.jitter, saturation=args.saturation)
    inputs = {"dataset": _file_checksums(_tree_files(args.dataset), Path(args.dataset))}
    write_manifest(out.parent, "gradcheck", run_config, inputs, [out], time.perf_counter() - start)
    if failed:
        logger.error("gradient check over tolerance for: %s", ", ".join(failed))
        return EXIT_TOLERANCE
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return v


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return v


def build_parser():
    parser = _Parser(prog="heartmesh4d", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="SynthConfig JSON (defaults when omitted)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field; dotted keys reach nested fields")
    p.add_argument("--out", required=True, help="dataset directory to write")
    p.set_defaults(func=cmd_synth)

    def fit_options(p):
        p.add_argument("--config", help="FitConfig JSON (defaults when omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a FitConfig field")
        p.add_argument("--template", help="template mesh (.obj with .labels sidecar)")
        p.add_argument("--threads", type=_positive_int, default=None,
                       help="worker threads (default: all cores); results do not depend on it")

    p = sub.add_parser("fit", help="fit a mesh sequence to a dataset's masks")
    p.add_argument("dataset", help="dataset directory")
    fit_options(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--init", choices=("template", "ground-truth-ed"), default="template",
                   help="starting sequence: the --template mesh, or the dataset's frame-0 mesh")
    p.add_argument("--steps", type=_positive_int, help="override the step budget")
    p.add_argument("--reference", action="store_true",
                   help="enable the MSE term against the dataset's meshes")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="score fitted meshes against a reference dataset")
    p.add_argument("pred", help="fit output directory, or a directory of f<t>.obj meshes")
    p.add_argument("reference", help="reference dataset directory (with meshes)")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--volumes", help="per-frame volume CSV (default: <out stem>_volumes.csv)")
    p.add_argument("--threshold-px", type=_positive_float, default=1.0,
                   help="boundary F-score threshold in pixels")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    p.add_argument("dataset", help="dataset directory")
    fit_options(p)
    p.add_argument("--n-coords", type=_positive_int, default=200)
    p.add_argument("--step", type=_positive_float, default=1e-3, help="central-difference step, mm")
    p.add_argument("--tol", type=_positive_float, default=1e-4, help="relative error tolerance")
    p.add_argument("--atol", type=_positive_float, default=1e-8,
                   help="absolute tolerance where the analytic gradient is below 1e-10")
    p.add_argument("--jitter", type=float, default=0.5,
                   help="std of the random offset (mm) applied to the evaluation point")
    p.add_argument("--saturation", type=float, default=1e-3,
                   help="skip L_DR coordinates whose vertex has 1 - q below this on any plane "
                        "(0 keeps every coordinate)")
    p.add_argument("--out", default="gradcheck.csv", help="error table CSV")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        logger.error("%s", exc)
        return EXIT_NUMERICAL
    except DatasetError as exc:
        logger.error("%s", exc)
        return EXIT_INVALID
    except (UsageError, SynthConfigError, MeshError, PlaneError, MetricError, ValueError,
            OSError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
