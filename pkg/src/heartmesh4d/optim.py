"""Objective assembly, Adam fitting over per-frame displacements, and gradient checks."""

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .mesh import LabeledMesh, MeshSequence, build_edge_list
from .planes import signed_plane_distance, world_to_pixel
from .regularizers import edge_loss, face_adjacency, normal_loss, temporal_jerk_loss
from .renderer import (
    Q_MIN,
    RendererConfig,
    association_probability,
    check_observations,
    render_loss,
)

logger = logging.getLogger(__name__)

TERMS = ("mse", "dr", "edge", "norm", "temp")


class NumericalError(FloatingPointError):
    """Non-finite loss or gradient during fitting."""

    def __init__(self, step, term):
        self.step, self.term = step, term
        super().__init__(f"non-finite value in term {term!r} at step {step}")


@dataclass(frozen=True)
class LossWeights:
    mse: float = 10.0
    dr: float = 5.0
    edge: float = 0.8
    norm: float = 0.8
    temp: float = 0.1

    def __post_init__(self):
        for name in TERMS:
            if getattr(self, name) < 0:
                raise ValueError(f"weight {name!r} must be nonnegative")


@dataclass(frozen=True)
class FitConfig:
    """Loss weights, renderer settings and Adam settings; serialised as flat JSON.

    ``smoothing`` > 0 replaces each raw gradient ``g`` by ``(I + s L)^-1 g``
    before the Adam update, with ``L`` the graph Laplacian of the template
    edges. Contour evidence then reaches vertices far from every plane in
    a few steps instead of hundreds. ``smoothing = 0`` is plain Adam.
    """

    lambda_mse: float = 10.0
    lambda_dr: float = 5.0
    lambda_edge: float = 0.8
    lambda_norm: float = 0.8
    lambda_temp: float = 0.1
    steps: int = 2000
    learning_rate: float = 0.05
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    smoothing: float = 0.0
    mu: float = 8.0
    window_halfwidth: float = 2.5
    window_softness: float = 0.5
    supervision: str = "band"
    band_halfwidth: float = 1.0

    def __post_init__(self):
        for name in ("lambda_mse", "lambda_dr", "lambda_edge", "lambda_norm", "lambda_temp"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name}: must be nonnegative, got {getattr(self, name)}")
        if isinstance(self.steps, bool) or int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps: must be an integer >= 1, got {self.steps}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate: must be > 0, got {self.learning_rate}")
        if self.optimizer != "adam":
            raise ValueError(f"optimizer: only 'adam' is supported, got {self.optimizer!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1/beta2: must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon: must be > 0")
        if not self.smoothing >= 0:
            raise ValueError(f"smoothing: must be nonnegative, got {self.smoothing}")
        self.renderer  # validates the renderer fields

    @property
    def renderer(self):
        return RendererConfig(
            mu=self.mu,
            window_halfwidth=self.window_halfwidth,
            window_softness=self.window_softness,
            supervision=self.supervision,
            band_halfwidth=self.band_halfwidth,
        )

    @property
    def weights(self):
        return LossWeights(
            self.lambda_mse, self.lambda_dr, self.lambda_edge, self.lambda_norm, self.lambda_temp
        )

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ValueError(f"unknown fit config field(s): {unknown}")
        kwargs = {}
        for key, value in data.items():
            kind = known[key].type
            try:
                converted = kind(value)
                if kind is int and converted != float(value):
                    raise ValueError
            except (TypeError, ValueError):
                raise ValueError(f"{key}: cannot interpret {value!r} as {kind.__name__}") from None
            kwargs[key] = converted
        return cls(**kwargs)


@dataclass(frozen=True, eq=False)
class FitProblem:
    """Everything a fit needs except the optimiser settings.

    ``observations`` maps ``(view, frame)`` to ``ViewObservation``.
    ``reference`` enables the MSE term. ``init`` is an optional (N, V, 3)
    starting point; by default the template is repeated over all frames.
    """

    template: LabeledMesh
    planes: tuple
    observations: dict
    n_frames: int
    renderer: RendererConfig = field(default_factory=RendererConfig)
    reference: MeshSequence = None
    init: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "planes", tuple(self.planes))
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        check_observations(self.planes, self.observations, self.n_frames)
        shape = (self.n_frames, self.template.n_vertices, 3)
        if self.reference is not None and self.reference.frames.shape != shape:
            raise ValueError(
                f"reference has shape {self.reference.frames.shape}, expected {shape}"
            )
        if self.init is not None:
            init = np.array(self.init, dtype=np.float64)
            if init.shape != shape:
                raise ValueError(f"init has shape {init.shape}, expected {shape}")
            init.setflags(write=False)
            object.__setattr__(self, "init", init)

    @cached_property
    def edge_list(self):
        return build_edge_list(self.template)

    @cached_property
    def face_pairs(self):
        return face_adjacency(self.template.faces)

    def initial_frames(self):
        if self.init is not None:
            return self.init.copy()
        return np.repeat(self.template.vertices[None], self.n_frames, axis=0)


def mse_loss(pred, ref):
    """Mean squared coordinate error over frames, vertices and axes.

    Gradient is ``2 (pred - ref) / (N * V * 3)``.
    """
    p = np.asarray(getattr(pred, "frames", pred), dtype=np.float64)
    r = np.asarray(getattr(ref, "frames", ref), dtype=np.float64)
    if p.shape != r.shape:
        raise ValueError(f"shape mismatch: pred {p.shape}, ref {r.shape}")
    diff = p - r
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def term_functions(problem, threads=1):
    """``{name: f(frames) -> (loss, grad)}`` for terms applicable to ``problem``."""
    terms = {}
    if problem.reference is not None:
        ref = problem.reference.frames
        terms["mse"] = lambda x: mse_loss(x, ref)
    terms["dr"] = lambda x: render_loss(
        x, problem.planes, problem.observations, problem.renderer, threads=threads
    )
    terms["edge"] = lambda x: edge_loss(x, problem.edge_list)
    terms["norm"] = lambda x: normal_loss(x, problem.template.faces, problem.face_pairs)
    if problem.n_frames >= 4:
        terms["temp"] = temporal_jerk_loss
    return terms


def total_loss(pred, problem, weights=None, threads=1):
    """Weighted objective, its gradient, and the unweighted per-term values.

    Terms that do not apply (no reference for MSE, fewer than 4 frames for
    the jerk penalty) appear in the breakdown as ``None``.
    """
    weights = weights or LossWeights()
    frames = np.asarray(getattr(pred, "frames", pred), dtype=np.float64)
    fns = term_functions(problem, threads)
    total = 0.0
    grad = np.zeros_like(frames)
    breakdown = dict.fromkeys(TERMS)
    grads = {}
    for name in TERMS:
        if name not in fns:
            continue
        value, g = fns[name](frames)
        breakdown[name] = value
        grads[name] = g
        w = getattr(weights, name)
        total += w * value
        grad += w * g
    return total, grad, breakdown, grads


def weighted_total(breakdown, weights):
    return sum(getattr(weights, k) * v for k, v in breakdown.items() if v is not None)


class Adam:
    """Plain Adam with bias correction and a fixed learning rate."""

    def __init__(self, shape, lr=0.05, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(eq=False)
class FitReport:
    trace: list
    sequence: MeshSequence
    wall_time: float
    final_loss: float
    final_terms: dict
    converged: bool

    @property
    def initial_loss(self):
        return self.trace[0]["total"]

    @property
    def improved(self):
        return self.final_loss < self.initial_loss

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("step",) + ("total",) + TERMS)
            for row in self.trace:
                writer.writerow(
                    [row["step"], repr(row["total"])]
                    + ["NA" if row[k] is None else repr(row[k]) for k in TERMS]
                )


def _converged(totals, window=50, tol=1e-6):
    if len(totals) <= window:
        return False
    old, new = totals[-window - 1], totals[-1]
    return abs(new - old) <= tol * max(abs(old), np.finfo(float).tiny)


def laplacian_smoother(edges, n_vertices, strength):
    """Callable applying ``(I + strength * L)^-1`` along the vertex axis."""
    e = np.asarray(edges, dtype=np.int64)
    ones = np.ones(2 * len(e))
    adj = sp.coo_matrix(
        (ones, (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(n_vertices,) * 2
    ).tocsr()
    lap = sp.diags(np.asarray(adj.sum(axis=1)).ravel()) - adj
    lu = splu((sp.identity(n_vertices) + strength * lap).tocsc())

    def apply(grad):
        n, v, k = grad.shape
        flat = np.ascontiguousarray(grad.transpose(1, 0, 2).reshape(v, n * k))
        return lu.solve(flat).reshape(v, n, k).transpose(1, 0, 2)

    return apply


def fit(problem, config=None, threads=1, progress=None):
    """Minimise the weighted objective with Adam over per-frame displacements.

    Always runs ``config.steps`` updates. The trace records the loss at
    each iterate before its update; ``final_loss`` is evaluated after the
    last update. ``progress`` is called as ``progress(step, total)``.
    """
    config = config or FitConfig()
    if problem.renderer != config.renderer:
        raise ValueError(
            f"renderer settings differ between problem ({problem.renderer}) "
            f"and fit config ({config.renderer})"
        )
    weights = config.weights
    start = time.perf_counter()
    base = problem.initial_frames()
    disp = np.zeros_like(base)
    opt = Adam(base.shape, config.learning_rate, config.beta1, config.beta2, config.epsilon)
    smooth = None
    if config.smoothing > 0:
        smooth = laplacian_smoother(
            problem.edge_list.edges, problem.template.n_vertices, config.smoothing
        )
    trace = []

    for step in range(config.steps):
        # overflow shows up as a non-finite term and is reported by _check_finite
        with np.errstate(over="ignore", invalid="ignore"):
            total, grad, terms, grads = total_loss(base + disp, problem, weights, threads)
        _check_finite(step, terms, grads)
        trace.append(dict(step=step, total=total, **terms))
        if progress is not None:
            progress(step, total)
        if smooth is not None:
            grad = smooth(grad)
        disp = opt.step(disp, grad)

    with np.errstate(over="ignore", invalid="ignore"):
        final, _, final_terms, grads = total_loss(base + disp, problem, weights, threads)
    _check_finite(config.steps, final_terms, grads)
    seq = MeshSequence(base + disp, problem.template)
    report = FitReport(
        trace=trace,
        sequence=seq,
        wall_time=time.perf_counter() - start,
        final_loss=final,
        final_terms=final_terms,
        converged=_converged([r["total"] for r in trace] + [final]),
    )
    logger.info(
        "fit: %d steps, loss %.6g -> %.6g in %.1fs",
        config.steps, report.initial_loss, final, report.wall_time,
    )
    return report


def _check_finite(step, terms, grads):
    for name, value in terms.items():
        if value is None:
            continue
        if not np.isfinite(value) or not np.all(np.isfinite(grads[name])):
            raise NumericalError(step, name)


# --------------------------------------------------------------------------
# gradient checking

@dataclass
class GradcheckResult:
    term: str
    max_rel_error: float
    max_abs_error_small: float
    n_checked: int
    n_skipped: int

    def passed(self, rtol=1e-4, atol=1e-8):
        return self.max_rel_error < rtol and self.max_abs_error_small < atol


SMALL_GRADIENT = 1e-10


def _dr_has_kink(frames, coord, step, problem):
    """True when a central-difference stencil crosses a non-smooth point of L_DR.

    Non-smooth points: the vertex crossing a plane (|d| kink), the splat
    footprint changing pixel cell, or the probability cutoff switching.
    """
    t, i, k = coord
    lo = frames[t, i].copy()
    hi = frames[t, i].copy()
    lo[k] -= step
    hi[k] += step
    pts = np.stack([lo, hi])
    cutoff = problem.renderer.cutoff_distance
    for plane in problem.planes:
        d = signed_plane_distance(pts, plane)
        q = association_probability(np.abs(d), problem.renderer)
        live = (np.abs(d) < cutoff) & (q > Q_MIN)
        if live[0] != live[1]:
            return True
        if not live.any():
            continue
        if np.sign(d[0]) != np.sign(d[1]):
            return True
        row, col = world_to_pixel(pts, plane)
        if np.floor(row[0]) != np.floor(row[1]) or np.floor(col[0]) != np.floor(col[1]):
            return True
    return False


def _dr_saturated(frames, coord, problem, saturation):
    """True when the vertex has ``1 - q < saturation`` on some plane.

    There q = 1 - exp(-mu * l) is flat, the analytic gradient is a small
    difference of near-cancelling terms and a 1e-3 mm central difference
    carries truncation error comparable to the gradient itself.
    """
    if saturation <= 0:
        return False
    t, i, _ = coord
    for plane in problem.planes:
        d = signed_plane_distance(frames[t, i][None], plane)
        if association_probability(np.abs(d), problem.renderer)[0] > 1.0 - saturation:
            return True
    return False


def gradcheck(problem, weights=None, n_coords=200, step=1e-3, seed=0, point=None, terms=None,
              threads=1, saturation=1e-3):
    """Compare analytic term gradients with central differences.

    ``point`` is the (N, V, 3) configuration to test (default: the
    problem's initial frames). Coordinates whose stencil straddles a
    non-differentiable point of the rendering loss are redrawn; the number
    redrawn is reported as ``n_skipped``.
    """
    if not step > 0:
        raise ValueError(f"step must be > 0, got {step}")
    if n_coords < 1:
        raise ValueError("n_coords must be >= 1")
    x = problem.initial_frames() if point is None else np.array(point, dtype=np.float64)
    fns = term_functions(problem, threads)
    names = [n for n in TERMS if n in fns and (terms is None or n in terms)]
    results = {}
    for name in names:
        fn = fns[name]
        rng = np.random.default_rng(seed)
        _, analytic = fn(x)
        order = rng.permutation(x.size)
        rel_err, abs_err, checked, skipped = 0.0, 0.0, 0, 0
        for flat in order:
            if checked >= n_coords:
                break
            coord = np.unravel_index(flat, x.shape)
            if name == "dr" and (
                _dr_has_kink(x, coord, step, problem)
                or _dr_saturated(x, coord, problem, saturation)
            ):
                skipped += 1
                continue
            orig = x[coord]
            x[coord] = orig + step
            f_plus = fn(x)[0]
            x[coord] = orig - step
            f_minus = fn(x)[0]
            x[coord] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic[coord]
            if abs(a) < SMALL_GRADIENT:
                abs_err = max(abs_err, abs(a - numeric))
            else:
                rel_err = max(rel_err, abs(a - numeric) / max(abs(a), abs(numeric)))
            checked += 1
        results[name] = GradcheckResult(name, rel_err, abs_err, checked, skipped)
    return results
