"""Scikit-learn style front end for fitting one multi-view case.

The estimator is transductive: ``fit`` optimises a mesh sequence for the
observations it is given, and ``predict`` returns that sequence. Calling
``predict`` with a different dataset raises instead of refitting, since
nothing learned on one case transfers to another.
"""

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .mesh import LabeledMesh, MeshSequence
from .metrics import FULL, sequence_chamfer
from .optim import FitConfig, FitProblem, fit

INIT_MODES = ("template", "ground-truth-ed")


def check_frames(frames, n_frames=None, n_vertices=None, name="frames"):
    """Validate an (N, V, 3) float array of vertex positions and return a copy."""
    arr = np.asarray(getattr(frames, "frames", frames))
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"{name}: expected shape (N, V, 3), got {arr.shape}")
    arr = check_array(
        arr.reshape(arr.shape[0], -1), dtype=np.float64, ensure_all_finite=True,
        input_name=name,
    ).reshape(arr.shape)
    if n_frames is not None and arr.shape[0] != n_frames:
        raise ValueError(f"{name}: expected {n_frames} frames, got {arr.shape[0]}")
    if n_vertices is not None and arr.shape[1] != n_vertices:
        raise ValueError(f"{name}: expected {n_vertices} vertices, got {arr.shape[1]}")
    return arr


def check_dataset(X):
    """Accept a ``synth.Dataset`` or a dataset directory path."""
    if isinstance(X, (str, bytes)) or hasattr(X, "__fspath__"):
        from .dataset import load_dataset

        return load_dataset(X)
    for attr in ("planes", "masks"):
        if not hasattr(X, attr):
            raise TypeError(f"expected a Dataset or dataset directory, got {type(X).__name__}")
    if not X.masks:
        raise ValueError("dataset has no masks")
    return X


_FIT_FIELDS = tuple(f.name for f in dataclasses.fields(FitConfig))


class HeartMeshReconstructor(BaseEstimator):
    """Fit a labelled template mesh sequence to multi-view contour masks.

    Hyperparameters mirror ``FitConfig`` field for field. ``init`` picks
    the starting sequence: ``"template"`` repeats the ``template`` mesh
    passed to ``fit``; ``"ground-truth-ed"`` repeats frame 0 of the
    dataset's reference meshes.

    After fitting, ``sequence_`` holds the result, ``report_`` the full
    ``FitReport`` and ``n_frames_`` / ``n_vertices_`` the problem size.
    """

    def __init__(
        self,
        lambda_mse=10.0,
        lambda_dr=5.0,
        lambda_edge=0.8,
        lambda_norm=0.8,
        lambda_temp=0.1,
        steps=2000,
        learning_rate=0.05,
        optimizer="adam",
        beta1=0.9,
        beta2=0.999,
        epsilon=1e-8,
        seed=0,
        smoothing=0.0,
        mu=8.0,
        window_halfwidth=2.5,
        window_softness=0.5,
        supervision="band",
        band_halfwidth=1.0,
        init="template",
        threads=1,
    ):
        self.lambda_mse = lambda_mse
        self.lambda_dr = lambda_dr
        self.lambda_edge = lambda_edge
        self.lambda_norm = lambda_norm
        self.lambda_temp = lambda_temp
        self.steps = steps
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.seed = seed
        self.smoothing = smoothing
        self.mu = mu
        self.window_halfwidth = window_halfwidth
        self.window_softness = window_softness
        self.supervision = supervision
        self.band_halfwidth = band_halfwidth
        self.init = init
        self.threads = threads

    def fit_config(self):
        return FitConfig.from_dict({k: getattr(self, k) for k in _FIT_FIELDS})

    def fit(self, X, y=None, template=None):
        """Optimise against dataset ``X``.

        ``y`` is an optional reference sequence enabling the MSE term.
        ``template`` (a ``LabeledMesh``) is required for ``init="template"``.
        """
        config = self.fit_config()
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        if int(self.threads) < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")
        data = check_dataset(X)
        n_frames = data.n_frames
        if self.init == "ground-truth-ed":
            if data.sequence is None:
                raise ValueError("init='ground-truth-ed' needs reference meshes in the dataset")
            template = data.sequence.mesh(0)
        elif not isinstance(template, LabeledMesh):
            raise ValueError("init='template' needs a LabeledMesh passed as template=")
        reference = None
        if y is not None:
            frames = check_frames(y, n_frames, template.n_vertices, name="y")
            reference = MeshSequence(frames, template)
        problem = FitProblem(
            template,
            data.planes,
            data.observations(config.renderer),
            n_frames,
            config.renderer,
            reference=reference,
        )
        self.report_ = fit(problem, config, threads=int(self.threads))
        self.sequence_ = self.report_.sequence
        self.n_frames_ = n_frames
        self.n_vertices_ = template.n_vertices
        self._data = data
        return self

    def predict(self, X=None):
        """Fitted vertex positions, shape (N, V, 3)."""
        check_is_fitted(self, "sequence_")
        if X is not None and X is not self._data:
            raise NotFittedError(
                "this estimator was fitted on a different dataset; call fit on the new case"
            )
        return self.sequence_.frames.copy()

    def score(self, X, y):
        """Negative mean per-frame Chamfer distance (mm) to reference ``y``."""
        pred = self.predict(X)
        ref = check_frames(y, self.n_frames_, self.n_vertices_, name="y")
        return -sequence_chamfer(pred, ref)[FULL][0]
