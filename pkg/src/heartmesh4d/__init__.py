"""Direct 4D whole-heart mesh fitting to sparse multi-view contour masks."""

__version__ = "0.1.0"

from .estimator import HeartMeshReconstructor
from .mesh import LabeledMesh, MeshSequence, load_mesh, save_mesh, signed_volume
from .metrics import MetricReport, evaluate
from .optim import FitConfig, FitProblem, FitReport, fit, gradcheck, total_loss
from .planes import PlaneFrame, plane_from_affine
from .renderer import RendererConfig, ViewObservation, render_loss
from .synth import SynthConfig, generate_dataset

__all__ = [
    "FitConfig",
    "FitProblem",
    "FitReport",
    "HeartMeshReconstructor",
    "LabeledMesh",
    "MeshSequence",
    "MetricReport",
    "PlaneFrame",
    "RendererConfig",
    "SynthConfig",
    "ViewObservation",
    "evaluate",
    "fit",
    "generate_dataset",
    "gradcheck",
    "load_mesh",
    "plane_from_affine",
    "render_loss",
    "save_mesh",
    "signed_volume",
    "total_loss",
]
