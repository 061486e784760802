"""Structured 2D landmark prediction with an exact Gaussian CRF.

Per-landmark predictions (mean + covariance) are combined with learned
pairwise couplings whose expected offsets come from a 3D deformable shape
model under weak perspective. Inference alternates exact conditional-mean
updates with deformable-parameter fits; learning minimizes the exact
negative log-likelihood of the conditional Gaussian.
"""

from .crf import (
    COV_EIG_FLOOR,
    ConditionalGaussian,
    NllGradients,
    PairwiseSet,
    UnaryPrediction,
    assemble_precision,
    assemble_rhs,
    conditional_gaussian,
    conditional_gaussian_from_offsets,
    nll,
    nll_gradients,
    nll_gradients_from_offsets,
    pairwise_energy,
    total_energy,
    unary_energy,
)
from .errors import (
    NumericalDomainError,
    TrainingDivergedError,
    UnderdeterminedProblemError,
)
from .evaluation import (
    DEFAULT_FAILURE_THRESHOLD,
    CedCurve,
    EvalReport,
    auc,
    build_report,
    ced,
    failure_rate,
    nme,
)
from .fitting import FitDiagnostics, FitOptions, cold_start, fit_deform_params
from .inference import InferOptions, InferTrace, infer
from .model import (
    DeformParams,
    ShapeModel3D,
    expected_offset,
    offset_matrix,
    project_points,
    rotation_from_euler,
    shape_instance,
    synthetic_model,
)
from .training import (
    DEFAULT_INIT_COUPLING,
    TrainOptions,
    TrainReport,
    TrainSample,
    dataset_nll,
    train_crf,
)
from .unary import (
    GeneratedSample,
    Heatmap,
    SynthSpec,
    moments_from_heatmap,
    synth_generate,
)

__version__ = "0.1.0"
