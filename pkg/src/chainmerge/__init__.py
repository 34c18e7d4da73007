"""Chain of Merges: layer-wise closed-form merging of feed-forward networks."""
from .errors import (
    ArchitectureMismatch,
    ChainMergeError,
    CorruptCheckpoint,
    InsufficientSamples,
    InvalidModel,
    InvalidShape,
    NotAMatrixFile,
    NotPSD,
    NotSymmetric,
    UnsupportedVersion,
)
from .linalg import UNBOUNDED, GramStats, condition_number, gram, offdiag_norm, pinv_tikhonov, sqrtm_psd
from .mcs import GaussianStats, MCSReport, frechet_distance, gaussian_stats, mcs_report
from .merge import (
    MergeConfig,
    MergeOutcome,
    SensitivityWeights,
    TaskBundle,
    merge,
    merge_average,
    merge_com,
    merge_simultaneous,
    objective_omega,
    regmean_layer,
    sensitivity_weights,
)
from .model import ActivationKind, ActivationTrace, LinearLayer, SequentialModel, apply_activation, forward_capture

__version__ = "0.1.0"
