"""Multi-task additive models whose tasks share a small set of transfer functions."""

from .dictionary import (CoherenceReport, TransferDictionary, assemble, check_bcomp_condition,
                         check_omp_condition, coherence, from_blocks)
from .errors import (BudgetExceeded, DataError, DegenerateCovariate, ShapeError,
                     SharedTransferError, SingularSystem, VersionError, ZeroAtom)
from .learner import FitConfig, MultiTaskModel, TaskDataset, fit, predict, predict_dataset
from .sparse_coding import BlockSparseCode, bcomp, brute_force_block_code, omp
from .splines import DesignMatrix, SplineBasis, build_design, fit_ridge, make_basis

__version__ = "0.1.0"

__all__ = [
    "BlockSparseCode", "BudgetExceeded", "CoherenceReport", "DataError", "DegenerateCovariate",
    "DesignMatrix", "FitConfig", "MultiTaskModel", "ShapeError", "SharedTransferError",
    "SingularSystem", "SplineBasis", "TaskDataset", "TransferDictionary", "VersionError",
    "ZeroAtom", "assemble", "bcomp", "brute_force_block_code", "build_design",
    "check_bcomp_condition", "check_omp_condition", "coherence", "fit", "fit_ridge",
    "from_blocks", "make_basis", "omp", "predict", "predict_dataset",
]
