"""Data-free model merging toolkit.

Layer-wise interference-minimization merging with covariances estimated
from task vectors, five baseline merge rules, checkpoint container I/O,
and the merge cost model.
"""

from covmerge._core import (  # noqa: F401
    Checkpoint,
    FormatError,
    NumericalError,
    TaskVector,
    actmat_gram,
    angular_distance,
    brute_force_minimizer,
    compute_task_vector,
    empirical_covariance,
    expensive_ops,
    flops,
    frobenius_inner,
    kappa,
    load_checkpoint,
    merge_actmat,
    merge_average,
    merge_checkpoints,
    merge_interference,
    merge_iso_c,
    merge_task_arithmetic,
    merge_tsv,
    pearson,
    pinv,
    save_checkpoint,
    spectral_norm,
    svd,
)

__all__ = [
    "Checkpoint",
    "FormatError",
    "NumericalError",
    "TaskVector",
    "actmat_gram",
    "angular_distance",
    "brute_force_minimizer",
    "compute_task_vector",
    "empirical_covariance",
    "expensive_ops",
    "flops",
    "frobenius_inner",
    "kappa",
    "load_checkpoint",
    "merge_actmat",
    "merge_average",
    "merge_checkpoints",
    "merge_interference",
    "merge_iso_c",
    "merge_task_arithmetic",
    "merge_tsv",
    "pearson",
    "pinv",
    "save_checkpoint",
    "spectral_norm",
    "svd",
]
