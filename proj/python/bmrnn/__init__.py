# SPDX-License-Identifier: Apache-2.0
"""Python bindings for the bmrnn C++ core."""

from ._bmrnn import (
    DataError,
    DimensionError,
    Model,
    NumericalError,
    affinity_propagation,
    compatibility,
    detect_corpus_skips,
    detect_skips,
    evaluate,
    generate_synthetic,
    grad_check,
    report_from_ranks,
    similarity,
    train,
)

__all__ = [
    "DataError",
    "DimensionError",
    "Model",
    "NumericalError",
    "affinity_propagation",
    "compatibility",
    "detect_corpus_skips",
    "detect_skips",
    "evaluate",
    "generate_synthetic",
    "grad_check",
    "report_from_ranks",
    "similarity",
    "train",
]
