"""Mean-teacher unsupervised domain adaptation for lesion segmentation."""

import torch  # noqa: F401  loads the libtorch shared libraries

from ._core import (
    Error,
    dice,
    fft_style_transfer,
    histogram_match,
    iou,
    run_cli,
    sample_stats,
    select_patch,
    synthetic_pair,
)

__all__ = [
    "Error",
    "dice",
    "fft_style_transfer",
    "histogram_match",
    "iou",
    "run_cli",
    "sample_stats",
    "select_patch",
    "synthetic_pair",
]
