"""Input checks shared by the estimator wrappers and the CLI."""
from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .exceptions import NonFiniteError, ShapeMismatchError
from .records import StudyQuad


def check_images(images, size: int | None = None) -> np.ndarray:
    """Coerce to a (N, H, W) uint8 stack; a single 2-D image becomes N=1."""
    arr = np.asarray(images)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeMismatchError(f"expected (N, H, W) images, got shape {arr.shape}")
    if arr.shape[1] != arr.shape[2]:
        raise ShapeMismatchError(f"images must be square, got {arr.shape[1]}x{arr.shape[2]}")
    if size is not None and arr.shape[1] != size:
        raise ShapeMismatchError(f"images are {arr.shape[1]} px, model expects {size}")
    if arr.dtype != np.uint8:
        if not np.isfinite(arr).all():
            raise NonFiniteError("images contain NaN or inf")
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("non-uint8 images must lie in [0, 255]")
        arr = np.round(arr).astype(np.uint8)
    return arr


def check_studies(studies, require_images: bool = False) -> List[StudyQuad]:
    if isinstance(studies, StudyQuad):
        studies = [studies]
    if not isinstance(studies, Sequence) or isinstance(studies, (str, bytes)):
        studies = list(studies)
    out = list(studies)
    if not out:
        raise ValueError("no studies given")
    for st in out:
        if not isinstance(st, StudyQuad):
            raise TypeError(f"expected StudyQuad, got {type(st).__name__}")
        st.check_complete()
        if require_images and any(rec.image is None for _, rec in st):
            raise ValueError(f"study {st.study_id} lacks images")
    return out


def check_n_disks(n_disks) -> int:
    if isinstance(n_disks, bool) or not isinstance(n_disks, (int, np.integer)) or n_disks < 1:
        raise ValueError(f"n_disks must be a positive integer, got {n_disks!r}")
    return int(n_disks)
