"""Immutable domain records: views, landmarks, masks, studies and indicators."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .exceptions import IncompleteStudyError, InvalidLandmarksError, OutOfGridError

Point = Tuple[float, float]


class View(str, enum.Enum):
    A4C = "A4C"
    A2C = "A2C"


class Phase(str, enum.Enum):
    ED = "ED"
    ES = "ES"


ALL_KEYS = tuple((v, p) for v in View for p in Phase)
LANDMARK_NAMES = ("P_A", "P_L", "P_R")


def _as_point(p) -> Point:
    x, y = p
    return (float(x), float(y))


@dataclass(frozen=True)
class Landmarks:
    """Apex and the two mitral-annulus endpoints, in (x, y) pixel coordinates.

    Pixel ``(r, c)`` has its center at ``x = c, y = r``.
    """

    P_A: Point
    P_L: Point
    P_R: Point

    def __post_init__(self):
        for name in LANDMARK_NAMES:
            p = _as_point(getattr(self, name))
            if not all(math.isfinite(v) for v in p):
                raise InvalidLandmarksError(f"{name} is not finite: {p}")
            object.__setattr__(self, name, p)
        if self.P_L == self.P_R:
            raise InvalidLandmarksError("P_L and P_R coincide")
        # apex must not lie on the annulus segment
        a = np.subtract(self.P_A, self.P_L)
        b = np.subtract(self.P_R, self.P_L)
        cross = a[0] * b[1] - a[1] * b[0]
        t = float(np.dot(a, b) / np.dot(b, b))
        if abs(cross) < 1e-12 and 0.0 <= t <= 1.0:
            raise InvalidLandmarksError("P_A lies on the segment P_L-P_R")

    @classmethod
    def from_array(cls, arr) -> "Landmarks":
        arr = np.asarray(arr, dtype=float).reshape(3, 2)
        return cls(tuple(arr[0]), tuple(arr[1]), tuple(arr[2]))

    def to_array(self) -> np.ndarray:
        """Return a ``(3, 2)`` array ordered P_A, P_L, P_R."""
        return np.array([self.P_A, self.P_L, self.P_R], dtype=float)

    def check_inside(self, shape: Tuple[int, int]) -> None:
        h, w = shape
        for name in LANDMARK_NAMES:
            x, y = getattr(self, name)
            if not (0 <= x < w and 0 <= y < h):
                raise OutOfGridError(f"{name}={x, y} outside a {h}x{w} grid")


@dataclass(frozen=True, eq=False)
class ViewMask:
    grid: np.ndarray
    view: View
    phase: Phase
    spacing_mm: float

    def __post_init__(self):
        grid = np.asarray(self.grid)
        if grid.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {grid.shape}")
        if min(grid.shape) < 16:
            raise ValueError(f"mask must be at least 16x16, got {grid.shape}")
        if not np.isin(grid, (0, 1)).all():
            raise ValueError("mask must contain only 0 and 1")
        if not (self.spacing_mm > 0 and math.isfinite(self.spacing_mm)):
            raise ValueError(f"spacing_mm must be positive, got {self.spacing_mm}")
        grid = grid.astype(np.uint8)
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "view", View(self.view))
        object.__setattr__(self, "phase", Phase(self.phase))
        object.__setattr__(self, "spacing_mm", float(self.spacing_mm))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid.shape


@dataclass(frozen=True, eq=False)
class ViewRecord:
    mask: ViewMask
    landmarks: Landmarks
    image: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class StudyQuad:
    """The four apical recordings of one study, keyed by ``(View, Phase)``.

    Construction accepts partial studies so that loaders can report what is
    missing; :meth:`check_complete` enforces the full quad.
    """

    study_id: str
    records: Dict[Tuple[View, Phase], ViewRecord] = field(default_factory=dict)

    def __post_init__(self):
        records = {}
        for (v, p), rec in self.records.items():
            key = (View(v), Phase(p))
            if (rec.mask.view, rec.mask.phase) != key:
                raise ValueError(f"record stored under {key} carries mask tagged "
                                 f"{rec.mask.view.value}/{rec.mask.phase.value}")
            records[key] = rec
        object.__setattr__(self, "records", records)

    def __getitem__(self, key) -> ViewRecord:
        v, p = key
        return self.records[(View(v), Phase(p))]

    def __iter__(self) -> Iterator[Tuple[Tuple[View, Phase], ViewRecord]]:
        for key in ALL_KEYS:
            if key in self.records:
                yield key, self.records[key]

    def missing(self):
        return [k for k in ALL_KEYS if k not in self.records]

    def check_complete(self) -> None:
        missing = self.missing()
        if missing:
            names = ", ".join(f"{v.value}/{p.value}" for v, p in missing)
            raise IncompleteStudyError(f"study {self.study_id!r} is missing {names}")
        for view in View:
            ed = self.records[(view, Phase.ED)].mask.spacing_mm
            es = self.records[(view, Phase.ES)].mask.spacing_mm
            if ed != es:
                raise IncompleteStudyError(
                    f"study {self.study_id!r}: {view.value} spacing differs between ED ({ed}) and ES ({es})")


@dataclass(frozen=True)
class DiskProfile:
    diameters: Tuple[float, ...]
    axis_length: float
    n_disks: int

    def __post_init__(self):
        d = tuple(float(x) for x in self.diameters)
        if len(d) != self.n_disks:
            raise ValueError(f"{len(d)} diameters for n_disks={self.n_disks}")
        if any(x < 0 for x in d):
            raise ValueError("diameters must be nonnegative")
        if not self.axis_length > 0:
            raise ValueError("axis_length must be positive")
        object.__setattr__(self, "diameters", d)


@dataclass(frozen=True)
class LVIndicators:
    EDL: float
    ESL: float
    EDV: float
    ESV: float
    EF: float

    FIELDS = ("EDL", "ESL", "EDV", "ESV", "EF")

    def as_tuple(self) -> Tuple[float, float, float, float, float]:
        return (self.EDL, self.ESL, self.EDV, self.ESV, self.EF)

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.FIELDS, self.as_tuple()))
