"""Study bundles on disk and fold manifests.

Layout, one directory per study::

    <root>/<study_id>/<VIEW>_<PHASE>_mask.png    binary, 0/255
    <root>/<study_id>/<VIEW>_<PHASE>_image.png   grayscale uint8 (optional)
    <root>/<study_id>/<VIEW>_<PHASE>.json        {view, phase, P_A, P_L, P_R, spacing_mm}
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .exceptions import DatasetError, InconsistentSpacingError
from .records import ALL_KEYS, Landmarks, Phase, StudyQuad, View, ViewMask, ViewRecord


def _stem(view: View, phase: Phase) -> str:
    return f"{view.value}_{phase.value}"


def save_study(study: StudyQuad, root) -> Path:
    out = Path(root) / study.study_id
    out.mkdir(parents=True, exist_ok=True)
    for (view, phase), rec in study:
        stem = _stem(view, phase)
        Image.fromarray((rec.mask.grid * 255).astype(np.uint8)).save(out / f"{stem}_mask.png")
        if rec.image is not None:
            Image.fromarray(np.asarray(rec.image, dtype=np.uint8)).save(out / f"{stem}_image.png")
        meta = {
            "view": view.value,
            "phase": phase.value,
            "P_A": list(rec.landmarks.P_A),
            "P_L": list(rec.landmarks.P_L),
            "P_R": list(rec.landmarks.P_R),
            "spacing_mm": rec.mask.spacing_mm,
        }
        (out / f"{stem}.json").write_text(json.dumps(meta, indent=1))
    return out


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"))
    except FileNotFoundError:
        raise DatasetError(f"missing file: {path}") from None
    except OSError as exc:
        raise DatasetError(f"unreadable image {path}: {exc}") from exc


def _read_meta(path: Path, view: View, phase: Phase) -> Tuple[Landmarks, float]:
    try:
        meta = json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"missing file: {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {path}: {exc}") from exc
    try:
        if meta.get("view", view.value) != view.value or meta.get("phase", phase.value) != phase.value:
            raise DatasetError(f"{path}: tagged {meta.get('view')}/{meta.get('phase')}, "
                               f"expected {view.value}/{phase.value}")
        spacing = meta["spacing_mm"]
        if isinstance(spacing, (list, tuple)):
            if len(spacing) != 2 or spacing[0] != spacing[1]:
                raise DatasetError(f"{path}: anisotropic spacing {spacing} is not supported")
            spacing = spacing[0]
        lm = Landmarks(meta["P_A"], meta["P_L"], meta["P_R"])
        return lm, float(spacing)
    except KeyError as exc:
        raise DatasetError(f"{path}: missing key {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(f"{path}: {exc}") from exc


def load_study(path) -> StudyQuad:
    path = Path(path)
    records = {}
    for view, phase in ALL_KEYS:
        stem = _stem(view, phase)
        grid = _read_png(path / f"{stem}_mask.png")
        if not np.isin(grid, (0, 255)).all():
            raise DatasetError(f"{path / f'{stem}_mask.png'}: mask is not strictly 0/255")
        lm, spacing = _read_meta(path / f"{stem}.json", view, phase)
        img_path = path / f"{stem}_image.png"
        image = _read_png(img_path) if img_path.exists() else None
        try:
            mask = ViewMask((grid > 0).astype(np.uint8), view, phase, spacing)
            lm.check_inside(mask.shape)
        except ValueError as exc:
            raise DatasetError(f"{path / stem}: {exc}") from exc
        records[(view, phase)] = ViewRecord(mask, lm, image)
    for view in View:
        ed = records[(view, Phase.ED)].mask.spacing_mm
        es = records[(view, Phase.ES)].mask.spacing_mm
        if ed != es:
            raise InconsistentSpacingError(
                f"{path}: {view.value} spacing differs between ED ({ed}) and ES ({es})")
    return StudyQuad(path.name, records)


def list_studies(root) -> List[str]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    # a study directory is recognised by its annotation files; manifests may sit beside them
    return sorted(p.name for p in root.iterdir()
                  if p.is_dir() and not p.name.startswith(".") and any(p.glob("*.json")))


def load_dataset(root, ids: Optional[Iterable[str]] = None) -> List[StudyQuad]:
    root = Path(root)
    ids = list_studies(root) if ids is None else list(ids)
    return [load_study(root / sid) for sid in ids]


def read_manifest(path) -> List[str]:
    lines = Path(path).read_text().splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.startswith("#")]


def write_manifest(ids: Sequence[str], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{i}\n" for i in ids))
    return path


def make_folds(ids: Sequence[str], n_folds: int = 10, seed: int = 0) -> List[Dict[str, List[str]]]:
    """Rotating 8:1:1 train/val/test partitions for ``n_folds`` folds.

    Fold k tests on chunk k and validates on chunk k+1 (mod n_folds).
    """
    if n_folds < 3:
        raise ValueError("need at least three folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    chunks = [[ids[i] for i in part] for part in np.array_split(order, n_folds)]
    folds = []
    for k in range(n_folds):
        test = chunks[k]
        val = chunks[(k + 1) % n_folds]
        train = [i for j, c in enumerate(chunks) if j not in (k, (k + 1) % n_folds) for i in c]
        folds.append({"train": sorted(train), "val": sorted(val), "test": sorted(test)})
    return folds


def write_folds(ids: Sequence[str], out_dir, n_folds: int = 10, seed: int = 0) -> List[Path]:
    paths = []
    for k, fold in enumerate(make_folds(ids, n_folds, seed)):
        for split, members in fold.items():
            paths.append(write_manifest(members, Path(out_dir) / f"fold{k}_{split}.txt"))
    return paths
