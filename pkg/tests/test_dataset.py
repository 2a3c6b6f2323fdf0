import json

import numpy as np
import pytest

from echoquant.dataset import (list_studies, load_dataset, load_study, make_folds, read_manifest, save_study,
                               write_folds, write_manifest)
from echoquant.exceptions import DatasetError, InconsistentSpacingError
from echoquant.phantom import PhantomParams, generate_phantom_study


@pytest.fixture(scope="module")
def study():
    return generate_phantom_study(PhantomParams(seed=1, tilt=5.0), "s1")[0]


def test_round_trip(tmp_path, study):
    save_study(study, tmp_path)
    back = load_study(tmp_path / "s1")
    assert back.study_id == "s1"
    for (key, a), (_, b) in zip(study, back):
        assert np.array_equal(a.mask.grid, b.mask.grid)
        assert np.array_equal(a.image, b.image)
        assert a.landmarks == b.landmarks
        assert a.mask.spacing_mm == b.mask.spacing_mm


def test_missing_file_named(tmp_path, study):
    path = save_study(study, tmp_path)
    (path / "A2C_ES_mask.png").unlink()
    with pytest.raises(DatasetError, match="A2C_ES_mask.png"):
        load_study(path)


def test_malformed_json(tmp_path, study):
    path = save_study(study, tmp_path)
    (path / "A4C_ED.json").write_text("{not json")
    with pytest.raises(DatasetError, match="A4C_ED.json"):
        load_study(path)


def test_spacing_mismatch(tmp_path, study):
    path = save_study(study, tmp_path)
    meta = json.loads((path / "A4C_ES.json").read_text())
    meta["spacing_mm"] *= 1.5
    (path / "A4C_ES.json").write_text(json.dumps(meta))
    with pytest.raises(InconsistentSpacingError):
        load_study(path)


def test_non_binary_mask(tmp_path, study):
    from PIL import Image
    path = save_study(study, tmp_path)
    Image.fromarray(np.full((256, 256), 7, np.uint8)).save(path / "A4C_ED_mask.png")
    with pytest.raises(DatasetError):
        load_study(path)


def test_listing_ignores_manifest_dirs(tmp_path, study):
    save_study(study, tmp_path)
    write_manifest(["s1"], tmp_path / "splits" / "all.txt")
    assert list_studies(tmp_path) == ["s1"]
    assert [s.study_id for s in load_dataset(tmp_path, read_manifest(tmp_path / "splits" / "all.txt"))] == ["s1"]
    with pytest.raises(DatasetError):
        list_studies(tmp_path / "nope")


def test_folds_partition():
    ids = [f"p{i:03d}" for i in range(50)]
    folds = make_folds(ids, 10, seed=0)
    assert len(folds) == 10
    for f in folds:
        assert sorted(f["train"] + f["val"] + f["test"]) == ids
        assert len(f["train"]) == 40 and len(f["val"]) == 5 and len(f["test"]) == 5
    assert sorted(i for f in folds for i in f["test"]) == ids
    assert make_folds(ids, 10, seed=0) == folds


def test_write_folds(tmp_path):
    paths = write_folds([f"p{i}" for i in range(10)], tmp_path, n_folds=5)
    assert len(paths) == 15 and read_manifest(tmp_path / "fold0_test.txt")
