"""Training loop, optimizer schedule, checkpoints and evaluation."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import augment as aug
from .dataset import load_dataset, read_manifest
from .exceptions import AugmentationError, ConstantMapError, EchoQuantError, NonFiniteLossError
from .heatmap import extract_peak, pck, render_heatmaps, sigma_schedule
from .metrics import dice_coefficient, pearson
from .network import DualTaskSAM, EncoderConfig, LossWeights, total_loss
from .quant import DEFAULT_N_DISKS, measure_study
from .records import ALL_KEYS, Landmarks, LVIndicators, StudyQuad, ViewMask, ViewRecord

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "echoquant-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 4
    input_size: int = 256
    peak_lr: float = 0.0002
    epochs: int = 60
    warmup_epochs: int = 10
    dice_weight: float = 1.0
    mse_weight: float = 20.0
    align_weight: float = 1.0
    sigma_start: float = 20.0
    sigma_end: float = 10.0
    augment: bool = True
    seed: int = 0
    data_root: Optional[str] = None
    split: Optional[str] = None  # manifest of training study ids
    out: str = "runs/default"
    resume: Optional[str] = None
    max_epochs_this_run: Optional[int] = None  # stop early (for resumable chunks)
    model: Dict = field(default_factory=dict)  # EncoderConfig overrides

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.dice_weight, self.mse_weight, self.align_weight)

    def encoder_config(self) -> EncoderConfig:
        # the training config owns input size and seed
        return EncoderConfig(**{**self.model, "input_size": self.input_size, "seed": self.seed})


# Desk-scale preset used by the smoke and generalization gates.
PRESETS = {
    "default": {},
    "desk": dict(epochs=30, warmup_epochs=5, peak_lr=0.001, augment=False),
}


def _coerce(value: str, typ):
    typ = str(typ)
    if value.lower() in ("none", "null", ""):
        return None
    if "bool" in typ:
        if value.lower() not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"not a boolean: {value!r}")
        return value.lower() in ("1", "true", "yes")
    if "int" in typ:
        return int(value)
    if "float" in typ:
        return float(value)
    if "Dict" in typ:
        return json.loads(value)
    return value


def read_config_file(path) -> Dict:
    """Parse ``key = value`` lines (``#`` comments) into TrainConfig field values."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ValueError(f"{path}:{n}: unknown key {key!r}")
        out[key] = _coerce(value, types[key])
    return out


def lr_schedule(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp to ``peak_lr`` over the warm-up epochs, cosine to zero afterwards."""
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warm:
        return cfg.peak_lr * step / warm
    frac = min(1.0, (step - warm) / max(1, total - warm))
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class SampleSet:
    """Flattened per-image training arrays."""

    images: np.ndarray  # (N, H, W) uint8
    masks: np.ndarray  # (N, H, W) uint8
    points: np.ndarray  # (N, 3, 2) float64
    keys: List[tuple]

    @classmethod
    def from_studies(cls, studies: Sequence[StudyQuad]) -> "SampleSet":
        images, masks, points, keys = [], [], [], []
        for st in studies:
            st.check_complete()
            for key, rec in st:
                if rec.image is None:
                    raise EchoQuantError(f"study {st.study_id} {key} has no image")
                images.append(np.asarray(rec.image, dtype=np.uint8))
                masks.append(rec.mask.grid)
                points.append(rec.landmarks.to_array())
                keys.append((st.study_id,) + key)
        return cls(np.stack(images), np.stack(masks), np.stack(points), keys)

    def __len__(self):
        return len(self.images)


def _batch(samples: SampleSet, idx, rng: Optional[np.random.Generator]):
    imgs, masks, pts = [], [], []
    for i in idx:
        img, mask = samples.images[i], samples.masks[i]
        p = samples.points[i]
        if rng is not None:
            try:
                img, mask, lm = aug.augment(img, mask, Landmarks.from_array(p), rng)
                p = lm.to_array()
            except AugmentationError:
                log.debug("augmentation skipped for sample %d", i)
        imgs.append(img)
        masks.append(mask)
        pts.append(p)
    return (torch.from_numpy(np.stack(imgs).astype(np.float32) / 255.0),
            torch.from_numpy(np.stack(masks).astype(np.float32)),
            torch.from_numpy(np.stack(pts).astype(np.float32)))


def save_checkpoint(path, model: DualTaskSAM, optimizer, cfg: TrainConfig, epoch: int,
                    step: int, history: List[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "train_config": dataclasses.asdict(cfg),
        "model_config": model.cfg.to_dict(),
        "epochs_done": epoch,
        "global_step": step,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng": {"torch": torch.get_rng_state(), "numpy_seed": cfg.seed},
        "history": history,
    }
    tmp = path.with_suffix(".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise EchoQuantError(f"{path} is not an echoquant checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise EchoQuantError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    return blob


def load_model(path) -> DualTaskSAM:
    blob = read_checkpoint(path)
    mc = dict(blob["model_config"])
    mc["encoder_weights"] = None
    model = DualTaskSAM(EncoderConfig(**mc))
    model.load_state_dict(blob["model"])
    model.eval()
    return model


LOSS_COLUMNS = ("epoch", "step", "lr", "sigma", "loss", "dice", "mse", "align")


def fit_model(cfg: TrainConfig, samples: SampleSet, out_dir: Optional[Path] = None,
              resume: Optional[str] = None, model: Optional[DualTaskSAM] = None):
    """Core loop shared by :func:`train` and the estimator.

    Returns ``(model, history)``; writes per-epoch checkpoints and the loss
    curve when ``out_dir`` is given.
    """
    torch.manual_seed(cfg.seed)
    model = model or DualTaskSAM(cfg.encoder_config())
    optimizer = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=0.0)
    history: List[dict] = []
    start_epoch, step = 0, 0
    if resume:
        blob = read_checkpoint(resume)
        model.load_state_dict(blob["model"])
        optimizer.load_state_dict(blob["optimizer"])
        torch.set_rng_state(blob["rng"]["torch"])
        start_epoch, step = blob["epochs_done"], blob["global_step"]
        history = list(blob["history"])
    n = len(samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    weights = cfg.loss_weights
    end_epoch = cfg.epochs
    if cfg.max_epochs_this_run is not None:
        end_epoch = min(cfg.epochs, start_epoch + cfg.max_epochs_this_run)
    model.train()
    for epoch in range(start_epoch, end_epoch):
        sigma = sigma_schedule(epoch, cfg.warmup_epochs, cfg.epochs, cfg.sigma_start, cfg.sigma_end)
        # every epoch's order and warps derive from (seed, epoch) alone, so resuming is exact
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            images, masks, points = _batch(samples, idx, rng if cfg.augment else None)
            lr = lr_schedule(step, steps_per_epoch, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            seg, hr = model(images)
            targets = {"mask": masks,
                       "heatmaps": render_heatmaps(points, sigma, masks.shape[-2:]),
                       "prompts": model.reference_prompts(masks, points)}
            loss, parts = total_loss(seg, hr, targets, epoch, cfg.warmup_epochs, weights)
            if not torch.isfinite(loss):
                _dump_diagnostic(out_dir, epoch, step, lr, sigma, parts)
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch} step {step}: {parts}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            history.append(dict(epoch=epoch, step=step, lr=lr, sigma=sigma, loss=float(loss.detach()), **parts))
            step += 1
        last = history[-1]
        log.info("epoch %d/%d loss %.4f dice %.4f mse %.5f align %.4f", epoch + 1, cfg.epochs,
                 last["loss"], last["dice"], last["mse"], last["align"])
        if out_dir is not None:
            ck = save_checkpoint(Path(out_dir) / "checkpoints" / f"epoch_{epoch + 1:03d}.pt",
                                 model, optimizer, cfg, epoch + 1, step, history)
            (Path(out_dir) / "checkpoints" / "last.pt").write_bytes(ck.read_bytes())
            write_loss_curve(history, Path(out_dir) / "loss_curve.csv")
    model.eval()
    return model, history


def _dump_diagnostic(out_dir, epoch, step, lr, sigma, parts):
    if out_dir is None:
        return
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "diagnostic.json").write_text(json.dumps(
        dict(epoch=epoch, step=step, lr=lr, sigma=sigma, **parts), indent=1, default=str))


def write_loss_curve(history: List[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in LOSS_COLUMNS})
    return path


def train(cfg: TrainConfig, studies: Optional[Sequence[StudyQuad]] = None) -> Path:
    """Train from ``cfg.data_root`` (or in-memory ``studies``); returns the last checkpoint path."""
    if studies is None:
        if not cfg.data_root:
            raise EchoQuantError("no dataset: set data_root")
        ids = read_manifest(cfg.split) if cfg.split else None
        studies = load_dataset(cfg.data_root, ids)
    samples = SampleSet.from_studies(studies)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    fit_model(cfg, samples, out_dir=out, resume=cfg.resume)
    return out / "checkpoints" / "last.pt"


@torch.no_grad()
def predict_arrays(model: DualTaskSAM, images: np.ndarray, batch_size: int = 8):
    """Prompt-free inference: uint8 images (N, H, W) -> (masks uint8, landmark arrays (N, 3, 2))."""
    model.eval()
    masks, points = [], []
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(np.asarray(images[i:i + batch_size]).astype(np.float32) / 255.0)
        x = x.to(next(model.parameters()).dtype)
        seg, hr = model(x)
        masks.append((torch.sigmoid(seg.mask_logits) > 0.5).to(torch.uint8).numpy())
        for hm in hr.heatmaps.double().numpy():
            points.append(_decode_points(hm))
    return np.concatenate(masks), np.stack(points)


def _decode_points(maps: np.ndarray) -> np.ndarray:
    pts = []
    for m in maps:
        try:
            pts.append(extract_peak(m))
        except ConstantMapError:
            pts.append((float("nan"), float("nan")))
    return np.array(pts)


@dataclass
class EvalReport:
    DC: float
    PCK: float
    corr: Dict[str, float]
    rows: List[dict]

    def summary(self) -> dict:
        return {"DC": self.DC, "PCK": self.PCK, **{f"{k}_corr": v for k, v in self.corr.items()}}

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = ["study_id"] + [f"{k}_{s}" for k in LVIndicators.FIELDS for s in ("pred", "true")]
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for row in self.rows:
                w.writerow({c: row.get(c) for c in cols})
        return path


def _predicted_study(study: StudyQuad, masks, points) -> StudyQuad:
    records = {}
    for k, key in enumerate(ALL_KEYS):
        rec = study[key]
        mask = ViewMask(masks[k], rec.mask.view, rec.mask.phase, rec.mask.spacing_mm)
        records[key] = ViewRecord(mask, Landmarks.from_array(points[k]), rec.image)
    return StudyQuad(study.study_id, records)


def evaluate_model(model: DualTaskSAM, studies: Sequence[StudyQuad], n_disks: int = DEFAULT_N_DISKS,
                   input_size: Optional[int] = None) -> EvalReport:
    samples = SampleSet.from_studies(studies)
    masks, points = predict_arrays(model, samples.images)
    size = input_size or samples.images.shape[-1]
    dcs = [dice_coefficient(p, g) for p, g in zip(masks, samples.masks)]
    errs = np.hypot(*(points - samples.points).transpose(2, 0, 1))
    # undecodable maps count as misses
    pck_val = float(np.mean(np.nan_to_num(errs, nan=np.inf) <= size / 20.0 * (1 + 1e-12)))
    rows = []
    for s, study in enumerate(studies):
        truth = measure_study(study, n_disks)
        row = {"study_id": study.study_id}
        sl = slice(4 * s, 4 * s + 4)
        try:
            pred = measure_study(_predicted_study(study, masks[sl], points[sl]), n_disks).as_dict()
        except (EchoQuantError, ValueError) as exc:
            warnings.warn(f"measurement failed for {study.study_id}: {exc}", RuntimeWarning, stacklevel=2)
            pred = {k: float("nan") for k in LVIndicators.FIELDS}
        for k in LVIndicators.FIELDS:
            row[f"{k}_pred"] = pred[k]
            row[f"{k}_true"] = truth.as_dict()[k]
        rows.append(row)
    corr = {k: pearson([r[f"{k}_pred"] for r in rows], [r[f"{k}_true"] for r in rows])
            for k in LVIndicators.FIELDS}
    return EvalReport(float(np.mean(dcs)), pck_val, corr, rows)


def evaluate(checkpoint, studies=None, data_root=None, split=None,
             n_disks: int = DEFAULT_N_DISKS) -> EvalReport:
    """Evaluate a checkpoint on in-memory studies or on ``data_root`` filtered by a split manifest."""
    model = load_model(checkpoint)
    if studies is None:
        ids = read_manifest(split) if split else None
        studies = load_dataset(data_root, ids)
    return evaluate_model(model, studies, n_disks)


__all__ = [
    "TrainConfig", "PRESETS", "lr_schedule", "train", "evaluate", "evaluate_model", "EvalReport",
    "fit_model", "SampleSet", "save_checkpoint", "read_checkpoint", "load_model", "read_config_file",
    "predict_arrays", "write_loss_curve", "pck",
]
