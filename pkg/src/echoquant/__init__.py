"""Left-ventricle segmentation, landmark detection and biplane volumetry."""
from .estimators import BiplaneSimpsonMeasurer, DualTaskSAMEstimator
from .exceptions import EchoQuantError
from .freq_attention import CrossBranchAttention, FilteredCrossBranchAttention, decompose
from .heatmap import extract_peak, make_heatmap, pck, sigma_schedule
from .network import DualTaskSAM, EncoderConfig, LossWeights, dice_loss, total_loss
from .phantom import PhantomParams, generate_phantom_set, generate_phantom_study
from .prompting import AutoPromptGenerator, PromptEncoder, alignment_loss, encode_box, encode_points
from .quant import diameter_profile, ejection_fraction, measure_study, simpson_biplane
from .records import Landmarks, LVIndicators, Phase, StudyQuad, View, ViewMask, ViewRecord
from .training import EvalReport, TrainConfig, evaluate, lr_schedule, train

__version__ = "0.1.0"

__all__ = [
    "BiplaneSimpsonMeasurer", "DualTaskSAMEstimator", "EchoQuantError",
    "CrossBranchAttention", "FilteredCrossBranchAttention", "decompose",
    "extract_peak", "make_heatmap", "pck", "sigma_schedule",
    "DualTaskSAM", "EncoderConfig", "LossWeights", "dice_loss", "total_loss",
    "PhantomParams", "generate_phantom_set", "generate_phantom_study",
    "AutoPromptGenerator", "PromptEncoder", "alignment_loss", "encode_box", "encode_points",
    "diameter_profile", "ejection_fraction", "measure_study", "simpson_biplane",
    "Landmarks", "LVIndicators", "Phase", "StudyQuad", "View", "ViewMask", "ViewRecord",
    "EvalReport", "TrainConfig", "evaluate", "lr_schedule", "train",
]
