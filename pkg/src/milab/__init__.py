"""Attention-MIL and additive-MIL models with exact per-instance credit assignment."""

from .autodiff import Tensor, grad_check, no_grad
from .credit import (ContributionMap, HeatmapScores, ShapleyReport, attention_baseline, bound_scores,
                     extract_contributions, shapley_enumerate, shapley_fixed_context)
from .evaluation import EvalReport, auroc_macro, evaluate, infer_slide, linearity_report, patch_pr_curve
from .model import BagOutput, MilConfig, MilModel, forward, load_model, save_model
from .synthdata import Bag, GenConfig, Slide, SlideDataset, generate, sample_bags
from .training import AdamState, TrainConfig, adam_step, train

__version__ = "0.1.0"
