"""Bivariate cause-effect inference with location-scale noise models."""

from .core import Direction, PairDataset, SplitSpec, load_pair_text, save_pair_text, split, standardize
from .flow import AffineFlowLSNM, FlowConfig, FlowModel, fit
from .hsic import hsic_permutation_test, hsic_statistic
from .scm import NoiseFamily, ScmSpec, generate, sample_scm_spec
from .select import CauseEffectDirection, DirectionVerdict, Rule, carefl_h, carefl_h_rr, carefl_m, infer

__all__ = [
    "AffineFlowLSNM", "CauseEffectDirection", "Direction", "DirectionVerdict", "FlowConfig", "FlowModel",
    "NoiseFamily", "PairDataset", "Rule", "ScmSpec", "SplitSpec", "carefl_h", "carefl_h_rr", "carefl_m",
    "fit", "generate", "hsic_permutation_test", "hsic_statistic", "infer", "load_pair_text",
    "sample_scm_spec", "save_pair_text", "split", "standardize",
]
__version__ = "0.1.0"
