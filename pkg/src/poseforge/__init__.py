"""Pose alignment, guided diffusion sampling and supporting numerics."""
from .estimators import DistributionAligner, LearnedAligner, SimilarityAligner
from .feature_align import adain_align, masked_recon_loss, stats
from .hjb import (GmmSpec, GuidanceLoss, SamplerConfig, edm_sample, gmm_denoiser,
                  karras_schedule, optimal_control, simulate_controlled_ode)
from .misalign import PerturbSpec, gen_corpus, load_corpus
from .similarity import (DegenerateConfigurationError, SimTransform, apply, compose,
                         dis_metric, invert, similarity_fit)
from .skeleton import PoseSequence, parse_pose_sequence, serialize_pose_sequence

__version__ = "0.1.0"

__all__ = [
    "DegenerateConfigurationError", "DistributionAligner", "GmmSpec", "GuidanceLoss",
    "LearnedAligner", "PerturbSpec", "PoseSequence", "SamplerConfig", "SimTransform",
    "SimilarityAligner", "adain_align", "apply", "compose", "dis_metric", "edm_sample",
    "gen_corpus", "gmm_denoiser", "invert", "karras_schedule", "load_corpus",
    "masked_recon_loss", "optimal_control", "parse_pose_sequence",
    "serialize_pose_sequence", "similarity_fit", "simulate_controlled_ode", "stats",
]
