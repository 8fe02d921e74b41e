"""Desk-scale vision-language model: text-guided vision encoding, latent
recursive alignment in the decoder, bidirectional mapping losses and the
caption/image filtering pipeline used to build training data."""
from .config import DecoderConfig, EncoderConfig, RunConfig, StageConfig, TrainConfig
from .estimators import CaptionFilter, FusionVLM
from .filtering import FilterThresholds, HashedScorer, filter_caption, image_generation_score, qa_final_score
from .model import FusionModel, encode_sample, forward_sample

__all__ = [
    "CaptionFilter", "DecoderConfig", "EncoderConfig", "FilterThresholds", "FusionModel", "FusionVLM",
    "HashedScorer", "RunConfig", "StageConfig", "TrainConfig", "encode_sample", "filter_caption",
    "forward_sample", "image_generation_score", "qa_final_score",
]
__version__ = "0.1.0"
