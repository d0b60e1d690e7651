"""adaptlab: desk-scale seq2seq ASR speaker adaptation with LM fusion."""

from .autodiff import Tape, Tensor, backward, grad_check
from .corpus import (
    FeatureSynthesizer,
    SpeakerCorpus,
    SpeakerProfile,
    WordPieceVocab,
    World,
    WorldConfig,
    build_vocab,
    generate_world,
    load_world,
    save_world,
)
from .decode import DecodedHypothesis, FusionConfig, Hypothesis, beam_search, coverage_score, fused_score
from .checkpoint import load_checkpoint, save_checkpoint
from .lm import LmConfig, LmParams, NceConfig, finetune_lm, lm_logprob, perplexity, train_nce
from .losses import (
    AdaptationConfig,
    NBestList,
    adapt,
    ce_loss,
    combined_adapt_loss,
    kld_adapt_loss,
    mwer_loss,
)
from .metrics import ErrorCounts, edit_distance, wer, werr
from .model import (
    ModelConfig,
    Seq2SeqParams,
    attach_lhn,
    decode_step,
    encode,
    forward_teacher_forced,
    parameter_subset,
    subset_counts,
)
from .estimators import NcePieceLanguageModel, SpeakerAdapter, SpeechRecognizer

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
    "FeatureSynthesizer",
    "SpeakerCorpus",
    "SpeakerProfile",
    "WordPieceVocab",
    "World",
    "WorldConfig",
    "build_vocab",
    "generate_world",
    "load_world",
    "save_world",
    "DecodedHypothesis",
    "FusionConfig",
    "Hypothesis",
    "beam_search",
    "coverage_score",
    "fused_score",
    "load_checkpoint",
    "save_checkpoint",
    "LmConfig",
    "LmParams",
    "NceConfig",
    "finetune_lm",
    "lm_logprob",
    "perplexity",
    "train_nce",
    "AdaptationConfig",
    "NBestList",
    "adapt",
    "ce_loss",
    "combined_adapt_loss",
    "kld_adapt_loss",
    "mwer_loss",
    "ErrorCounts",
    "edit_distance",
    "wer",
    "werr",
    "ModelConfig",
    "Seq2SeqParams",
    "attach_lhn",
    "decode_step",
    "encode",
    "forward_teacher_forced",
    "parameter_subset",
    "subset_counts",
    "NcePieceLanguageModel",
    "SpeakerAdapter",
    "SpeechRecognizer",
]
