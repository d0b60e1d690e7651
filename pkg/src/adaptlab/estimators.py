"""Scikit-learn style estimators wrapping the recognizer, the speaker
adapters, and the NCE language model, so the pipeline composes with the
wider ecosystem (``get_params``/``set_params``, ``clone``, grid search).

``X`` is a list of ``(T, d_feat)`` float arrays (one per utterance) and
``y`` a list of transcript strings.  Fitted state lives in
trailing-underscore attributes, per sklearn convention.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .corpus import Utterance, WordPieceVocab, build_vocab
from .decode import FusionConfig, beam_search
from .errors import ContractError, DataError
from .harness import SiTrainConfig, derive_seed, train_ce_model
from .lm import LmConfig, LmParams, NceConfig, finetune_lm, lm_logprob, perplexity, train_nce
from .losses import AdaptationConfig, adapt
from .metrics import wer
from .model import ModelConfig, Seq2SeqParams

__all__ = ["SpeechRecognizer", "SpeakerAdapter", "NcePieceLanguageModel"]


def _validate_features(X, d_feat: int | None = None) -> list[np.ndarray]:
    if not isinstance(X, (list, tuple)) or len(X) == 0:
        raise DataError("X must be a nonempty list of (T, d_feat) arrays")
    out = []
    for i, x in enumerate(X):
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim != 2:
            raise DataError(f"X[{i}] must be a rank-2 array, got shape {arr.shape}")
        if d_feat is None:
            d_feat = arr.shape[1]
        if arr.shape[1] != d_feat:
            raise DataError(f"X[{i}] has {arr.shape[1]} features, expected {d_feat}")
        if not np.all(np.isfinite(arr)):
            raise DataError(f"X[{i}] contains non-finite values")
        out.append(arr)
    return out

def _validate_transcripts(y, n: int) -> list[str]:
    if not isinstance(y, (list, tuple)) or len(y) != n:
        raise DataError(f"y must be a list of {n} transcript strings")
    return [str(t) for t in y]


def _as_utterances(vocab: WordPieceVocab, X, y, tag: str) -> list[Utterance]:
    utts = []
    for i, (feats, text) in enumerate(zip(X, y)):
        tokens = vocab.encode(text) + [vocab.eos_id]
        utts.append(Utterance(f"{tag}_{i:04d}", tag, feats, tokens, text))
    return utts


class NcePieceLanguageModel(BaseEstimator):
    """Word-piece LSTM LM trained with noise contrastive estimation.

    ``fit(X)`` takes a list of text lines.  ``score(X)`` is the negative
    exact-softmax perplexity (higher is better).
    """

    def __init__(
        self,
        vocab=None,
        vocab_size: int = 30,
        embed_dim: int = 16,
        hidden: int = 32,
        k: int = 8,
        weight_decay: float = 1e-6,
        dropout: float = 0.1,
        learning_rate: float = 5e-3,
        batch_size: int = 8,
        epochs: int = 10,
        seed: int = 0,
    ):
        self.vocab = vocab
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.k = k
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    def _encode_corpus(self, X) -> list[list[int]]:
        return [self.vocab_.encode(str(line)) + [self.vocab_.eos_id] for line in X]

    def fit(self, X, y=None):
        if not isinstance(X, (list, tuple)) or len(X) == 0:
            raise DataError("X must be a nonempty list of text lines")
        self.vocab_ = self.vocab or build_vocab([str(s) for s in X], self.vocab_size)
        base = LmParams.initialize(
            LmConfig(
                vocab_size=len(self.vocab_),
                embed_dim=self.embed_dim,
                hidden=self.hidden,
                bos_id=self.vocab_.bos_id,
                eos_id=self.vocab_.eos_id,
            ),
            seed=derive_seed(self.seed, "lm-init"),
        )
        cfg = NceConfig(
            k=self.k,
            weight_decay=self.weight_decay,
            dropout=self.dropout,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
        )
        self.params_ = train_nce(base, self._encode_corpus(X), cfg,
                                 seed=derive_seed(self.seed, "lm-train"))
        return self

    def logprob(self, text: str, mode: str = "exact") -> float:
        _, total = lm_logprob(self.params_, self.vocab_.encode(str(text)) + [self.vocab_.eos_id],
                              mode=mode)
        return total

    def perplexity(self, X) -> float:
        return perplexity(self.params_, self._encode_corpus(X))

    def score(self, X, y=None) -> float:
        return -self.perplexity(X)

    def finetuned(self, X, use_kld: bool = True, beta_lm: float = 0.5,
                  epochs: int = 3, learning_rate: float = 1e-3) -> "NcePieceLanguageModel":
        """Speaker copy fine-tuned on extra text, optionally KLD-anchored."""
        out = NcePieceLanguageModel(**self.get_params())
        out.vocab_ = self.vocab_
        out.params_ = finetune_lm(
            self.params_,
            self._encode_corpus(X),
            use_kld=use_kld,
            base=self.params_,
            beta_lm=beta_lm,
            epochs=epochs,
            learning_rate=learning_rate,
            seed=derive_seed(self.seed, "lm-finetune"),
        )
        return out


class SpeechRecognizer(BaseEstimator):
    """Attention seq2seq recognizer with a fit/predict surface.

    ``fit(X, y)`` builds the word-piece vocabulary (unless one is supplied),
    trains with label-smoothed CE and early stopping, and stores the
    parameters in ``params_``.  ``predict(X)`` runs beam search, optionally
    with shallow LM fusion and a coverage score.
    """

    def __init__(
        self,
        vocab=None,
        vocab_size: int = 30,
        conv_dim: int = 16,
        encoder_units: int = 32,
        encoder_stages: int = 2,
        attention_dim: int = 32,
        decoder_units: int = 64,
        dense_dim: int = 64,
        embed_dim: int = 16,
        learning_rate: float = 5e-3,
        epochs: int = 30,
        batch_size: int = 8,
        dropout: float = 0.1,
        label_smoothing: float = 0.1,
        patience: int = 3,
        val_fraction: float = 0.1,
        beam_width: int = 8,
        lm=None,
        lambda_lm: float = 0.0,
        lambda_cov: float = 0.0,
        seed: int = 0,
    ):
        self.vocab = vocab
        self.vocab_size = vocab_size
        self.conv_dim = conv_dim
        self.encoder_units = encoder_units
        self.encoder_stages = encoder_stages
        self.attention_dim = attention_dim
        self.decoder_units = decoder_units
        self.dense_dim = dense_dim
        self.embed_dim = embed_dim
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.dropout = dropout
        self.label_smoothing = label_smoothing
        self.patience = patience
        self.val_fraction = val_fraction
        self.beam_width = beam_width
        self.lm = lm
        self.lambda_lm = lambda_lm
        self.lambda_cov = lambda_cov
        self.seed = seed

    def fit(self, X, y):
        X = _validate_features(X)
        y = _validate_transcripts(y, len(X))
        self.vocab_ = self.vocab or build_vocab(y, self.vocab_size)
        self.model_config_ = ModelConfig(
            vocab_size=len(self.vocab_),
            d_feat=X[0].shape[1],
            conv_dim=self.conv_dim,
            encoder_units=self.encoder_units,
            encoder_stages=self.encoder_stages,
            attention_dim=self.attention_dim,
            decoder_units=self.decoder_units,
            dense_dim=self.dense_dim,
            embed_dim=self.embed_dim,
            bos_id=self.vocab_.bos_id,
            eos_id=self.vocab_.eos_id,
        )
        utts = _as_utterances(self.vocab_, X, y, "fit")
        n_val = max(1, int(round(self.val_fraction * len(utts)))) if len(utts) > 1 else 0
        train, val = utts[: len(utts) - n_val], utts[len(utts) - n_val :]
        cfg = SiTrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            dropout=self.dropout,
            label_smoothing=self.label_smoothing,
            patience=self.patience,
        )
        self.params_, self.history_ = train_ce_model(
            train, val or train, self.model_config_, cfg, seed=self.seed
        )
        return self

    def _fusion(self) -> FusionConfig:
        return FusionConfig(
            lambda_lm=self.lambda_lm if self.lm is not None else 0.0,
            lambda_cov=self.lambda_cov,
            beam_width=self.beam_width,
        )

    def _lm_params(self):
        if self.lm is None:
            return None
        return self.lm.params_ if hasattr(self.lm, "params_") else self.lm

    def predict(self, X) -> list[str]:
        X = _validate_features(X, self.model_config_.d_feat)
        fusion = self._fusion()
        out = []
        for x in X:
            best = beam_search(self.params_, self._lm_params(), x, fusion)[0]
            out.append(self.vocab_.decode(best.tokens))
        return out

    def wer(self, X, y) -> float:
        hyps = [h.split() for h in self.predict(X)]
        refs = [str(t).split() for t in y]
        return wer(refs, hyps)

    def score(self, X, y) -> float:
        """Negative pooled WER percent (sklearn convention: higher is better)."""
        return -self.wer(X, y)


class SpeakerAdapter(BaseEstimator):
    """Fits a speaker-adapted copy of a trained recognizer.

    ``method='kld'`` or ``'mwer_kld'`` fine-tunes the chosen parameter
    subset under the KLD-regularized loss (optionally combined with the
    expected-word-error loss); ``method='lhn'`` inserts an identity linear
    layer at ``lhn_site`` and trains only that layer.
    """

    def __init__(
        self,
        base: SpeechRecognizer,
        method: str = "kld",
        subset: str = "all",
        lhn_site: str = "decoder_output",
        beta: float = 0.6,
        gamma1: float = 1.0,
        gamma2: float = 1.0,
        label_smoothing: float = 0.1,
        dropout: float = 0.25,
        learning_rate: float = 5e-4,
        batch_size: int = 4,
        epochs: int = 3,
        nbest_size: int = 4,
        seed: int = 0,
    ):
        self.base = base
        self.method = method
        self.subset = subset
        self.lhn_site = lhn_site
        self.beta = beta
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.label_smoothing = label_smoothing
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.nbest_size = nbest_size
        self.seed = seed

    def fit(self, X, y):
        if not hasattr(self.base, "params_"):
            raise ContractError("base recognizer must be fitted before adaptation")
        X = _validate_features(X, self.base.model_config_.d_feat)
        y = _validate_transcripts(y, len(X))
        vocab = self.base.vocab_
        utts = _as_utterances(vocab, X, y, "adapt")
        cfg = AdaptationConfig(
            beta=self.beta,
            gamma1=self.gamma1,
            gamma2=self.gamma2,
            label_smoothing=self.label_smoothing,
            dropout_adapt=self.dropout,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            nbest_size=self.nbest_size,
        )
        self.params_ = adapt(
            self.base.params_,
            utts,
            cfg,
            method=self.method,
            subset=self.subset,
            lhn_site=self.lhn_site,
            seed=self.seed,
            detokenize=vocab.words_of,
        )
        return self

    def predict(self, X) -> list[str]:
        X = _validate_features(X, self.base.model_config_.d_feat)
        fusion = self.base._fusion()
        out = []
        for x in X:
            best = beam_search(self.params_, self.base._lm_params(), x, fusion)[0]
            out.append(self.base.vocab_.decode(best.tokens))
        return out

    def wer(self, X, y) -> float:
        hyps = [h.split() for h in self.predict(X)]
        refs = [str(t).split() for t in y]
        return wer(refs, hyps)

    def score(self, X, y) -> float:
        return -self.wer(X, y)
