"""Training and adaptation objectives.

The speaker-adaptation loss mixes per-step cross-entropy against the gold
(label-smoothed) target with cross-entropy against the frozen
speaker-independent model's output distribution, weighted by the relevance
``beta``; both terms collapse into one fused softmax cross-entropy with the
mixed target ``(1-beta)*q_gold + beta*p_si``, which keeps the beta endpoints
exact.  The expected-word-error loss renormalizes n-best scores with a
softmax and subtracts the plain n-best mean error count as a baseline.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import decode as decoding
from .autodiff import Tensor
from .errors import ContractError, DataError, DivergenceError
from .metrics import edit_distance
from .model import (
    EVAL,
    DecoderStepState,
    Seq2SeqParams,
    attach_lhn,
    encode,
    forward_teacher_forced,
    parameter_subset,
    train_mode,
)
from .optim import Adam

__all__ = [
    "AdaptationConfig",
    "NBestList",
    "ce_loss",
    "kld_adapt_loss",
    "mwer_loss",
    "combined_adapt_loss",
    "adapt",
    "nbest_expected_errors",
]

ADAPT_METHODS = ("kld", "lhn", "mwer_kld")


@dataclass
class AdaptationConfig:
    beta: float = 0.6               # KLD relevance
    gamma1: float = 1.0             # weight of the KLD-regularized CE term
    gamma2: float = 1.0             # weight of the expected-word-error term
    label_smoothing: float = 0.1
    dropout_adapt: float = 0.25
    learning_rate: float = 1e-3
    batch_size: int = 4
    epochs: int = 3
    nbest_size: int = 4

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ContractError(f"beta must be in [0, 1], got {self.beta}")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ContractError("gamma weights must be nonnegative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ContractError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")


@dataclass
class NBestList:
    """Beam-search hypotheses with their sequence log-probabilities.

    ``logprob`` entries may be plain floats or scalar tensors (the latter keep
    the list differentiable w.r.t. the sequence scores).
    """

    hypotheses: list  # (tokens, logprob) pairs
    reference: tuple

    def __post_init__(self):
        if not self.hypotheses:
            raise ContractError("n-best list must be nonempty")
        seen = set()
        for tokens, logprob in self.hypotheses:
            key = tuple(tokens)
            if key in seen:
                raise ContractError(f"duplicate hypothesis {key}")
            seen.add(key)
            value = logprob.item() if isinstance(logprob, Tensor) else float(logprob)
            if not np.isfinite(value):
                raise ContractError("hypothesis log-probability must be finite")
        self.reference = tuple(self.reference)


def _logits_of(step) -> Tensor:
    """Model steps carry logits; bare rows are probability distributions."""
    if isinstance(step, DecoderStepState):
        return step.logits
    row = step if isinstance(step, Tensor) else Tensor(step)
    return ad.log(row)


def _smoothed_one_hot(size: int, target: int, smoothing: float) -> np.ndarray:
    if not 0 <= target < size:
        raise ContractError(f"target id {target} outside vocabulary of {size}")
    if smoothing == 0.0:
        q = np.zeros(size)
        q[target] = 1.0
        return q
    q = np.full(size, smoothing / (size - 1))
    q[target] = 1.0 - smoothing
    return q


def ce_loss(steps, y_star, smoothing: float = 0.0) -> Tensor:
    """Mean per-step cross-entropy against the (smoothed) one-hot target."""
    y_star = list(y_star)
    if len(steps) != len(y_star):
        raise ContractError(f"{len(steps)} distributions vs {len(y_star)} targets")
    if not steps:
        raise ContractError("need at least one step")
    total = None
    for step, target in zip(steps, y_star):
        logits = _logits_of(step)
        q = _smoothed_one_hot(logits.size, target, smoothing).reshape(logits.shape)
        term = ad.cross_entropy_with_logits(logits, q)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(y_star))


def _teacher_row(row, shape) -> np.ndarray:
    values = row.values if isinstance(row, Tensor) else np.asarray(row, dtype=np.float64)
    values = values.reshape(shape)
    return values


def kld_adapt_loss(steps, y_star, p_si, beta: float, smoothing: float = 0.0) -> Tensor:
    """Mean over steps of ``(1-beta)*CE(y*, p) + beta*CE(p_si, p)``.

    ``p_si`` rows come from the frozen speaker-independent model and are
    treated as constants.  ``beta=0`` takes exactly the plain CE path;
    ``beta=1`` drops the gold term entirely, so at ``p == p_si`` the
    parameter gradient is exactly zero.
    """
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"beta must be in [0, 1], got {beta}")
    if beta == 0.0:
        return ce_loss(steps, y_star, smoothing)
    y_star = list(y_star)
    if not (len(steps) == len(y_star) == len(p_si)):
        raise ContractError(
            f"misaligned inputs: {len(steps)} steps, {len(y_star)} targets, "
            f"{len(p_si)} teacher rows"
        )
    total = None
    for step, target, teacher in zip(steps, y_star, p_si):
        logits = _logits_of(step)
        teacher = _teacher_row(teacher, logits.shape)
        if beta == 1.0:
            q = teacher
        else:
            q_gold = _smoothed_one_hot(logits.size, target, smoothing).reshape(logits.shape)
            q = (1.0 - beta) * q_gold + beta * teacher
        term = ad.cross_entropy_with_logits(logits, q)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(y_star))


def _hyp_words(tokens, detokenize) -> list[str]:
    if detokenize is None:
        return [str(t) for t in tokens]
    return detokenize(tokens)


def mwer_loss(nbest: NBestList, detokenize=None) -> Tensor:
    """Expected word errors over the n-best, less the plain n-best mean.

    ``sum_h p_hat(h) * (W(h, y*) - mean_h W)`` with ``p_hat`` the softmax of
    the sequence log-probabilities over the list.  The constant baseline
    leaves the gradient untouched but centers the value, so a single
    hypothesis (or a uniform point) scores zero.
    """
    ref_words = _hyp_words(nbest.reference, detokenize)
    errors = np.array(
        [
            edit_distance(ref_words, _hyp_words(tokens, detokenize)).distance
            for tokens, _ in nbest.hypotheses
        ],
        dtype=np.float64,
    )
    scores = []
    for _, logprob in nbest.hypotheses:
        t = logprob if isinstance(logprob, Tensor) else Tensor(float(logprob))
        scores.append(ad.reshape(t, (1, 1)))
    z = ad.concat(scores, axis=1)
    p_hat = ad.softmax(z)
    centered = (errors - errors.mean()).reshape(1, -1)
    return ad.tsum(ad.mul(p_hat, Tensor(centered)))


def combined_adapt_loss(steps, y_star, p_si, nbest: NBestList | None, cfg: AdaptationConfig,
                        detokenize=None) -> Tensor:
    """``gamma1 * L_kld + gamma2 * L_mwer``; either side drops out at weight zero."""
    kld = kld_adapt_loss(steps, y_star, p_si, cfg.beta, cfg.label_smoothing)
    if cfg.gamma2 == 0.0 or nbest is None:
        return ad.scale(kld, cfg.gamma1)
    mwer = mwer_loss(nbest, detokenize)
    if cfg.gamma1 == 0.0:
        return ad.scale(mwer, cfg.gamma2)
    return ad.add(ad.scale(kld, cfg.gamma1), ad.scale(mwer, cfg.gamma2))


def _beam_nbest(params: Seq2SeqParams, features, width: int) -> list:
    cfg = decoding.FusionConfig(lambda_lm=0.0, lambda_cov=0.0, beam_width=width)
    return decoding.beam_search(params, None, features, cfg)


def _nbest_tokens(params: Seq2SeqParams, features, width: int) -> list[tuple]:
    """Distinct EOS-terminated hypothesis token sequences from beam search."""
    eos = params.config.eos_id
    out: list[tuple] = []
    for entry in _beam_nbest(params, features, width):
        tokens = tuple(entry.tokens)
        if not tokens or tokens[-1] != eos:
            tokens = tokens + (eos,)
        if tokens not in out:
            out.append(tokens)
    return out


def _rescore_nbest(params: Seq2SeqParams, hyp_tokens, reference, enc, mode) -> NBestList:
    """Teacher-forced rescoring of hypothesis sequences on the current tape."""
    hypotheses = []
    for tokens in hyp_tokens:
        steps, _ = forward_teacher_forced(params, None, tokens, mode, enc=enc)
        hypotheses.append((tokens, _sequence_logprob_from_steps(steps, tokens)))
    return NBestList(hypotheses, tuple(reference))


def _sequence_logprob_from_steps(steps, y_star) -> Tensor:
    total = None
    for step, target in zip(steps, y_star):
        one_hot = np.zeros(step.logits.shape)
        one_hot[0, target] = 1.0
        term = ad.scale(ad.cross_entropy_with_logits(step.logits, one_hot), -1.0)
        total = term if total is None else ad.add(total, term)
    return total


def nbest_expected_errors(params: Seq2SeqParams, utterances, width: int = 4,
                          detokenize=None) -> float:
    """Mean over utterances of the n-best expected word-error count."""
    total = 0.0
    for utt in utterances:
        raw = _beam_nbest(params, utt.features, width)
        ref = _hyp_words(tuple(utt.tokens), detokenize)
        errors = np.array(
            [edit_distance(ref, _hyp_words(e.tokens, detokenize)).distance for e in raw]
        )
        logprobs = np.array([e.s2s_logprob for e in raw])
        p_hat = ad.softmax_values(logprobs.reshape(1, -1)).ravel()
        total += float(p_hat @ errors)
    return total / len(list(utterances))


def _loss_parts(steps, y_star, p_si, smoothing) -> tuple[float, float]:
    """Detached CE and teacher-CE values for run logs."""
    ce = kld = 0.0
    for step, target, teacher in zip(steps, y_star, p_si):
        logp = ad.log_softmax_values(step.logits.values).ravel()
        q = _smoothed_one_hot(logp.size, target, smoothing)
        ce += float(-(q * logp).sum())
        kld += float(-(np.asarray(teacher).ravel() * logp).sum())
    n = len(y_star)
    return ce / n, kld / n


def adapt(
    si_params: Seq2SeqParams,
    data,
    cfg: AdaptationConfig,
    method: str = "kld",
    subset: str = "all",
    lhn_site: str = "decoder_output",
    seed: int = 0,
    init_params: Seq2SeqParams | None = None,
    detokenize=None,
    log_path: str | None = None,
) -> Seq2SeqParams:
    """Fine-tune a copy of the SI model on one speaker's data.

    ``kld`` and ``mwer_kld`` update the chosen parameter subset; ``lhn``
    attaches an identity LHN at ``lhn_site`` and updates only its (U, b),
    still under the KLD-regularized loss.  The SI model itself stays frozen
    and provides the teacher distributions; ``init_params`` optionally
    starts the student elsewhere (e.g. a KLD-adapted checkpoint for the
    combined criterion).
    """
    if method not in ADAPT_METHODS:
        raise ContractError(f"unknown adaptation method {method!r}")
    utterances = list(data.utterances if hasattr(data, "utterances") else data)
    if not utterances:
        raise DataError("adaptation corpus is empty")

    start = init_params if init_params is not None else si_params
    if method == "lhn":
        sa = attach_lhn(start, lhn_site)
    else:
        sa = start.copy()
        sa.set_trainable(parameter_subset(sa, subset))

    rng = np.random.default_rng(seed)
    opt = Adam(sa.trainable(), lr=cfg.learning_rate)
    log_rows = []
    for epoch in range(cfg.epochs):
        t0 = time.monotonic()
        order = rng.permutation(len(utterances))
        epoch_loss = []
        epoch_ce = []
        epoch_kld = []
        epoch_mwer = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            opt.zero_grad()
            for idx in batch:
                utt = utterances[idx]
                teacher_steps, _ = forward_teacher_forced(
                    si_params, utt.features, utt.tokens, EVAL
                )
                p_si = [s.p.values for s in teacher_steps]
                hyp_tokens = (
                    _nbest_tokens(sa, utt.features, cfg.nbest_size)
                    if method == "mwer_kld"
                    else None
                )
                mode = train_mode(cfg.dropout_adapt, rng)
                with ad.Tape():
                    enc = encode(sa, utt.features, mode)
                    steps, _ = forward_teacher_forced(
                        sa, utt.features, utt.tokens, mode, enc=enc
                    )
                    kld = kld_adapt_loss(
                        steps, utt.tokens, p_si, cfg.beta, cfg.label_smoothing
                    )
                    if method == "mwer_kld":
                        nbest = _rescore_nbest(sa, hyp_tokens, utt.tokens, enc, mode)
                        mwer = mwer_loss(nbest, detokenize)
                        loss = ad.add(ad.scale(kld, cfg.gamma1), ad.scale(mwer, cfg.gamma2))
                        epoch_mwer.append(float(mwer.values))
                    else:
                        loss = kld
                    value = loss.item()
                    if not np.isfinite(value):
                        raise DivergenceError(
                            f"non-finite adaptation loss at epoch {epoch}"
                        )
                    epoch_loss.append(value)
                    ce_part, kld_part = _loss_parts(
                        steps, utt.tokens, p_si, cfg.label_smoothing
                    )
                    epoch_ce.append(ce_part)
                    epoch_kld.append(kld_part)
                    ad.backward(ad.scale(loss, 1.0 / len(batch)))
            opt.step()
        log_rows.append(
            {
                "epoch": epoch,
                "loss": float(np.mean(epoch_loss)),
                "ce_part": float(np.mean(epoch_ce)),
                "kld_part": float(np.mean(epoch_kld)),
                "mwer_part": float(np.mean(epoch_mwer)) if epoch_mwer else 0.0,
                "wall_ms": int(1000 * (time.monotonic() - t0)),
            }
        )
    if log_path:
        with open(log_path, "w", encoding="utf-8") as fh:
            for row in log_rows:
                fh.write(json.dumps(row) + "\n")
    return sa
