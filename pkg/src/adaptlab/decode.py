"""Beam-search decoding with optional shallow LM fusion and a coverage score.

Hypotheses are ranked by ``log p(y|x) + lambda_lm * log p(y) + lambda_cov *
cov(x, y)``.  The coverage score counts encoder positions whose cumulative
attention mass exceeds a threshold (a per-token variant, counting decoded
tokens whose peak attention exceeds the threshold, sits behind
``coverage_mode``); it offsets the deletion/insertion bias fused decoding
otherwise develops.  When the LM is absent or its weight is zero, the LM
term is never computed, so such decodes are bitwise identical to LM-free
decoding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import log_softmax_values
from .errors import ConfigurationError, ContractError
from .lm import LmParams, lm_initial_state, lm_step_scores
from .model import EVAL, DecoderStepState, EncoderStates, Seq2SeqParams, decode_step, encode

__all__ = [
    "FusionConfig",
    "Hypothesis",
    "DecodedHypothesis",
    "coverage_score",
    "fused_score",
    "beam_search",
]

COVERAGE_MODES = ("cumulative", "per_token")


@dataclass
class FusionConfig:
    lambda_lm: float = 0.0
    lambda_cov: float = 0.0
    beam_width: int = 8
    max_len: int | None = None       # default 2*T' + 5, set per utterance
    coverage_tau: float = 0.5
    coverage_mode: str = "cumulative"
    lm_mode: str = "self_norm"

    def __post_init__(self):
        if self.beam_width < 1:
            raise ConfigurationError(f"beam width must be >= 1, got {self.beam_width}")
        if self.max_len is not None and self.max_len < 1:
            raise ConfigurationError(f"max_len must be >= 1, got {self.max_len}")
        if self.lambda_lm < 0 or self.lambda_cov < 0:
            raise ConfigurationError("fusion weights must be nonnegative")
        if self.coverage_mode not in COVERAGE_MODES:
            raise ConfigurationError(f"unknown coverage mode {self.coverage_mode!r}")
        if self.lm_mode not in ("exact", "self_norm"):
            raise ConfigurationError(f"unknown LM mode {self.lm_mode!r}")


@dataclass
class Hypothesis:
    """A live beam entry; ``finished`` iff the last token is EOS."""

    tokens: tuple[int, ...]
    s2s_logprob: float
    lm_logprob: float
    attn_rows: np.ndarray
    state: DecoderStepState | None = None
    lm_state: object = None
    finished: bool = False


@dataclass
class DecodedHypothesis:
    tokens: tuple[int, ...]
    s2s_logprob: float
    lm_logprob: float
    coverage: float
    fused: float
    finished: bool
    attn: np.ndarray


def coverage_score(attention: np.ndarray, tau: float = 0.5, mode: str = "cumulative") -> int:
    """Count of sufficiently attended encoder positions (or tokens).

    ``cumulative``: encoder columns whose total attention mass exceeds
    ``tau``.  ``per_token``: decoded rows whose peak attention exceeds
    ``tau``.
    """
    attention = np.asarray(attention, dtype=np.float64)
    if attention.ndim != 2:
        raise ContractError(f"attention matrix must be rank 2, got {attention.shape}")
    if mode == "cumulative":
        if attention.shape[0] == 0:
            return 0
        return int((attention.sum(axis=0) > tau).sum())
    if mode == "per_token":
        if attention.shape[0] == 0:
            return 0
        return int((attention.max(axis=1) > tau).sum())
    raise ConfigurationError(f"unknown coverage mode {mode!r}")


def fused_score(h: Hypothesis, cfg: FusionConfig) -> float:
    """``s2s + lambda_lm * lm + lambda_cov * coverage`` for one hypothesis."""
    score = h.s2s_logprob
    if cfg.lambda_lm:
        score += cfg.lambda_lm * h.lm_logprob
    if cfg.lambda_cov:
        score += cfg.lambda_cov * coverage_score(h.attn_rows, cfg.coverage_tau, cfg.coverage_mode)
    return score


def beam_search(
    model_params: Seq2SeqParams,
    lm_params: LmParams | None,
    x,
    cfg: FusionConfig,
    enc: EncoderStates | None = None,
) -> list[DecodedHypothesis]:
    """Batch-expansion beam search over the fused score.

    Each live hypothesis is expanded over the whole vocabulary, the top
    ``beam_width`` candidates by fused score survive, and EOS-terminated
    survivors retire to the finished pool.  The search stops at ``max_len``
    or once no optimistic continuation of a live hypothesis can beat the
    pool (only applied when the bound is sound, i.e. the LM term is off or
    exactly normalized).  Ties break lexicographically on the token ids, so
    output order is deterministic.  If nothing finishes within ``max_len``
    the best unfinished hypotheses are returned, flagged.
    """
    mcfg = model_params.config
    use_lm = lm_params is not None and cfg.lambda_lm != 0.0
    if use_lm and lm_params.config.vocab_size != mcfg.vocab_size:
        raise ConfigurationError(
            f"LM vocabulary {lm_params.config.vocab_size} != model vocabulary {mcfg.vocab_size}"
        )
    if enc is None:
        enc = encode(model_params, x, EVAL)
    t_prime = enc.t_prime
    max_len = cfg.max_len if cfg.max_len is not None else 2 * t_prime + 5
    eos = mcfg.eos_id

    def fused_of(s2s: float, lm: float, cov: float) -> float:
        score = s2s
        if use_lm:
            score += cfg.lambda_lm * lm
        if cfg.lambda_cov:
            score += cfg.lambda_cov * cov
        return score

    root = Hypothesis(
        tokens=(),
        s2s_logprob=0.0,
        lm_logprob=0.0,
        attn_rows=np.zeros((0, t_prime)),
        state=None,
        lm_state=lm_initial_state(lm_params) if use_lm else None,
    )
    live = [root]
    finished: list[Hypothesis] = []
    # the bound below is only admissible when future per-token LM scores
    # cannot be positive
    can_stop_early = not use_lm or cfg.lm_mode == "exact"
    cov_bound = t_prime if cfg.coverage_mode == "cumulative" else max_len

    for _ in range(max_len):
        candidates = []
        for h in live:
            prev_token = h.tokens[-1] if h.tokens else mcfg.bos_id
            step = decode_step(model_params, h.state, prev_token, enc, EVAL)
            token_logp = log_softmax_values(step.logits.values).ravel()
            lm_row, lm_state = None, None
            if use_lm:
                lm_row, lm_state = lm_step_scores(lm_params, h.lm_state, prev_token, cfg.lm_mode)
            attn = np.concatenate([h.attn_rows, step.alpha.values], axis=0)
            cov = (
                coverage_score(attn, cfg.coverage_tau, cfg.coverage_mode)
                if cfg.lambda_cov
                else 0.0
            )
            for v in range(mcfg.vocab_size):
                s2s = h.s2s_logprob + float(token_logp[v])
                lm = (h.lm_logprob + float(lm_row[v])) if use_lm else 0.0
                candidates.append(
                    (fused_of(s2s, lm, cov), h.tokens + (v,), s2s, lm, attn, cov, step, lm_state)
                )
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for fused, tokens, s2s, lm, attn, cov, step, lm_state in candidates[: cfg.beam_width]:
            hyp = Hypothesis(tokens, s2s, lm, attn, step, lm_state, tokens[-1] == eos)
            if hyp.finished:
                finished.append(hyp)
            else:
                live.append(hyp)
        if not live:
            break
        if finished and can_stop_early:
            best_done = max(fused_of(f.s2s_logprob, f.lm_logprob,
                                     coverage_score(f.attn_rows, cfg.coverage_tau,
                                                    cfg.coverage_mode)
                                     if cfg.lambda_cov else 0.0)
                            for f in finished)
            optimistic = max(
                fused_of(h.s2s_logprob, h.lm_logprob, cov_bound if cfg.lambda_cov else 0.0)
                for h in live
            )
            if best_done >= optimistic:
                break

    pool = finished if finished else live
    results = []
    for h in pool:
        cov = (
            coverage_score(h.attn_rows, cfg.coverage_tau, cfg.coverage_mode)
            if cfg.lambda_cov
            else 0.0
        )
        results.append(
            DecodedHypothesis(
                tokens=h.tokens,
                s2s_logprob=h.s2s_logprob,
                lm_logprob=h.lm_logprob,
                coverage=cov,
                fused=fused_of(h.s2s_logprob, h.lm_logprob, cov),
                finished=h.finished,
                attn=h.attn_rows,
            )
        )
    results.sort(key=lambda r: (-r.fused, r.tokens))
    return results
