"""External word-piece LSTM language model.

The base LM is trained with noise contrastive estimation against a smoothed
unigram noise distribution, treating its output logits as unnormalized
log-probabilities (log partition fixed at zero), which makes the model
self-normalizing.  Speaker fine-tuning continues NCE training on the
speaker's text, optionally mixed with a cross-entropy pull toward the
generic model's exact-softmax distribution (the LM analogue of KLD
adaptation).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, DivergenceError, TokenError
from .model import RunMode, EVAL, lstm_step, train_mode
from .optim import Adam

__all__ = [
    "LmConfig",
    "LmParams",
    "NceConfig",
    "lm_logprob",
    "train_nce",
    "finetune_lm",
    "perplexity",
    "mean_abs_log_partition",
    "unigram_distribution",
    "nce_sequence_loss",
    "lm_initial_state",
    "lm_step_scores",
]

LM_MODES = ("exact", "self_norm")


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    embed_dim: int = 16
    hidden: int = 32
    layers: int = 1
    bos_id: int = 0
    eos_id: int = 1


class LmParams:
    def __init__(self, config: LmConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def initialize(cls, config: LmConfig, seed: int = 0) -> "LmParams":
        rng = np.random.default_rng(seed)
        tensors: dict[str, Tensor] = {}
        tensors["embed"] = Tensor(
            rng.uniform(-0.1, 0.1, size=(config.vocab_size, config.embed_dim)),
            requires_grad=True,
        )
        d_in = config.embed_dim
        for layer in range(config.layers):
            r = 1.0 / np.sqrt(d_in + config.hidden)
            tensors[f"lstm{layer}.w"] = Tensor(
                rng.uniform(-r, r, size=(d_in + config.hidden, 4 * config.hidden)),
                requires_grad=True,
            )
            bias = np.zeros(4 * config.hidden)
            bias[config.hidden : 2 * config.hidden] = 1.0
            tensors[f"lstm{layer}.b"] = Tensor(bias, requires_grad=True)
            d_in = config.hidden
        r = 1.0 / np.sqrt(config.hidden)
        tensors["out.w"] = Tensor(
            rng.uniform(-r, r, size=(config.hidden, config.vocab_size)), requires_grad=True
        )
        tensors["out.b"] = Tensor(np.zeros(config.vocab_size), requires_grad=True)
        return cls(config, tensors)

    def get(self, name: str) -> Tensor:
        return self.tensors[name]

    def copy(self) -> "LmParams":
        return LmParams(
            self.config,
            {n: Tensor(t.values.copy(), requires_grad=t.requires_grad)
             for n, t in self.tensors.items()},
        )

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if t.requires_grad}


@dataclass
class NceConfig:
    k: int = 8                      # noise samples per position
    weight_decay: float = 1e-6
    dropout: float = 0.1
    learning_rate: float = 5e-3
    batch_size: int = 8
    epochs: int = 10

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError(f"need at least one noise sample, got k={self.k}")


def _check_tokens(config: LmConfig, tokens) -> list[int]:
    tokens = [int(t) for t in tokens]
    for t in tokens:
        if not 0 <= t < config.vocab_size:
            raise TokenError(f"token id {t} outside vocabulary of {config.vocab_size}")
    return tokens


def _hidden_matrix(params: LmParams, inputs: list[int], mode: RunMode) -> Tensor:
    """Top-layer hidden states for each input position, as an (n, hidden) matrix.

    Dropout (train mode) touches only the feed-forward connections: the
    embedding output and the final hidden states, never the recurrence.
    """
    cfg = params.config
    emb = ad.embedding(params.get("embed"), inputs)
    if mode.training and mode.dropout > 0:
        keep = 1.0 - mode.dropout
        emb = ad.dropout(emb, (mode.rng.random(emb.shape) < keep).astype(float), keep)
    rows = [ad.narrow(emb, 0, i, 1) for i in range(len(inputs))]
    for layer in range(cfg.layers):
        w, b = params.get(f"lstm{layer}.w"), params.get(f"lstm{layer}.b")
        h = Tensor(np.zeros((1, cfg.hidden)))
        c = Tensor(np.zeros((1, cfg.hidden)))
        out = []
        for row in rows:
            h, c = lstm_step(w, b, row, h, c, cfg.hidden)
            out.append(h)
        rows = out
    hidden = ad.concat(rows, axis=0)
    if mode.training and mode.dropout > 0:
        keep = 1.0 - mode.dropout
        hidden = ad.dropout(hidden, (mode.rng.random(hidden.shape) < keep).astype(float), keep)
    return hidden


def _logits_matrix(params: LmParams, inputs: list[int], mode: RunMode) -> Tensor:
    hidden = _hidden_matrix(params, inputs, mode)
    return ad.add(ad.matmul(hidden, params.get("out.w")), params.get("out.b"))


def lm_logprob(params: LmParams, y, mode: str = "exact") -> tuple[np.ndarray, float]:
    """Per-token scores ``log p(y_i | y_<i)`` and their sum.

    ``exact`` applies the softmax normalization; ``self_norm`` returns the
    raw output logits of the target tokens (the partition is assumed 1).
    """
    if mode not in LM_MODES:
        raise ConfigurationError(f"unknown LM scoring mode {mode!r}")
    y = _check_tokens(params.config, y)
    if not y:
        raise ContractError("cannot score an empty sequence")
    inputs = [params.config.bos_id] + y[:-1]
    logits = _logits_matrix(params, inputs, EVAL).values
    if mode == "exact":
        logits = ad.log_softmax_values(logits)
    per_token = logits[np.arange(len(y)), y]
    return per_token, float(per_token.sum())


def unigram_distribution(corpus, vocab_size: int) -> np.ndarray:
    """Empirical unigram with add-1 smoothing; strictly positive everywhere."""
    counts = np.ones(vocab_size)
    for seq in corpus:
        for t in seq:
            counts[t] += 1
    return counts / counts.sum()


def nce_sequence_loss(
    params: LmParams,
    tokens,
    noise_ids: list[list[int]],
    noise_dist: np.ndarray,
    mode: RunMode = EVAL,
) -> Tensor:
    """Binary NCE objective for one sequence with the noise samples given.

    Each position discriminates the data token from ``k`` noise tokens using
    the unnormalized model score ``s(w)`` against ``log(k * q(w))``.  Passing
    the samples in keeps the loss deterministic for gradient checks.
    """
    tokens = _check_tokens(params.config, tokens)
    if len(noise_ids) != len(tokens):
        raise ContractError(f"{len(noise_ids)} noise rows vs {len(tokens)} positions")
    k = len(noise_ids[0])
    inputs = [params.config.bos_id] + tokens[:-1]
    logits = _logits_matrix(params, inputs, mode)
    vocab = params.config.vocab_size
    terms = []
    for pos, target in enumerate(tokens):
        ids = [target] + list(noise_ids[pos])
        if len(ids) != k + 1:
            raise ContractError("ragged noise sample rows")
        select = np.zeros((vocab, k + 1))
        select[ids, np.arange(k + 1)] = 1.0
        row = ad.matmul(ad.narrow(logits, 0, pos, 1), Tensor(select))
        offsets = np.log(k * noise_dist[ids]).reshape(1, -1)
        delta = ad.sub(row, Tensor(offsets))
        signs = np.full((1, k + 1), -1.0)
        signs[0, 0] = 1.0
        terms.append(ad.scale(ad.tsum(ad.log_sigmoid(ad.mul(delta, Tensor(signs)))), -1.0))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.scale(total, 1.0 / len(tokens))


def _kld_to_base_loss(params: LmParams, tokens, base_logits: np.ndarray, mode: RunMode) -> Tensor:
    """Mean CE between the generic model's exact softmax and the student."""
    inputs = [params.config.bos_id] + tokens[:-1]
    logits = _logits_matrix(params, inputs, mode)
    teacher = ad.softmax_values(base_logits)
    terms = []
    for pos in range(len(tokens)):
        row = ad.narrow(logits, 0, pos, 1)
        terms.append(ad.cross_entropy_with_logits(row, teacher[pos : pos + 1]))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.scale(total, 1.0 / len(tokens))


def _run_training(
    params: LmParams,
    corpus: list[list[int]],
    cfg: NceConfig,
    seed: int,
    epochs: int,
    learning_rate: float,
    kld_teacher: LmParams | None = None,
    beta_lm: float = 0.0,
) -> LmParams:
    if not corpus:
        raise ContractError("training corpus is empty")
    out = params.copy()
    rng = np.random.default_rng(seed)
    noise = unigram_distribution(corpus, out.config.vocab_size)
    opt = Adam(out.trainable(), lr=learning_rate, weight_decay=cfg.weight_decay)
    for epoch in range(epochs):
        order = rng.permutation(len(corpus))
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            opt.zero_grad()
            for idx in batch:
                tokens = list(corpus[idx])
                if not tokens:
                    continue
                samples = rng.choice(
                    out.config.vocab_size, size=(len(tokens), cfg.k), p=noise
                )
                base_logits = None
                if kld_teacher is not None and beta_lm > 0:
                    inputs = [out.config.bos_id] + tokens[:-1]
                    base_logits = _logits_matrix(kld_teacher, inputs, EVAL).values
                mode = train_mode(cfg.dropout, rng)
                with ad.Tape():
                    loss = nce_sequence_loss(out, tokens, samples.tolist(), noise, mode)
                    if base_logits is not None:
                        loss = ad.add(
                            ad.scale(loss, 1.0 - beta_lm),
                            ad.scale(_kld_to_base_loss(out, tokens, base_logits, mode), beta_lm),
                        )
                    if not np.isfinite(loss.item()):
                        raise DivergenceError(f"non-finite LM loss at epoch {epoch}")
                    ad.backward(ad.scale(loss, 1.0 / len(batch)))
            opt.step()
    return out


def train_nce(params: LmParams, corpus, cfg: NceConfig, seed: int = 0) -> LmParams:
    """NCE training from scratch-initialized (or given) parameters."""
    return _run_training(params, [list(s) for s in corpus], cfg, seed,
                         cfg.epochs, cfg.learning_rate)


def finetune_lm(
    params: LmParams,
    speaker_text,
    use_kld: bool,
    base: LmParams,
    cfg: NceConfig | None = None,
    beta_lm: float = 0.5,
    epochs: int = 3,
    learning_rate: float = 1e-3,
    seed: int = 0,
) -> LmParams:
    """Continue training on speaker text with a small learning rate.

    With ``use_kld`` the NCE loss is mixed with a cross-entropy pull toward
    the generic model's exact-softmax outputs, weighted ``beta_lm``; at
    ``beta_lm=1`` and ``params == base`` the gradient vanishes.  Zero epochs
    return the parameters bitwise unchanged.
    """
    cfg = cfg or NceConfig()
    corpus = [list(s) for s in speaker_text]
    if epochs == 0:
        return params.copy()
    return _run_training(
        params,
        corpus,
        cfg,
        seed,
        epochs,
        learning_rate,
        kld_teacher=base if use_kld else None,
        beta_lm=beta_lm if use_kld else 0.0,
    )


def perplexity(params: LmParams, corpus) -> float:
    """Exact-softmax perplexity per token."""
    total = 0.0
    count = 0
    for seq in corpus:
        per_token, _ = lm_logprob(params, seq, mode="exact")
        total += per_token.sum()
        count += len(per_token)
    if count == 0:
        raise ContractError("cannot compute perplexity of an empty corpus")
    return float(np.exp(-total / count))


def mean_abs_log_partition(params: LmParams, corpus) -> float:
    """Mean |log sum_v exp(logit_v)| over all scoring contexts."""
    total = 0.0
    count = 0
    for seq in corpus:
        tokens = _check_tokens(params.config, seq)
        inputs = [params.config.bos_id] + tokens[:-1]
        logits = _logits_matrix(params, inputs, EVAL).values
        m = logits.max(axis=1)
        log_z = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
        total += np.abs(log_z).sum()
        count += log_z.size
    return total / count


def lm_initial_state(params: LmParams):
    cfg = params.config
    return [
        (Tensor(np.zeros((1, cfg.hidden))), Tensor(np.zeros((1, cfg.hidden))))
        for _ in range(cfg.layers)
    ]


def lm_step_scores(params: LmParams, state, token: int, mode: str = "self_norm"):
    """Consume ``token`` and return next-position scores plus the new state."""
    cfg = params.config
    if not 0 <= token < cfg.vocab_size:
        raise TokenError(f"token id {token} outside vocabulary of {cfg.vocab_size}")
    x = ad.embedding(params.get("embed"), [token])
    new_state = []
    for layer, (h_prev, c_prev) in enumerate(state):
        h, c = lstm_step(
            params.get(f"lstm{layer}.w"), params.get(f"lstm{layer}.b"),
            x, h_prev, c_prev, cfg.hidden,
        )
        new_state.append((h, c))
        x = h
    logits = ad.add(ad.matmul(x, params.get("out.w")), params.get("out.b")).values.ravel()
    if mode == "exact":
        logits = ad.log_softmax_values(logits)
    return logits, new_state
