"""Attention-based seq2seq acoustic model: CNN front-end, pyramid bLSTM
encoder with frame decimation, additive-attention LSTM decoder, and optional
speaker-specific linear (LHN) layers at three sites.

The encoder halves the frame rate once per pyramid stage by concatenating
adjacent frame pairs before the stage's bLSTM, so ``T' = ceil(T / 2**stages)``.
LHN layers are square, identity-initialized, and applied to the input
features, the encoder output (before attention), or the dense decoder state
(before the output softmax).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, InputLengthError, TokenError

__all__ = [
    "ModelConfig",
    "RunMode",
    "EVAL",
    "train_mode",
    "Seq2SeqParams",
    "EncoderStates",
    "DecoderStepState",
    "encode",
    "lstm_step",
    "decode_step",
    "forward_teacher_forced",
    "teacher_forced_logprob",
    "sequence_logprob",
    "attach_lhn",
    "lhn_dim",
    "parameter_subset",
    "subset_counts",
]

LHN_SITES = ("features", "encoder_output", "decoder_output")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_feat: int = 8
    conv_layers: int = 1
    conv_dim: int = 16
    conv_width: int = 3
    encoder_units: int = 32        # per direction
    encoder_stages: int = 2        # pyramid stages; each halves the frame rate
    attention_dim: int = 32
    decoder_layers: int = 1
    decoder_units: int = 64
    dense_dim: int = 64
    embed_dim: int = 16
    bos_id: int = 0
    eos_id: int = 1

    @property
    def d_enc(self) -> int:
        return 2 * self.encoder_units

    @property
    def min_frames(self) -> int:
        return 2**self.encoder_stages


@dataclass
class RunMode:
    """Forward-pass mode; training draws dropout masks from ``rng``."""

    training: bool = False
    dropout: float = 0.0
    rng: np.random.Generator | None = None


EVAL = RunMode()


def train_mode(dropout: float, rng: np.random.Generator) -> RunMode:
    return RunMode(training=True, dropout=dropout, rng=rng)


def _maybe_dropout(t: Tensor, mode: RunMode) -> Tensor:
    if not mode.training or mode.dropout <= 0.0:
        return t
    keep = 1.0 - mode.dropout
    mask = (mode.rng.random(t.shape) < keep).astype(np.float64)
    return ad.dropout(t, mask, keep)


class Seq2SeqParams:
    """Named parameter set; names are prefixed ``enc.``, ``dec.``, or ``lhn.``.

    The ``enc.`` and ``dec.`` prefixes realize the adaptable parameter
    subsets: encoder, decoder (attention + decoder RNN + output layer +
    embedding), and their disjoint union ``all``.  LHN tensors stand apart
    from both subsets.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "Seq2SeqParams":
        rng = np.random.default_rng(seed)
        tensors: dict[str, Tensor] = {}

        def weight(name, fan_in, fan_out):
            r = 1.0 / np.sqrt(fan_in)
            tensors[name] = Tensor(rng.uniform(-r, r, size=(fan_in, fan_out)), requires_grad=True)

        def bias(name, dim, forget_gate_units=0):
            values = np.zeros(dim)
            if forget_gate_units:
                values[forget_gate_units : 2 * forget_gate_units] = 1.0
            tensors[name] = Tensor(values, requires_grad=True)

        d_in = config.d_feat
        for layer in range(config.conv_layers):
            weight(f"enc.conv{layer}.w", config.conv_width * d_in, config.conv_dim)
            bias(f"enc.conv{layer}.b", config.conv_dim)
            d_in = config.conv_dim
        u = config.encoder_units
        stage_in = 2 * config.conv_dim
        for stage in range(config.encoder_stages):
            for direction in ("fw", "bw"):
                weight(f"enc.stage{stage}.{direction}.w", stage_in + u, 4 * u)
                bias(f"enc.stage{stage}.{direction}.b", 4 * u, forget_gate_units=u)
            stage_in = 2 * config.d_enc  # next stage consumes concatenated pairs
        tensors["dec.embed"] = Tensor(
            rng.uniform(-0.1, 0.1, size=(config.vocab_size, config.embed_dim)),
            requires_grad=True,
        )
        weight("dec.attn.w_enc", config.d_enc, config.attention_dim)
        weight("dec.attn.w_dec", config.decoder_units, config.attention_dim)
        bias("dec.attn.b", config.attention_dim)
        weight("dec.attn.v", config.attention_dim, 1)
        du = config.decoder_units
        layer_in = config.embed_dim + config.d_enc
        for layer in range(config.decoder_layers):
            weight(f"dec.lstm{layer}.w", layer_in + du, 4 * du)
            bias(f"dec.lstm{layer}.b", 4 * du, forget_gate_units=du)
            layer_in = du
        weight("dec.dense.w", du + config.d_enc, config.dense_dim)
        bias("dec.dense.b", config.dense_dim)
        weight("dec.out.w", config.dense_dim, config.vocab_size)
        bias("dec.out.b", config.vocab_size)
        return cls(config, tensors)

    def get(self, name: str) -> Tensor:
        return self.tensors[name]

    def copy(self) -> "Seq2SeqParams":
        clone = {}
        for name, t in self.tensors.items():
            fresh = Tensor(t.values.copy(), requires_grad=t.requires_grad)
            clone[name] = fresh
        return Seq2SeqParams(self.config, clone)

    def lhn_sites(self) -> tuple[str, ...]:
        return tuple(s for s in LHN_SITES if f"lhn.{s}.u" in self.tensors)

    def set_trainable(self, names) -> None:
        names = set(names)
        unknown = names - set(self.tensors)
        if unknown:
            raise ConfigurationError(f"unknown parameter names: {sorted(unknown)}")
        for name, t in self.tensors.items():
            t.requires_grad = name in names

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if t.requires_grad}

    def parameter_count(self, names=None) -> int:
        names = self.tensors.keys() if names is None else names
        return int(sum(self.tensors[n].size for n in names))


def parameter_subset(params: Seq2SeqParams, subset: str) -> list[str]:
    """Names of the encoder, decoder, or full (non-LHN) parameter subset."""
    prefixes = {"encoder": ("enc.",), "decoder": ("dec.",), "all": ("enc.", "dec.")}
    if subset not in prefixes:
        raise ConfigurationError(f"unknown subset {subset!r}; use encoder|decoder|all")
    return [n for n in params.tensors if n.startswith(prefixes[subset])]


def subset_counts(params: Seq2SeqParams) -> dict[str, int]:
    return {
        s: params.parameter_count(parameter_subset(params, s))
        for s in ("encoder", "decoder", "all")
    }


def lhn_dim(config: ModelConfig, site: str) -> int:
    dims = {
        "features": config.d_feat,
        "encoder_output": config.d_enc,
        "decoder_output": config.dense_dim,
    }
    if site not in dims:
        raise ConfigurationError(f"unknown LHN site {site!r}; use one of {LHN_SITES}")
    return dims[site]


def attach_lhn(params: Seq2SeqParams, site: str) -> Seq2SeqParams:
    """Insert an identity-initialized LHN at ``site`` and freeze everything else.

    The returned model reproduces the input model exactly until (U, b) move;
    only those two tensors are left trainable.
    """
    dim = lhn_dim(params.config, site)
    if f"lhn.{site}.u" in params.tensors:
        raise ConfigurationError(f"LHN already attached at {site}")
    out = params.copy()
    out.tensors[f"lhn.{site}.u"] = Tensor(np.eye(dim), requires_grad=True)
    out.tensors[f"lhn.{site}.b"] = Tensor(np.zeros(dim), requires_grad=True)
    out.set_trainable([f"lhn.{site}.u", f"lhn.{site}.b"])
    return out


def _apply_lhn(params: Seq2SeqParams, site: str, t: Tensor) -> Tensor:
    u = params.tensors.get(f"lhn.{site}.u")
    if u is None:
        return t
    return ad.add(ad.matmul(t, u), params.tensors[f"lhn.{site}.b"])


@dataclass
class EncoderStates:
    states: Tensor  # (T', d_enc)

    @property
    def t_prime(self) -> int:
        return self.states.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        return self.states.values


def lstm_step(w: Tensor, b: Tensor, x_row: Tensor, h_prev: Tensor, c_prev: Tensor, units: int):
    z = ad.add(ad.matmul(ad.concat([x_row, h_prev], axis=1), w), b)
    i = ad.sigmoid(ad.narrow(z, 1, 0, units))
    f = ad.sigmoid(ad.narrow(z, 1, units, units))
    g = ad.tanh(ad.narrow(z, 1, 2 * units, units))
    o = ad.sigmoid(ad.narrow(z, 1, 3 * units, units))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


def _rows(t: Tensor) -> list[Tensor]:
    return [ad.narrow(t, 0, i, 1) for i in range(t.shape[0])]


def _bilstm(params: Seq2SeqParams, stage: int, x: Tensor) -> Tensor:
    u = params.config.encoder_units
    rows = _rows(x)
    zero = Tensor(np.zeros((1, u)))
    outputs: dict[str, list[Tensor]] = {}
    for direction in ("fw", "bw"):
        w = params.get(f"enc.stage{stage}.{direction}.w")
        b = params.get(f"enc.stage{stage}.{direction}.b")
        order = range(len(rows)) if direction == "fw" else range(len(rows) - 1, -1, -1)
        h, c = zero, zero
        out: list[Tensor | None] = [None] * len(rows)
        for t in order:
            h, c = lstm_step(w, b, rows[t], h, c, u)
            out[t] = h
        outputs[direction] = out
    merged = [ad.concat([outputs["fw"][t], outputs["bw"][t]], axis=1) for t in range(len(rows))]
    return ad.concat(merged, axis=0)


def _pair_decimate(x: Tensor) -> Tensor:
    n, d = x.shape
    if n % 2:
        x = ad.concat([x, Tensor(np.zeros((1, d)))], axis=0)
        n += 1
    return ad.reshape(x, (n // 2, 2 * d))


def _conv_front_end(params: Seq2SeqParams, x: Tensor, mode: RunMode) -> Tensor:
    cfg = params.config
    half = cfg.conv_width // 2
    h = x
    for layer in range(cfg.conv_layers):
        n, d = h.shape
        pad = Tensor(np.zeros((half, d)))
        padded = ad.concat([pad, h, pad], axis=0)
        windows = ad.concat(
            [ad.narrow(padded, 0, off, n) for off in range(cfg.conv_width)], axis=1
        )
        h = ad.tanh(ad.add(ad.matmul(windows, params.get(f"enc.conv{layer}.w")),
                           params.get(f"enc.conv{layer}.b")))
        h = _maybe_dropout(h, mode)
    return h


def encode(params: Seq2SeqParams, x, mode: RunMode = EVAL) -> EncoderStates:
    """Run the front-end and pyramid encoder; ``T' = ceil(T / 2**stages)``."""
    frames = x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != params.config.d_feat:
        raise ContractError(
            f"expected (T, {params.config.d_feat}) features, got {frames.shape}"
        )
    if frames.shape[0] < params.config.min_frames:
        raise InputLengthError(
            f"need at least {params.config.min_frames} frames "
            f"for {params.config.encoder_stages} decimation stages, got {frames.shape[0]}"
        )
    h = _apply_lhn(params, "features", Tensor(frames))
    h = _conv_front_end(params, h, mode)
    for stage in range(params.config.encoder_stages):
        h = _pair_decimate(h)
        h = _bilstm(params, stage, h)
        h = _maybe_dropout(h, mode)
    h = _apply_lhn(params, "encoder_output", h)
    return EncoderStates(states=h)


@dataclass
class DecoderStepState:
    layer_states: list  # per decoder layer: (h, c) Tensors
    c: Tensor           # context vector (1, d_enc)
    s_prime: Tensor     # dense-combined state (1, dense_dim), post-LHN
    logits: Tensor      # (1, V)
    p: Tensor           # output distribution (1, V)
    alpha: Tensor       # attention weights (1, T')

    @property
    def s(self) -> Tensor:
        return self.layer_states[-1][0]


def _initial_state(cfg: ModelConfig) -> DecoderStepState:
    zero_h = Tensor(np.zeros((1, cfg.decoder_units)))
    return DecoderStepState(
        layer_states=[(zero_h, Tensor(np.zeros((1, cfg.decoder_units))))
                      for _ in range(cfg.decoder_layers)],
        c=Tensor(np.zeros((1, cfg.d_enc))),
        s_prime=None,
        logits=None,
        p=None,
        alpha=None,
    )


def decode_step(
    params: Seq2SeqParams,
    prev: DecoderStepState | None,
    y_prev: int,
    enc: EncoderStates,
    mode: RunMode = EVAL,
) -> DecoderStepState:
    """One decoder step: recurrence on (s, Embedding(y_prev), c_prev), additive
    attention over the encoder states, dense combination, and the output
    softmax.  ``prev=None`` starts from zero state and zero context."""
    cfg = params.config
    if not 0 <= y_prev < cfg.vocab_size:
        raise TokenError(f"token id {y_prev} outside vocabulary of {cfg.vocab_size}")
    if prev is None:
        prev = _initial_state(cfg)
    emb = ad.embedding(params.get("dec.embed"), [y_prev])
    x = ad.concat([emb, prev.c], axis=1)
    layer_states = []
    for layer, (h_prev, c_prev) in enumerate(prev.layer_states):
        h, c = lstm_step(
            params.get(f"dec.lstm{layer}.w"),
            params.get(f"dec.lstm{layer}.b"),
            x,
            h_prev,
            c_prev,
            cfg.decoder_units,
        )
        layer_states.append((h, c))
        x = h
    s = layer_states[-1][0]
    query = ad.add(ad.matmul(s, params.get("dec.attn.w_dec")), params.get("dec.attn.b"))
    energies = ad.matmul(
        ad.tanh(ad.add(ad.matmul(enc.states, params.get("dec.attn.w_enc")), query)),
        params.get("dec.attn.v"),
    )
    alpha = ad.softmax(ad.reshape(energies, (1, enc.t_prime)))
    context = ad.matmul(alpha, enc.states)
    s_prime = ad.tanh(
        ad.add(ad.matmul(ad.concat([s, context], axis=1), params.get("dec.dense.w")),
               params.get("dec.dense.b"))
    )
    s_prime = _maybe_dropout(s_prime, mode)
    s_prime = _apply_lhn(params, "decoder_output", s_prime)
    logits = ad.add(ad.matmul(s_prime, params.get("dec.out.w")), params.get("dec.out.b"))
    p = ad.softmax(logits)
    return DecoderStepState(layer_states, context, s_prime, logits, p, alpha)


def forward_teacher_forced(
    params: Seq2SeqParams, x, y_star, mode: RunMode = EVAL,
    enc: EncoderStates | None = None,
) -> tuple[list[DecoderStepState], np.ndarray]:
    """Condition each step on the gold previous token; returns the per-step
    states and the |y| x T' attention matrix.  ``enc`` may be supplied to
    reuse one encoder pass across several target sequences."""
    y_star = list(y_star)
    if not y_star:
        raise ContractError("teacher forcing needs a nonempty target sequence")
    if y_star[-1] != params.config.eos_id:
        raise ContractError("target sequence must end with EOS")
    if enc is None:
        enc = encode(params, x, mode)
    steps = []
    prev = None
    prev_token = params.config.bos_id
    for target in y_star:
        prev = decode_step(params, prev, prev_token, enc, mode)
        steps.append(prev)
        prev_token = target
    attention = np.concatenate([s.alpha.values for s in steps], axis=0)
    return steps, attention


def sequence_logprob(steps: list[DecoderStepState], y_star) -> Tensor:
    """Differentiable ``log p(y*|x)`` as the sum of per-step log-probabilities."""
    y_star = list(y_star)
    if len(steps) != len(y_star):
        raise ContractError(f"{len(steps)} steps vs {len(y_star)} targets")
    total = None
    for step, target in zip(steps, y_star):
        one_hot = np.zeros(step.logits.shape)
        one_hot[0, target] = 1.0
        term = ad.scale(ad.cross_entropy_with_logits(step.logits, one_hot), -1.0)
        total = term if total is None else ad.add(total, term)
    return total


def teacher_forced_logprob(params: Seq2SeqParams, x, y_star, mode: RunMode = EVAL) -> float:
    """Eval-mode ``log p(y*|x)`` as a plain float."""
    steps, _ = forward_teacher_forced(params, x, y_star, mode)
    total = 0.0
    for step, target in zip(steps, list(y_star)):
        logp = ad.log_softmax_values(step.logits.values)
        total += float(logp[0, target])
    return total
