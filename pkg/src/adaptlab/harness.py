"""Experiment orchestration and the ``adaptlab`` command-line interface.

Commands: ``gen-world``, ``train-si``, ``train-lm``, ``adapt``, ``decode``,
``eval``, ``sweep``, ``report``.  Every run is reproducible from its config
file plus seed; report files contain no volatile fields (wall time goes to a
side log), so identical configs produce byte-identical reports.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import World, WorldConfig, generate_world, load_world, save_world
from .decode import FusionConfig, beam_search
from .errors import (
    ConfigurationError,
    ContractError,
    DataError,
    DivergenceError,
    TokenError,
)
from .lm import LmConfig, LmParams, NceConfig, finetune_lm, train_nce
from .losses import AdaptationConfig, adapt, ce_loss, mwer_loss, _nbest_tokens, _rescore_nbest
from .metrics import wer, werr
from .model import (
    EVAL,
    ModelConfig,
    Seq2SeqParams,
    encode,
    forward_teacher_forced,
    train_mode,
)
from .optim import Adam

__all__ = [
    "ModelSpec",
    "SiTrainConfig",
    "SweepConfig",
    "FinetuneConfig",
    "ExperimentConfig",
    "load_config",
    "config_hash",
    "derive_seed",
    "train_si",
    "System",
    "EvalReport",
    "evaluate_systems",
    "run_sweep",
    "main",
]


class ConfigError(ConfigurationError):
    """Raised for malformed experiment configs; maps to exit code 2."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ModelSpec:
    """Model hyperparameters; vocabulary size and specials come from the world."""

    d_feat: int = 8
    conv_layers: int = 1
    conv_dim: int = 16
    conv_width: int = 3
    encoder_units: int = 32
    encoder_stages: int = 2
    attention_dim: int = 32
    decoder_layers: int = 1
    decoder_units: int = 64
    dense_dim: int = 64
    embed_dim: int = 16

    def config_for(self, world: World) -> ModelConfig:
        if self.d_feat != world.config.d_feat:
            raise ConfigError(
                f"model d_feat {self.d_feat} != world d_feat {world.config.d_feat}"
            )
        return ModelConfig(
            vocab_size=len(world.vocab),
            bos_id=world.vocab.bos_id,
            eos_id=world.vocab.eos_id,
            **{f.name: getattr(self, f.name) for f in dataclasses.fields(self)},
        )


@dataclass
class SiTrainConfig:
    learning_rate: float = 5e-3
    epochs: int = 30
    batch_size: int = 8
    dropout: float = 0.1
    label_smoothing: float = 0.1
    patience: int = 3
    mwer_epochs: int = 0
    mwer_nbest: int = 4


@dataclass
class SweepConfig:
    methods: tuple[str, ...] = ("kld", "lhn")
    subset: str = "all"
    lhn_site: str = "decoder_output"
    sizes: tuple[int, ...] = ()       # empty: use the world's adaptation ladder
    seeds: tuple[int, ...] = ()       # empty: single run at the experiment seed


@dataclass
class FinetuneConfig:
    use_kld: bool = True
    beta_lm: float = 0.5
    epochs: int = 3
    learning_rate: float = 1e-3
    include_transcripts: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    si: SiTrainConfig = field(default_factory=SiTrainConfig)
    adapt: AdaptationConfig = field(default_factory=lambda: AdaptationConfig(learning_rate=5e-4))
    nce: NceConfig = field(default_factory=NceConfig)
    fusion: FusionConfig = field(default_factory=lambda: FusionConfig(lambda_lm=0.3, lambda_cov=0.1))
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)


_SECTIONS = {
    "world": WorldConfig,
    "model": ModelSpec,
    "si": SiTrainConfig,
    "adapt": AdaptationConfig,
    "nce": NceConfig,
    "fusion": FusionConfig,
    "finetune": FinetuneConfig,
    "sweep": SweepConfig,
}


def _build_section(cls, values: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in section [{cls.__name__}]")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, ContractError) as exc:
        raise ConfigError(f"bad [{cls.__name__}] section: {exc}") from None


def load_config(path: str | None) -> ExperimentConfig:
    """Parse a TOML config file; every key falls back to the built-in default."""
    raw = {}
    if path:
        try:
            import tomllib
        except ModuleNotFoundError:  # Python 3.10
            import tomli as tomllib
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    cfg = ExperimentConfig()
    for key, value in raw.items():
        if key == "seed":
            cfg.seed = int(value)
        elif key == "out_dir":
            cfg.out_dir = str(value)
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section [{key}] must be a table")
            setattr(cfg, key, _build_section(_SECTIONS[key], value))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, default=list)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from labels; independent of PYTHONHASHSEED."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode("utf-8")).hexdigest()
    return int(digest[:8], 16)


# ---------------------------------------------------------------------------
# SI training


def _validation_ce(params: Seq2SeqParams, utterances) -> float:
    total = 0.0
    for utt in utterances:
        steps, _ = forward_teacher_forced(params, utt.features, utt.tokens, EVAL)
        total += float(ce_loss(steps, utt.tokens, smoothing=0.0).values)
    return total / len(utterances)


def train_ce_model(
    train_utts,
    val_utts,
    model_cfg: ModelConfig,
    cfg: SiTrainConfig,
    seed: int = 0,
) -> tuple[Seq2SeqParams, list[dict]]:
    """CE training with label smoothing and dropout; early stopping restores
    the best-validation parameters once the loss has risen for ``patience``
    consecutive epochs."""
    if not train_utts:
        raise DataError("training set is empty")
    params = Seq2SeqParams.initialize(model_cfg, seed=derive_seed(seed, "si-init"))
    rng = np.random.default_rng(derive_seed(seed, "si-train"))
    opt = Adam(params.trainable(), lr=cfg.learning_rate)
    history: list[dict] = []
    best_val = np.inf
    best_params = params.copy()
    bad_epochs = 0
    for epoch in range(cfg.epochs):
        t0 = time.monotonic()
        order = rng.permutation(len(train_utts))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            opt.zero_grad()
            for idx in batch:
                utt = train_utts[idx]
                mode = train_mode(cfg.dropout, rng)
                with ad.Tape():
                    steps, _ = forward_teacher_forced(params, utt.features, utt.tokens, mode)
                    loss = ce_loss(steps, utt.tokens, cfg.label_smoothing)
                    value = loss.item()
                    if not np.isfinite(value):
                        raise DivergenceError(f"non-finite SI training loss at epoch {epoch}")
                    losses.append(value)
                    ad.backward(ad.scale(loss, 1.0 / len(batch)))
            opt.step()
        val = _validation_ce(params, val_utts)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_ce": val,
                "wall_ms": int(1000 * (time.monotonic() - t0)),
            }
        )
        if val < best_val - 1e-6:
            best_val = val
            best_params = params.copy()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
    return best_params, history


def train_si(
    world: World,
    model_spec: ModelSpec | None = None,
    cfg: SiTrainConfig | None = None,
    seed: int = 0,
) -> tuple[Seq2SeqParams, list[dict]]:
    """CE training on the world's SI split with early stopping on its
    validation split; optionally followed by an mWER stage at a reduced
    learning rate."""
    spec = model_spec or ModelSpec(d_feat=world.config.d_feat)
    cfg = cfg or SiTrainConfig()
    params, history = train_ce_model(
        world.si_train, world.si_val, spec.config_for(world), cfg, seed=seed
    )
    if cfg.mwer_epochs > 0:
        rng = np.random.default_rng(derive_seed(seed, "si-mwer"))
        params = _si_mwer_stage(world, params, cfg, rng)
    return params, history


def _si_mwer_stage(world: World, params: Seq2SeqParams, cfg: SiTrainConfig, rng) -> Seq2SeqParams:
    """Sequence-level polish of the CE-trained SI model: CE + expected word errors."""
    out = params.copy()
    opt = Adam(out.trainable(), lr=0.1 * cfg.learning_rate)
    detok = world.vocab.words_of
    for epoch in range(cfg.mwer_epochs):
        order = rng.permutation(len(world.si_train))
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            opt.zero_grad()
            for idx in batch:
                utt = world.si_train[idx]
                hyp_tokens = _nbest_tokens(out, utt.features, cfg.mwer_nbest)
                mode = train_mode(cfg.dropout, rng)
                with ad.Tape():
                    enc = encode(out, utt.features, mode)
                    steps, _ = forward_teacher_forced(out, utt.features, utt.tokens, mode, enc=enc)
                    nbest = _rescore_nbest(out, hyp_tokens, utt.tokens, enc, mode)
                    loss = ad.add(
                        ce_loss(steps, utt.tokens, cfg.label_smoothing),
                        mwer_loss(nbest, detok),
                    )
                    if not np.isfinite(loss.item()):
                        raise DivergenceError("non-finite SI mWER-stage loss")
                    ad.backward(ad.scale(loss, 1.0 / len(batch)))
            opt.step()
    return out


def train_generic_lm(world: World, cfg: NceConfig, seed: int = 0) -> LmParams:
    """NCE-train the word-piece LM on the world's generic text pool."""
    corpus = [world.vocab.encode(line) + [world.vocab.eos_id] for line in world.lm_pool]
    lm = LmParams.initialize(
        LmConfig(
            vocab_size=len(world.vocab),
            bos_id=world.vocab.bos_id,
            eos_id=world.vocab.eos_id,
        ),
        seed=derive_seed(seed, "lm-init"),
    )
    return train_nce(lm, corpus, cfg, seed=derive_seed(seed, "lm-train"))


def speaker_lm(
    world: World,
    base: LmParams,
    speaker_id: str,
    cfg: FinetuneConfig,
    seed: int = 0,
) -> LmParams:
    """Fine-tune the generic LM on a speaker's transcripts and text pool."""
    corpus = [world.vocab.encode(line) + [world.vocab.eos_id]
              for line in world.speakers[speaker_id].text_pool]
    if cfg.include_transcripts:
        corpus = [list(u.tokens) for u in world.speakers[speaker_id].utterances] + corpus
    return finetune_lm(
        base,
        corpus,
        use_kld=cfg.use_kld,
        base=base,
        beta_lm=cfg.beta_lm,
        epochs=cfg.epochs,
        learning_rate=cfg.learning_rate,
        seed=derive_seed(seed, "lm-finetune", speaker_id),
    )


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class System:
    """One table row: a recognizer (possibly per speaker) plus optional LM fusion."""

    label: str
    params: Seq2SeqParams | dict[str, Seq2SeqParams]
    lm: LmParams | dict[str, LmParams] | None = None
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def params_for(self, speaker_id: str) -> Seq2SeqParams:
        if isinstance(self.params, dict):
            return self.params[speaker_id]
        return self.params

    def lm_for(self, speaker_id: str):
        if isinstance(self.lm, dict):
            return self.lm.get(speaker_id)
        return self.lm


@dataclass
class ReportRow:
    system: str
    speaker: str          # speaker id or "ALL"
    wer: float
    werr_vs_si: float | None
    n_words: int


@dataclass
class EvalReport:
    rows: list[ReportRow]
    config_hash: str = ""
    revision: str = ""
    wall_ms: int = 0      # volatile; never written into report files

    def to_tsv(self) -> str:
        lines = ["system\tspeaker\twer\twerr_vs_si\tn_words"]
        for r in self.rows:
            werr_text = "" if r.werr_vs_si is None else f"{r.werr_vs_si:.2f}"
            lines.append(f"{r.system}\t{r.speaker}\t{r.wer:.2f}\t{werr_text}\t{r.n_words}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "revision": self.revision,
            "rows": [asdict(r) for r in self.rows],
        }

    def write(self, out_dir: str, prefix: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"{prefix}.tsv"), "w", encoding="utf-8") as fh:
            fh.write(self.to_tsv())
        with open(os.path.join(out_dir, f"{prefix}.json"), "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(out_dir, f"{prefix}_meta.json"), "w", encoding="utf-8") as fh:
            json.dump({"wall_ms": self.wall_ms}, fh)
            fh.write("\n")

    def pooled(self, system: str) -> float:
        for r in self.rows:
            if r.system == system and r.speaker == "ALL":
                return r.wer
        raise KeyError(f"no pooled row for system {system!r}")


def transcribe(
    params: Seq2SeqParams,
    lm: LmParams | None,
    utterances,
    fusion: FusionConfig,
    vocab,
) -> list[list[str]]:
    """Best-hypothesis word sequences for a list of utterances."""
    out = []
    for utt in utterances:
        best = beam_search(params, lm, utt.features, fusion)[0]
        out.append(vocab.words_of(best.tokens))
    return out


def evaluate_systems(
    world: World, systems: list[System], si_label: str = "si"
) -> EvalReport:
    """Per-speaker and pooled WER for each system, with WERR against the
    report's own SI rows."""
    t0 = time.monotonic()
    speakers = sorted(world.eval_sets)
    per_system: dict[str, dict[str, tuple[float, int]]] = {}
    for system in systems:
        rows: dict[str, tuple[float, int]] = {}
        all_refs: list[list[str]] = []
        all_hyps: list[list[str]] = []
        for spk in speakers:
            utts = world.eval_sets[spk]
            refs = [world.vocab.words_of(u.tokens) for u in utts]
            hyps = transcribe(
                system.params_for(spk), system.lm_for(spk), utts, system.fusion, world.vocab
            )
            rows[spk] = (wer(refs, hyps), sum(len(r) for r in refs))
            all_refs.extend(refs)
            all_hyps.extend(hyps)
        rows["ALL"] = (wer(all_refs, all_hyps), sum(len(r) for r in all_refs))
        per_system[system.label] = rows

    si_rows = per_system.get(si_label)
    report_rows = []
    for system in systems:
        for spk in speakers + ["ALL"]:
            wer_value, n_words = per_system[system.label][spk]
            baseline = si_rows[spk][0] if si_rows else None
            rel = werr(baseline, wer_value) if baseline else None
            report_rows.append(ReportRow(system.label, spk, wer_value, rel, n_words))
    return EvalReport(report_rows, wall_ms=int(1000 * (time.monotonic() - t0)))


# ---------------------------------------------------------------------------
# sweep: WER against the adaptation-data ladder


def run_sweep(cfg: ExperimentConfig) -> dict:
    """Adapt+eval per (seed, speaker, size, method); emits per-cell WER, the
    median curve over seeds, and the least-squares slope of WER against
    log(size)."""
    sizes = tuple(cfg.sweep.sizes) or tuple(cfg.world.adapt_sizes)
    seeds = tuple(cfg.sweep.seeds) or (cfg.seed,)
    cells = []
    curves: dict[str, dict[int, list[float]]] = {m: {s: [] for s in sizes} for m in cfg.sweep.methods}
    si_wers = []
    for seed in seeds:
        world = generate_world(cfg.world, seed)
        si_params, _ = train_si(world, cfg.model, cfg.si, seed=seed)
        base_systems = [System("si", si_params)]
        report = evaluate_systems(world, base_systems)
        si_wer = report.pooled("si")
        si_wers.append(si_wer)
        for method in cfg.sweep.methods:
            for size in sizes:
                sa_by_speaker = {}
                for spk in sorted(world.speakers):
                    corpus = world.adapt_corpus(spk, size)
                    sa_by_speaker[spk] = adapt(
                        si_params,
                        corpus,
                        cfg.adapt,
                        method=method,
                        subset=cfg.sweep.subset,
                        lhn_site=cfg.sweep.lhn_site,
                        seed=derive_seed(seed, "adapt", method, spk, size),
                        detokenize=world.vocab.words_of,
                    )
                label = f"{method}-{size}"
                cell_report = evaluate_systems(
                    world, [System(label, sa_by_speaker)], si_label=""
                )
                cell_wer = cell_report.pooled(label)
                curves[method][size].append(cell_wer)
                cells.append(
                    {
                        "seed": seed,
                        "method": method,
                        "size": size,
                        "wer": round(cell_wer, 4),
                        "si_wer": round(si_wer, 4),
                    }
                )
    summary = []
    for method in cfg.sweep.methods:
        medians = [float(np.median(curves[method][s])) for s in sizes]
        if len(sizes) >= 2:
            slope = float(np.polyfit(np.log(sizes), medians, 1)[0])
        else:
            slope = None
        summary.append(
            {
                "method": method,
                "sizes": list(sizes),
                "median_wer": [round(m, 4) for m in medians],
                "slope_wer_vs_log_size": None if slope is None else round(slope, 4),
            }
        )
    return {
        "si_median_wer": round(float(np.median(si_wers)), 4),
        "cells": cells,
        "summary": summary,
    }


def write_sweep_report(result: dict, cfg: ExperimentConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "config_hash": config_hash(cfg),
        "revision": f"rev-{config_hash(cfg)[:12]}",
        **result,
    }
    with open(os.path.join(out_dir, "sweep_report.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    lines = ["seed\tmethod\tsize\twer\tsi_wer"]
    for cell in result["cells"]:
        lines.append(
            f"{cell['seed']}\t{cell['method']}\t{cell['size']}\t{cell['wer']:.2f}\t{cell['si_wer']:.2f}"
        )
    for row in result["summary"]:
        slope = row["slope_wer_vs_log_size"]
        slope_text = "" if slope is None else f"{slope:.4f}"
        lines.append(f"slope\t{row['method']}\t\t{slope_text}\t")
    with open(os.path.join(out_dir, "sweep_report.tsv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# CLI


def _world_dir(out_dir: str) -> str:
    return os.path.join(out_dir, "world")


def _load_world_checked(out_dir: str) -> World:
    path = _world_dir(out_dir)
    if not os.path.exists(os.path.join(path, "world.json")):
        raise ConfigError(f"no generated world at {path}; run gen-world first")
    return load_world(path)


def _cmd_gen_world(cfg: ExperimentConfig, args) -> None:
    world = generate_world(cfg.world, cfg.seed)
    save_world(world, _world_dir(cfg.out_dir))
    print(f"world written to {_world_dir(cfg.out_dir)} "
          f"({len(world.si_train)} SI utterances, {len(world.eval_sets)} eval speakers)")


def _cmd_train_si(cfg: ExperimentConfig, args) -> None:
    world = _load_world_checked(cfg.out_dir)
    params, history = train_si(world, cfg.model, cfg.si, seed=cfg.seed)
    path = os.path.join(cfg.out_dir, "si.ckpt")
    save_checkpoint(params, path)
    with open(os.path.join(cfg.out_dir, "si_train_log.jsonl"), "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row) + "\n")
    print(f"SI checkpoint written to {path} (best val CE "
          f"{min(h['val_ce'] for h in history):.4f})")


def _cmd_train_lm(cfg: ExperimentConfig, args) -> None:
    world = _load_world_checked(cfg.out_dir)
    lm = train_generic_lm(world, cfg.nce, seed=cfg.seed)
    path = os.path.join(cfg.out_dir, "lm.ckpt")
    save_checkpoint(lm, path)
    print(f"generic LM checkpoint written to {path}")
    if args.speaker:
        sa_lm = speaker_lm(world, lm, args.speaker, cfg.finetune, seed=cfg.seed)
        sa_path = os.path.join(cfg.out_dir, f"lm_{args.speaker}.ckpt")
        save_checkpoint(sa_lm, sa_path)
        print(f"speaker LM checkpoint written to {sa_path}")


def _cmd_adapt(cfg: ExperimentConfig, args) -> None:
    world = _load_world_checked(cfg.out_dir)
    si_path = os.path.join(cfg.out_dir, "si.ckpt")
    if not os.path.exists(si_path):
        raise ConfigError(f"missing SI checkpoint {si_path}; run train-si first")
    si_params = load_checkpoint(si_path)
    if args.speaker not in world.speakers:
        raise ConfigError(f"unknown speaker {args.speaker!r}; have {sorted(world.speakers)}")
    size = args.size or max(cfg.world.adapt_sizes)
    corpus = world.adapt_corpus(args.speaker, size)
    name = f"sa_{args.speaker}_{args.method}_{size}"
    sa = adapt(
        si_params,
        corpus,
        cfg.adapt,
        method=args.method,
        subset=args.subset,
        lhn_site=args.lhn_site,
        seed=derive_seed(cfg.seed, "adapt", args.method, args.speaker, size),
        detokenize=world.vocab.words_of,
        log_path=os.path.join(cfg.out_dir, f"{name}_log.jsonl"),
    )
    path = os.path.join(cfg.out_dir, f"{name}.ckpt")
    save_checkpoint(sa, path)
    print(f"SA checkpoint written to {path}")


def _cmd_decode(cfg: ExperimentConfig, args) -> None:
    world = _load_world_checked(cfg.out_dir)
    ckpt = args.checkpoint or os.path.join(cfg.out_dir, "si.ckpt")
    params = load_checkpoint(ckpt)
    lm = load_checkpoint(args.lm) if args.lm else None
    fusion = cfg.fusion if lm is not None else FusionConfig(beam_width=cfg.fusion.beam_width)
    out_path = os.path.join(cfg.out_dir, "nbest.jsonl")
    with open(out_path, "w", encoding="utf-8") as fh:
        for spk in sorted(world.eval_sets):
            for utt in world.eval_sets[spk]:
                results = beam_search(params, lm, utt.features, fusion)
                for rank, hyp in enumerate(results[: fusion.beam_width]):
                    fh.write(
                        json.dumps(
                            {
                                "utt_id": utt.utt_id,
                                "rank": rank,
                                "tokens": list(hyp.tokens),
                                "text": world.vocab.decode(hyp.tokens),
                                "s2s_lp": hyp.s2s_logprob,
                                "lm_lp": hyp.lm_logprob,
                                "cov": hyp.coverage,
                                "fused": hyp.fused,
                            }
                        )
                        + "\n"
                    )
    print(f"n-best lists written to {out_path}")


def _cmd_eval(cfg: ExperimentConfig, args) -> None:
    world = _load_world_checked(cfg.out_dir)
    si_path = os.path.join(cfg.out_dir, "si.ckpt")
    if not os.path.exists(si_path):
        raise ConfigError(f"missing SI checkpoint {si_path}; run train-si first")
    systems = [System("si", load_checkpoint(si_path))]
    sa_by_label: dict[str, dict[str, Seq2SeqParams]] = {}
    for name in sorted(os.listdir(cfg.out_dir)):
        if name.startswith("sa_") and name.endswith(".ckpt"):
            stem = name[3 : -len(".ckpt")]
            speaker, label = stem.split("_", 1)
            sa_by_label.setdefault(label, {})[speaker] = load_checkpoint(
                os.path.join(cfg.out_dir, name)
            )
    for label, by_speaker in sorted(sa_by_label.items()):
        missing = set(world.eval_sets) - set(by_speaker)
        if missing:
            raise ConfigError(f"system {label!r} lacks checkpoints for speakers {sorted(missing)}")
        systems.append(System(label, by_speaker))
    report = evaluate_systems(world, systems)
    report.config_hash = config_hash(cfg)
    report.revision = f"rev-{config_hash(cfg)[:12]}"
    report.write(cfg.out_dir, "eval_report")
    print(report.to_tsv(), end="")


def _cmd_sweep(cfg: ExperimentConfig, args) -> None:
    result = run_sweep(cfg)
    write_sweep_report(result, cfg, cfg.out_dir)
    print(f"sweep report written to {os.path.join(cfg.out_dir, 'sweep_report.tsv')}")


def _cmd_report(cfg: ExperimentConfig, args) -> None:
    path = args.path or os.path.join(cfg.out_dir, "eval_report.json")
    if not os.path.exists(path):
        raise ConfigError(f"no report at {path}")
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if "rows" in payload:
        rows = [ReportRow(**r) for r in payload["rows"]]
        print(EvalReport(rows).to_tsv(), end="")
    else:
        print(json.dumps(payload, indent=2, sort_keys=True))


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaptlab",
        description="seq2seq ASR speaker-adaptation experiments on a synthetic corpus",
    )
    parser.add_argument("--config", default=None, help="TOML experiment config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-world", help="generate and save the synthetic world")
    sub.add_parser("train-si", help="train the speaker-independent model")
    lm_cmd = sub.add_parser("train-lm", help="NCE-train the generic LM (and optionally a speaker LM)")
    lm_cmd.add_argument("--speaker", default=None)
    adapt_cmd = sub.add_parser("adapt", help="adapt the SI model to one speaker")
    adapt_cmd.add_argument("--speaker", required=True)
    adapt_cmd.add_argument("--method", default="kld", choices=["kld", "lhn", "mwer_kld"])
    adapt_cmd.add_argument("--subset", default="all", choices=["encoder", "decoder", "all"])
    adapt_cmd.add_argument("--lhn-site", dest="lhn_site", default="decoder_output",
                           choices=["features", "encoder_output", "decoder_output"])
    adapt_cmd.add_argument("--size", type=int, default=None)
    decode_cmd = sub.add_parser("decode", help="write n-best lists for the eval sets")
    decode_cmd.add_argument("--checkpoint", default=None)
    decode_cmd.add_argument("--lm", default=None)
    sub.add_parser("eval", help="decode and score SI plus adapted checkpoints")
    sub.add_parser("sweep", help="run the adaptation-data ladder experiment")
    report_cmd = sub.add_parser("report", help="render a saved report")
    report_cmd.add_argument("--path", default=None)
    return parser


_COMMANDS = {
    "gen-world": _cmd_gen_world,
    "train-si": _cmd_train_si,
    "train-lm": _cmd_train_lm,
    "adapt": _cmd_adapt,
    "decode": _cmd_decode,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out_dir = args.out
        os.makedirs(cfg.out_dir, exist_ok=True)
        _COMMANDS[args.command](cfg, args)
    except (ConfigError, ConfigurationError, ContractError, DataError, TokenError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
