"""Synthetic multi-speaker dictation world: tokenization, feature synthesis,
speaker profiles, and the world generator behind every experiment.

Every speaker applies an affine channel (well-conditioned gain matrix plus
bias) to shared per-unit prototype vectors and draws words from a
speaker-specific bigram over the world lexicon, so both the acoustic and
the language side carry an adaptable per-speaker signal.  All randomness
flows from one seed; identical seeds reproduce the world bitwise.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, TokenError

__all__ = [
    "WordPieceVocab",
    "build_vocab",
    "SpeakerProfile",
    "SpeakerCorpus",
    "Utterance",
    "FeatureSynthesizer",
    "WorldConfig",
    "World",
    "generate_world",
    "save_world",
    "load_world",
]

BOS, EOS, UNK = "<bos>", "<eos>", "<unk>"
_SPECIALS = (BOS, EOS, UNK)


class WordPieceVocab:
    """Word-piece inventory with greedy longest-match segmentation.

    Single characters of the training corpus are always kept, so
    segmentation terminates and ``decode(encode(s)) == s`` for every string
    over the corpus alphabet.  The space is an ordinary unit: detokenized
    text splits back into words on whitespace.
    """

    def __init__(self, units: list[str]):
        if list(units[:3]) != list(_SPECIALS):
            raise ConfigurationError("vocabulary must start with <bos>, <eos>, <unk>")
        self.units = list(units)
        self._ids = {u: i for i, u in enumerate(self.units)}
        if len(self._ids) != len(self.units):
            raise ConfigurationError("duplicate vocabulary unit")
        self._max_len = max(len(u) for u in self.units[3:]) if len(self.units) > 3 else 1

    bos_id = 0
    eos_id = 1
    unk_id = 2

    def __len__(self) -> int:
        return len(self.units)

    def encode(self, text: str) -> list[int]:
        """Greedy longest-match segmentation into unit ids (no specials added)."""
        out = []
        i = 0
        while i < len(text):
            for length in range(min(self._max_len, len(text) - i), 0, -1):
                unit_id = self._ids.get(text[i : i + length])
                if unit_id is not None and unit_id >= 3:
                    out.append(unit_id)
                    i += length
                    break
            else:
                raise TokenError(f"character {text[i]!r} not covered by the vocabulary")
        return out

    def decode(self, ids) -> str:
        parts = []
        for i in ids:
            if not 0 <= i < len(self.units):
                raise TokenError(f"token id {i} out of range")
            if i >= 3:
                parts.append(self.units[i])
        return "".join(parts)

    def words_of(self, ids) -> list[str]:
        return self.decode(ids).split()

    def to_json(self) -> dict:
        return {"units": self.units}

    @classmethod
    def from_json(cls, obj: dict) -> "WordPieceVocab":
        return cls(obj["units"])


def build_vocab(texts, size: int) -> WordPieceVocab:
    """Frequency-driven pair-merge (BPE-style) inventory of at most ``size`` units.

    Merges never cross whitespace; ties between equally frequent pairs are
    broken lexicographically so the inventory is deterministic.
    """
    alphabet = sorted(set("".join(texts)))
    if size < len(alphabet) + len(_SPECIALS):
        raise ConfigurationError(
            f"vocab size {size} < alphabet {len(alphabet)} + {len(_SPECIALS)} specials"
        )
    words: dict[tuple[str, ...], int] = {}
    for text in texts:
        for word in text.split():
            key = tuple(word)
            words[key] = words.get(key, 0) + 1
    units = list(alphabet)
    budget = size - len(_SPECIALS) - len(units)
    for _ in range(budget):
        pairs: dict[tuple[str, str], int] = {}
        for word, count in words.items():
            for a, b in zip(word, word[1:]):
                pairs[(a, b)] = pairs.get((a, b), 0) + count
        if not pairs:
            break
        (a, b), count = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        if count < 2:
            break
        merged = a + b
        units.append(merged)
        new_words = {}
        for word, wcount in words.items():
            out = []
            i = 0
            while i < len(word):
                if i + 1 < len(word) and word[i] == a and word[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(word[i])
                    i += 1
            new_words[tuple(out)] = new_words.get(tuple(out), 0) + wcount
        words = new_words
    return WordPieceVocab(list(_SPECIALS) + units)


@dataclass
class SpeakerProfile:
    """Per-speaker channel and language skew."""

    speaker_id: str
    gain: np.ndarray          # (d_feat, d_feat), condition number kept < 10
    bias: np.ndarray          # (d_feat,)
    noise_level: float
    bigram: np.ndarray        # (lexicon+1, lexicon); row 0 is the start distribution

    def condition_number(self) -> float:
        s = np.linalg.svd(self.gain, compute_uv=False)
        return float(s.max() / s.min())


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    features: np.ndarray      # (T, d_feat)
    tokens: list[int]         # word-piece ids, ends with EOS
    text: str                 # detokenized transcript (as given, may be pseudo truth)


@dataclass
class SpeakerCorpus:
    """One speaker's adaptation material: utterances plus audio-free text."""

    speaker_id: str
    utterances: list[Utterance]
    text_pool: list[str] = field(default_factory=list)

    def subset(self, size: int) -> list[Utterance]:
        """Nested ladder subsets: the first ``size`` utterances."""
        if size > len(self.utterances):
            raise ConfigurationError(
                f"requested {size} adaptation utterances, have {len(self.utterances)}"
            )
        return self.utterances[:size]


class FeatureSynthesizer:
    """Maps token sequences to feature frames via fixed per-unit prototypes."""

    def __init__(self, prototypes: np.ndarray, min_dur: int = 2, max_dur: int = 4):
        self.prototypes = np.asarray(prototypes, dtype=np.float64)
        if not 1 <= min_dur <= max_dur:
            raise ConfigurationError(f"bad duration range [{min_dur}, {max_dur}]")
        self.min_dur = min_dur
        self.max_dur = max_dur

    @property
    def d_feat(self) -> int:
        return self.prototypes.shape[1]

    def utterance(self, profile: SpeakerProfile, tokens, seed) -> np.ndarray:
        """Deterministic synthesis: 2-4 prototype frames per token, then the
        speaker's affine channel plus Gaussian noise."""
        content = [t for t in tokens if t >= 3]
        if not content:
            raise ConfigurationError("cannot synthesize an utterance without content tokens")
        rng = np.random.default_rng(seed)
        frames = []
        for tok in content:
            dur = int(rng.integers(self.min_dur, self.max_dur + 1))
            frames.extend([self.prototypes[tok]] * dur)
        x = np.stack(frames)
        x = x @ profile.gain.T + profile.bias
        if profile.noise_level > 0:
            x = x + profile.noise_level * rng.standard_normal(x.shape)
        return np.ascontiguousarray(x)


@dataclass
class WorldConfig:
    d_feat: int = 8
    vocab_size: int = 30
    alphabet: str = "abcdef"
    lexicon_size: int = 14
    word_len: tuple[int, int] = (2, 5)
    sentence_len: tuple[int, int] = (2, 5)
    n_train_speakers: int = 10
    si_utterances_per_speaker: int = 26
    si_val_per_speaker: int = 2
    n_eval_speakers: int = 4
    adapt_sizes: tuple[int, ...] = (8, 16, 32, 64)
    eval_utterances: int = 16
    corruption_rate: float = 0.05
    train_channel: float = 0.08
    eval_channel: float = 0.55
    train_bias: float = 0.05
    eval_bias: float = 0.35
    noise_level: float = 0.05
    prior_conc_train: float = 8.0
    prior_conc_eval: float = 0.4
    min_dur: int = 2
    max_dur: int = 4
    vocab_corpus_lines: int = 200
    lm_pool_lines: int = 400
    speaker_text_lines: int = 120

    def validated(self) -> "WorldConfig":
        if list(self.adapt_sizes) != sorted(self.adapt_sizes):
            raise ConfigurationError("adapt_sizes must be ascending")
        if self.lexicon_size < 2:
            raise ConfigurationError("need at least two lexicon words")
        return self


@dataclass
class World:
    config: WorldConfig
    seed: int
    vocab: WordPieceVocab
    lexicon: list[str]
    synthesizer: FeatureSynthesizer
    train_speakers: list[SpeakerProfile]
    eval_speakers: list[SpeakerProfile]
    si_train: list[Utterance]
    si_val: list[Utterance]
    speakers: dict[str, SpeakerCorpus]          # eval-speaker adaptation material
    eval_sets: dict[str, list[Utterance]]
    lm_pool: list[str]

    def adapt_corpus(self, speaker_id: str, size: int | None = None) -> SpeakerCorpus:
        corpus = self.speakers[speaker_id]
        if size is None:
            return corpus
        return SpeakerCorpus(speaker_id, corpus.subset(size), corpus.text_pool)


def _orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def _channel_gain(rng: np.random.Generator, d: int, strength: float) -> np.ndarray:
    gain = np.eye(d) + strength * rng.standard_normal((d, d))
    # clip singular values so the condition number stays well below 10
    u, s, vt = np.linalg.svd(gain)
    s = np.clip(s, 1.0 / 3.0, 3.0)
    return u @ np.diag(s) @ vt


def _make_profile(
    speaker_id: str,
    rng: np.random.Generator,
    cfg: WorldConfig,
    channel: float,
    bias_scale: float,
    conc: float,
) -> SpeakerProfile:
    gain = _channel_gain(rng, cfg.d_feat, channel)
    bias = bias_scale * rng.standard_normal(cfg.d_feat)
    n = cfg.lexicon_size
    bigram = rng.dirichlet(np.full(n, conc), size=n + 1)
    return SpeakerProfile(speaker_id, gain, bias, cfg.noise_level, bigram)


def _sample_sentence(profile: SpeakerProfile, lexicon: list[str], rng, lo: int, hi: int) -> str:
    n = int(rng.integers(lo, hi + 1))
    words = []
    prev = -1
    for _ in range(n):
        row = profile.bigram[prev + 1]
        prev = int(rng.choice(len(lexicon), p=row))
        words.append(lexicon[prev])
    return " ".join(words)


def _corrupt(tokens: list[int], rate: float, vocab_size: int, rng) -> list[int]:
    """Pseudo-truth transcripts: random token substitution at ``rate``."""
    if rate <= 0:
        return list(tokens)
    out = list(tokens)
    for i, tok in enumerate(out[:-1]):  # keep the trailing EOS intact
        if tok >= 3 and rng.random() < rate:
            out[i] = int(rng.integers(3, vocab_size))
    return out


def generate_world(config: WorldConfig | None = None, seed: int = 0) -> World:
    """Build the SI training set, per-speaker adaptation ladders (nested),
    disjoint eval sets, and text pools, all derived from one seed."""
    cfg = (config or WorldConfig()).validated()
    root = np.random.SeedSequence(seed)
    (
        ss_lexicon,
        ss_vocab,
        ss_proto,
        ss_train_spk,
        ss_eval_spk,
        ss_si,
        ss_adapt,
        ss_eval,
        ss_text,
    ) = root.spawn(9)

    rng = np.random.default_rng(ss_lexicon)
    lexicon: list[str] = []
    seen = set()
    while len(lexicon) < cfg.lexicon_size:
        length = int(rng.integers(cfg.word_len[0], cfg.word_len[1] + 1))
        word = "".join(rng.choice(list(cfg.alphabet), size=length))
        if word not in seen:
            seen.add(word)
            lexicon.append(word)

    # neutral text for the BPE inventory
    rng = np.random.default_rng(ss_vocab)
    neutral = SpeakerProfile(
        "neutral",
        np.eye(cfg.d_feat),
        np.zeros(cfg.d_feat),
        0.0,
        np.full((cfg.lexicon_size + 1, cfg.lexicon_size), 1.0 / cfg.lexicon_size),
    )
    vocab_corpus = [
        _sample_sentence(neutral, lexicon, rng, *cfg.sentence_len)
        for _ in range(cfg.vocab_corpus_lines)
    ]
    vocab = build_vocab(vocab_corpus, cfg.vocab_size)

    proto_rng = np.random.default_rng(ss_proto)
    prototypes = proto_rng.standard_normal((len(vocab), cfg.d_feat))
    synth = FeatureSynthesizer(prototypes, cfg.min_dur, cfg.max_dur)

    train_speakers = [
        _make_profile(
            f"trn{i:02d}",
            np.random.default_rng(child),
            cfg,
            cfg.train_channel,
            cfg.train_bias,
            cfg.prior_conc_train,
        )
        for i, child in enumerate(ss_train_spk.spawn(cfg.n_train_speakers))
    ]
    eval_speakers = [
        _make_profile(
            f"spk{i:02d}",
            np.random.default_rng(child),
            cfg,
            cfg.eval_channel,
            cfg.eval_bias,
            cfg.prior_conc_eval,
        )
        for i, child in enumerate(ss_eval_spk.spawn(cfg.n_eval_speakers))
    ]

    def make_utts(profile, count, role, child_ss, corruption=0.0):
        rng_local = np.random.default_rng(child_ss)
        utts = []
        for k in range(count):
            text = _sample_sentence(profile, lexicon, rng_local, *cfg.sentence_len)
            gold = vocab.encode(text) + [vocab.eos_id]
            feats = synth.utterance(profile, gold, int(rng_local.integers(2**31)))
            tokens = _corrupt(gold, corruption, len(vocab), rng_local)
            utts.append(
                Utterance(
                    f"{profile.speaker_id}_{role}_{k:04d}",
                    profile.speaker_id,
                    feats,
                    tokens,
                    vocab.decode(tokens),
                )
            )
        return utts

    si_train: list[Utterance] = []
    si_val: list[Utterance] = []
    for profile, child in zip(train_speakers, ss_si.spawn(cfg.n_train_speakers)):
        utts = make_utts(
            profile,
            cfg.si_utterances_per_speaker + cfg.si_val_per_speaker,
            "si",
            child,
            corruption=cfg.corruption_rate,
        )
        si_train.extend(utts[: cfg.si_utterances_per_speaker])
        si_val.extend(utts[cfg.si_utterances_per_speaker :])

    speakers: dict[str, SpeakerCorpus] = {}
    eval_sets: dict[str, list[Utterance]] = {}
    max_adapt = max(cfg.adapt_sizes)
    adapt_children = ss_adapt.spawn(cfg.n_eval_speakers)
    eval_children = ss_eval.spawn(cfg.n_eval_speakers)
    text_children = ss_text.spawn(cfg.n_eval_speakers + 1)
    for i, profile in enumerate(eval_speakers):
        adapt_utts = make_utts(
            profile, max_adapt, "adapt", adapt_children[i], corruption=cfg.corruption_rate
        )
        eval_utts = make_utts(profile, cfg.eval_utterances, "eval", eval_children[i])
        text_rng = np.random.default_rng(text_children[i])
        pool = [
            _sample_sentence(profile, lexicon, text_rng, *cfg.sentence_len)
            for _ in range(cfg.speaker_text_lines)
        ]
        speakers[profile.speaker_id] = SpeakerCorpus(profile.speaker_id, adapt_utts, pool)
        eval_sets[profile.speaker_id] = eval_utts

    lm_rng = np.random.default_rng(text_children[-1])
    lm_pool = []
    for _ in range(cfg.lm_pool_lines):
        profile = train_speakers[int(lm_rng.integers(len(train_speakers)))]
        lm_pool.append(_sample_sentence(profile, lexicon, lm_rng, *cfg.sentence_len))

    return World(
        config=cfg,
        seed=seed,
        vocab=vocab,
        lexicon=lexicon,
        synthesizer=synth,
        train_speakers=train_speakers,
        eval_speakers=eval_speakers,
        si_train=si_train,
        si_val=si_val,
        speakers=speakers,
        eval_sets=eval_sets,
        lm_pool=lm_pool,
    )


# ---------------------------------------------------------------------------
# on-disk layout: feature files in the shared tensor format, JSONL manifests,
# UTF-8 text pools


def _profile_to_json(p: SpeakerProfile) -> dict:
    return {
        "speaker_id": p.speaker_id,
        "gain": p.gain.tolist(),
        "bias": p.bias.tolist(),
        "noise_level": p.noise_level,
        "bigram": p.bigram.tolist(),
    }


def _profile_from_json(obj: dict) -> SpeakerProfile:
    return SpeakerProfile(
        obj["speaker_id"],
        np.asarray(obj["gain"], dtype=np.float64),
        np.asarray(obj["bias"], dtype=np.float64),
        float(obj["noise_level"]),
        np.asarray(obj["bigram"], dtype=np.float64),
    )


def _write_manifest(path: str, utts: list[Utterance], feature_dir: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in utts:
            rel = os.path.join("features", f"{u.utt_id}.adlt")
            ad.write_tensor(os.path.join(feature_dir, f"{u.utt_id}.adlt"), u.features)
            fh.write(
                json.dumps(
                    {
                        "utt_id": u.utt_id,
                        "speaker_id": u.speaker_id,
                        "path": rel,
                        "transcript": u.tokens,
                        "text": u.text,
                    }
                )
                + "\n"
            )


def _read_manifest(path: str, root: str) -> list[Utterance]:
    utts = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            feats = ad.read_tensor(os.path.join(root, row["path"]))
            utts.append(
                Utterance(row["utt_id"], row["speaker_id"], feats, row["transcript"], row["text"])
            )
    return utts


def save_world(world: World, out_dir: str) -> None:
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "text"), exist_ok=True)
    meta = {
        "seed": world.seed,
        "config": asdict(world.config),
        "lexicon": world.lexicon,
        "train_speakers": [_profile_to_json(p) for p in world.train_speakers],
        "eval_speakers": [_profile_to_json(p) for p in world.eval_speakers],
        "adapt_sizes": list(world.config.adapt_sizes),
    }
    with open(os.path.join(out_dir, "world.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "vocab.json"), "w", encoding="utf-8") as fh:
        json.dump(world.vocab.to_json(), fh, indent=2)
    ad.write_tensor(os.path.join(out_dir, "prototypes.adlt"), world.synthesizer.prototypes)
    _write_manifest(os.path.join(out_dir, "manifest_si_train.jsonl"), world.si_train, out_dir)
    _write_manifest(os.path.join(out_dir, "manifest_si_val.jsonl"), world.si_val, out_dir)
    for spk, corpus in world.speakers.items():
        _write_manifest(
            os.path.join(out_dir, f"manifest_adapt_{spk}.jsonl"), corpus.utterances, out_dir
        )
        with open(os.path.join(out_dir, "text", f"{spk}.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(corpus.text_pool) + "\n")
    for spk, utts in world.eval_sets.items():
        _write_manifest(os.path.join(out_dir, f"manifest_eval_{spk}.jsonl"), utts, out_dir)
    with open(os.path.join(out_dir, "text", "lm_pool.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(world.lm_pool) + "\n")


def load_world(out_dir: str) -> World:
    with open(os.path.join(out_dir, "world.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    cfg_raw = dict(meta["config"])
    for key in ("word_len", "sentence_len", "adapt_sizes"):
        cfg_raw[key] = tuple(cfg_raw[key])
    cfg = WorldConfig(**cfg_raw)
    with open(os.path.join(out_dir, "vocab.json"), encoding="utf-8") as fh:
        vocab = WordPieceVocab.from_json(json.load(fh))
    prototypes = ad.read_tensor(os.path.join(out_dir, "prototypes.adlt"))
    synth = FeatureSynthesizer(prototypes, cfg.min_dur, cfg.max_dur)
    train_speakers = [_profile_from_json(o) for o in meta["train_speakers"]]
    eval_speakers = [_profile_from_json(o) for o in meta["eval_speakers"]]
    si_train = _read_manifest(os.path.join(out_dir, "manifest_si_train.jsonl"), out_dir)
    si_val = _read_manifest(os.path.join(out_dir, "manifest_si_val.jsonl"), out_dir)
    speakers = {}
    eval_sets = {}
    for profile in eval_speakers:
        spk = profile.speaker_id
        utts = _read_manifest(os.path.join(out_dir, f"manifest_adapt_{spk}.jsonl"), out_dir)
        with open(os.path.join(out_dir, "text", f"{spk}.txt"), encoding="utf-8") as fh:
            pool = [line.rstrip("\n") for line in fh if line.strip()]
        speakers[spk] = SpeakerCorpus(spk, utts, pool)
        eval_sets[spk] = _read_manifest(os.path.join(out_dir, f"manifest_eval_{spk}.jsonl"), out_dir)
    with open(os.path.join(out_dir, "text", "lm_pool.txt"), encoding="utf-8") as fh:
        lm_pool = [line.rstrip("\n") for line in fh if line.strip()]
    return World(
        config=cfg,
        seed=meta["seed"],
        vocab=vocab,
        lexicon=meta["lexicon"],
        synthesizer=synth,
        train_speakers=train_speakers,
        eval_speakers=eval_speakers,
        si_train=si_train,
        si_val=si_val,
        speakers=speakers,
        eval_sets=eval_sets,
        lm_pool=lm_pool,
    )
