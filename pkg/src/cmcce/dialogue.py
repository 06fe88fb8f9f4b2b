"""Dialogue transcripts, history windows and the synthetic empathetic corpus."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

USER = "User"
AGENT = "Agent"
SPLITS = ("train", "valid", "eval")


class CorpusParseError(ValueError):
    """A corpus file could not be parsed; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CorpusValidationError(ValueError):
    """A dialogue violates a transcript invariant."""

    def __init__(self, dialogue_id: str, message: str):
        self.dialogue_id = dialogue_id
        super().__init__(f"dialogue {dialogue_id!r}: {message}")


@dataclass
class Sentence:
    tokens: list[int]
    mel: np.ndarray  # [frames, M]
    style_id: int | None = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sentence):
            return NotImplemented
        return (self.tokens == other.tokens and self.style_id == other.style_id
                and self.mel.shape == other.mel.shape and bool(np.array_equal(self.mel, other.mel)))


@dataclass
class Turn:
    index: int  # 1-based
    speaker: str
    sentences: list[Sentence]

    @property
    def tokens(self) -> list[int]:
        return [tok for s in self.sentences for tok in s.tokens]

    @property
    def mel(self) -> np.ndarray:
        return np.concatenate([s.mel for s in self.sentences], axis=0)


@dataclass
class Dialogue:
    id: str
    turns: list[Turn]

    def turn(self, t: int) -> Turn:
        if not 1 <= t <= len(self.turns):
            raise IndexError(f"turn {t} out of range 1..{len(self.turns)} in dialogue {self.id!r}")
        return self.turns[t - 1]

    def agent_turns(self) -> list[int]:
        return [turn.index for turn in self.turns if turn.speaker == AGENT]


@dataclass
class Corpus:
    train: list[Dialogue] = field(default_factory=list)
    valid: list[Dialogue] = field(default_factory=list)
    eval: list[Dialogue] = field(default_factory=list)

    def split(self, name: str) -> list[Dialogue]:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def all_dialogues(self) -> list[Dialogue]:
        return self.train + self.valid + self.eval


# ------------------------------------------------------------------ windows

@dataclass(frozen=True)
class HistoryWindow:
    """Padded history at turn ``t``; ``None`` marks a PAD slot."""

    dialogue_id: str
    capacity: int
    current_turn: int
    text_slots: tuple[Turn | None, ...]     # turns t-C .. t
    prosody_slots: tuple[Turn | None, ...]  # turns t-C .. t-1

    @property
    def current(self) -> Turn:
        return self.text_slots[-1]


def window(d: Dialogue, t: int, capacity: int) -> HistoryWindow:
    if capacity < 1:
        raise ValueError(f"capacity must be >= 1, got {capacity}")
    turn = d.turn(t)
    if turn.speaker != AGENT:
        raise ValueError(f"turn {t} of dialogue {d.id!r} is spoken by {turn.speaker}, expected {AGENT}")
    text = tuple(d.turns[i - 1] if i >= 1 else None for i in range(t - capacity, t + 1))
    return HistoryWindow(d.id, capacity, t, text, text[:-1])


# ---------------------------------------------------------------- validation

def validate_dialogue(d: Dialogue, max_tokens: int | None = None) -> None:
    if len(d.turns) < 2:
        raise CorpusValidationError(d.id, f"needs at least 2 turns, has {len(d.turns)}")
    mel_dim = None
    for pos, turn in enumerate(d.turns, start=1):
        if turn.index != pos:
            raise CorpusValidationError(d.id, f"turn indices must run 1..T, found {turn.index} at {pos}")
        expected = USER if pos % 2 == 1 else AGENT
        if turn.speaker != expected:
            raise CorpusValidationError(
                d.id, f"speakers must alternate starting with {USER}; turn {pos} is {turn.speaker}")
        if not turn.sentences:
            raise CorpusValidationError(d.id, f"turn {pos} has no sentences")
        for k, s in enumerate(turn.sentences):
            where = f"turn {pos} sentence {k}"
            if not s.tokens:
                raise CorpusValidationError(d.id, f"{where} has no tokens")
            if max_tokens is not None and len(s.tokens) > max_tokens:
                raise CorpusValidationError(d.id, f"{where} exceeds {max_tokens} tokens")
            if s.mel.ndim != 2 or s.mel.shape[0] < 1:
                raise CorpusValidationError(d.id, f"{where} needs a nonempty [frames, M] mel")
            if mel_dim is None:
                mel_dim = s.mel.shape[1]
            elif s.mel.shape[1] != mel_dim:
                raise CorpusValidationError(d.id, f"{where} mel dim {s.mel.shape[1]} != {mel_dim}")
            if not np.all(np.isfinite(s.mel)):
                raise CorpusValidationError(d.id, f"{where} has non-finite mel entries")
    if d.turns[-1].speaker != AGENT:
        raise CorpusValidationError(d.id, "final turn must belong to the Agent")


# ------------------------------------------------------------------------ I/O

def dialogue_to_json(d: Dialogue) -> dict:
    turns = []
    for turn in d.turns:
        sentences = []
        for s in turn.sentences:
            rec = {"tokens": [int(t) for t in s.tokens], "mel": s.mel.tolist()}
            if s.style_id is not None:
                rec["style_id"] = int(s.style_id)
            sentences.append(rec)
        turns.append({"speaker": turn.speaker, "sentences": sentences})
    return {"id": d.id, "turns": turns}


def dialogue_from_json(obj: dict) -> Dialogue:
    turns = []
    for i, t in enumerate(obj["turns"], start=1):
        sentences = [
            Sentence(tokens=[int(x) for x in s["tokens"]],
                     mel=np.array(s["mel"], dtype=np.float64).reshape(len(s["mel"]), -1),
                     style_id=s.get("style_id"))
            for s in t["sentences"]
        ]
        turns.append(Turn(i, t["speaker"], sentences))
    return Dialogue(str(obj["id"]), turns)


def save_dialogues(dialogues: Iterable[Dialogue], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dialogues:
            fh.write(json.dumps(dialogue_to_json(d), separators=(",", ":")))
            fh.write("\n")


def load_dialogues(path: str | Path, max_tokens: int | None = None) -> list[Dialogue]:
    """Read a line-delimited JSON corpus file, validating every dialogue."""
    out: list[Dialogue] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = dialogue_from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusParseError(f"malformed dialogue record ({exc})", lineno) from exc
            validate_dialogue(d, max_tokens)
            out.append(d)
    if not out:
        raise CorpusParseError(f"{path}: no dialogues found", 1)
    return out


def save_corpus(corpus: Corpus, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        save_dialogues(corpus.split(name), directory / f"{name}.jsonl")


def load_corpus(directory: str | Path) -> Corpus:
    directory = Path(directory)
    return Corpus(**{name: load_dialogues(directory / f"{name}.jsonl") for name in SPLITS})


# ----------------------------------------------------------------- generator

@dataclass
class CorpusGenConfig:
    n_dialogues: int = 72
    turns_per_dialogue: int = 4
    styles: int = 4
    sentence_count_range: tuple[int, int] = (1, 3)
    tokens_range: tuple[int, int] = (3, 8)
    frames_range: tuple[int, int] = (4, 10)
    mel_dim: int = 8
    vocab: int = 64
    max_tokens: int = 16
    noise_std: float = 0.1
    style_stay_prob: float = 0.5
    token_scale: float = 0.3
    style_map: list[int] | None = None  # None -> seeded random permutation
    split: tuple[float, float, float] = (0.84, 0.08, 0.08)
    seed: int = 0

    def validate(self) -> None:
        if self.styles < 2:
            raise ValueError(f"styles must be >= 2, got {self.styles}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.turns_per_dialogue < 2 or self.turns_per_dialogue % 2:
            raise ValueError("turns_per_dialogue must be even and >= 2 (User opens, Agent closes)")
        if self.n_dialogues < 1:
            raise ValueError("n_dialogues must be >= 1")
        if self.style_map is not None and sorted(self.style_map) != list(range(self.styles)):
            raise ValueError("style_map must be a permutation of 0..styles-1")
        lo, hi = self.sentence_count_range
        if not 1 <= lo <= hi:
            raise ValueError("bad sentence_count_range")
        lo, hi = self.tokens_range
        if not 1 <= lo <= hi <= self.max_tokens:
            raise ValueError("bad tokens_range")
        if not 1 <= self.frames_range[0] <= self.frames_range[1]:
            raise ValueError("bad frames_range")
        if not 0.0 <= self.style_stay_prob <= 1.0:
            raise ValueError("style_stay_prob must lie in [0, 1]")

    def to_json(self) -> dict:
        d = dict(vars(self))
        for k in ("sentence_count_range", "tokens_range", "frames_range", "split"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "CorpusGenConfig":
        obj = dict(obj)
        for k in ("sentence_count_range", "tokens_range", "frames_range", "split"):
            if k in obj:
                obj[k] = tuple(obj[k])
        return cls(**obj)


def spread_prototypes(rng: np.random.Generator, count: int, dim: int, min_dist: float = 1.0) -> np.ndarray:
    """Gaussian prototypes resampled until every pair is at least ``min_dist`` apart."""
    for _ in range(1000):
        protos = rng.normal(0.0, 1.0, size=(count, dim))
        diffs = protos[:, None, :] - protos[None, :, :]
        dist = np.sqrt((diffs ** 2).sum(-1)) + np.eye(count) * min_dist
        if dist.min() >= min_dist:
            return protos
    raise RuntimeError("could not place well-separated prototypes")


@dataclass
class StyleWorld:
    """Latent parameters shared by every dialogue of one generated corpus."""

    transition: np.ndarray         # [S, S] user-style Markov chain
    user_mel_protos: np.ndarray    # [S, M]
    agent_feat_protos: np.ndarray  # [S, M]
    token_protos: np.ndarray       # [V, M]
    style_map: list[int]


def make_world(cfg: CorpusGenConfig, rng: np.random.Generator) -> StyleWorld:
    s = cfg.styles
    # doubly stochastic: the stationary style distribution stays uniform
    off = (1.0 - cfg.style_stay_prob) / (s - 1)
    transition = np.full((s, s), off)
    np.fill_diagonal(transition, cfg.style_stay_prob)
    user = spread_prototypes(rng, s, cfg.mel_dim)
    agent = spread_prototypes(rng, s, cfg.mel_dim)
    tokens = rng.normal(0.0, cfg.token_scale, size=(cfg.vocab, cfg.mel_dim))
    style_map = list(cfg.style_map) if cfg.style_map is not None else [int(x) for x in rng.permutation(s)]
    return StyleWorld(transition, user, agent, tokens, style_map)


def _draw_tokens(rng: np.random.Generator, cfg: CorpusGenConfig) -> list[int]:
    # one topic distribution for every speaker and style: text never reveals style
    n = int(rng.integers(cfg.tokens_range[0], cfg.tokens_range[1] + 1))
    return [int(x) for x in rng.integers(0, cfg.vocab, size=n)]


def _user_turn(rng, cfg, world, index: int, style: int) -> Turn:
    sentences = []
    for _ in range(int(rng.integers(cfg.sentence_count_range[0], cfg.sentence_count_range[1] + 1))):
        tokens = _draw_tokens(rng, cfg)
        frames = int(rng.integers(cfg.frames_range[0], cfg.frames_range[1] + 1))
        noise = rng.normal(0.0, 1.0, size=(frames, cfg.mel_dim)) * cfg.noise_std
        mel = world.user_mel_protos[style][None, :] + noise
        sentences.append(Sentence(tokens, mel, style))
    return Turn(index, USER, sentences)


def _agent_turn(rng, cfg, world, index: int, style: int) -> Turn:
    sentences = []
    for _ in range(int(rng.integers(cfg.sentence_count_range[0], cfg.sentence_count_range[1] + 1))):
        tokens = _draw_tokens(rng, cfg)
        noise = rng.normal(0.0, 1.0, size=(len(tokens), cfg.mel_dim)) * cfg.noise_std
        feats = world.agent_feat_protos[style][None, :] + world.token_protos[tokens] + noise
        sentences.append(Sentence(tokens, feats, style))
    return Turn(index, AGENT, sentences)


def generate_dialogues(cfg: CorpusGenConfig) -> tuple[list[Dialogue], StyleWorld]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    world = make_world(cfg, rng)
    width = len(str(cfg.n_dialogues - 1))
    dialogues = []
    for n in range(cfg.n_dialogues):
        style = int(rng.integers(cfg.styles))
        turns: list[Turn] = []
        for t in range(1, cfg.turns_per_dialogue + 1, 2):
            if t > 1:
                style = int(rng.choice(cfg.styles, p=world.transition[style]))
            turns.append(_user_turn(rng, cfg, world, t, style))
            turns.append(_agent_turn(rng, cfg, world, t + 1, world.style_map[style]))
        dialogues.append(Dialogue(f"dlg{n:0{width}d}", turns))
    return dialogues, world


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_valid = int(math.floor(n * ratios[1] + 0.5))
    n_eval = int(math.floor(n * ratios[2] + 0.5))
    return n - n_valid - n_eval, n_valid, n_eval


def generate_corpus(cfg: CorpusGenConfig) -> Corpus:
    """Generate dialogues and split them by dialogue into train/valid/eval."""
    dialogues, _ = generate_dialogues(cfg)
    n_train, n_valid, _ = split_sizes(len(dialogues), cfg.split)
    return Corpus(dialogues[:n_train], dialogues[n_train:n_train + n_valid], dialogues[n_train + n_valid:])
