"""Text and prosody embedding extractors.

The frozen encoders stand in for pretrained, fixed networks: seeded random
projections that are informative, deterministic and never trained. The
trainable prosody encoder is a mean-pool + linear + tanh block whose output is
a graph node.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Value
from .dialogue import Sentence, Turn

Unit = Union[Turn, Sentence, None]
# (dialogue id, turn index, sentence index or None for the whole turn)
Key = tuple


class VocabError(ValueError):
    pass


def _sentences(unit: Unit) -> list[Sentence]:
    return unit.sentences if isinstance(unit, Turn) else [unit]


def _seeded_rng(seed: int, salt: int) -> np.random.Generator:
    return np.random.default_rng([seed, salt])


class FrozenTextEncoder:
    """Mean of fixed token projections; a turn embeds as the mean of its sentences."""

    frozen = True

    def __init__(self, vocab: int = 64, dim: int = 32, seed: int = 0):
        self.vocab = vocab
        self.dim = dim
        self.projection = _seeded_rng(seed, 101).normal(0.0, 1.0, size=(vocab, dim))

    def sentence_vector(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.max() >= self.vocab or tokens.min() < 0):
            raise VocabError(f"token id outside vocab of size {self.vocab}: {tokens.tolist()}")
        return self.projection[tokens].mean(axis=0)

    def embed(self, unit: Unit) -> np.ndarray:
        if unit is None:
            return np.zeros(self.dim)
        vecs = np.stack([self.sentence_vector(s.tokens) for s in _sentences(unit)])
        return vecs.mean(axis=0)


def mel_statistics(mel: np.ndarray) -> np.ndarray:
    """Per-dimension [mean; std] over frames."""
    return np.concatenate([mel.mean(axis=0), mel.std(axis=0)])


def _check_mel(mel: np.ndarray) -> None:
    if mel.ndim != 2 or mel.shape[0] == 0:
        raise ad.ContractError(f"prosody encoder needs a nonempty [frames, M] mel, got shape {mel.shape}")


class FrozenProsodyEncoder:
    """Fixed projection of mel summary statistics [2M -> d_p]."""

    frozen = True

    def __init__(self, mel_dim: int = 8, dim: int = 16, seed: int = 0):
        self.mel_dim = mel_dim
        self.dim = dim
        scale = 1.0 / np.sqrt(2 * mel_dim)
        self.projection = _seeded_rng(seed, 202).normal(0.0, scale, size=(dim, 2 * mel_dim))

    def named_parameters(self, prefix: str = "") -> list:
        return []

    def mel_vector(self, mel: np.ndarray) -> np.ndarray:
        _check_mel(mel)
        return self.projection @ mel_statistics(mel)

    def embed_mels(self, mels: list[np.ndarray]) -> Value:
        return ad.const(np.stack([self.mel_vector(m) for m in mels]).mean(axis=0))

    def embed_sentences(self, mels: list[np.ndarray]) -> list[Value]:
        return [ad.const(self.mel_vector(m)) for m in mels]


class TrainableProsodyEncoder(Module):
    """tanh(W meanpool(frames) + b), trained jointly with the rest of the model."""

    frozen = False

    def __init__(self, mel_dim: int = 8, dim: int = 16, rng: np.random.Generator | None = None):
        self.mel_dim = mel_dim
        self.dim = dim
        self.proj = ad.Linear(mel_dim, dim, rng if rng is not None else np.random.default_rng(0))

    def _rows(self, mels: list[np.ndarray]) -> Value:
        for m in mels:
            _check_mel(m)
        pooled = ad.const(np.stack([m.mean(axis=0) for m in mels]))
        return ad.tanh(self.proj(pooled))

    def embed_mels(self, mels: list[np.ndarray]) -> Value:
        return ad.mean_rows(self._rows(mels))

    def embed_sentences(self, mels: list[np.ndarray]) -> list[Value]:
        # same matrix path as embed_mels so a one-sentence turn matches bitwise
        rows = self._rows(mels)
        return [ad.row(rows, k) for k in range(len(mels))]


ProsodyEncoder = Union[FrozenProsodyEncoder, TrainableProsodyEncoder]


def embed_text(unit: Unit, enc: FrozenTextEncoder) -> np.ndarray:
    return enc.embed(unit)


def embed_prosody(unit: Unit, enc: ProsodyEncoder) -> Value:
    """Turn-level embedding is the mean of its sentence embeddings; PAD -> zeros."""
    if unit is None:
        return ad.const(np.zeros(enc.dim))
    return enc.embed_mels([s.mel for s in _sentences(unit)])


def features_to_mel(features: np.ndarray, mel_dim: int) -> np.ndarray:
    """Map predicted acoustic features to mel frames: identity, zero-padded or truncated."""
    f = features.shape[1]
    if f == mel_dim:
        return features
    if f > mel_dim:
        return features[:, :mel_dim]
    return np.pad(features, ((0, 0), (0, mel_dim - f)))


# ------------------------------------------------------------------ fixtures

class EmbeddingFixture:
    """Precomputed embeddings that override the encoders for matching keys.

    One JSON object per line: ``{"dialogue_id", "turn", "sentence", "text"?, "prosody"?}``
    where ``sentence`` is null for a turn-level entry. Turn-level lookups fall
    back to the mean of sentence-level entries when no turn-level entry exists.
    """

    def __init__(self, text: dict | None = None, prosody: dict | None = None):
        self.text: dict[Key, np.ndarray] = text or {}
        self.prosody: dict[Key, np.ndarray] = prosody or {}

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingFixture":
        from .dialogue import CorpusParseError

        fx = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    key = (str(rec["dialogue_id"]), int(rec["turn"]),
                           None if rec.get("sentence") is None else int(rec["sentence"]))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise CorpusParseError(f"malformed embedding fixture ({exc})", lineno) from exc
                if "text" in rec:
                    fx.text[key] = np.asarray(rec["text"], dtype=np.float64)
                if "prosody" in rec:
                    fx.prosody[key] = np.asarray(rec["prosody"], dtype=np.float64)
        return fx

    def save(self, path: str | Path) -> None:
        keys = sorted(set(self.text) | set(self.prosody), key=lambda k: (k[0], k[1], -1 if k[2] is None else k[2]))
        with open(path, "w", encoding="utf-8") as fh:
            for k in keys:
                rec = {"dialogue_id": k[0], "turn": k[1], "sentence": k[2]}
                if k in self.text:
                    rec["text"] = self.text[k].tolist()
                if k in self.prosody:
                    rec["prosody"] = self.prosody[k].tolist()
                fh.write(json.dumps(rec) + "\n")

    def lookup(self, table: dict, dialogue_id: str, turn: Turn, sentence: int | None) -> np.ndarray | None:
        hit = table.get((dialogue_id, turn.index, sentence))
        if hit is not None or sentence is not None:
            return hit
        parts = [table.get((dialogue_id, turn.index, k)) for k in range(len(turn.sentences))]
        if parts and all(p is not None for p in parts):
            return np.stack(parts).mean(axis=0)
        return None
