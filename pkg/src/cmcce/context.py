"""Conversational context encoders.

Three aggregators share one calling convention: past text embeddings (C slots),
past prosody embeddings (C slots), and one or more "current" text embeddings.
A single current embedding gives an utterance-wise context; several (one per
sentence of the current turn) give sentence-wise contexts. History is always
utterance-wise. PAD slots arrive as zero vectors together with a boolean mask.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Linear, Module, Value, parameter


@dataclass(frozen=True)
class StrategyConfig:
    ssl: bool = False          # frozen prosody encoder instead of a trainable one
    sg: bool = False           # style-guided embedding matching loss
    attn: bool = False         # BGRU + attention aggregation instead of summed GRU summaries
    fg: bool = False           # sentence-wise context for the current turn
    cross_modal: bool = False  # use history prosody at all

    def validate(self) -> None:
        if self.attn and not self.cross_modal:
            raise ValueError("attention aggregation needs cross_modal=True")

    @property
    def label(self) -> str:
        if not self.cross_modal:
            base = "baseline"
            extras = [n for n in ("sg", "fg") if getattr(self, n)]
        else:
            base = "cmcce"
            extras = [n for n in ("sg", "attn", "fg") if getattr(self, n)]
        label = "+".join(extras) if base == "cmcce" and extras else "+".join([base] + extras)
        return ("ssl:" + label) if self.ssl else label

    @classmethod
    def parse(cls, label: str) -> "StrategyConfig":
        """Inverse of :attr:`label`, e.g. ``"sg+fg"``, ``"ssl:attn"``, ``"baseline"``."""
        ssl = label.startswith("ssl:")
        parts = [p for p in label[4 if ssl else 0:].split("+") if p]
        unknown = set(parts) - {"baseline", "cmcce", "sg", "attn", "fg"}
        if not parts or unknown:
            raise ValueError(f"unknown ablation cell {label!r}")
        cross = "baseline" not in parts
        if not cross and "cmcce" in parts:
            raise ValueError(f"cell {label!r} is both baseline and cmcce")
        cfg = cls(ssl=ssl, sg="sg" in parts, attn="attn" in parts, fg="fg" in parts, cross_modal=cross)
        cfg.validate()
        return cfg

    def to_json(self) -> dict:
        return asdict(self)


class GRUCell(Module):
    """h' = (1 - z) * n + z * h with update gate z, reset gate r and candidate n."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        bound = 1.0 / np.sqrt(hidden)
        self.w_x = parameter("w_x", rng.uniform(-bound, bound, size=(3 * hidden, n_in)))
        self.w_h = parameter("w_h", rng.uniform(-bound, bound, size=(3 * hidden, hidden)))
        # zero biases make the zero vector a fixed point for zero input
        self.b_x = parameter("b_x", np.zeros(3 * hidden))
        self.b_h = parameter("b_h", np.zeros(3 * hidden))

    def zero_state(self) -> Value:
        return ad.const(np.zeros(self.hidden))

    def __call__(self, x: Value, h: Value) -> Value:
        n = self.hidden
        gx = ad.add(ad.matmul(self.w_x.node, x), self.b_x.node)
        gh = ad.add(ad.matmul(self.w_h.node, h), self.b_h.node)
        zr = ad.sigmoid(ad.add(ad.slice_vec(gx, 0, 2 * n), ad.slice_vec(gh, 0, 2 * n)))
        z = ad.slice_vec(zr, 0, n)
        r = ad.slice_vec(zr, n, 2 * n)
        cand = ad.tanh(ad.add(ad.slice_vec(gx, 2 * n, 3 * n), ad.mul(r, ad.slice_vec(gh, 2 * n, 3 * n))))
        return ad.add(ad.mul(ad.one_minus(z), cand), ad.mul(z, h))

    def run(self, xs: Sequence[Value], h0: Value | None = None) -> list[Value]:
        """All hidden states over ``xs`` in order; empty input gives an empty list."""
        h = h0 if h0 is not None else self.zero_state()
        states = []
        for x in xs:
            h = self(x, h)
            states.append(h)
        return states

    def final(self, xs: Sequence[Value], h0: Value | None = None) -> Value:
        states = self.run(xs, h0)
        return states[-1] if states else (h0 if h0 is not None else self.zero_state())


class BGRU(Module):
    """Forward and backward GRUs; position outputs are [h_fwd; h_bwd]."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.fwd = GRUCell(n_in, hidden, rng)
        self.bwd = GRUCell(n_in, hidden, rng)

    def __call__(self, xs: Sequence[Value]) -> list[Value]:
        if not xs:
            return []
        fwd = self.fwd.run(xs)
        bwd = self.bwd.run(list(reversed(xs)))[::-1]
        return [ad.concat([f, b]) for f, b in zip(fwd, bwd)]


class AttentionBlock(Module):
    """Scaled dot-product attention with a single query and masked slots."""

    def __init__(self, d_query: int, d_key: int, d_attn: int, rng: np.random.Generator):
        self.d_attn = d_attn
        self.query = Linear(d_query, d_attn, rng)
        self.key = Linear(d_key, d_attn, rng)
        self.value = Linear(d_key, d_attn, rng)

    def __call__(self, query: Value, memory: Value, mask: np.ndarray) -> tuple[Value, Value]:
        """Return (context vector [d_attn], weights [slots]); masked weights are exactly 0."""
        q = self.query(query)
        k = self.key(memory)
        v = self.value(memory)
        scores = ad.scale(ad.matmul(k, q), 1.0 / np.sqrt(self.d_attn))
        weights = ad.softmax(scores, mask)
        return ad.matmul(weights, v), weights


@dataclass
class ContextOutput:
    embeddings: list[Value]  # one per current unit (1 unless sentence-wise)
    text_weights: list[np.ndarray] = field(default_factory=list)
    prosody_weights: list[np.ndarray] = field(default_factory=list)
    empty: bool = False  # every history slot was PAD, attention had nothing to attend to


def _check_slots(past_text: Sequence, past_prosody: Sequence | None, mask: np.ndarray) -> None:
    c = len(mask)
    if len(past_text) != c:
        raise ContractError(f"expected {c} past text slots, got {len(past_text)}")
    if past_prosody is not None and len(past_prosody) != c:
        raise ContractError(f"expected {c} past prosody slots, got {len(past_prosody)}")


class BaselineCCE(Module):
    """Text-only context: GRU over l_{t-C..t}, final state -> linear -> tanh."""

    uses_prosody = False

    def __init__(self, d_text: int, hidden: int, d_context: int, rng: np.random.Generator):
        self.gru = GRUCell(d_text, hidden, rng)
        self.out = Linear(hidden, d_context, rng)

    def __call__(self, past_text, past_prosody, current: Sequence[Value], mask: np.ndarray) -> ContextOutput:
        _check_slots(past_text, None, mask)
        h = self.gru.final(past_text)
        return ContextOutput([ad.tanh(self.out(self.gru(cur, h))) for cur in current])


class SimpleCMCCE(Module):
    """Independent GRU summaries of text and prosody, projected and summed."""

    uses_prosody = True

    def __init__(self, d_text: int, d_prosody: int, hidden: int, d_context: int, rng: np.random.Generator):
        self.text_gru = GRUCell(d_text, hidden, rng)
        self.text_out = Linear(hidden, d_context, rng)
        self.prosody_gru = GRUCell(d_prosody, hidden, rng)
        self.prosody_out = Linear(hidden, d_context, rng)

    def __call__(self, past_text, past_prosody, current: Sequence[Value], mask: np.ndarray) -> ContextOutput:
        _check_slots(past_text, past_prosody, mask)
        h_text = self.text_gru.final(past_text)
        prosody_part = self.prosody_out(self.prosody_gru.final(past_prosody))
        out = []
        for cur in current:
            text_part = self.text_out(self.text_gru(cur, h_text))
            out.append(ad.tanh(ad.add(text_part, prosody_part)))
        return ContextOutput(out)


class AttentionCMCCE(Module):
    """BGRU over each past modality, attended with the current text as query."""

    uses_prosody = True

    def __init__(self, d_text: int, d_prosody: int, hidden: int, d_attn: int, d_context: int,
                 rng: np.random.Generator, merge: str = "concat"):
        if merge not in ("concat", "sum"):
            raise ValueError(f"unknown merge {merge!r}")
        self.merge = merge
        self.hidden = hidden
        self.text_bgru = BGRU(d_text, hidden, rng)
        self.prosody_bgru = BGRU(d_prosody, hidden, rng)
        self.text_attn = AttentionBlock(d_text, 2 * hidden, d_attn, rng)
        self.prosody_attn = AttentionBlock(d_text, 2 * hidden, d_attn, rng)
        self.out = Linear(2 * d_attn if merge == "concat" else d_attn, d_context, rng)

    def _memory(self, bgru: BGRU, slots: Sequence[Value], mask: np.ndarray) -> Value:
        # PADs are a left block; the BGRU only ever sees real turns
        first = int(np.argmax(mask)) if mask.any() else len(mask)
        rows = [ad.const(np.zeros(2 * self.hidden)) for _ in range(first)]
        rows += bgru(list(slots[first:]))
        return ad.stack(rows)

    def __call__(self, past_text, past_prosody, current: Sequence[Value], mask: np.ndarray) -> ContextOutput:
        _check_slots(past_text, past_prosody, mask)
        mask = np.asarray(mask, dtype=bool)
        if len(mask) and not np.all(mask[int(np.argmax(mask)):]) and mask.any():
            raise ContractError("PAD slots must precede all real history slots")
        empty = not mask.any()
        if len(mask) == 0 or empty:
            zero = ad.const(np.zeros(self.out.weight.data.shape[1]))
            c = len(mask)
            embs = [ad.tanh(self.out(zero)) for _ in current]
            return ContextOutput(embs, [np.zeros(c)] * len(current), [np.zeros(c)] * len(current), empty=True)
        text_mem = self._memory(self.text_bgru, past_text, mask)
        prosody_mem = self._memory(self.prosody_bgru, past_prosody, mask)
        out = ContextOutput([])
        for cur in current:
            c_text, w_text = self.text_attn(cur, text_mem, mask)
            c_pro, w_pro = self.prosody_attn(cur, prosody_mem, mask)
            merged = ad.concat([c_text, c_pro]) if self.merge == "concat" else ad.add(c_text, c_pro)
            out.embeddings.append(ad.tanh(self.out(merged)))
            out.text_weights.append(w_text.data.copy())
            out.prosody_weights.append(w_pro.data.copy())
        return out


def build_context_encoder(strategy: StrategyConfig, d_text: int, d_prosody: int, hidden: int,
                          d_attn: int, d_context: int, rng: np.random.Generator, merge: str = "concat"):
    strategy.validate()
    if not strategy.cross_modal:
        return BaselineCCE(d_text, hidden, d_context, rng)
    if strategy.attn:
        return AttentionCMCCE(d_text, d_prosody, hidden, d_attn, d_context, rng, merge=merge)
    return SimpleCMCCE(d_text, d_prosody, hidden, d_context, rng)


# ------------------------------------------------- functional entry points

def infer_mask(slots: Sequence[Value]) -> np.ndarray:
    """PAD slots are exactly-zero vectors."""
    return np.array([bool(np.any(v.data != 0.0)) for v in slots], dtype=bool)


def cce_baseline(enc: BaselineCCE, texts: Sequence[Value]) -> Value:
    """Context from the C+1 text embeddings l_{t-C..t}."""
    if len(texts) < 1:
        raise ContractError("need at least the current text embedding")
    past = list(texts[:-1])
    return enc(past, None, [texts[-1]], np.ones(len(past), dtype=bool)).embeddings[0]


def cmcce_simple(enc: SimpleCMCCE, texts: Sequence[Value], prosody: Sequence[Value]) -> Value:
    if len(texts) != len(prosody) + 1:
        raise ContractError(f"need C+1 text and C prosody slots, got {len(texts)} and {len(prosody)}")
    past = list(texts[:-1])
    return enc(past, list(prosody), [texts[-1]], np.ones(len(past), dtype=bool)).embeddings[0]


def cmcce_attention(enc: AttentionCMCCE, texts: Sequence[Value], prosody: Sequence[Value],
                    mask: np.ndarray | None = None) -> ContextOutput:
    """Attention aggregation; ``mask`` defaults to treating all-zero slots as PAD."""
    if len(texts) != len(prosody) + 1:
        raise ContractError(f"need C+1 text and C prosody slots, got {len(texts)} and {len(prosody)}")
    past = list(texts[:-1])
    if mask is None:
        mask = infer_mask(past) | infer_mask(prosody)
    return enc(past, list(prosody), [texts[-1]], mask)
