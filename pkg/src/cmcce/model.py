"""Context-conditioned acoustic model: encoders -> context encoder -> decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import reduce

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Linear, Module, Value, parameter
from .context import ContextOutput, StrategyConfig, build_context_encoder
from .dialogue import Dialogue, HistoryWindow, Turn
from .encoders import (EmbeddingFixture, FrozenProsodyEncoder, FrozenTextEncoder,
                       TrainableProsodyEncoder, VocabError, features_to_mel)


class ConfigError(ValueError):
    """Model hyperparameters are inconsistent with the requested strategies."""


@dataclass(frozen=True)
class ModelDims:
    vocab: int = 64
    mel_dim: int = 8
    feat_dim: int = 8
    d_text: int = 32
    d_prosody: int = 16
    hidden: int = 16
    d_attn: int = 16
    d_context: int = 16
    d_token: int = 32

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ModelOptions:
    merge: str = "concat"            # attention-path merge of the two modality contexts
    sg_target_grad: bool = False     # let the SG loss train a trainable prosody encoder
    sg_sentence_target: bool = True  # FG: match e_{t,k} against sentence-level prosody

    def to_json(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------- decoder

class Decoder(Module):
    """Per-token FF(embed(token) + proj(e)) with one tanh hidden layer."""

    def __init__(self, vocab: int, d_context: int, d_token: int, feat_dim: int, rng: np.random.Generator):
        self.vocab = vocab
        self.embed = parameter("embed", rng.normal(0.0, 0.3, size=(vocab, d_token)))
        self.context = Linear(d_context, d_token, rng)
        self.hidden = Linear(d_token, d_token, rng)
        self.out = Linear(d_token, feat_dim, rng)

    def __call__(self, tokens, e: Value) -> Value:
        tokens = list(tokens)
        if not tokens:
            raise ContractError("decode needs at least one token")
        if max(tokens) >= self.vocab or min(tokens) < 0:
            raise VocabError(f"token id outside vocab of size {self.vocab}: {tokens}")
        x = ad.add(ad.take_rows(self.embed.node, tokens), self.context(e))
        return self.out(ad.tanh(self.hidden(x)))


def decode(decoder: Decoder, tokens, e) -> Value:
    """Decode tokens under one context, or per-sentence contexts (``tokens`` a list of lists)."""
    if isinstance(e, (list, tuple)):
        if len(e) != len(tokens):
            raise ContractError(f"{len(e)} contexts for {len(tokens)} sentences")
        return ad.vstack([decoder(tok, ek) for tok, ek in zip(tokens, e)])
    return decoder(tokens, e)


# -------------------------------------------------------------------- losses

def recon_loss(pred: Value, target) -> Value:
    """Mean absolute error over every entry."""
    target = ad._lift(target)
    if pred.shape != target.shape:
        raise ContractError(f"recon_loss shape mismatch: {pred.shape} vs {target.shape}")
    return ad.mean_all(ad.absolute(ad.sub(pred, target)))


def mse(a: Value, b: Value) -> Value:
    if a.shape != b.shape:
        raise ContractError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    return ad.mean_all(ad.square(ad.sub(a, b)))


def style_guided_loss(e, p) -> Value:
    """MSE(e_t, p_t); with lists, the mean over sentences of MSE(e_{t,k}, p_{t,k})."""
    if isinstance(e, (list, tuple)):
        if len(e) != len(p):
            raise ContractError(f"{len(e)} contexts vs {len(p)} prosody targets")
        terms = [mse(ek, pk) for ek, pk in zip(e, p)]
        return ad.scale(reduce(ad.add, terms), 1.0 / len(terms))
    return mse(e, p)


def total_loss(recon: Value, sg: Value | None, lambda_sg: float) -> Value:
    if sg is None or lambda_sg == 0.0:
        return recon
    return ad.add(recon, ad.scale(sg, lambda_sg))


# --------------------------------------------------------------------- model

@dataclass
class Prediction:
    context: ContextOutput
    features: Value            # [tokens of turn t, F]
    sentence_lengths: list[int]
    target_prosody: list[Value] | None = None  # p_t, or p_{t,k} per sentence under FG

    @property
    def embeddings(self) -> list[Value]:
        return self.context.embeddings

    def sentence_features(self) -> list[np.ndarray]:
        bounds = np.cumsum([0] + self.sentence_lengths)
        return [self.features.data[bounds[i]:bounds[i + 1]] for i in range(len(self.sentence_lengths))]


@dataclass
class StepLosses:
    recon: Value
    sg: Value | None
    total: Value
    prediction: Prediction = field(repr=False)


class DialogueModel(Module):
    def __init__(self, dims: ModelDims = ModelDims(), strategy: StrategyConfig = StrategyConfig(),
                 seed: int = 0, options: ModelOptions = ModelOptions(),
                 fixture: EmbeddingFixture | None = None):
        strategy.validate()
        if strategy.sg and dims.d_context != dims.d_prosody:
            raise ConfigError(f"style-guided loss needs d_context == d_prosody, got {dims.d_context} != {dims.d_prosody}")
        self._dims = dims
        self._strategy = strategy
        self._seed = seed
        self._options = options
        self._fixture = fixture
        rng = np.random.default_rng(seed)
        self._text_encoder = FrozenTextEncoder(dims.vocab, dims.d_text, seed)
        if strategy.ssl:
            self._prosody_encoder = FrozenProsodyEncoder(dims.mel_dim, dims.d_prosody, seed)
        else:
            self._prosody_encoder = TrainableProsodyEncoder(dims.mel_dim, dims.d_prosody, rng)
        self.context = build_context_encoder(strategy, dims.d_text, dims.d_prosody, dims.hidden,
                                             dims.d_attn, dims.d_context, rng, merge=options.merge)
        self.decoder = Decoder(dims.vocab, dims.d_context, dims.d_token, dims.feat_dim, rng)
        uses_encoder = strategy.cross_modal or (strategy.sg and options.sg_target_grad)
        if not strategy.ssl and uses_encoder:
            self.prosody_encoder = self._prosody_encoder

    dims = property(lambda self: self._dims)
    strategy = property(lambda self: self._strategy)
    seed = property(lambda self: self._seed)
    options = property(lambda self: self._options)
    text_encoder = property(lambda self: self._text_encoder)

    @property
    def prosody_encoder_any(self):
        return self._prosody_encoder

    # --------------------------------------------------------- embeddings
    def text_vector(self, dialogue_id: str, turn: Turn | None, sentence: int | None = None) -> np.ndarray:
        if turn is None:
            return np.zeros(self._dims.d_text)
        if self._fixture is not None:
            hit = self._fixture.lookup(self._fixture.text, dialogue_id, turn, sentence)
            if hit is not None:
                return hit
        unit = turn if sentence is None else turn.sentences[sentence]
        return self._text_encoder.embed(unit)

    def prosody_vector(self, dialogue_id: str, turn: Turn | None, mels: list[np.ndarray] | None = None) -> Value:
        """Turn-level prosody embedding; ``mels`` overrides the corpus mel (inference feedback)."""
        if turn is None:
            return ad.const(np.zeros(self._dims.d_prosody))
        if mels is None:
            if self._fixture is not None:
                hit = self._fixture.lookup(self._fixture.prosody, dialogue_id, turn, None)
                if hit is not None:
                    return ad.const(hit)
            mels = [s.mel for s in turn.sentences]
        return self._prosody_encoder.embed_mels(mels)

    def prosody_sentence_vectors(self, dialogue_id: str, turn: Turn) -> list[Value]:
        if self._fixture is not None:
            hits = [self._fixture.lookup(self._fixture.prosody, dialogue_id, turn, k)
                    for k in range(len(turn.sentences))]
            if all(h is not None for h in hits):
                return [ad.const(h) for h in hits]
        return self._prosody_encoder.embed_sentences([s.mel for s in turn.sentences])

    # ------------------------------------------------------------ forward
    def predict_context(self, win: HistoryWindow, prosody_override: dict[int, list[np.ndarray]] | None = None
                        ) -> ContextOutput:
        """e_t (or e_{t,k} per sentence under FG) for the window's current turn."""
        did = win.dialogue_id
        past_text = [ad.const(self.text_vector(did, turn)) for turn in win.text_slots[:-1]]
        mask = np.array([turn is not None for turn in win.prosody_slots], dtype=bool)
        current_turn = win.current
        if self._strategy.fg:
            current = [ad.const(self.text_vector(did, current_turn, k)) for k in range(len(current_turn.sentences))]
        else:
            current = [ad.const(self.text_vector(did, current_turn))]
        past_prosody = None
        if self._strategy.cross_modal:
            override = prosody_override or {}
            past_prosody = []
            for turn in win.prosody_slots:
                mels = None
                if turn is not None and turn.index in override:
                    mels = [features_to_mel(f, self._dims.mel_dim) for f in override[turn.index]]
                past_prosody.append(self.prosody_vector(did, turn, mels))
        return self.context(past_text, past_prosody, current, mask)

    def forward(self, win: HistoryWindow, prosody_override=None, with_target_prosody: bool = True) -> Prediction:
        ctx = self.predict_context(win, prosody_override)
        turn = win.current
        if self._strategy.fg:
            feats = decode(self.decoder, [s.tokens for s in turn.sentences], ctx.embeddings)
        else:
            feats = decode(self.decoder, turn.tokens, ctx.embeddings[0])
        pred = Prediction(ctx, feats, [len(s.tokens) for s in turn.sentences])
        if with_target_prosody and self._dims.d_context == self._dims.d_prosody:
            pred.target_prosody = self.target_prosody(win)
        return pred

    def target_prosody(self, win: HistoryWindow) -> list[Value]:
        """Ground-truth p_t (one entry) or p_{t,k} (one per sentence under FG)."""
        turn = win.current
        if self._strategy.fg and self._options.sg_sentence_target:
            targets = self.prosody_sentence_vectors(win.dialogue_id, turn)
        elif self._strategy.fg:
            p = self.prosody_vector(win.dialogue_id, turn)
            targets = [p] * len(turn.sentences)
        else:
            targets = [self.prosody_vector(win.dialogue_id, turn)]
        if not self._options.sg_target_grad:
            targets = [ad.const(t.data) for t in targets]
        return targets

    def losses(self, win: HistoryWindow, lambda_sg: float = 1.0) -> StepLosses:
        pred = self.forward(win)
        target = win.current.mel
        recon = recon_loss(pred.features, target)
        sg = None
        if pred.target_prosody is not None:
            if self._strategy.fg:
                sg = style_guided_loss(pred.embeddings, pred.target_prosody)
            else:
                sg = style_guided_loss(pred.embeddings[0], pred.target_prosody[0])
        use_sg = sg if self._strategy.sg else None
        return StepLosses(recon, sg, total_loss(recon, use_sg, lambda_sg), pred)

    # ----------------------------------------------------------- state io
    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.all_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.all_parameters()}
        if set(params) != set(state):
            raise ContractError(f"parameter names differ: {sorted(set(params) ^ set(state))}")
        for name, p in params.items():
            if p.data.shape != state[name].shape:
                raise ContractError(f"shape mismatch for {name}: {p.data.shape} vs {state[name].shape}")
            p.node.data[...] = state[name]

    def all_parameters(self) -> list:
        """Trainable parameters plus an unused trainable prosody encoder, for persistence."""
        params = self.named_parameters()
        if isinstance(self._prosody_encoder, TrainableProsodyEncoder) and not hasattr(self, "prosody_encoder"):
            params += self._prosody_encoder.named_parameters("prosody_encoder.")
        return params


def infer_dialogue(model: DialogueModel, dialogue: Dialogue, capacity: int,
                   feedback: bool = True) -> dict[int, np.ndarray]:
    """Predict every Agent turn in order.

    With ``feedback`` the Agent's own earlier predictions replace its
    ground-truth mel in the prosody history; User history always comes from
    the corpus. Without it, history prosody is ground truth (teacher forcing).
    """
    from .dialogue import window

    produced: dict[int, list[np.ndarray]] = {}
    out: dict[int, np.ndarray] = {}
    for t in dialogue.agent_turns():
        win = window(dialogue, t, capacity)
        pred = model.forward(win, produced if feedback else None, with_target_prosody=False)
        out[t] = pred.features.data.copy()
        produced[t] = pred.sentence_features()
    return out
