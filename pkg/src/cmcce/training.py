"""Optimisation, training loop, evaluation metrics, probing and persistence."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Parameter
from .context import StrategyConfig
from .dialogue import Corpus, Dialogue, window
from .model import DialogueModel, ModelDims, ModelOptions

log = logging.getLogger(__name__)

MODEL_MAGIC = "cmcce-model"
MODEL_VERSION = 1


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, message: str):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}: {message}")


class UnsupportedCorpusError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


# ---------------------------------------------------------------------- adam

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, beta1: float, beta2: float, eps: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState([np.zeros_like(p.data) for p in self.params],
                               [np.zeros_like(p.data) for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.node.grad = None

    def step(self) -> None:
        adam_step([p.node.data for p in self.params], [p.node.grad for p in self.params],
                  self.state, self.lr, self.beta1, self.beta2, self.eps)


# ------------------------------------------------------------------- configs

@dataclass
class TrainingConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    epochs: int = 50
    seed: int = 0
    lambda_sg: float = 1.0
    capacity: int = 5
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    dims: ModelDims = field(default_factory=ModelDims)
    options: ModelOptions = field(default_factory=ModelOptions)

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.lambda_sg < 0:
            raise ValueError("lambda_sg must be >= 0")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        self.strategy.validate()

    def to_json(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainingConfig":
        obj = dict(obj)
        obj["strategy"] = StrategyConfig(**obj.get("strategy", {}))
        obj["dims"] = ModelDims(**obj.get("dims", {}))
        obj["options"] = ModelOptions(**obj.get("options", {}))
        return cls(**obj)


@dataclass
class Metrics:
    recon_l1: float
    sg_mse: float | None
    probe_accuracy: float | None
    initial: dict = field(default_factory=dict)   # eval-split metrics of the untrained model
    curve: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- evaluation

def examples(dialogues: Sequence[Dialogue]) -> list[tuple[Dialogue, int]]:
    return [(d, t) for d in dialogues for t in d.agent_turns()]


def _mean(values: Sequence[float]) -> float:
    # fsum is exactly rounded, so the result does not depend on example order
    return math.fsum(values) / len(values) if values else float("nan")


def evaluate(model: DialogueModel, dialogues: Sequence[Dialogue], capacity: int,
             lambda_sg: float = 1.0) -> dict:
    """Mean per-example recon L1, SG MSE and total loss (teacher-forced history)."""
    recon, sg, total = [], [], []
    for d, t in examples(dialogues):
        losses = model.losses(window(d, t, capacity), lambda_sg)
        recon.append(float(losses.recon.data))
        total.append(float(losses.total.data))
        if losses.sg is not None:
            sg.append(float(losses.sg.data))
    return {"recon_l1": _mean(recon), "sg_mse": _mean(sg) if sg else None, "total": _mean(total)}


# --------------------------------------------------------------------- probe

def _turn_style(sentences) -> int:
    ids = [s.style_id for s in sentences]
    if any(i is None for i in ids):
        raise UnsupportedCorpusError("probe_style needs style_id ground truth on every sentence")
    counts = Counter(ids)
    return min(counts, key=lambda k: (-counts[k], k))


def context_features(model: DialogueModel, dialogues: Sequence[Dialogue], capacity: int
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Context embeddings and the Agent style labels they should encode."""
    xs, ys = [], []
    for d, t in examples(dialogues):
        win = window(d, t, capacity)
        turn = win.current
        embs = model.predict_context(win).embeddings
        if model.strategy.fg:
            for e, s in zip(embs, turn.sentences):
                xs.append(e.data)
                ys.append(_turn_style([s]))
        else:
            xs.append(embs[0].data)
            ys.append(_turn_style(turn.sentences))
    return np.array(xs), np.array(ys, dtype=np.int64)


def linear_probe(train_x: np.ndarray, train_y: np.ndarray, eval_x: np.ndarray, eval_y: np.ndarray,
                 n_classes: int | None = None) -> float:
    """Least-squares one-vs-all linear classifier; returns eval accuracy."""
    if n_classes is None:
        n_classes = int(max(train_y.max(), eval_y.max())) + 1
    design = np.hstack([train_x, np.ones((len(train_x), 1))])
    onehot = np.eye(n_classes)[train_y]
    weights, *_ = np.linalg.lstsq(design, onehot, rcond=None)
    scores = np.hstack([eval_x, np.ones((len(eval_x), 1))]) @ weights
    return float(np.mean(np.argmax(scores, axis=1) == eval_y))


def probe_style(model: DialogueModel, corpus: Corpus, capacity: int) -> float:
    train_x, train_y = context_features(model, corpus.train, capacity)
    eval_x, eval_y = context_features(model, corpus.eval, capacity)
    return linear_probe(train_x, train_y, eval_x, eval_y)


def majority_frequency(labels: np.ndarray) -> float:
    return float(np.bincount(labels).max() / len(labels))


def has_style_labels(corpus: Corpus) -> bool:
    return all(s.style_id is not None for d in corpus.train + corpus.eval
               for turn in d.turns for s in turn.sentences)


# ------------------------------------------------------------------ training

def build_model(cfg: TrainingConfig, fixture=None) -> DialogueModel:
    return DialogueModel(cfg.dims, cfg.strategy, seed=cfg.seed, options=cfg.options, fixture=fixture)


def train(corpus: Corpus, cfg: TrainingConfig, fixture=None) -> tuple[DialogueModel, Metrics]:
    """Train one strategy cell; returns the best-on-valid model and its eval metrics."""
    cfg.validate()
    train_ex = examples(corpus.train)
    if not train_ex:
        raise UnsupportedCorpusError("training split has no Agent turns")
    model = build_model(cfg, fixture)
    params = model.named_parameters()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng([cfg.seed, 7])
    valid = corpus.valid if corpus.valid else corpus.train

    first = evaluate(model, valid, cfg.capacity, cfg.lambda_sg)
    curve = [{"epoch": 0, "train_loss": None, "valid_loss": first["total"],
              "valid_recon_l1": first["recon_l1"], "valid_sg_mse": first["sg_mse"]}]
    initial = evaluate(model, corpus.eval, cfg.capacity, cfg.lambda_sg) if corpus.eval else {}
    best_loss, best_epoch, best_state = first["total"], 0, model.state_dict()

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_ex))
        losses = []
        for i in order:
            d, t = train_ex[i]
            opt.zero_grad()
            step = model.losses(window(d, t, cfg.capacity), cfg.lambda_sg)
            value = float(step.total.data)
            if not math.isfinite(value):
                raise DivergenceError(epoch, f"non-finite loss on dialogue {d.id} turn {t}")
            step.total.backward()
            opt.step()
            losses.append(value)
        stats = evaluate(model, valid, cfg.capacity, cfg.lambda_sg)
        if not math.isfinite(stats["total"]):
            raise DivergenceError(epoch, "non-finite validation loss")
        curve.append({"epoch": epoch, "train_loss": _mean(losses), "valid_loss": stats["total"],
                      "valid_recon_l1": stats["recon_l1"], "valid_sg_mse": stats["sg_mse"]})
        log.info("epoch %d train %.5f valid %.5f", epoch, curve[-1]["train_loss"], stats["total"])
        if stats["total"] < best_loss:
            best_loss, best_epoch, best_state = stats["total"], epoch, model.state_dict()

    model.load_state_dict(best_state)
    final = evaluate(model, corpus.eval, cfg.capacity, cfg.lambda_sg) if corpus.eval else initial
    probe = probe_style(model, corpus, cfg.capacity) if corpus.eval and has_style_labels(corpus) else None
    metrics = Metrics(recon_l1=final.get("recon_l1", float("nan")), sg_mse=final.get("sg_mse"),
                      probe_accuracy=probe, initial=initial, curve=curve, best_epoch=best_epoch)
    return model, metrics


# --------------------------------------------------------------- persistence

def save_model(model: DialogueModel, path: str | Path) -> None:
    payload = {
        "magic": MODEL_MAGIC,
        "version": MODEL_VERSION,
        "seed": model.seed,
        "dims": model.dims.to_json(),
        "strategy": model.strategy.to_json(),
        "options": model.options.to_json(),
        "params": {name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
                   for name, arr in model.state_dict().items()},
    }
    Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8")


def load_model(path: str | Path, fixture=None) -> DialogueModel:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not a model file ({exc})") from exc
    if payload.get("magic") != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: missing {MODEL_MAGIC!r} header")
    if payload.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"{path}: model format version {payload.get('version')} != {MODEL_VERSION}")
    model = DialogueModel(ModelDims(**payload["dims"]), StrategyConfig(**payload["strategy"]),
                          seed=payload["seed"], options=ModelOptions(**payload["options"]), fixture=fixture)
    state = {name: np.array(p["data"], dtype=np.float64).reshape(p["shape"])
             for name, p in payload["params"].items()}
    model.load_state_dict(state)
    return model


def export_attention(model: DialogueModel, dialogues: Sequence[Dialogue], capacity: int,
                     path: str | Path) -> int:
    """Write attention weights per prediction as JSON lines keyed by history turn index."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for d, t in examples(dialogues):
            win = window(d, t, capacity)
            ctx = model.predict_context(win)
            slots = [turn.index if turn is not None else None for turn in win.prosody_slots]
            for k, (wt, wp) in enumerate(zip(ctx.text_weights, ctx.prosody_weights)):
                rec = {
                    "dialogue_id": d.id, "turn": t,
                    "sentence": k if model.strategy.fg else None,
                    "empty": ctx.empty,
                    "text": {str(i): float(w) for i, w in zip(slots, wt) if i is not None},
                    "prosody": {str(i): float(w) for i, w in zip(slots, wp) if i is not None},
                }
                fh.write(json.dumps(rec) + "\n")
                n += 1
    return n
