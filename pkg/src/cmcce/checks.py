"""Finite-difference gradient checks for every trainable block.

Each check builds a small randomly initialised block with random inputs in
[-1, 1] and compares backward() with central differences.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Linear, grad_check
from .context import (AttentionBlock, AttentionCMCCE, BaselineCCE, BGRU, GRUCell, SimpleCMCCE,
                      StrategyConfig)
from .dialogue import CorpusGenConfig, generate_dialogues, window
from .encoders import TrainableProsodyEncoder
from .model import Decoder, DialogueModel, ModelDims, ModelOptions, recon_loss, style_guided_loss

# small sizes keep the finite-difference sweep cheap
D_IN, HIDDEN, D_ATTN, D_CTX = 4, 3, 3, 3


def _uniform(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def _randomize_biases(module, rng) -> None:
    # zero-initialised biases would hide bias-gradient bugs
    for p in module.named_parameters():
        if p.data.ndim == 1:
            p.node.data[...] = rng.uniform(-0.5, 0.5, size=p.data.shape)


def _weighted_sum(out: ad.Value, weights: np.ndarray) -> ad.Value:
    return ad.sum_all(ad.mul(out, ad.const(weights)))


def check_linear(seed: int, tol: float) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    layer = Linear(D_IN, 3, rng)
    _randomize_biases(layer, rng)
    x = ad.const(_uniform(rng, 5, D_IN))
    y = _uniform(rng, 5, 3)
    return grad_check(lambda: ad.mean_all(ad.square(ad.sub(layer(x), ad.const(y)))),
                      layer.named_parameters("linear."), tol)


def check_gru(seed: int, tol: float) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    cell = GRUCell(D_IN, HIDDEN, rng)
    _randomize_biases(cell, rng)
    x = ad.const(_uniform(rng, D_IN))
    h = ad.const(_uniform(rng, HIDDEN))
    w = _uniform(rng, HIDDEN)
    return grad_check(lambda: _weighted_sum(cell(x, h), w), cell.named_parameters("gru."), tol)


def check_bgru(seed: int, tol: float) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    net = BGRU(D_IN, HIDDEN, rng)
    _randomize_biases(net, rng)
    xs = [ad.const(_uniform(rng, D_IN)) for _ in range(3)]
    w = _uniform(rng, 3, 2 * HIDDEN)
    return grad_check(lambda: _weighted_sum(ad.stack(net(xs)), w), net.named_parameters("bgru."), tol)


def check_attention(seed: int, tol: float) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    block = AttentionBlock(D_IN, 2 * HIDDEN, D_ATTN, rng)
    _randomize_biases(block, rng)
    q = ad.const(_uniform(rng, D_IN))
    mem = ad.const(_uniform(rng, 4, 2 * HIDDEN))
    mask = np.array([False, True, True, True])
    w = _uniform(rng, D_ATTN)
    return grad_check(lambda: _weighted_sum(block(q, mem, mask)[0], w), block.named_parameters("attn."), tol)


def _history(rng, c: int, n_pad: int, dim: int) -> list[ad.Value]:
    return [ad.const(np.zeros(dim) if i < n_pad else _uniform(rng, dim)) for i in range(c)]


def _context_check(make, seed: int, tol: float, prosody: bool) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    enc = make(rng)
    _randomize_biases(enc, rng)
    c = 3
    past_text = _history(rng, c, 1, D_IN)
    past_pro = _history(rng, c, 1, D_IN) if prosody else None
    mask = np.array([False, True, True])
    current = [ad.const(_uniform(rng, D_IN)) for _ in range(2)]
    w = _uniform(rng, 2, D_CTX)
    return grad_check(lambda: _weighted_sum(ad.stack(enc(past_text, past_pro, current, mask).embeddings), w),
                      enc.named_parameters(), tol)


def check_cce_baseline(seed: int, tol: float) -> GradCheckReport:
    return _context_check(lambda rng: BaselineCCE(D_IN, HIDDEN, D_CTX, rng), seed, tol, False)


def check_cmcce_simple(seed: int, tol: float) -> GradCheckReport:
    return _context_check(lambda rng: SimpleCMCCE(D_IN, D_IN, HIDDEN, D_CTX, rng), seed, tol, True)


def check_cmcce_attention(seed: int, tol: float) -> GradCheckReport:
    return _context_check(lambda rng: AttentionCMCCE(D_IN, D_IN, HIDDEN, D_ATTN, D_CTX, rng), seed, tol, True)


def check_prosody_encoder(seed: int, tol: float) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    enc = TrainableProsodyEncoder(D_IN, 3, rng)
    _randomize_biases(enc, rng)
    mels = [_uniform(rng, 5, D_IN), _uniform(rng, 3, D_IN)]
    w = _uniform(rng, 3)
    return grad_check(lambda: _weighted_sum(enc.embed_mels(mels), w), enc.named_parameters("prosody."), tol)


def check_decoder(seed: int, tol: float) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    dec = Decoder(6, D_CTX, 4, 3, rng)
    _randomize_biases(dec, rng)
    tokens = [1, 4, 1, 5]
    e = ad.const(_uniform(rng, D_CTX))
    # targets far from predictions keep L1 away from its kink
    target = np.sign(_uniform(rng, 4, 3)) * 5.0
    return grad_check(lambda: recon_loss(dec(tokens, e), target), dec.named_parameters("decoder."), tol)


def check_losses(seed: int, tol: float) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    pred = ad.parameter("pred", _uniform(rng, 4, 3))
    target = pred.data + np.sign(_uniform(rng, 4, 3)) * rng.uniform(0.1, 1.0, size=(4, 3))
    e = ad.parameter("context", _uniform(rng, 5))
    p = ad.const(_uniform(rng, 5))
    es = ad.parameter("sentence_contexts", _uniform(rng, 2, 5))
    ps = [ad.const(_uniform(rng, 5)) for _ in range(2)]

    def loss():
        sentence_terms = style_guided_loss([ad.row(es.node, 0), ad.row(es.node, 1)], ps)
        return ad.add(ad.add(recon_loss(pred.node, target), style_guided_loss(e.node, p)), sentence_terms)

    return grad_check(loss, [pred, e, es], tol)


_PIPELINE_DIMS = ModelDims(vocab=12, mel_dim=3, feat_dim=3, d_text=4, d_prosody=3,
                           hidden=3, d_attn=3, d_context=3, d_token=4)


def check_pipeline(seed: int, tol: float, strategy: StrategyConfig | None = None,
                   max_entries: int | None = 6) -> GradCheckReport:
    """Encoders -> context -> decode -> total loss on a one-dialogue corpus."""
    strategy = strategy or StrategyConfig(cross_modal=True, sg=True, attn=True, fg=True)
    gen = CorpusGenConfig(n_dialogues=1, turns_per_dialogue=4, styles=2, mel_dim=3, vocab=12,
                          sentence_count_range=(2, 2), tokens_range=(2, 3), frames_range=(2, 3),
                          noise_std=0.3, seed=seed)
    (dlg,), _ = generate_dialogues(gen)
    # a detached SG target is a deliberate stop-gradient that finite differences
    # cannot see, so the end-to-end check differentiates through the target
    model = DialogueModel(_PIPELINE_DIMS, strategy, seed=seed, options=ModelOptions(sg_target_grad=True))
    rng = np.random.default_rng(seed)
    _randomize_biases(model, rng)
    win = window(dlg, 4, 4)  # one PAD slot
    return grad_check(lambda: model.losses(win, 0.7).total, model.named_parameters(), tol,
                      max_entries=max_entries, rng=rng)


CHECKS: dict[str, Callable[[int, float], GradCheckReport]] = {
    "linear": check_linear,
    "gru": check_gru,
    "bgru": check_bgru,
    "attention": check_attention,
    "cce_baseline": check_cce_baseline,
    "cmcce_simple": check_cmcce_simple,
    "cmcce_attention": check_cmcce_attention,
    "prosody_encoder": check_prosody_encoder,
    "decoder": check_decoder,
    "losses": check_losses,
    "pipeline": check_pipeline,
}


def run_checks(tol: float = 1e-3, seeds=range(1), only: list[str] | None = None
               ) -> dict[str, list[GradCheckReport]]:
    names = list(CHECKS) if not only else only
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown checks: {unknown}; choose from {list(CHECKS)}")
    return {name: [CHECKS[name](seed, tol) for seed in seeds] for name in names}
