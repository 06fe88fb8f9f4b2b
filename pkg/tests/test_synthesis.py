import dataclasses
import json

import numpy as np
import pytest

from cmcce import autodiff as ad
from cmcce.autodiff import ContractError
from cmcce.checks import check_decoder, check_losses, check_pipeline
from cmcce.context import StrategyConfig
from cmcce.dialogue import Corpus, CorpusGenConfig, generate_corpus, window
from cmcce.encoders import VocabError
from cmcce.model import (ConfigError, Decoder, DialogueModel, ModelDims, decode, infer_dialogue,
                         recon_loss, style_guided_loss, total_loss)
from cmcce.training import (Adam, AdamState, DivergenceError, ModelFormatError, TrainingConfig,
                            UnsupportedCorpusError, adam_step, evaluate, linear_probe, load_model,
                            majority_frequency, probe_style, save_model, train)

from conftest import toy_dialogue

SMALL = ModelDims(d_text=16, d_prosody=8, hidden=8, d_attn=8, d_context=8, d_token=16)


def small_corpus(n=10, seed=0, noise=0.1):
    return generate_corpus(CorpusGenConfig(n_dialogues=n, noise_std=noise, seed=seed,
                                           split=(0.6, 0.2, 0.2)))


# -------------------------------------------------------------------- decode

def test_decode_zero_context_depends_on_tokens_only():
    rng = np.random.default_rng(0)
    dec = Decoder(10, 4, 6, 3, rng)
    dec.context.bias.node.data[...] = rng.uniform(-1, 1, 6)
    out = dec([1, 2, 1], ad.const(np.zeros(4)))
    # the context branch contributes only its bias, identically for every token
    hidden_in = dec.embed.data[[1, 2, 1]] + dec.context.bias.data
    expected = np.tanh(hidden_in @ dec.hidden.weight.data.T + dec.hidden.bias.data) @ dec.out.weight.data.T
    np.testing.assert_allclose(out.data, expected + dec.out.bias.data, rtol=0, atol=1e-14)
    assert np.array_equal(out.data[0], out.data[2])


@pytest.mark.parametrize("seed", range(20))
def test_decode_context_changes_output(seed):
    rng = np.random.default_rng(seed)
    dec = Decoder(10, 4, 6, 3, rng)
    a = dec([3, 4], ad.const(rng.uniform(-1, 1, 4)))
    b = dec([3, 4], ad.const(rng.uniform(-1, 1, 4)))
    assert not np.array_equal(a.data, b.data)


def test_decode_errors():
    dec = Decoder(10, 4, 6, 3, np.random.default_rng(0))
    with pytest.raises(VocabError):
        dec([10], ad.const(np.zeros(4)))
    with pytest.raises(ContractError):
        dec([], ad.const(np.zeros(4)))
    with pytest.raises(ContractError):
        decode(dec, [[1], [2]], [ad.const(np.zeros(4))])


def test_decode_sentence_wise_stacks():
    rng = np.random.default_rng(0)
    dec = Decoder(10, 4, 6, 3, rng)
    e1, e2 = ad.const(rng.normal(size=4)), ad.const(rng.normal(size=4))
    out = decode(dec, [[1, 2], [3]], [e1, e2])
    assert out.shape == (3, 3)
    assert np.array_equal(out.data[2], dec([3], e2).data[0])


@pytest.mark.parametrize("check", [check_decoder, check_losses])
@pytest.mark.parametrize("seed", range(5))
def test_decoder_and_loss_gradients(check, seed):
    report = check(seed, 1e-3)
    assert report.passed, report.lines()


@pytest.mark.parametrize("strategy", [StrategyConfig(), StrategyConfig(sg=True, fg=True),
                                      StrategyConfig(cross_modal=True, sg=True),
                                      StrategyConfig(cross_modal=True, sg=True, attn=True, fg=True),
                                      StrategyConfig(ssl=True, cross_modal=True, attn=True, sg=True)])
def test_pipeline_gradient(strategy):
    report = check_pipeline(0, 1e-3, strategy, max_entries=None)
    assert report.passed, report.lines()


# -------------------------------------------------------------------- losses

def test_recon_examples():
    t = np.random.default_rng(0).normal(size=(4, 3))
    assert float(recon_loss(ad.const(t), t).data) == 0.0
    assert float(recon_loss(ad.const(t + 0.5), t).data) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ContractError):
        recon_loss(ad.const(t), t[:3])


def test_recon_gradient_is_sign_over_n():
    t = np.zeros((2, 3))
    pred = ad.Value(np.array([[1.0, -2, 3], [-1, 1, -1]]), requires_grad=True)
    recon_loss(pred, t).backward()
    np.testing.assert_array_equal(pred.grad, np.sign(pred.data) / 6)


def test_sg_examples():
    e = ad.Value(np.array([1.0, 0.0]), requires_grad=True)
    p = ad.const(np.array([0.0, 1.0]))
    loss = style_guided_loss(e, p)
    assert float(loss.data) == 1.0
    loss.backward()
    np.testing.assert_array_equal(e.grad, 2 * (e.data - p.data) / 2)
    assert float(style_guided_loss(p, p).data) == 0.0


def test_sg_sentence_mean():
    es = [ad.const(np.array([1.0, 0.0])), ad.const(np.array([0.0, 0.0]))]
    ps = [ad.const(np.array([0.0, 1.0])), ad.const(np.array([0.0, 0.0]))]
    assert float(style_guided_loss(es, ps).data) == 0.5


def test_total_loss_examples():
    r, s = ad.const(np.array(0.3)), ad.const(np.array(0.2))
    assert total_loss(r, s, 0.0) is r
    assert float(total_loss(ad.const(np.array(0.0)), ad.const(np.array(0.0)), 1.0).data) == 0.0
    assert float(total_loss(r, s, 2.0).data) - 0.3 == pytest.approx(2 * (float(total_loss(r, s, 1.0).data) - 0.3))


def test_sg_requires_matching_dims():
    with pytest.raises(ConfigError):
        DialogueModel(dataclasses.replace(SMALL, d_context=5), StrategyConfig(sg=True))


# ---------------------------------------------------------------------- adam

def test_adam_first_step_bounded_by_lr():
    rng = np.random.default_rng(0)
    p = rng.normal(size=20)
    g = rng.normal(size=20)
    before = p.copy()
    state = AdamState([np.zeros(20)], [np.zeros(20)])
    adam_step([p], [g], state, 0.01, 0.9, 0.98, 1e-8)
    delta = p - before
    assert np.all(np.abs(delta) <= 0.01 * (1 + 1e-6))
    np.testing.assert_allclose(delta, -0.01 * np.sign(g), rtol=1e-6)


def test_adam_zero_gradient_keeps_params():
    p = np.arange(5.0)
    state = AdamState([np.zeros(5)], [np.zeros(5)])
    for _ in range(10):
        adam_step([p], [np.zeros(5)], state, 0.1, 0.9, 0.98, 1e-8)
    assert p.tolist() == [0, 1, 2, 3, 4]


def test_adam_matches_reference_second_step():
    p, g1, g2 = np.array([1.0]), np.array([0.5]), np.array([-1.0])
    state = AdamState([np.zeros(1)], [np.zeros(1)])
    adam_step([p], [g1], state, 0.1, 0.9, 0.98, 1e-8)
    adam_step([p], [g2], state, 0.1, 0.9, 0.98, 1e-8)
    m = 0.9 * 0.1 * 0.5 + 0.1 * -1.0
    v = 0.98 * 0.02 * 0.25 + 0.02 * 1.0
    expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.98 ** 2)) + 1e-8)
    assert p[0] == pytest.approx(expected, abs=1e-12)


def test_adam_deterministic():
    def run():
        params = [ad.parameter("w", np.linspace(-1, 1, 6))]
        opt = Adam(params, lr=0.05)
        for _ in range(20):
            opt.zero_grad()
            ad.sum_all(ad.square(ad.sub(params[0].node, ad.const(np.ones(6))))).backward()
            opt.step()
        return params[0].data.tobytes()
    assert run() == run()


# ------------------------------------------------------------------- train

def test_train_zero_epochs_returns_initial_model():
    corpus = small_corpus()
    cfg = TrainingConfig(epochs=0, dims=SMALL, strategy=StrategyConfig(cross_modal=True))
    model, metrics = train(corpus, cfg)
    fresh = DialogueModel(SMALL, cfg.strategy, seed=0)
    assert all(np.array_equal(a, fresh.state_dict()[k]) for k, a in model.state_dict().items())
    assert len(metrics.curve) == 1 and metrics.curve[0]["epoch"] == 0
    assert metrics.recon_l1 == metrics.initial["recon_l1"]
    assert metrics.best_epoch == 0


def test_train_loss_strictly_decreases_first_epochs():
    corpus = small_corpus(n=12, noise=0.0, seed=1)
    cfg = TrainingConfig(epochs=5, dims=SMALL, strategy=StrategyConfig(cross_modal=True))
    _, metrics = train(corpus, cfg)
    losses = [row["train_loss"] for row in metrics.curve[1:]]
    assert len(losses) == 5
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_train_deterministic():
    corpus = small_corpus(seed=2)
    cfg = TrainingConfig(epochs=2, dims=SMALL, strategy=StrategyConfig(cross_modal=True, sg=True, attn=True))
    m1, a = train(corpus, cfg)
    m2, b = train(corpus, cfg)
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())
    assert all(m1.state_dict()[k].tobytes() == v.tobytes() for k, v in m2.state_dict().items())


def test_lambda_zero_is_recon_only_bitwise():
    corpus = small_corpus(seed=3)
    base = dict(epochs=2, dims=SMALL, seed=4)
    m_sg, _ = train(corpus, TrainingConfig(**base, lambda_sg=0.0, strategy=StrategyConfig(sg=True)))
    m_off, _ = train(corpus, TrainingConfig(**base, strategy=StrategyConfig()))
    state = m_off.state_dict()
    assert all(state[k].tobytes() == v.tobytes() for k, v in m_sg.state_dict().items())


def test_divergence_names_epoch():
    corpus = small_corpus(seed=5)
    corpus.train[0].turns[1].sentences[0].mel[0, 0] = np.nan
    with pytest.raises(DivergenceError) as info:
        train(corpus, TrainingConfig(epochs=3, dims=SMALL))
    assert info.value.epoch == 1
    assert "epoch 1" in str(info.value)


def test_train_needs_agent_turns():
    with pytest.raises(UnsupportedCorpusError):
        train(Corpus([], [], []), TrainingConfig(epochs=1, dims=SMALL))


def test_frozen_encoder_untouched_by_training():
    corpus = small_corpus(seed=6)
    cfg = TrainingConfig(epochs=1, dims=SMALL, strategy=StrategyConfig(ssl=True, cross_modal=True, sg=True))
    model, _ = train(corpus, cfg)
    fresh = DialogueModel(SMALL, cfg.strategy, seed=0)
    assert np.array_equal(model.prosody_encoder_any.projection, fresh.prosody_encoder_any.projection)


def test_evaluate_is_order_independent():
    corpus = small_corpus(n=15, seed=7)
    model = DialogueModel(SMALL, StrategyConfig(cross_modal=True, sg=True))
    dialogues = corpus.all_dialogues()
    a = evaluate(model, dialogues, 3)
    b = evaluate(model, dialogues[::-1], 3)
    assert a == b


# --------------------------------------------------------------- inference

def test_infer_first_agent_turn_matches_teacher_forcing():
    d = toy_dialogue(8)
    model = DialogueModel(SMALL, StrategyConfig(cross_modal=True, attn=True))
    fb = infer_dialogue(model, d, 5, feedback=True)
    tf = infer_dialogue(model, d, 5, feedback=False)
    assert sorted(fb) == [2, 4, 6, 8]
    assert fb[2].tobytes() == tf[2].tobytes()
    assert tf[2].tobytes() == model.forward(window(d, 2, 5)).features.data.tobytes()


@pytest.mark.parametrize("strategy", [StrategyConfig(cross_modal=True), StrategyConfig(cross_modal=True, attn=True)])
def test_infer_feedback_changes_later_turns(strategy):
    d = toy_dialogue(8)
    model = DialogueModel(SMALL, strategy)
    fb = infer_dialogue(model, d, 5, feedback=True)
    tf = infer_dialogue(model, d, 5, feedback=False)
    assert any(not np.array_equal(fb[t], tf[t]) for t in (4, 6, 8))


def test_infer_feedback_inert_without_cross_modal():
    d = toy_dialogue(8)
    model = DialogueModel(SMALL, StrategyConfig(sg=True, fg=True))
    fb = infer_dialogue(model, d, 5, feedback=True)
    tf = infer_dialogue(model, d, 5, feedback=False)
    assert all(fb[t].tobytes() == tf[t].tobytes() for t in fb)


# ------------------------------------------------------------------- probe

def test_probe_constant_features_gives_majority():
    y_train = np.array([0, 1, 1, 2, 1, 0])
    y_eval = np.array([1, 1, 0, 2])
    acc = linear_probe(np.ones((6, 3)), y_train, np.ones((4, 3)), y_eval)
    assert acc == majority_frequency(y_eval) == 0.5


def test_probe_one_hot_features_perfect():
    y_train = np.array([0, 1, 2, 3, 2, 1])
    y_eval = np.array([3, 0, 1])
    acc = linear_probe(np.eye(4)[y_train], y_train, np.eye(4)[y_eval], y_eval)
    assert acc == 1.0


def test_probe_requires_style_labels():
    corpus = small_corpus(seed=8)
    for d in corpus.train:
        for turn in d.turns:
            for s in turn.sentences:
                s.style_id = None
    with pytest.raises(UnsupportedCorpusError):
        probe_style(DialogueModel(SMALL), corpus, 3)


# ------------------------------------------------------------- persistence

def test_model_roundtrip(tmp_path):
    model = DialogueModel(SMALL, StrategyConfig(cross_modal=True, attn=True, sg=True, fg=True), seed=3)
    for p in model.all_parameters():
        p.node.data[...] += 0.01
    save_model(model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert back.strategy == model.strategy and back.dims == model.dims
    state = model.state_dict()
    assert all(state[k].tobytes() == v.tobytes() for k, v in back.state_dict().items())
    d = toy_dialogue(6)
    assert (back.forward(window(d, 6, 3)).features.data.tobytes()
            == model.forward(window(d, 6, 3)).features.data.tobytes())


def test_model_version_refused(tmp_path):
    save_model(DialogueModel(SMALL), tmp_path / "m.json")
    payload = json.loads((tmp_path / "m.json").read_text())
    payload["version"] = 99
    (tmp_path / "m.json").write_text(json.dumps(payload))
    with pytest.raises(ModelFormatError, match="version"):
        load_model(tmp_path / "m.json")
    (tmp_path / "junk.json").write_text("{\"magic\": \"nope\"}")
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "junk.json")


def test_training_config_roundtrip():
    cfg = TrainingConfig(lr=0.01, strategy=StrategyConfig(cross_modal=True, sg=True), dims=SMALL)
    assert TrainingConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg
