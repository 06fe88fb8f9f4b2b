import numpy as np
import pytest

from cmcce.dialogue import AGENT, USER, Dialogue, Sentence, Turn


def toy_dialogue(n_turns: int, mel_dim: int = 8, vocab: int = 64, seed: int = 0,
                 sentences_per_turn: int = 2, did: str = "toy") -> Dialogue:
    """Alternating User/Agent dialogue with random tokens and mels."""
    rng = np.random.default_rng(seed)
    turns = []
    for i in range(1, n_turns + 1):
        speaker = USER if i % 2 else AGENT
        sents = []
        for _ in range(sentences_per_turn):
            toks = [int(x) for x in rng.integers(0, vocab, size=int(rng.integers(2, 5)))]
            frames = len(toks) if speaker == AGENT else int(rng.integers(3, 6))
            sents.append(Sentence(toks, rng.normal(size=(frames, mel_dim)), style_id=int(rng.integers(4))))
        turns.append(Turn(i, speaker, sents))
    return Dialogue(did, turns)


@pytest.fixture
def dialogue10():
    return toy_dialogue(10)


# acceptance criteria append (number, passed, detail) here; printed after the run
ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
