"""Dialogue-context conditioning for empathetic dialogue speech synthesis, at desk scale.

Text-only and cross-modal (text + prosody) conversational context encoders,
style-guided training, attention aggregation and sentence-wise contexts, trained
with a small float64 reverse-mode autodiff on synthetic dialogues.
"""

from .context import StrategyConfig
from .dialogue import Corpus, CorpusGenConfig, Dialogue, generate_corpus, load_corpus, save_corpus, window
from .model import DialogueModel, ModelDims, ModelOptions, infer_dialogue
from .training import Metrics, TrainingConfig, load_model, probe_style, save_model, train

__all__ = [
    "Corpus", "CorpusGenConfig", "Dialogue", "DialogueModel", "Metrics", "ModelDims", "ModelOptions",
    "StrategyConfig", "TrainingConfig", "generate_corpus", "infer_dialogue", "load_corpus", "load_model",
    "probe_style", "save_corpus", "save_model", "train", "window",
]

__version__ = "0.1.0"
