"""Command line: corpus generation, training, evaluation, ablation and gradient checks.

Exit codes: 0 success, 1 usage, 2 data error, 3 divergence, 4 check failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checks import CHECKS, run_checks
from .context import StrategyConfig
from .dialogue import (CorpusGenConfig, CorpusParseError, CorpusValidationError, generate_corpus,
                       load_corpus, save_corpus)
from .encoders import EmbeddingFixture, VocabError
from .model import ConfigError, ModelDims, infer_dialogue
from .training import (DivergenceError, ModelFormatError, TrainingConfig, evaluate,
                       export_attention, has_style_labels, load_model, probe_style, save_model, train)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_CHECK = 0, 1, 2, 3, 4

# Table-3-style grid without the SSL encoder: the baseline plus six proposed cells
DEFAULT_CELLS = ("baseline", "cmcce", "sg", "attn", "fg", "sg+fg", "sg+attn+fg")

CSV_COLUMNS = ("cell", "ssl", "sg", "attn", "fg", "cross_modal", "recon_l1", "sg_mse", "probe_accuracy")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    """Resolved flags of one command invocation, written next to its outputs."""

    command: str
    args: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"command": self.command, "args": self.args}

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        return cls(obj["command"], dict(obj["args"]))

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _attach_log(out_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(out_dir / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("cmcce")
    root.setLevel(logging.INFO)
    root.addHandler(handler)
    return handler


def _detach_log(handler: logging.Handler) -> None:
    logging.getLogger("cmcce").removeHandler(handler)
    handler.close()


# ------------------------------------------------------------------ parser

def _add_training_flags(p: argparse.ArgumentParser, strategy_flags: bool = True) -> None:
    p.add_argument("--corpus-dir", required=True, type=Path)
    p.add_argument("--out-dir", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.98)
    p.add_argument("--lambda-sg", type=float, default=1.0)
    p.add_argument("--capacity", type=int, default=5, help="memory capacity C (history turns)")
    p.add_argument("--ssl", action="store_true", help="frozen pretrained-style prosody encoder")
    if strategy_flags:
        p.add_argument("--sg", action="store_true", help="style-guided embedding loss")
        p.add_argument("--attn", action="store_true", help="BGRU + attention aggregation")
        p.add_argument("--fg", action="store_true", help="sentence-wise context for the current turn")
        p.add_argument("--cross-modal", action="store_true", help="condition on history prosody")
    p.add_argument("--d-context", type=int, default=ModelDims.d_context)
    p.add_argument("--d-prosody", type=int, default=ModelDims.d_prosody)
    p.add_argument("--fixture", type=Path, default=None, help="precomputed embedding overrides (JSON lines)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmcce", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-corpus", help="generate a synthetic empathetic-dialogue corpus")
    g.add_argument("--out-dir", required=True, type=Path)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dialogues", type=int, default=72)
    g.add_argument("--turns", type=int, default=4)
    g.add_argument("--styles", type=int, default=4)
    g.add_argument("--noise-std", type=float, default=0.1)
    g.add_argument("--mel-dim", type=int, default=8)
    g.add_argument("--vocab", type=int, default=64)

    t = sub.add_parser("train", help="train one strategy cell")
    _add_training_flags(t)

    e = sub.add_parser("evaluate", help="evaluate a saved model on the eval split")
    e.add_argument("--corpus-dir", required=True, type=Path)
    e.add_argument("--model", required=True, type=Path)
    e.add_argument("--out-dir", required=True, type=Path)
    e.add_argument("--capacity", type=int, default=5)
    e.add_argument("--fixture", type=Path, default=None)

    a = sub.add_parser("ablate", help="train and evaluate a grid of strategy cells")
    _add_training_flags(a, strategy_flags=False)
    a.add_argument("--cells", default=",".join(DEFAULT_CELLS),
                   help="comma-separated cells, e.g. baseline,cmcce,sg+fg (prefix ssl: per cell)")

    c = sub.add_parser("grad-check", help="finite-difference gradient verification")
    c.add_argument("--tol", type=float, default=1e-3)
    c.add_argument("--only", default=None, help=f"comma-separated subset of: {','.join(CHECKS)}")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds per check")
    return parser


def _training_config(args, strategy: StrategyConfig) -> TrainingConfig:
    dims = replace(ModelDims(), d_context=args.d_context, d_prosody=args.d_prosody)
    cfg = TrainingConfig(lr=args.lr, beta1=args.beta1, beta2=args.beta2, epochs=args.epochs, seed=args.seed,
                         lambda_sg=args.lambda_sg, capacity=args.capacity, strategy=strategy, dims=dims)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _load_inputs(corpus_dir: Path, fixture_path: Path | None):
    try:
        corpus = load_corpus(corpus_dir)
        fixture = EmbeddingFixture.load(fixture_path) if fixture_path else None
    except FileNotFoundError as exc:
        raise DataError(f"missing input file: {exc.filename}") from exc
    except (CorpusParseError, CorpusValidationError) as exc:
        raise DataError(str(exc)) from exc
    return corpus, fixture


def _vars(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())}


# ---------------------------------------------------------------- commands

def cmd_gen_corpus(args) -> int:
    cfg = CorpusGenConfig(n_dialogues=args.dialogues, turns_per_dialogue=args.turns, styles=args.styles,
                          noise_std=args.noise_std, mel_dim=args.mel_dim, vocab=args.vocab, seed=args.seed)
    try:
        corpus = generate_corpus(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    args.out_dir.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, args.out_dir)
    _dump(args.out_dir / "generator.json", cfg.to_json())
    RunConfig("gen-corpus", _vars(args)).save(args.out_dir / "config.json")
    print(f"wrote {len(corpus.train)}/{len(corpus.valid)}/{len(corpus.eval)} dialogues to {args.out_dir}")
    return EXIT_OK


def _strategy_from_flags(args) -> StrategyConfig:
    cross = args.cross_modal or args.attn
    strategy = StrategyConfig(ssl=args.ssl, sg=args.sg, attn=args.attn, fg=args.fg, cross_modal=cross)
    strategy.validate()
    return strategy


def _train_cell(corpus, cfg: TrainingConfig, fixture):
    try:
        return train(corpus, cfg, fixture)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = _training_config(args, _strategy_from_flags(args))
    corpus, fixture = _load_inputs(args.corpus_dir, args.fixture)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    handler = _attach_log(args.out_dir)
    try:
        model, metrics = _train_cell(corpus, cfg, fixture)
    finally:
        _detach_log(handler)
    save_model(model, args.out_dir / "model.json")
    _dump(args.out_dir / "metrics.json", metrics.to_json())
    _write_curve(args.out_dir / "loss_curve.csv", metrics.curve)
    RunConfig("train", {**_vars(args), "training": cfg.to_json()}).save(args.out_dir / "config.json")
    print(f"{cfg.strategy.label}: eval recon_l1={metrics.recon_l1:.5f} "
          f"sg_mse={_fmt(metrics.sg_mse)} probe={_fmt(metrics.probe_accuracy)}")
    return EXIT_OK


def _write_curve(path: Path, curve: list[dict]) -> None:
    cols = ["epoch", "train_loss", "valid_loss", "valid_recon_l1", "valid_sg_mse"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in curve:
            w.writerow(["" if row[c] is None else repr(row[c]) for c in cols])


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def cmd_evaluate(args) -> int:
    corpus, fixture = _load_inputs(args.corpus_dir, args.fixture)
    try:
        model = load_model(args.model, fixture)
    except FileNotFoundError as exc:
        raise DataError(f"missing model file: {exc.filename}") from exc
    except ModelFormatError as exc:
        raise DataError(str(exc)) from exc
    args.out_dir.mkdir(parents=True, exist_ok=True)
    stats = evaluate(model, corpus.eval, args.capacity)
    stats["probe_accuracy"] = probe_style(model, corpus, args.capacity) if has_style_labels(corpus) else None
    # mean |feedback - teacher forced| per Agent turn, the train/inference prosody-source gap
    gaps = []
    for d in corpus.eval:
        fb = infer_dialogue(model, d, args.capacity, feedback=True)
        tf = infer_dialogue(model, d, args.capacity, feedback=False)
        gaps.extend(float(np.abs(fb[t] - tf[t]).mean()) for t in fb)
    stats["feedback_gap"] = float(np.mean(gaps)) if gaps else 0.0
    _dump(args.out_dir / "eval_metrics.json", stats)
    if model.strategy.attn:
        export_attention(model, corpus.eval, args.capacity, args.out_dir / "attention.jsonl")
    RunConfig("evaluate", _vars(args)).save(args.out_dir / "config.json")
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cell_seed(base: int, label: str) -> int:
    return int(np.random.SeedSequence([base, zlib.crc32(label.encode())]).generate_state(1)[0])


def ablation_rows(corpus, args, cells: list[StrategyConfig], fixture=None) -> list[dict]:
    rows = []
    for strategy in cells:
        cfg = _training_config(args, strategy)
        cfg.seed = cell_seed(args.seed, strategy.label)
        _, metrics = _train_cell(corpus, cfg, fixture)
        rows.append({
            "cell": strategy.label, "ssl": strategy.ssl, "sg": strategy.sg, "attn": strategy.attn,
            "fg": strategy.fg, "cross_modal": strategy.cross_modal, "recon_l1": metrics.recon_l1,
            "sg_mse": metrics.sg_mse, "probe_accuracy": metrics.probe_accuracy,
        })
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r["cell"]] + [int(r[k]) for k in ("ssl", "sg", "attn", "fg", "cross_modal")]
                   + [_fmt(r[k]) for k in ("recon_l1", "sg_mse", "probe_accuracy")])
    return buf.getvalue()


def parse_cells(text: str, ssl: bool) -> list[StrategyConfig]:
    cells = []
    for label in [c.strip() for c in text.split(",") if c.strip()]:
        if ssl and not label.startswith("ssl:"):
            label = "ssl:" + label
        try:
            cells.append(StrategyConfig.parse(label))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    if not cells:
        raise UsageError("--cells is empty")
    return cells


def cmd_ablate(args) -> int:
    cells = parse_cells(args.cells, args.ssl)
    corpus, fixture = _load_inputs(args.corpus_dir, args.fixture)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    handler = _attach_log(args.out_dir)
    try:
        rows = ablation_rows(corpus, args, cells, fixture)
    finally:
        _detach_log(handler)
    text = rows_to_csv(rows)
    (args.out_dir / "ablation.csv").write_text(text, encoding="utf-8")
    _dump(args.out_dir / "ablation.json", rows)
    RunConfig("ablate", _vars(args)).save(args.out_dir / "config.json")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    only = [s.strip() for s in args.only.split(",")] if args.only else None
    if only and any(name not in CHECKS for name in only):
        raise UsageError(f"--only must name checks from: {', '.join(CHECKS)}")
    if args.tol <= 0:
        raise UsageError("--tol must be > 0")
    results = run_checks(args.tol, range(args.seed, args.seed + args.seeds), only)
    ok = True
    for name, reports in results.items():
        worst = max(r.max_error for r in reports)
        passed = all(r.passed for r in reports)
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: max rel err {worst:.3e} (tol {args.tol:g})")
        if not passed:
            for r in reports:
                for line in r.lines():
                    if line.startswith("FAIL"):
                        print(f"    {line}")
    return EXIT_OK if ok else EXIT_CHECK


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"cmcce {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        if isinstance(exc, (CorpusParseError, CorpusValidationError, VocabError)):
            print(f"cmcce {args.command}: data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"cmcce {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"cmcce {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"cmcce {args.command}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
