"""Command-line entry point: synth, train, eval, compare, rank, predict.

Exit codes: 0 ok, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .config import ConfigError, RunConfig, resolve
from .document import CorpusError, Task, element_html_text, parse_corpus
from .evaluation import EvalReport, Pipeline, evaluate, format_comparison, format_report
from .predictor import (
    ChooserWeights,
    GroundTruthChooser,
    LexicalChooser,
    OpHeadWeights,
    OracleOpHead,
    ScriptedChooser,
    TrainedChooser,
    run_step,
    step_blocks,
    partition_groups,
    train_chooser,
    train_op_head,
)
from .ranker import ElementRanker, RankerWeights, train_ranker
from .spatial import NeighborError, NeighborSource, has_tree_links, neighbors
from .synth import SynthConfigError, SynthError, generate_corpus
from .tokens import build_vocab
from .visual import ImageFormatError, ScreenshotFeatures
from .weights_io import WeightsFormatError

RANKER_FILE = "ranker.dvcr"
CHOOSER_FILE = "chooser.dvcr"
OPHEAD_FILE = "ophead.dvcr"
LOSSES_FILE = "losses.json"


class UsageError(ValueError):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file (flags override it)")
    p.add_argument("--M", type=int, dest="M")
    p.add_argument("--K", type=int)
    p.add_argument("--neighbor-source", dest="neighbor_source")
    p.add_argument("--visual-mode", dest="visual_mode")
    p.add_argument("--chooser")
    p.add_argument("--predictor-mode", dest="predictor_mode")
    p.add_argument("--weights")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualvcr", description="Dual-view web element ranking and action prediction.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--config")
    p.add_argument("--pages", type=int)
    p.add_argument("--seed", type=int, dest="synth_seed")
    p.add_argument("--out")
    p.add_argument("--widgets-per-page", type=int, dest="widgets_per_page")
    p.add_argument("--distractor-groups", type=int, dest="distractor_groups")
    p.add_argument("--M-planted", type=int, dest="M_planted")
    p.add_argument("--split-mode", dest="split_mode")

    p = sub.add_parser("train", help="train the ranker (and chooser + op head)")
    _add_common(p)
    p.add_argument("--train")
    p.add_argument("--preset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--dropout", type=float)
    p.add_argument("--none-rate", type=float, dest="none_rate", help="share of all-negative chooser groups")

    p = sub.add_parser("eval", help="evaluate on a corpus")
    _add_common(p)
    p.add_argument("--test")
    p.add_argument("--report")
    p.add_argument("--op-oracle", action="store_const", const=True, dest="op_oracle")

    p = sub.add_parser("compare", help="print two JSON reports side by side")
    p.add_argument("reports", nargs=2)

    for name in ("rank", "predict"):
        p = sub.add_parser(name, help=f"{name} a single step, for debugging")
        _add_common(p)
        p.add_argument("--corpus")
        p.add_argument("--task", required=True)
        p.add_argument("--step", type=int, default=0)
        if name == "predict":
            p.add_argument("--op-oracle", action="store_const", const=True, dest="op_oracle")
    return parser


_NOT_SETTINGS = {"command", "config", "verbose", "reports", "task", "step"}


def _config(args: argparse.Namespace) -> RunConfig:
    flags = {k: v for k, v in vars(args).items() if k not in _NOT_SETTINGS}
    return resolve(getattr(args, "config", None), flags)


def _need(value: str | None, name: str) -> str:
    if not value:
        raise UsageError(f"{name} is required (flag or config file)")
    return value


def _load_corpus(path: str) -> list[Task]:
    return parse_corpus(path)


def _check_tree(corpus: Sequence[Task], source: str) -> None:
    if source != NeighborSource.TREE.value:
        return
    for task in corpus:
        for step in task.steps:
            if not has_tree_links(step.document):
                raise ConfigError(
                    f"neighbor_source=tree needs parent links, but task {task.task_id!r} step {step.step_id} "
                    "has no single-rooted parent tree"
                )


def _features(corpus_path: str, cfg: RunConfig) -> ScreenshotFeatures:
    return ScreenshotFeatures(Path(corpus_path).parent, cfg.patch, cfg.d_v, cfg.sampling)


def cmd_synth(cfg: RunConfig, out) -> int:
    corpus = generate_corpus(cfg.synth_config(), cfg.out)
    print(
        f"wrote {len(corpus.train)} train and {len(corpus.test)} test tasks to {cfg.out}",
        file=out,
    )
    return 0


def cmd_train(cfg: RunConfig, out) -> int:
    path = _need(cfg.train, "train")
    corpus = _load_corpus(path)
    source = cfg.neighbor_source or NeighborSource.VISUAL.value
    _check_tree(corpus, source)
    tc = cfg.train_config()
    vocab = build_vocab(corpus)
    feats = _features(path, cfg)
    wdir = Path(cfg.weights)
    wdir.mkdir(parents=True, exist_ok=True)
    losses: dict[str, list[float]] = {}

    result = train_ranker(corpus, tc, source, feats, vocab, cfg.visual_mode, cfg.d_v, cfg.patch, cfg.sampling)
    result.weights.save(wdir / RANKER_FILE)
    losses["ranker"] = result.losses
    for i, loss in enumerate(result.losses, 1):
        print(f"ranker  epoch {i:3d}  loss {loss:.6f}", file=out)

    if cfg.chooser == "trained":
        tc = cfg.predictor_train_config()
        ch = train_chooser(corpus, tc, cfg.predictor_mode, source, vocab, none_rate=cfg.none_rate)
        ch.weights.save(wdir / CHOOSER_FILE)
        losses["chooser"] = ch.losses
        for i, loss in enumerate(ch.losses, 1):
            print(f"chooser epoch {i:3d}  loss {loss:.6f}", file=out)
        op = train_op_head(corpus, tc, cfg.predictor_mode, source, vocab)
        op.weights.save(wdir / OPHEAD_FILE)
        losses["ophead"] = op.losses
        for i, loss in enumerate(op.losses, 1):
            print(f"ophead  epoch {i:3d}  loss {loss:.6f}", file=out)
    (wdir / LOSSES_FILE).write_text(json.dumps(losses, indent=2) + "\n", encoding="utf-8")
    return 0


def _ranker(cfg: RunConfig, corpus_path: str) -> ElementRanker:
    weights = RankerWeights.load(Path(cfg.weights) / RANKER_FILE)
    M = weights.M if cfg.M is None else min(cfg.M, weights.M)
    source = cfg.neighbor_source or weights.neighbor_source
    return ElementRanker(weights, _features(corpus_path, cfg), M, source, cfg.seed)


def _chooser(cfg: RunConfig):
    if cfg.chooser == "lexical":
        return LexicalChooser()
    if cfg.chooser == "scripted:gt":
        return GroundTruthChooser()
    if cfg.chooser.startswith("scripted:"):
        return ScriptedChooser.from_file(cfg.chooser.split(":", 1)[1])
    return TrainedChooser(ChooserWeights.load(Path(cfg.weights) / CHOOSER_FILE))


def _op_head(cfg: RunConfig):
    if cfg.op_oracle:
        return OracleOpHead()
    return OpHeadWeights.load(Path(cfg.weights) / OPHEAD_FILE)


def _pipeline(cfg: RunConfig, corpus_path: str) -> Pipeline:
    ranker = _ranker(cfg, corpus_path)
    return Pipeline(
        ranker,
        _chooser(cfg),
        _op_head(cfg),
        ranker.M if cfg.M is None else cfg.M,
        cfg.K,
        ranker.source,
        cfg.predictor_mode,
        cfg.seed,
    )


def cmd_eval(cfg: RunConfig, out) -> int:
    path = _need(cfg.test, "test")
    corpus = _load_corpus(path)
    pipeline = _pipeline(cfg, path)
    _check_tree(corpus, pipeline.neighbor_source)
    report = evaluate(corpus, pipeline)
    print(format_report(report, f"{path} ({cfg.weights})"), file=out)
    if cfg.report:
        Path(cfg.report).write_text(report.to_json(), encoding="utf-8")
    return 0


def cmd_compare(paths: Sequence[str], out) -> int:
    a, b = (EvalReport.from_json(Path(p).read_text(encoding="utf-8")) for p in paths)
    print(format_comparison(a, b, (Path(paths[0]).stem, Path(paths[1]).stem)), file=out)
    return 0


def _find_step(corpus: Sequence[Task], task_id: str, step_id: int):
    for task in corpus:
        if task.task_id == task_id:
            if not 0 <= step_id < len(task.steps):
                raise UsageError(f"task {task_id!r} has no step {step_id}")
            return task, task.steps[step_id]
    raise UsageError(f"no task {task_id!r} in the corpus")


def cmd_rank(cfg: RunConfig, task_id: str, step_id: int, out, predict: bool = False) -> int:
    path = _need(cfg.corpus, "corpus")
    corpus = _load_corpus(path)
    task, step = _find_step(corpus, task_id, step_id)
    if predict:
        pipeline = _pipeline(cfg, path)
        ranker = pipeline.ranker
    else:
        ranker = _ranker(cfg, path)
    _check_tree([task], ranker.source.value)
    doc = step.document
    ranked = ranker.rank(step, task.instruction)
    print(f"instruction: {task.instruction}", file=out)
    print(f"ground truth: {step.gt_action.element_id} {step.gt_action.operation}", file=out)
    print(f"ranked candidates (M={ranker.M}, neighbors={ranker.source.value}):", file=out)
    for i, (eid, p) in enumerate(ranked[: cfg.K], 1):
        nb = neighbors(doc, eid, ranker.M, ranker.source, ranker.seed)
        print(f"{i:4d}. {eid:<8} {p:.6f}  {element_html_text(doc.get(eid))}", file=out)
        if len(nb):
            print(f"      neighbors: {', '.join(nb.ids)}", file=out)
    if not predict:
        return 0
    top = ranked[: pipeline.K]
    elements = [doc.get(eid) for eid, _ in top]
    blocks = step_blocks(step, elements, pipeline.M, pipeline.mode, pipeline.neighbor_source, pipeline.seed)
    print("snippets:", file=out)
    for g, snip in enumerate(partition_groups([(e.id, b) for e, b in zip(elements, blocks)]), 1):
        print(f"  group {g}:", file=out)
        for line in snip.render().splitlines():
            print(f"    {line}", file=out)
    pred = run_step(
        step,
        task.instruction,
        ranker,
        pipeline.chooser,
        pipeline.op_head,
        pipeline.M,
        pipeline.K,
        pipeline.neighbor_source,
        pipeline.mode,
        task,
        pipeline.seed,
        ranked=ranked,
    )
    print("election:", file=out)
    for line in pred.election.transcript().splitlines():
        print(f"  {line}", file=out)
    if pred.action is None:
        print("action: NONE", file=out)
    else:
        print(f"action: {pred.action.element_id} {pred.action.operation}", file=out)
    return 0


def main(argv: Sequence[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "compare":
            return cmd_compare(args.reports, out)
        cfg = _config(args)
        if args.command == "synth":
            return cmd_synth(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out)
        return cmd_rank(cfg, args.task, args.step, out, predict=args.command == "predict")
    except (ConfigError, SynthConfigError, UsageError) as exc:
        print(f"dualvcr: error: {exc}", file=sys.stderr)
        return 2
    except (CorpusError, WeightsFormatError, ImageFormatError, SynthError, NeighborError, OSError, ValueError) as exc:
        print(f"dualvcr: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
