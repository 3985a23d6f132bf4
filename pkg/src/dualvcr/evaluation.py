"""Step-level metrics under ground-truth history.

Every step is scored independently as if all earlier steps had succeeded.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .document import Action, Operation, Step, Task
from .predictor import ElementChooser, run_step
from .spatial import NeighborSource
from .tokens import split_words

RECALL_KS = (1, 5, 10, 50)


class EmptyOutcomes(ValueError):
    pass


@dataclass(frozen=True)
class StepOutcome:
    task_id: str
    step_id: int
    ranked_ids: tuple[str, ...]
    predicted: Action | None
    gt: Action

    def __post_init__(self):
        if len(set(self.ranked_ids)) != len(self.ranked_ids):
            raise ValueError(f"{self.task_id}/{self.step_id}: duplicate ranked ids")


def _check(outcomes: Sequence[StepOutcome]) -> None:
    if not outcomes:
        raise EmptyOutcomes("metrics are undefined over zero steps")


def _mean(xs: Iterable[float], n: int) -> float:
    return math.fsum(xs) / n


def recall_at_k(outcomes: Sequence[StepOutcome], K: int) -> float:
    if K < 1:
        raise ValueError("K must be >= 1")
    _check(outcomes)
    return _mean((o.gt.element_id in o.ranked_ids[:K] for o in outcomes), len(outcomes))


def element_accuracy(outcomes: Sequence[StepOutcome]) -> float:
    _check(outcomes)
    return _mean(
        (o.predicted is not None and o.predicted.element_id == o.gt.element_id for o in outcomes),
        len(outcomes),
    )


def op_tokens(op: Operation) -> list[str]:
    return [op.op.value] + (split_words(op.arg) if op.arg else [])


def token_f1(pred: Sequence[str], gold: Sequence[str]) -> float:
    """Multiset token F1."""
    if not pred and not gold:
        return 1.0
    if not pred or not gold:
        return 0.0
    overlap = sum((Counter(pred) & Counter(gold)).values())
    if overlap == 0:
        return 0.0
    p, r = overlap / len(pred), overlap / len(gold)
    return 2 * p * r / (p + r)


def step_op_f1(o: StepOutcome) -> float:
    if o.predicted is None:
        return 0.0
    return token_f1(op_tokens(o.predicted.operation), op_tokens(o.gt.operation))


def operation_f1(outcomes: Sequence[StepOutcome]) -> float:
    _check(outcomes)
    return _mean((step_op_f1(o) for o in outcomes), len(outcomes))


def step_success(o: StepOutcome) -> bool:
    return o.predicted is not None and o.predicted.element_id == o.gt.element_id and step_op_f1(o) == 1.0


def step_success_rate(outcomes: Sequence[StepOutcome]) -> float:
    _check(outcomes)
    return _mean(map(step_success, outcomes), len(outcomes))


@dataclass(frozen=True)
class EvalReport:
    recall_at: dict[int, float]
    element_accuracy: float
    operation_f1: float
    step_success_rate: float
    steps: int
    tasks: int

    @classmethod
    def from_outcomes(cls, outcomes: Sequence[StepOutcome], ks: Sequence[int] = RECALL_KS) -> "EvalReport":
        return cls(
            recall_at={k: recall_at_k(outcomes, k) for k in sorted(ks)},
            element_accuracy=element_accuracy(outcomes),
            operation_f1=operation_f1(outcomes),
            step_success_rate=step_success_rate(outcomes),
            steps=len(outcomes),
            tasks=len({o.task_id for o in outcomes}),
        )

    def to_dict(self) -> dict:
        return {
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "element_accuracy": self.element_accuracy,
            "operation_f1": self.operation_f1,
            "step_success_rate": self.step_success_rate,
            "steps": self.steps,
            "tasks": self.tasks,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, s: str) -> "EvalReport":
        d = json.loads(s)
        if list(d) != ["recall_at", "element_accuracy", "operation_f1", "step_success_rate", "steps", "tasks"]:
            raise ValueError("report keys do not match the fixed schema")
        return cls(
            {int(k): float(v) for k, v in d["recall_at"].items()},
            float(d["element_accuracy"]),
            float(d["operation_f1"]),
            float(d["step_success_rate"]),
            int(d["steps"]),
            int(d["tasks"]),
        )


class GroundTruthRanker:
    """Oracle ranker: ground truth first, remaining candidates in document order."""

    def rank(self, step: Step, instruction: str, k: int | None = None) -> list[tuple[str, float]]:
        gt = step.gt_action.element_id
        rest = [(e.id, 0.0) for e in step.document.candidates() if e.id != gt]
        ranked = [(gt, 1.0)] + rest
        return ranked if k is None else ranked[:k]


@dataclass
class Pipeline:
    ranker: object  # anything with rank(step, instruction) -> [(id, score)]
    chooser: ElementChooser
    op_head: object
    M: int = 5
    K: int = 50
    neighbor_source: NeighborSource | str = NeighborSource.VISUAL
    mode: str = "dualvcr"
    seed: int = 0

    def outcome(self, task: Task, step: Step) -> StepOutcome:
        ranked = self.ranker.rank(step, task.instruction)
        pred = run_step(
            step,
            task.instruction,
            self.ranker,
            self.chooser,
            self.op_head,
            self.M,
            self.K,
            self.neighbor_source,
            self.mode,
            task,
            self.seed,
            ranked=ranked,
        )
        return StepOutcome(task.task_id, step.step_id, tuple(eid for eid, _ in ranked), pred.action, step.gt_action)


def step_outcomes(corpus: Sequence[Task], pipeline: Pipeline) -> list[StepOutcome]:
    return [pipeline.outcome(task, step) for task in corpus for step in task.steps]


def evaluate(corpus: Sequence[Task], pipeline: Pipeline, ks: Sequence[int] = RECALL_KS) -> EvalReport:
    return EvalReport.from_outcomes(step_outcomes(corpus, pipeline), ks)


def format_report(report: EvalReport, title: str = "") -> str:
    rows = [(f"Recall@{k}", v) for k, v in sorted(report.recall_at.items())]
    rows += [
        ("Ele. Acc", report.element_accuracy),
        ("Op. F1", report.operation_f1),
        ("Step SR", report.step_success_rate),
    ]
    width = max(len(r) for r, _ in rows)
    lines = [title] if title else []
    lines += [f"{name:<{width}}  {100 * v:6.2f}" for name, v in rows]
    lines.append(f"{'steps':<{width}}  {report.steps:>6d}")
    return "\n".join(lines)


def format_comparison(a: EvalReport, b: EvalReport, names: tuple[str, str] = ("A", "B")) -> str:
    rows = [(f"Recall@{k}", a.recall_at[k], b.recall_at.get(k, float("nan"))) for k in sorted(a.recall_at)]
    rows += [
        ("Ele. Acc", a.element_accuracy, b.element_accuracy),
        ("Op. F1", a.operation_f1, b.operation_f1),
        ("Step SR", a.step_success_rate, b.step_success_rate),
    ]
    width = max(len(r) for r, _, _ in rows)
    na, nb = names
    lines = [f"{'':<{width}}  {na:>8}  {nb:>8}  {'delta':>8}"]
    lines += [f"{n:<{width}}  {100 * x:8.2f}  {100 * y:8.2f}  {100 * (y - x):+8.2f}" for n, x, y in rows]
    return "\n".join(lines)
