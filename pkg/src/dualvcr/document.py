"""Webpage, task, and action types plus JSONL corpus ingestion."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable

import numpy as np


class ValidationError(ValueError):
    """A type invariant does not hold."""


class CorpusError(ValueError):
    """A corpus file could not be read or failed validation."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"bbox.{name} is not finite")
        if self.w < 0 or self.h < 0:
            raise ValidationError(f"bbox has negative size ({self.w}, {self.h})")

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class Element:
    id: str
    tag: str
    text: str
    attrs: tuple[tuple[str, str], ...]
    bbox: BBox
    visible: bool = True
    actionable: bool = False
    parent: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ValidationError("element id is empty")
        if not self.tag:
            raise ValidationError(f"element {self.id!r} has an empty tag")
        # accept a dict for convenience; store as an ordered tuple so the type stays hashable
        if isinstance(self.attrs, dict):
            object.__setattr__(self, "attrs", tuple(self.attrs.items()))


@dataclass(frozen=True)
class HtmlDocument:
    """One page state. ``elements`` is in document order."""

    elements: tuple[Element, ...]
    screenshot: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        if not self.elements:
            raise ValidationError("document has no elements")
        seen: set[str] = set()
        for e in self.elements:
            if e.id in seen:
                raise ValidationError(f"duplicate element id {e.id!r}")
            seen.add(e.id)
        for e in self.elements:
            if e.parent is not None and e.parent not in seen:
                raise ValidationError(f"element {e.id!r}: parent {e.parent!r} does not exist")
        self._check_acyclic()

    def _check_acyclic(self) -> None:
        parent = {e.id: e.parent for e in self.elements}
        state: dict[str, int] = {}
        for start in parent:
            path = []
            node: str | None = start
            while node is not None and node not in state:
                state[node] = 1
                path.append(node)
                node = parent[node]
            if node is not None and state[node] == 1:
                raise ValidationError(f"element {node!r}: parent links form a cycle")
            for n in path:
                state[n] = 2

    @cached_property
    def index(self) -> dict[str, int]:
        return {e.id: i for i, e in enumerate(self.elements)}

    @cached_property
    def centers(self) -> np.ndarray:
        """(N, 2) array of bounding-box centers, read-only."""
        arr = np.array(
            [(e.bbox.x + e.bbox.w / 2, e.bbox.y + e.bbox.h / 2) for e in self.elements],
            dtype=np.float64,
        )
        arr.setflags(write=False)
        return arr

    def get(self, element_id: str) -> Element:
        try:
            return self.elements[self.index[element_id]]
        except KeyError:
            raise KeyError(f"unknown element id {element_id!r}") from None

    def __contains__(self, element_id: object) -> bool:
        return element_id in self.index

    def candidates(self) -> list[Element]:
        """Visible actionable elements, in document order."""
        return [e for e in self.elements if e.visible and e.actionable]


class OpType(str, Enum):
    CLICK = "CLICK"
    TYPE = "TYPE"
    SELECT = "SELECT"


OP_TYPES = (OpType.CLICK, OpType.TYPE, OpType.SELECT)


@dataclass(frozen=True)
class Operation:
    op: OpType
    arg: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "op", OpType(self.op))
        if self.op is OpType.CLICK:
            if self.arg is not None:
                raise ValidationError("CLICK takes no argument")
        elif not self.arg:
            raise ValidationError(f"{self.op.value} requires a non-empty argument")

    def __str__(self) -> str:
        return self.op.value if self.arg is None else f"{self.op.value} {self.arg}"


@dataclass(frozen=True)
class Action:
    element_id: str
    operation: Operation


@dataclass(frozen=True)
class Step:
    step_id: int
    document: HtmlDocument
    gt_action: Action
    history: tuple[Action, ...] = ()
    # rendered prior actions; each refers to the document of its own step
    history_text: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "history", tuple(self.history))
        object.__setattr__(self, "history_text", tuple(self.history_text))
        if len(self.history) != self.step_id:
            raise ValidationError(
                f"step {self.step_id}: history has {len(self.history)} actions"
            )
        gt = self.gt_action.element_id
        if gt not in self.document:
            raise ValidationError(f"step {self.step_id}: gt element {gt!r} not in document")
        if not self.document.get(gt).actionable:
            raise ValidationError(f"step {self.step_id}: gt element {gt!r} is not actionable")


@dataclass(frozen=True)
class Task:
    task_id: str
    instruction: str
    website: str
    domain: str
    steps: tuple[Step, ...]

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.instruction.strip():
            raise ValidationError(f"task {self.task_id!r}: empty instruction")
        if not self.steps:
            raise ValidationError(f"task {self.task_id!r}: no steps")


def element_html_text(e: Element) -> str:
    """Render an element as ``[tag] text key=value ...``."""
    out = f"[{e.tag}]"
    if e.text:
        out += f" {e.text}"
    for key, value in e.attrs:
        out += f" {key}={value}"
    return out


def render_action(a: Action, doc: HtmlDocument) -> str:
    return f"{element_html_text(doc.get(a.element_id))} -> {a.operation}"


def build_task(
    task_id: str,
    instruction: str,
    website: str,
    domain: str,
    pages: Iterable[tuple[HtmlDocument, Action]],
) -> Task:
    """Assemble a task from per-step (document, ground-truth action) pairs.

    History for each step is the ground-truth actions of all earlier steps.
    """
    steps = []
    history: list[Action] = []
    rendered: list[str] = []
    for i, (doc, action) in enumerate(pages):
        try:
            steps.append(Step(i, doc, action, tuple(history), tuple(rendered)))
        except ValidationError as exc:
            raise ValidationError(f"task {task_id!r}: {exc}") from None
        history.append(action)
        rendered.append(render_action(action, doc))
    return Task(task_id, instruction, website, domain, tuple(steps))


# ---------------------------------------------------------------------------
# JSONL serialization


def _element_from_json(raw: dict[str, Any]) -> Element:
    bbox = raw["bbox"]
    if not isinstance(bbox, list) or len(bbox) != 4:
        raise ValidationError(f"element {raw.get('id')!r}: bbox must be [x, y, w, h]")
    attrs = raw.get("attrs") or {}
    if not all(isinstance(k, str) and isinstance(v, str) for k, v in attrs.items()):
        raise ValidationError(f"element {raw.get('id')!r}: attrs must map str to str")
    return Element(
        id=str(raw["id"]),
        tag=str(raw["tag"]),
        text=str(raw.get("text", "")),
        attrs=tuple(attrs.items()),
        bbox=BBox(*(float(v) for v in bbox)),
        visible=bool(raw.get("visible", True)),
        actionable=bool(raw.get("actionable", False)),
        parent=raw.get("parent"),
    )


def task_from_json(raw: dict[str, Any]) -> Task:
    task_id = str(raw.get("task_id", "?"))
    pages = []
    for i, s in enumerate(raw["steps"]):
        if s.get("step_id", i) != i:
            raise ValidationError(f"task {task_id!r}: step_id {s.get('step_id')} out of order")
        try:
            doc = HtmlDocument(
                tuple(_element_from_json(e) for e in s["elements"]),
                s.get("screenshot"),
            )
            op = s["gt_operation"]
            action = Action(str(s["gt_element"]), Operation(OpType(op["op"]), op.get("arg")))
        except (ValidationError, ValueError) as exc:
            raise ValidationError(f"task {task_id!r} step {i}: {exc}") from None
        pages.append((doc, action))
    return build_task(task_id, raw["instruction"], raw["website"], raw["domain"], pages)


def task_to_json(task: Task) -> dict[str, Any]:
    steps = []
    for s in task.steps:
        steps.append(
            {
                "step_id": s.step_id,
                "screenshot": s.document.screenshot,
                "elements": [
                    {
                        "id": e.id,
                        "tag": e.tag,
                        "text": e.text,
                        "attrs": dict(e.attrs),
                        "bbox": e.bbox.as_list(),
                        "visible": e.visible,
                        "actionable": e.actionable,
                        "parent": e.parent,
                    }
                    for e in s.document.elements
                ],
                "gt_element": s.gt_action.element_id,
                "gt_operation": {
                    "op": s.gt_action.operation.op.value,
                    "arg": s.gt_action.operation.arg,
                },
            }
        )
    return {
        "task_id": task.task_id,
        "instruction": task.instruction,
        "website": task.website,
        "domain": task.domain,
        "steps": steps,
    }


def dumps_corpus(tasks: Iterable[Task]) -> str:
    return "".join(json.dumps(task_to_json(t), ensure_ascii=False) + "\n" for t in tasks)


def write_corpus(tasks: Iterable[Task], path: str | Path) -> None:
    Path(path).write_text(dumps_corpus(tasks), encoding="utf-8")


def parse_lines(lines: Iterable[str]) -> list[Task]:
    tasks = []
    for line_num, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"malformed JSON: {exc.msg}", line_num) from None
        if not isinstance(raw, dict):
            raise CorpusError("expected a JSON object", line_num)
        try:
            tasks.append(task_from_json(raw))
        except KeyError as exc:
            raise CorpusError(f"task {raw.get('task_id')!r}: missing field {exc}", line_num) from None
        except (ValidationError, TypeError, ValueError) as exc:
            raise CorpusError(str(exc), line_num) from None
    return tasks


def parse_corpus(path: str | Path) -> list[Task]:
    """Read a JSONL corpus, one task per line, validating every invariant."""
    try:
        with open(path, encoding="utf-8") as f:
            return parse_lines(f)
    except OSError as exc:
        raise CorpusError(f"cannot read {path}: {exc.strerror}") from None
