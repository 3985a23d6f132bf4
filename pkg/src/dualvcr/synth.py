"""Seeded synthetic web pages whose target widgets are only identifiable by context.

Every actionable widget has generic text and a generic color. Around each one
sits a tight cluster of small label and decor elements; for themed groups the
labels carry the theme's words and color. The instruction names one theme, so
the target is recoverable from its neighbors but not from the widget alone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .document import Action, BBox, Element, HtmlDocument, Operation, OpType, Task, build_task, dumps_corpus
from .spatial import visual_neighbors
from .tokens import split_words
from .visual import Image, encode_ppm

SPLIT_MODES = ("cross-task", "cross-domain")

WIDGET_W, WIDGET_H = 24, 8
LABEL_W, DECOR_W, MEMBER_H = 20, 12, 8
CELL_W, CELL_H = 84, 48
JITTER = 4
# member slots around the widget center; spacing guarantees no overlap
SLOTS = [(dx, dy) for dy in (-10, 0, 10) for dx in (-24, 0, 24) if (dx, dy) != (0, 0)]
MAX_LAYOUT_TRIES = 20


class SynthError(RuntimeError):
    pass


class SynthConfigError(ValueError):
    pass


def load_themes(path: str | Path | None = None) -> dict[str, Any]:
    if path is None:
        text = resources.files("dualvcr").joinpath("data/themes.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return json.loads(text)


@dataclass(frozen=True)
class SynthConfig:
    pages: int = 200
    page_width: int = 336
    page_height: int = 192
    widgets_per_page: int = 12
    distractor_groups: int = 4
    M_planted: int = 3
    cluster_size: int = 6  # widget plus surrounding label/decor members
    vocab_themes: tuple[str, ...] = ()  # empty = every theme in the data file
    split_mode: str = "cross-task"
    test_fraction: float = 0.2
    seed: int = 1

    def __post_init__(self):
        object.__setattr__(self, "vocab_themes", tuple(self.vocab_themes))
        if self.pages < 1:
            raise SynthConfigError("pages must be >= 1")
        if self.page_width < 64 or self.page_height < 64:
            raise SynthConfigError("page_width and page_height must be >= 64")
        if self.distractor_groups < 0:
            raise SynthConfigError("distractor_groups must be >= 0")
        if self.widgets_per_page < max(1, 2 * self.distractor_groups):
            raise SynthConfigError("widgets_per_page must be >= 2 * distractor_groups and >= 1")
        if self.M_planted < 1:
            raise SynthConfigError("M_planted must be >= 1")
        if not self.M_planted + 1 <= self.cluster_size <= len(SLOTS) + 1:
            raise SynthConfigError(f"cluster_size must be in {self.M_planted + 1}..{len(SLOTS) + 1}")
        if self.split_mode not in SPLIT_MODES:
            raise SynthConfigError(f"split_mode must be one of {SPLIT_MODES}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise SynthConfigError("test_fraction must be in [0, 1)")
        if not 0 <= self.seed < 2**64:
            raise SynthConfigError("seed must be a u64")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["vocab_themes"] = list(self.vocab_themes)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SynthConfig":
        return cls(**{**d, "vocab_themes": tuple(d.get("vocab_themes", ()))})


@dataclass(frozen=True)
class PageSpec:
    task_id: str
    instruction: str
    action: Action
    theme: str


def _rgb(c: Sequence[int]) -> tuple[int, int, int]:
    return (int(c[0]), int(c[1]), int(c[2]))


def theme_pools(cfg: SynthConfig, themes: dict[str, Any]) -> tuple[list[dict], list[dict]]:
    """(train pool, test pool); identical under cross-task, disjoint halves under cross-domain."""
    every = themes["themes"]
    if cfg.vocab_themes:
        by_name = {t["name"]: t for t in every}
        missing = [n for n in cfg.vocab_themes if n not in by_name]
        if missing:
            raise SynthConfigError(f"unknown themes: {', '.join(missing)}")
        every = [by_name[n] for n in cfg.vocab_themes]
    for t in every:
        if len(t["words"]) < cfg.M_planted:
            raise SynthConfigError(f"theme {t['name']!r} has fewer than M_planted words")
    if cfg.split_mode == "cross-task":
        pools = (every, every)
    else:
        half = len(every) // 2
        pools = (every[:half], every[half:])
    need = cfg.distractor_groups + 1
    for name, pool in zip(("train", "test"), pools):
        if len(pool) < need:
            raise SynthConfigError(f"{name} theme pool has {len(pool)} themes, need {need}")
    return pools


def _layout(cfg: SynthConfig, rng: np.random.Generator) -> list[tuple[int, int, list[tuple[int, int]]]]:
    """Per widget: integer center and its member slot offsets."""
    cols, rows = cfg.page_width // CELL_W, cfg.page_height // CELL_H
    if cfg.widgets_per_page > cols * rows:
        raise SynthError(
            f"cannot place {cfg.widgets_per_page} widgets on a {cfg.page_width}x{cfg.page_height} page "
            f"({cols * rows} cells)"
        )
    cells = rng.choice(cols * rows, size=cfg.widgets_per_page, replace=False)
    out = []
    for cell in cells:
        r, c = divmod(int(cell), cols)
        cx = c * CELL_W + CELL_W // 2 + int(rng.integers(-JITTER, JITTER + 1))
        cy = r * CELL_H + CELL_H // 2 + int(rng.integers(-JITTER, JITTER + 1))
        slots = [SLOTS[i] for i in rng.permutation(len(SLOTS))[: cfg.cluster_size - 1]]
        # labels fill the nearest slots so the planted words sit inside the top M_planted
        slots.sort(key=lambda s: s[0] ** 2 + s[1] ** 2)
        out.append((cx, cy, slots))
    return out


def _box(cx: float, cy: float, w: int, h: int) -> BBox:
    return BBox(float(cx - w // 2), float(cy - h // 2), float(w), float(h))


def generate_page(
    cfg: SynthConfig,
    page_seed: int,
    task_id: str = "page",
    pool: Sequence[dict] | None = None,
    themes: dict[str, Any] | None = None,
    screenshot: str | None = None,
) -> tuple[HtmlDocument, Image, PageSpec]:
    themes = themes or load_themes()
    pool = list(pool) if pool is not None else theme_pools(cfg, themes)[0]
    rng = np.random.default_rng(page_seed)
    chosen = [pool[i] for i in rng.choice(len(pool), size=cfg.distractor_groups + 1, replace=False)]
    target = chosen[0]
    op = OpType(target["op"])
    keyword = target["words"][0]
    value = str(rng.choice(target["values"])) if op is not OpType.CLICK else None
    template = str(rng.choice(themes["templates"][op.value]))
    instruction = template.format(word=keyword, value=value)

    for _ in range(MAX_LAYOUT_TRIES):
        layout = _layout(cfg, rng)
        clusters = []  # (widget, members) as (tag, text, color, box) tuples
        for g, (cx, cy, slots) in enumerate(layout):
            theme = chosen[g] if g < len(chosen) else None
            k = int(rng.integers(1, cfg.M_planted + 1))
            # widget tags are independent of the theme so the widget alone is uninformative
            tag = str(rng.choice(themes["widget_tags"]))
            if theme is not None:
                words = list(theme["words"])
                if g == 0:
                    rest = [w for w in words if w != keyword]
                    picked = [keyword] + [rest[i] for i in rng.permutation(len(rest))[: k - 1]]
                else:
                    picked = [words[i] for i in rng.permutation(len(words))[:k]]
                label_color = _rgb(theme["color"])
            else:
                neutral = themes["neutral_words"]
                picked = [neutral[i] for i in rng.permutation(len(neutral))[:k]]
                label_color = _rgb(themes["decor_color"])
            widget = (tag, "", _rgb(themes["widget_color"]), _box(cx, cy, WIDGET_W, WIDGET_H))
            members = []
            for i, (dx, dy) in enumerate(slots):
                if i < len(picked):
                    members.append(("label", picked[i].capitalize(), label_color, _box(cx + dx, cy + dy, LABEL_W, MEMBER_H)))
                else:
                    members.append(("span", "", _rgb(themes["decor_color"]), _box(cx + dx, cy + dy, DECOR_W, MEMBER_H)))
            clusters.append((widget, members))
        doc, colors, gt_id = _assemble(cfg, clusters, rng, screenshot)
        if _clusters_isolated(doc, cfg.cluster_size - 1):
            break
    else:
        raise SynthError(f"layout failed after {MAX_LAYOUT_TRIES} tries (page seed {page_seed})")

    img = render(doc, colors, cfg.page_width, cfg.page_height, _rgb(themes["background"]))
    action = Action(gt_id, Operation(op, value))
    return doc, img, PageSpec(task_id, instruction, action, target["name"])


def _assemble(cfg: SynthConfig, clusters, rng: np.random.Generator, screenshot: str | None):
    """Lay clusters out in a shuffled document order under a body root; ids follow document order."""
    raw: list[tuple[str, str, BBox, bool, bool, str | None, tuple | None]] = []
    raw.append(("body", "", BBox(0.0, 0.0, float(cfg.page_width), float(cfg.page_height)), False, False, None, None))
    gt_pos = -1
    for g in rng.permutation(len(clusters)):
        widget, members = clusters[g]
        boxes = [widget[3]] + [m[3] for m in members]
        x0 = min(b.x for b in boxes)
        y0 = min(b.y for b in boxes)
        x1 = max(b.x + b.w for b in boxes)
        y1 = max(b.y + b.h for b in boxes)
        div = len(raw)
        raw.append(("div", "", BBox(x0, y0, x1 - x0, y1 - y0), False, False, 0, None))
        items = [(widget, True)] + [(m, False) for m in members]
        for i in rng.permutation(len(items)):
            (tag, text, color, box), actionable = items[i]
            if actionable and g == 0:
                gt_pos = len(raw)
            raw.append((tag, text, box, True, actionable, div, color))
    ids = [f"e{i}" for i in range(len(raw))]
    elements = []
    colors = {}
    for i, (tag, text, box, visible, actionable, parent, color) in enumerate(raw):
        elements.append(Element(ids[i], tag, text, (), box, visible, actionable, None if parent is None else ids[parent]))
        if color is not None:
            colors[ids[i]] = color
    return HtmlDocument(tuple(elements), screenshot), colors, ids[gt_pos]


def _clusters_isolated(doc: HtmlDocument, m: int) -> bool:
    """Each widget's m nearest visible elements are exactly its own cluster members."""
    for e in doc.candidates():
        nb = visual_neighbors(doc, e.id, m)
        if any(doc.get(n).parent != e.parent for n in nb.ids):
            return False
    return True


def render(
    doc: HtmlDocument,
    colors: dict[str, tuple[int, int, int]],
    width: int,
    height: int,
    background: tuple[int, int, int] = (255, 255, 255),
) -> Image:
    data = np.empty((height, width, 3), dtype=np.uint8)
    data[:] = background
    for e in doc.elements:
        if not e.visible or e.id not in colors:
            continue
        b = e.bbox
        x0, y0 = int(b.x), int(b.y)
        data[y0 : y0 + int(b.h), x0 : x0 + int(b.w)] = colors[e.id]
    return Image(data)


def planted_context(task: Task, M: int) -> tuple[bool, float]:
    """(GT has a neighbor sharing an instruction word, share of other widgets with none)."""
    words = set(split_words(task.instruction))

    def hits(doc: HtmlDocument, eid: str) -> bool:
        nb = visual_neighbors(doc, eid, M)
        return any(words & set(split_words(doc.get(n).text)) for n in nb.ids)

    step = task.steps[0]
    doc = step.document
    gt = step.gt_action.element_id
    others = [e.id for e in doc.candidates() if e.id != gt]
    clean = sum(not hits(doc, eid) for eid in others) / len(others) if others else 1.0
    return hits(doc, gt), clean


@dataclass
class SynthCorpus:
    train: list[Task]
    test: list[Task]
    images: dict[str, Image] = field(default_factory=dict)
    manifest: dict[str, Any] = field(default_factory=dict)


def page_seeds(cfg: SynthConfig) -> list[int]:
    return [int(s) for s in np.random.default_rng(cfg.seed).integers(0, 2**63, size=cfg.pages, dtype=np.int64)]


def test_indices(cfg: SynthConfig) -> set[int]:
    n_test = round(cfg.pages * cfg.test_fraction)
    perm = np.random.default_rng([cfg.seed, 1]).permutation(cfg.pages)
    return {int(i) for i in perm[:n_test]}


def generate_corpus(
    cfg: SynthConfig,
    out_dir: str | Path | None = None,
    themes_path: str | Path | None = None,
) -> SynthCorpus:
    """Generate every page, split 80/20 (by ``test_fraction``), and optionally write files.

    Files: ``train.jsonl``, ``test.jsonl``, ``screens/<task_id>.ppm`` (paths in
    the corpus are relative to ``out_dir``) and ``manifest.json``.
    """
    themes = load_themes(themes_path)
    train_pool, test_pool = theme_pools(cfg, themes)
    seeds = page_seeds(cfg)
    held_out = test_indices(cfg)
    corpus = SynthCorpus([], [])
    pages_meta = []
    for i, seed in enumerate(seeds):
        split = "test" if i in held_out else "train"
        task_id = f"synth-{i:04d}"
        shot = f"screens/{task_id}.ppm"
        doc, img, spec = generate_page(
            cfg, seed, task_id, test_pool if split == "test" else train_pool, themes, shot
        )
        task = build_task(task_id, spec.instruction, "synth.example", spec.theme, [(doc, spec.action)])
        (corpus.test if split == "test" else corpus.train).append(task)
        corpus.images[shot] = img
        pages_meta.append({"task_id": task_id, "seed": seed, "split": split, "theme": spec.theme})
    files = {
        "train.jsonl": dumps_corpus(corpus.train).encode(),
        "test.jsonl": dumps_corpus(corpus.test).encode(),
    }
    files.update({shot: encode_ppm(img) for shot, img in corpus.images.items()})
    corpus.manifest = {
        "version": 1,
        "config": cfg.to_dict(),
        "themes": themes_path is not None and str(themes_path) or None,
        "pages": pages_meta,
        "files": {name: hashlib.sha256(blob).hexdigest() for name, blob in sorted(files.items())},
    }
    if out_dir is not None:
        out = Path(out_dir)
        (out / "screens").mkdir(parents=True, exist_ok=True)
        for name, blob in files.items():
            (out / name).write_bytes(blob)
        (out / "manifest.json").write_text(json.dumps(corpus.manifest, indent=2) + "\n", encoding="utf-8")
    return corpus


def regenerate(manifest_path: str | Path, out_dir: str | Path | None = None) -> SynthCorpus:
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    cfg = SynthConfig.from_dict(manifest["config"])
    return generate_corpus(cfg, out_dir, manifest.get("themes"))


def verify_manifest(manifest_path: str | Path) -> list[str]:
    """Files under the manifest's directory whose hash differs from the record."""
    path = Path(manifest_path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    bad = []
    for name, digest in manifest["files"].items():
        f = path.parent / name
        if not f.exists() or hashlib.sha256(f.read_bytes()).hexdigest() != digest:
            bad.append(name)
    return bad
