"""Dual-view element ranker.

Each candidate is encoded together with its neighbors: projected visual
features are prepended as soft prompts, and every element's visual token and
text tokens share one learned rank embedding (0 for the candidate, 1..M for
neighbors in neighbor-list order).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .document import Element, HtmlDocument, Step, Task, element_html_text
from .model import Batch, EncoderConfig, RankerNet, TokenSeq, adam, init_weights, training, zero_weights
from .spatial import NeighborList, NeighborSource, neighbors
from .tokens import CLS, PAD, SEP, Vocab, build_vocab, tokenize
from .visual import FeatureSource, Projection
from .weights_io import WeightsFormatError, load_weights, save_weights

log = logging.getLogger(__name__)

VISUAL_MODES = ("element", "whole", "off")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-5
    batch_size: int = 32
    epochs: int = 5
    negatives_per_positive: int = 5
    seed: int = 0
    M: int = 5
    d_model: int = 64
    layers: int = 2
    heads: int = 2
    ffn: int = 128
    max_seq: int = 256
    d_h: int = 32
    dropout: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        for name in ("batch_size", "epochs", "negatives_per_positive", "d_model", "layers", "heads", "ffn", "max_seq", "d_h"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.M < 0:
            raise ValueError("M must be >= 0")
        if self.d_model % self.heads:
            raise ValueError("heads must divide d_model")

    @classmethod
    def reference(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def synth(cls, **kw) -> "TrainConfig":
        # 3e-5 over 5 epochs suits a pretrained encoder; a from-scratch one needs larger and more steps
        kw.setdefault("lr", 1e-3)
        kw.setdefault("epochs", 30)
        return cls(**kw)


@dataclass
class RankerWeights:
    net: RankerNet
    vocab: Vocab
    M: int
    neighbor_source: NeighborSource = NeighborSource.VISUAL
    visual_mode: str = "element"
    patch: int = 8
    sampling: int = 2

    @property
    def cfg(self) -> EncoderConfig:
        return self.net.backbone.cfg

    @property
    def none_rank(self) -> int:
        return self.M + 1

    @classmethod
    def create(
        cls,
        vocab: Vocab,
        cfg: TrainConfig,
        neighbor_source: NeighborSource | str = NeighborSource.VISUAL,
        visual_mode: str = "element",
        d_v: int = 8,
        patch: int = 8,
        sampling: int = 2,
        zero: bool = False,
    ) -> "RankerWeights":
        if visual_mode not in VISUAL_MODES:
            raise ValueError(f"visual_mode must be one of {VISUAL_MODES}")
        enc = EncoderConfig(
            vocab_size=len(vocab),
            d_model=cfg.d_model,
            layers=cfg.layers,
            heads=cfg.heads,
            ffn=cfg.ffn,
            max_seq=cfg.max_seq,
            n_ranks=cfg.M + 2,
            d_v=0 if visual_mode == "off" else d_v,
            d_h=cfg.d_h,
            dropout=cfg.dropout,
        )
        net = RankerNet(enc)
        if zero:
            zero_weights(net)
        else:
            init_weights(net, cfg.seed)
        return cls(net, vocab, cfg.M, NeighborSource(neighbor_source), visual_mode, patch, sampling)

    def projection(self) -> Projection:
        bb = self.net.backbone
        return Projection(
            bb.proj1.weight.detach().numpy().T.copy(),
            bb.proj1.bias.detach().numpy().copy(),
            bb.proj2.weight.detach().numpy().T.copy(),
            bb.proj2.bias.detach().numpy().copy(),
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy() for k, v in self.net.state_dict().items()}

    def config_block(self) -> dict:
        return {
            "kind": "ranker",
            "encoder": self.cfg.to_dict(),
            "vocab": list(self.vocab.tokens),
            "M": self.M,
            "neighbor_source": self.neighbor_source.value,
            "visual_mode": self.visual_mode,
            "patch": self.patch,
            "sampling": self.sampling,
        }

    def save(self, path: str | Path) -> None:
        save_weights(path, self.config_block(), self.tensors())

    @classmethod
    def load(cls, path: str | Path) -> "RankerWeights":
        config, tensors = load_weights(path)
        if config.get("kind") != "ranker":
            raise WeightsFormatError(f"{path}: not a ranker weights file")
        net = RankerNet(EncoderConfig(**config["encoder"]))
        load_state(net, tensors)
        return cls(
            net,
            Vocab(tuple(config["vocab"])),
            config["M"],
            NeighborSource(config["neighbor_source"]),
            config["visual_mode"],
            config["patch"],
            config["sampling"],
        )


def load_state(net: torch.nn.Module, tensors: Mapping[str, np.ndarray]) -> None:
    expected = net.state_dict()
    if set(expected) != set(tensors):
        missing = sorted(set(expected) ^ set(tensors))
        raise WeightsFormatError(f"tensor names do not match the config: {missing[:5]}")
    for name, ref in expected.items():
        if tuple(ref.shape) != tuple(tensors[name].shape):
            raise WeightsFormatError(
                f"tensor {name}: shape {tuple(tensors[name].shape)} != expected {tuple(ref.shape)}"
            )
    net.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in tensors.items()})


# ---------------------------------------------------------------------------
# Representation assembly


@dataclass(frozen=True, eq=False)
class DualViewInput:
    """Encoder input for one candidate.

    ``visual`` holds (ROI feature, rank) pairs in candidate-then-neighbor order;
    features are projected inside the encoder since the projection is trained.
    ``text_blocks`` holds (token ids, rank), candidate first.
    """

    visual: tuple[tuple[np.ndarray, int], ...]
    query_tokens: tuple[int, ...]
    history_tokens: tuple[int, ...]
    text_blocks: tuple[tuple[tuple[int, ...], int], ...]
    none_rank: int

    def __len__(self) -> int:
        return (
            1
            + len(self.visual)
            + 3
            + len(self.query_tokens)
            + len(self.history_tokens)
            + sum(len(t) for t, _ in self.text_blocks)
            + max(len(self.text_blocks) - 1, 0)
        )

    def layout(self) -> list[tuple[str, int, int]]:
        """(kind, token id, rank) per position, kind in {cls, vis, sep, tok}."""
        nr = self.none_rank
        out = [("cls", CLS, nr)]
        out += [("vis", PAD, r) for _, r in self.visual]
        out.append(("sep", SEP, nr))
        out += [("tok", t, nr) for t in self.query_tokens]
        out.append(("sep", SEP, nr))
        out += [("tok", t, nr) for t in self.history_tokens]
        out.append(("sep", SEP, nr))
        for i, (toks, rank) in enumerate(self.text_blocks):
            if i:
                out.append(("sep", SEP, nr))
            out += [("tok", t, rank) for t in toks]
        return out

    def to_seq(self, d_v: int) -> TokenSeq:
        lay = self.layout()
        ids = np.array([t for _, t, _ in lay], dtype=np.int64)
        ranks = np.array([r for _, _, r in lay], dtype=np.int64)
        is_vis = np.array([k == "vis" for k, _, _ in lay], dtype=bool)
        vis = np.zeros((len(lay), d_v))
        if d_v and self.visual:
            vis[1 : 1 + len(self.visual)] = np.stack([f for f, _ in self.visual])
        return TokenSeq(ids, ranks, is_vis, vis)


def _truncate(
    max_seq: int,
    n_fixed: int,
    query: list[int],
    history: list[int],
    blocks: list[list[int]],
) -> None:
    """Trim in place: history tail, then neighbor blocks last-first, then query tail."""

    def total() -> int:
        return n_fixed + len(query) + len(history) + sum(len(b) for b in blocks) + len(blocks) - 1

    excess = total() - max_seq
    if excess <= 0:
        return
    cut = min(excess, len(history))
    del history[len(history) - cut :]
    excess -= cut
    while excess > 0 and len(blocks) > 1:
        last = blocks[-1]
        if len(last) <= excess:
            excess -= len(last) + 1  # block and its separator
            blocks.pop()
        else:
            del last[len(last) - excess :]
            excess = 0
    if excess > 0:
        cut = min(excess, len(query))
        del query[len(query) - cut :]
        excess -= cut
    if excess > 0:
        raise AssertionError("candidate and visual prefix alone exceed max_seq")


def history_tokens(history_text: Sequence[str], v: Vocab) -> list[int]:
    return [t for line in history_text for t in tokenize(line, v)]


def assemble(
    candidate: Element,
    nbrs: NeighborList,
    q: str,
    history_text: Sequence[str],
    doc: HtmlDocument,
    feats: Mapping[str, np.ndarray] | None,
    w: RankerWeights,
    whole: np.ndarray | None = None,
) -> DualViewInput:
    """Build the dual-view input for ``candidate``.

    Layout: CLS, visual tokens (candidate rank 0, neighbors 1..), SEP, query,
    SEP, history, SEP, candidate text, then each neighbor's text, SEP-separated.
    """
    if nbrs.candidate_id != candidate.id:
        raise ValueError("neighbor list does not belong to this candidate")
    if len(nbrs) > w.M:
        raise ValueError(f"{len(nbrs)} neighbors exceed the ranker's M={w.M}")
    members = [candidate] + [doc.get(n) for n in nbrs.ids]
    if w.visual_mode == "off":
        visual: tuple = ()
    else:
        if w.visual_mode == "whole":
            vecs = [whole] * len(members)
        else:
            vecs = [feats[e.id] for e in members]
        visual = tuple((np.asarray(f, dtype=np.float64), r) for r, f in enumerate(vecs))
    query = tokenize(q, w.vocab)
    history = history_tokens(history_text, w.vocab)
    blocks = [tokenize(element_html_text(e), w.vocab) for e in members]
    n_fixed = 1 + len(visual) + 3
    _truncate(w.cfg.max_seq, n_fixed, query, history, blocks)
    return DualViewInput(
        visual,
        tuple(query),
        tuple(history),
        tuple((tuple(b), r) for r, b in enumerate(blocks)),
        w.none_rank,
    )


def score_logits(inputs: Sequence[DualViewInput], w: RankerWeights, chunk: int = 128) -> np.ndarray:
    d_v = w.cfg.d_v
    out = []
    with torch.no_grad():
        for i in range(0, len(inputs), chunk):
            batch = Batch.collate([x.to_seq(d_v) for x in inputs[i : i + chunk]], d_v)
            out.append(w.net(batch).numpy())
    return np.concatenate(out) if out else np.zeros(0)


def score(inp: DualViewInput, w: RankerWeights) -> float:
    """Relevance probability of one assembled candidate."""
    logit = score_logits([inp], w)[0]
    return float(1.0 / (1.0 + np.exp(-logit)))


# ---------------------------------------------------------------------------
# Ranking


class ElementRanker:
    """Scores every visible actionable element of a step."""

    def __init__(
        self,
        weights: RankerWeights,
        features: FeatureSource | None = None,
        M: int | None = None,
        neighbor_source: NeighborSource | str | None = None,
        seed: int = 0,
    ):
        self.w = weights
        self.features = features
        self.M = weights.M if M is None else M
        if self.M > weights.M:
            raise ValueError(f"M={self.M} exceeds the weights' M={weights.M}")
        self.source = NeighborSource(neighbor_source or weights.neighbor_source)
        self.seed = seed

    def inputs(self, step: Step, instruction: str, elements: Sequence[Element] | None = None) -> list[DualViewInput]:
        doc = step.document
        elements = doc.candidates() if elements is None else elements
        feats = whole = None
        d_v = self.w.cfg.d_v
        if self.w.visual_mode == "element":
            if self.features is None:
                feats = {e.id: np.zeros(d_v) for e in doc.elements}
            else:
                feats = self.features.element_features(doc)
        elif self.w.visual_mode == "whole":
            whole = np.zeros(d_v) if self.features is None else self.features.whole_feature(doc)
        out = []
        for e in elements:
            nbrs = neighbors(doc, e.id, self.M, self.source, self.seed)
            out.append(assemble(e, nbrs, instruction, step.history_text, doc, feats, self.w, whole))
        return out

    def rank(self, step: Step, instruction: str, k: int | None = None) -> list[tuple[str, float]]:
        cands = step.document.candidates()
        if not cands:
            return []
        logits = score_logits(self.inputs(step, instruction, cands), self.w)
        probs = 1.0 / (1.0 + np.exp(-logits))
        order = sorted(range(len(cands)), key=lambda i: (-probs[i], i))
        ranked = [(cands[i].id, float(probs[i])) for i in order]
        return ranked if k is None else ranked[:k]


def rank_elements(
    step: Step,
    instruction: str,
    weights: RankerWeights,
    M: int,
    K: int,
    neighbor_source: NeighborSource | str,
    features: FeatureSource | None = None,
    seed: int = 0,
) -> list[tuple[str, float]]:
    return ElementRanker(weights, features, M, neighbor_source, seed).rank(step, instruction, K)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    weights: RankerWeights
    losses: list[float]
    skipped: int = 0


def bce_loss(net: RankerNet, seqs: Sequence[TokenSeq], labels: Sequence[float], d_v: int) -> torch.Tensor:
    logits = net(Batch.collate(seqs, d_v))
    target = torch.tensor(labels, dtype=logits.dtype)
    return torch.nn.functional.binary_cross_entropy_with_logits(logits, target)


def train_ranker(
    corpus: Sequence[Task],
    cfg: TrainConfig,
    neighbor_source: NeighborSource | str = NeighborSource.VISUAL,
    features: FeatureSource | None = None,
    vocab: Vocab | None = None,
    visual_mode: str = "element",
    d_v: int = 8,
    patch: int = 8,
    sampling: int = 2,
) -> TrainResult:
    """BCE training: the ground-truth element is the positive, sampled actionable elements the negatives."""
    if not corpus:
        raise ValueError("empty training corpus")
    vocab = vocab or build_vocab(corpus)
    w = RankerWeights.create(vocab, cfg, neighbor_source, visual_mode, d_v, patch, sampling)
    ranker = ElementRanker(w, features, seed=cfg.seed)
    d = w.cfg.d_v

    # (positive seq, negative seqs) per usable step; inputs are fixed so build them once
    pool: list[tuple[TokenSeq, list[TokenSeq]]] = []
    skipped = 0
    for task in corpus:
        for step in task.steps:
            cands = step.document.candidates()
            gt = step.gt_action.element_id
            negs = [e for e in cands if e.id != gt]
            if not negs or gt not in {e.id for e in cands}:
                skipped += 1
                continue
            gt_el = step.document.get(gt)
            seqs = [x.to_seq(d) for x in ranker.inputs(step, task.instruction, [gt_el] + negs)]
            pool.append((seqs[0], seqs[1:]))
    if skipped:
        log.warning("skipped %d step(s) with no negatives available", skipped)

    rng = np.random.default_rng(cfg.seed)
    opt = adam(w.net, cfg.lr)
    losses: list[float] = []
    with training(w.net, cfg.seed):
        for _ in range(cfg.epochs):
            items: list[tuple[TokenSeq, float]] = []
            for pos, negs in pool:
                items.append((pos, 1.0))
                pick = rng.choice(len(negs), size=min(cfg.negatives_per_positive, len(negs)), replace=False)
                items.extend((negs[j], 0.0) for j in sorted(pick))
            order = rng.permutation(len(items))
            total = 0.0
            for b in range(0, len(order), cfg.batch_size):
                chunk = [items[j] for j in order[b : b + cfg.batch_size]]
                opt.zero_grad()
                loss = bce_loss(w.net, [s for s, _ in chunk], [y for _, y in chunk], d)
                loss.backward()
                opt.step()
                total += loss.item() * len(chunk)
            losses.append(total / len(items) if items else 0.0)
            log.info("ranker epoch %d loss %.6f", len(losses), losses[-1])
    return TrainResult(w, losses, skipped)
