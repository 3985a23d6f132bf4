"""Stage two: elect a target among the top-K candidates, then predict its operation.

Election is multiple choice in groups of at most five element options plus
"None". Picks from every group form the next round until one survives.
"""

from __future__ import annotations

import logging
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F

from .document import Action, Element, HtmlDocument, Operation, OpType, OP_TYPES, Step, Task, element_html_text
from .model import Batch, ChooserNet, EncoderConfig, OpNet, TokenSeq, adam, init_weights, training, zero_weights
from .ranker import TrainConfig, load_state
from .spatial import NeighborList, NeighborSource, neighbors
from .tokens import CLS, SEP, Vocab, build_vocab, split_words
from .weights_io import WeightsFormatError, load_weights, save_weights

log = logging.getLogger(__name__)

NBR = "<NBR>"
NBR_SEP = f" {NBR} "
MODES = ("dualvcr", "bare")


class ElectionError(RuntimeError):
    """A chooser broke its contract."""


def candidate_block(e: Element, nbrs: NeighborList | None, doc: HtmlDocument | None = None) -> str:
    """Candidate text followed by each neighbor's text, ``<NBR>``-separated.

    ``doc`` resolves neighbor ids; without it ``nbrs`` must be empty.
    """
    parts = [element_html_text(e)]
    if nbrs is not None and len(nbrs):
        if doc is None:
            raise ValueError("a document is needed to render neighbors")
        parts += [element_html_text(doc.get(n)) for n in nbrs.ids]
    return NBR_SEP.join(parts)


@dataclass(frozen=True)
class Snippet:
    options: tuple[tuple[str, str, str], ...]  # (label, element id, text)
    includes_none: bool = True

    def __len__(self) -> int:
        return len(self.options)

    @property
    def none_label(self) -> str:
        return string.ascii_uppercase[len(self.options)]

    def render(self) -> str:
        lines = [f"({label}) {text}" for label, _, text in self.options]
        if self.includes_none:
            lines.append(f"({self.none_label}) None")
        return "\n".join(lines)


def partition_groups(candidates: Sequence[tuple[str, str]], group_size: int = 5) -> list[Snippet]:
    """Chunk (element id, text) pairs into option groups, each with a trailing None."""
    if not 1 <= group_size <= 25:
        raise ValueError("group_size must be in 1..25")
    groups = []
    for i in range(0, len(candidates), group_size):
        chunk = candidates[i : i + group_size]
        groups.append(
            Snippet(tuple((string.ascii_uppercase[j], eid, text) for j, (eid, text) in enumerate(chunk)))
        )
    return groups


@runtime_checkable
class ElementChooser(Protocol):
    def choose(self, instruction: str, history_text: str, snippet: Snippet) -> int | None:
        """Index of the chosen option, or None. Index ``len(snippet)`` also means None."""


@dataclass
class ElectionResult:
    winner: str | None
    rounds: list[list[tuple[Snippet, int | None]]] = field(default_factory=list)

    def transcript(self) -> str:
        lines = []
        for r, groups in enumerate(self.rounds, 1):
            lines.append(f"round {r}:")
            for g, (snip, pick) in enumerate(groups, 1):
                lines.append(f"  group {g}:")
                lines += ["    " + ln for ln in snip.render().splitlines()]
                answer = snip.none_label if pick is None else snip.options[pick][0]
                lines.append(f"  -> ({answer})")
        lines.append(f"winner: {self.winner if self.winner is not None else 'None'}")
        return "\n".join(lines)


def elect_element(
    candidates: Sequence[tuple[str, str]],
    chooser: ElementChooser,
    group_size: int = 5,
    max_rounds: int = 10,
    instruction: str = "",
    history_text: str = "",
) -> ElectionResult:
    """Iterated multiple-choice election over ranked (element id, text) candidates."""
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    result = ElectionResult(None)
    survivors = list(candidates)
    if len(survivors) <= 1:
        result.winner = survivors[0][0] if survivors else None
        return result
    for r in range(max_rounds):
        picks = []
        record = []
        for snip in partition_groups(survivors, group_size):
            choice = chooser.choose(instruction, history_text, snip)
            if choice is not None and not 0 <= choice <= len(snip):
                raise ElectionError(f"chooser returned option {choice} for a group of {len(snip)}")
            if choice == len(snip):
                choice = None
            record.append((snip, choice))
            if choice is not None:
                label, eid, text = snip.options[choice]
                picks.append((eid, text))
        result.rounds.append(record)
        if not picks:
            # abstaining after an earlier round would discard surviving picks
            result.winner = None if r == 0 else survivors[0][0]
            return result
        survivors = picks
        if len(survivors) == 1:
            break
    # survivors keep their original rank order
    result.winner = survivors[0][0]
    return result


# ---------------------------------------------------------------------------
# Choosers


class LexicalChooser:
    """Picks the option sharing the most distinct words with the instruction."""

    def choose(self, instruction: str, history_text: str, snippet: Snippet) -> int | None:
        words = set(split_words(instruction))
        best, best_n = None, 0
        for i, (_, _, text) in enumerate(snippet.options):
            n = len(words & set(split_words(text)))
            if n > best_n:
                best, best_n = i, n
        return best


class ScriptedChooser:
    """Test double: picks a fixed element when offered, otherwise None.

    ``targets`` maps ``"task_id/step_id"`` to an element id (or None); use
    :meth:`for_step` to bind it to one step, or pass ``target`` directly.
    """

    def __init__(self, target: str | None = None, targets: Mapping[str, str | None] | None = None):
        self.target = target
        self.targets = dict(targets or {})

    def for_step(self, task: Task | None, step: Step) -> "ScriptedChooser":
        key = f"{task.task_id}/{step.step_id}" if task is not None else None
        return ScriptedChooser(self.targets.get(key) if key is not None else None)

    def choose(self, instruction: str, history_text: str, snippet: Snippet) -> int | None:
        for i, (_, eid, _) in enumerate(snippet.options):
            if eid == self.target:
                return i
        return None

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedChooser":
        import json

        return cls(targets=json.loads(Path(path).read_text()))


class GroundTruthChooser:
    """Oracle chooser: bound per step to that step's ground-truth element."""

    def for_step(self, task: Task | None, step: Step) -> ScriptedChooser:
        return ScriptedChooser(step.gt_action.element_id)

    def choose(self, instruction: str, history_text: str, snippet: Snippet) -> int | None:
        raise ElectionError("GroundTruthChooser must be bound with for_step() first")


def bind(component, task: Task | None, step: Step):
    hook = getattr(component, "for_step", None)
    return hook(task, step) if hook is not None else component


# ---------------------------------------------------------------------------
# Text encoder inputs shared by the learned chooser and op head


def text_seq(
    instruction: str,
    history_text: str,
    block: str,
    vocab: Vocab,
    n_ranks: int,
    max_seq: int,
) -> tuple[TokenSeq, list[str], int]:
    """[CLS] query [SEP] history [SEP] block segments, segments split on ``<NBR>``.

    Returns the sequence, the query words kept, and the query start position.
    """
    none_rank = n_ranks - 1
    query = split_words(instruction)
    history = split_words(history_text)
    segments = [split_words(s) for s in block.split(NBR_SEP)]
    total = lambda: 3 + len(query) + len(history) + sum(map(len, segments)) + len(segments) - 1
    excess = total() - max_seq
    if excess > 0:
        cut = min(excess, len(history))
        history = history[: len(history) - cut]
        excess -= cut
    while excess > 0 and len(segments) > 1:
        if len(segments[-1]) <= excess:
            excess -= len(segments.pop()) + 1
        else:
            segments[-1] = segments[-1][: len(segments[-1]) - excess]
            excess = 0
    if excess > 0:
        query = query[: max(len(query) - excess, 0)]
        if total() > max_seq:
            raise AssertionError("candidate text alone exceeds max_seq")
    ids = [CLS] + vocab.encode(query) + [SEP] + vocab.encode(history) + [SEP]
    ranks = [none_rank] * len(ids)
    for i, seg in enumerate(segments):
        if i:
            ids.append(SEP)
            ranks.append(none_rank)
        ids += vocab.encode(seg)
        ranks += [min(i, none_rank - 1)] * len(seg)
    return TokenSeq(np.array(ids, dtype=np.int64), np.array(ranks, dtype=np.int64)), query, 1


def _encoder_config(vocab: Vocab, cfg: TrainConfig) -> EncoderConfig:
    return EncoderConfig(
        vocab_size=len(vocab),
        d_model=cfg.d_model,
        layers=cfg.layers,
        heads=cfg.heads,
        ffn=cfg.ffn,
        max_seq=cfg.max_seq,
        n_ranks=cfg.M + 2,
        d_v=0,
        dropout=cfg.dropout,
    )


@dataclass
class ChooserWeights:
    net: ChooserNet
    vocab: Vocab

    @classmethod
    def create(cls, vocab: Vocab, cfg: TrainConfig, zero: bool = False) -> "ChooserWeights":
        net = ChooserNet(_encoder_config(vocab, cfg))
        zero_weights(net) if zero else init_weights(net, cfg.seed)
        return cls(net, vocab)

    def seqs(self, instruction: str, history_text: str, texts: Sequence[str]) -> list[TokenSeq]:
        c = self.net.backbone.cfg
        return [text_seq(instruction, history_text, t, self.vocab, c.n_ranks, c.max_seq)[0] for t in texts]

    def save(self, path: str | Path) -> None:
        cfg = {"kind": "chooser", "encoder": self.net.backbone.cfg.to_dict(), "vocab": list(self.vocab.tokens)}
        save_weights(path, cfg, {k: v.detach().numpy() for k, v in self.net.state_dict().items()})

    @classmethod
    def load(cls, path: str | Path) -> "ChooserWeights":
        config, tensors = load_weights(path)
        if config.get("kind") != "chooser":
            raise WeightsFormatError(f"{path}: not a chooser weights file")
        net = ChooserNet(EncoderConfig(**config["encoder"]))
        load_state(net, tensors)
        return cls(net, Vocab(tuple(config["vocab"])))


def group_logits(net: ChooserNet, batch_seqs: Sequence[TokenSeq], sizes: Sequence[int]) -> list[torch.Tensor]:
    """Per group: option logits followed by the shared None logit."""
    logits = net(Batch.collate(batch_seqs))
    out, start = [], 0
    for n in sizes:
        out.append(torch.cat([logits[start : start + n], net.none_logit.reshape(1)]))
        start += n
    return out


class TrainedChooser:
    def __init__(self, weights: ChooserWeights):
        self.w = weights

    def option_probs(self, instruction: str, history_text: str, snippet: Snippet) -> np.ndarray:
        """Softmax over the element options and None (last)."""
        seqs = self.w.seqs(instruction, history_text, [t for _, _, t in snippet.options])
        with torch.no_grad():
            (logits,) = group_logits(self.w.net, seqs, [len(seqs)])
            return torch.softmax(logits, dim=0).numpy()

    def choose(self, instruction: str, history_text: str, snippet: Snippet) -> int | None:
        if not snippet.options:
            return None
        probs = self.option_probs(instruction, history_text, snippet)
        best = int(np.argmax(probs))
        return None if best == len(snippet) else best


def chooser_loss(net: ChooserNet, groups: Sequence[tuple[list[TokenSeq], int]]) -> torch.Tensor:
    """Mean cross-entropy; a target equal to the option count means None."""
    seqs = [s for g, _ in groups for s in g]
    per_group = group_logits(net, seqs, [len(g) for g, _ in groups])
    losses = [F.cross_entropy(lg[None], torch.tensor([t])) for lg, (_, t) in zip(per_group, groups)]
    return torch.stack(losses).mean()


def step_blocks(
    step: Step,
    elements: Sequence[Element],
    M: int,
    mode: str,
    neighbor_source: NeighborSource | str = NeighborSource.VISUAL,
    seed: int = 0,
) -> list[str]:
    if mode not in MODES:
        raise ValueError(f"predictor mode must be one of {MODES}")
    doc = step.document
    if mode == "bare" or M == 0:
        return [candidate_block(e, None) for e in elements]
    return [candidate_block(e, neighbors(doc, e.id, M, neighbor_source, seed), doc) for e in elements]


@dataclass
class ChooserTrainResult:
    weights: ChooserWeights
    losses: list[float]
    skipped: int = 0


def train_chooser(
    corpus: Sequence[Task],
    cfg: TrainConfig,
    mode: str = "dualvcr",
    neighbor_source: NeighborSource | str = NeighborSource.VISUAL,
    vocab: Vocab | None = None,
    group_size: int = 5,
    none_rate: float = 0.2,
) -> ChooserTrainResult:
    """Softmax cross-entropy over option groups.

    Per step and epoch: one group holding the ground truth among sampled
    negatives (target = its position) and, with probability ``none_rate``,
    one group of negatives only (target = None).
    """
    if not 0.0 <= none_rate <= 1.0:
        raise ValueError("none_rate must be in [0, 1]")
    vocab = vocab or build_vocab(corpus)
    w = ChooserWeights.create(vocab, cfg)
    pool = []
    skipped = 0
    for task in corpus:
        for step in task.steps:
            cands = step.document.candidates()
            gt = step.gt_action.element_id
            if gt not in {e.id for e in cands} or len(cands) < 2:
                skipped += 1
                continue
            ordered = [step.document.get(gt)] + [e for e in cands if e.id != gt]
            blocks = step_blocks(step, ordered, cfg.M, mode, neighbor_source, cfg.seed)
            history = "\n".join(step.history_text)
            seqs = w.seqs(task.instruction, history, blocks)
            pool.append((seqs[0], seqs[1:]))
    rng = np.random.default_rng(cfg.seed)
    opt = adam(w.net, cfg.lr)
    losses = []
    with training(w.net, cfg.seed):
        for _ in range(cfg.epochs):
            groups: list[tuple[list[TokenSeq], int]] = []
            for pos, negs in pool:
                k = min(group_size - 1, len(negs))
                pick = [negs[j] for j in rng.choice(len(negs), size=k, replace=False)]
                slot = int(rng.integers(k + 1))
                groups.append((pick[:slot] + [pos] + pick[slot:], slot))
                if rng.random() >= none_rate:
                    continue
                k = min(group_size, len(negs))
                groups.append(([negs[j] for j in rng.choice(len(negs), size=k, replace=False)], k))
            order = rng.permutation(len(groups))
            total = 0.0
            for b in range(0, len(order), cfg.batch_size):
                chunk = [groups[j] for j in order[b : b + cfg.batch_size]]
                opt.zero_grad()
                loss = chooser_loss(w.net, chunk)
                loss.backward()
                opt.step()
                total += loss.item() * len(chunk)
            losses.append(total / len(groups) if groups else 0.0)
            log.info("chooser epoch %d loss %.6f", len(losses), losses[-1])
    return ChooserTrainResult(w, losses, skipped)


# ---------------------------------------------------------------------------
# Operation head


def decode_operation(
    op_logits: Sequence[float],
    start_scores: Sequence[float],
    end_scores: Sequence[float],
    words: Sequence[str],
) -> Operation:
    """Argmax op type (ties go to the earlier class); for TYPE/SELECT the
    instruction span maximizing start + end score, ties to the earliest span.
    """
    op = OP_TYPES[int(np.argmax(np.asarray(op_logits)))]
    if op is OpType.CLICK:
        return Operation(op)
    if not words:
        log.warning("%s predicted for an empty instruction; falling back to CLICK", op.value)
        return Operation(OpType.CLICK)
    s = np.asarray(start_scores, dtype=np.float64)[: len(words)]
    e = np.asarray(end_scores, dtype=np.float64)[: len(words)]
    # best end at or after each start, earliest on ties
    best_end = np.empty(len(words), dtype=np.intp)
    j = len(words) - 1
    for i in range(len(words) - 1, -1, -1):
        if e[i] >= e[j]:
            j = i
        best_end[i] = j
    totals = s + e[best_end]
    start = int(np.argmax(totals))
    return Operation(op, " ".join(words[start : best_end[start] + 1]))


@dataclass
class OpHeadWeights:
    net: OpNet
    vocab: Vocab

    @classmethod
    def create(cls, vocab: Vocab, cfg: TrainConfig, zero: bool = False) -> "OpHeadWeights":
        net = OpNet(_encoder_config(vocab, cfg))
        zero_weights(net) if zero else init_weights(net, cfg.seed)
        return cls(net, vocab)

    def encode(self, instruction: str, history_text: str, block: str) -> tuple[TokenSeq, list[str], int]:
        c = self.net.backbone.cfg
        return text_seq(instruction, history_text, block, self.vocab, c.n_ranks, c.max_seq)

    def predict(self, instruction: str, history_text: str, block: str) -> Operation:
        seq, words, q0 = self.encode(instruction, history_text, block)
        with torch.no_grad():
            op, start, end = self.net(Batch.collate([seq]))
        span = slice(q0, q0 + len(words))
        return decode_operation(op[0].numpy(), start[0, span].numpy(), end[0, span].numpy(), words)

    def save(self, path: str | Path) -> None:
        cfg = {"kind": "ophead", "encoder": self.net.backbone.cfg.to_dict(), "vocab": list(self.vocab.tokens)}
        save_weights(path, cfg, {k: v.detach().numpy() for k, v in self.net.state_dict().items()})

    @classmethod
    def load(cls, path: str | Path) -> "OpHeadWeights":
        config, tensors = load_weights(path)
        if config.get("kind") != "ophead":
            raise WeightsFormatError(f"{path}: not an op-head weights file")
        net = OpNet(EncoderConfig(**config["encoder"]))
        load_state(net, tensors)
        return cls(net, Vocab(tuple(config["vocab"])))


class OracleOpHead:
    """Test double returning the bound step's ground-truth operation."""

    def __init__(self, operation: Operation | None = None):
        self.operation = operation

    def for_step(self, task: Task | None, step: Step) -> "OracleOpHead":
        return OracleOpHead(step.gt_action.operation)

    def predict(self, instruction: str, history_text: str, block: str) -> Operation:
        if self.operation is None:
            raise RuntimeError("OracleOpHead must be bound with for_step() first")
        return self.operation


def find_span(words: Sequence[str], arg_words: Sequence[str]) -> tuple[int, int] | None:
    n = len(arg_words)
    if n == 0:
        return None
    for i in range(len(words) - n + 1):
        if list(words[i : i + n]) == list(arg_words):
            return i, i + n - 1
    return None


def op_loss(net: OpNet, examples: Sequence[tuple[TokenSeq, int, tuple[int, int] | None, int, int]]) -> torch.Tensor:
    """Op-type cross-entropy plus start/end pointer cross-entropy over query positions.

    Each example is (seq, op index, span or None, query start, query length).
    """
    op_logits, start, end = net(Batch.collate([e[0] for e in examples]))
    loss = F.cross_entropy(op_logits, torch.tensor([e[1] for e in examples]))
    span_terms = []
    for b, (_, _, span, q0, qn) in enumerate(examples):
        if span is None:
            continue
        s, t = span
        span_terms.append(F.cross_entropy(start[b, q0 : q0 + qn][None], torch.tensor([s])))
        span_terms.append(F.cross_entropy(end[b, q0 : q0 + qn][None], torch.tensor([t])))
    if span_terms:
        loss = loss + torch.stack(span_terms).sum() / len(examples)
    return loss


@dataclass
class OpTrainResult:
    weights: OpHeadWeights
    losses: list[float]


def train_op_head(
    corpus: Sequence[Task],
    cfg: TrainConfig,
    mode: str = "dualvcr",
    neighbor_source: NeighborSource | str = NeighborSource.VISUAL,
    vocab: Vocab | None = None,
) -> OpTrainResult:
    vocab = vocab or build_vocab(corpus)
    w = OpHeadWeights.create(vocab, cfg)
    examples = []
    for task in corpus:
        for step in task.steps:
            gt = step.document.get(step.gt_action.element_id)
            (block,) = step_blocks(step, [gt], cfg.M, mode, neighbor_source, cfg.seed)
            seq, words, q0 = w.encode(task.instruction, "\n".join(step.history_text), block)
            op = step.gt_action.operation
            span = find_span(words, split_words(op.arg)) if op.arg else None
            examples.append((seq, OP_TYPES.index(op.op), span, q0, len(words)))
    rng = np.random.default_rng(cfg.seed)
    opt = adam(w.net, cfg.lr)
    losses = []
    with training(w.net, cfg.seed):
        for _ in range(cfg.epochs):
            order = rng.permutation(len(examples))
            total = 0.0
            for b in range(0, len(order), cfg.batch_size):
                chunk = [examples[j] for j in order[b : b + cfg.batch_size]]
                opt.zero_grad()
                loss = op_loss(w.net, chunk)
                loss.backward()
                opt.step()
                total += loss.item() * len(chunk)
            losses.append(total / len(examples) if examples else 0.0)
            log.info("op head epoch %d loss %.6f", len(losses), losses[-1])
    return OpTrainResult(w, losses)


def predict_operation(
    instruction: str,
    chosen: Element,
    history_text: str,
    head,
    block: str | None = None,
) -> Operation:
    return head.predict(instruction, history_text, block if block is not None else element_html_text(chosen))


# ---------------------------------------------------------------------------
# Full step


@dataclass
class Prediction:
    action: Action | None
    ranked: list[tuple[str, float]]
    election: ElectionResult


def run_step(
    step: Step,
    instruction: str,
    ranker,
    chooser: ElementChooser,
    op_head,
    M: int = 5,
    K: int = 50,
    neighbor_source: NeighborSource | str = NeighborSource.VISUAL,
    mode: str = "dualvcr",
    task: Task | None = None,
    seed: int = 0,
    ranked: list[tuple[str, float]] | None = None,
) -> Prediction:
    """Rank, build candidate blocks, elect, then predict the operation."""
    ranked = ranker.rank(step, instruction) if ranked is None else ranked
    top = ranked[:K]
    doc = step.document
    elements = [doc.get(eid) for eid, _ in top]
    blocks = step_blocks(step, elements, M, mode, neighbor_source, seed)
    history = "\n".join(step.history_text)
    election = elect_element(
        [(e.id, b) for e, b in zip(elements, blocks)],
        bind(chooser, task, step),
        instruction=instruction,
        history_text=history,
    )
    if election.winner is None:
        return Prediction(None, ranked, election)
    chosen = doc.get(election.winner)
    block = blocks[[e.id for e in elements].index(chosen.id)]
    op = predict_operation(instruction, chosen, history, bind(op_head, task, step), block)
    return Prediction(Action(chosen.id, op), ranked, election)


def predict_action(
    step: Step,
    instruction: str,
    ranker,
    chooser: ElementChooser,
    op_head,
    M: int = 5,
    K: int = 50,
    neighbor_source: NeighborSource | str = NeighborSource.VISUAL,
    mode: str = "dualvcr",
    task: Task | None = None,
) -> Action | None:
    return run_step(step, instruction, ranker, chooser, op_head, M, K, neighbor_source, mode, task).action
