"""Dual-view contextualized element ranking and action prediction for web agents."""

from .document import Action, BBox, Element, HtmlDocument, Operation, OpType, Step, Task, parse_corpus
from .evaluation import EvalReport, Pipeline, evaluate
from .predictor import elect_element
from .ranker import ElementRanker, RankerWeights, TrainConfig, train_ranker
from .spatial import NeighborSource, neighbors, visual_neighbors
from .synth import SynthConfig, generate_corpus
from .visual import roi_align

__version__ = "0.1.0"

__all__ = [
    "Action", "BBox", "Element", "ElementRanker", "EvalReport", "HtmlDocument", "NeighborSource",
    "Operation", "OpType", "Pipeline", "RankerWeights", "Step", "SynthConfig", "Task", "TrainConfig",
    "elect_element", "evaluate", "generate_corpus", "neighbors", "parse_corpus", "roi_align",
    "train_ranker", "visual_neighbors",
]
