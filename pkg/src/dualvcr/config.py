"""Run configuration: defaults, overridden by an INI file, overridden by flags.

File format::

    [run]
    version = 1

    [ranker]
    M = 5
    neighbor_source = visual

Every key must belong to its section; unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .predictor import MODES
from .ranker import VISUAL_MODES, TrainConfig
from .spatial import NeighborSource
from .synth import SPLIT_MODES, SynthConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # paths
    train: str | None = None
    test: str | None = None
    corpus: str | None = None
    weights: str = "runs/default"
    report: str | None = None
    out: str = "data"
    # ranker; M and neighbor_source unset = the training defaults, or the weights' own at eval
    M: int | None = None
    K: int = 50
    neighbor_source: str | None = None
    visual_mode: str = "element"
    patch: int = 8
    d_v: int = 8
    sampling: int = 2
    # predictor
    chooser: str = "trained"
    predictor_mode: str = "dualvcr"
    op_oracle: bool = False
    none_rate: float = 0.2
    # train
    preset: str = "synth"
    lr: float | None = None
    batch_size: int = 32
    epochs: int | None = None
    negatives_per_positive: int = 5
    seed: int = 0
    dropout: float = 0.0
    d_model: int = 64
    layers: int = 2
    heads: int = 2
    ffn: int = 128
    max_seq: int = 256
    d_h: int = 32
    # synth
    pages: int = 200
    synth_seed: int = 1
    page_width: int = 336
    page_height: int = 192
    widgets_per_page: int = 12
    distractor_groups: int = 4
    M_planted: int = 3
    cluster_size: int = 6
    split_mode: str = "cross-task"
    test_fraction: float = 0.2

    def train_config(self) -> TrainConfig:
        kw = dict(
            batch_size=self.batch_size,
            negatives_per_positive=self.negatives_per_positive,
            seed=self.seed,
            M=5 if self.M is None else self.M,
            d_model=self.d_model,
            layers=self.layers,
            heads=self.heads,
            ffn=self.ffn,
            max_seq=self.max_seq,
            d_h=self.d_h,
            dropout=self.dropout,
        )
        if self.lr is not None:
            kw["lr"] = self.lr
        if self.epochs is not None:
            kw["epochs"] = self.epochs
        return TrainConfig.synth(**kw) if self.preset == "synth" else TrainConfig.reference(**kw)

    def predictor_train_config(self) -> TrainConfig:
        """Chooser and op head settings; the reference preset trains them at 5e-5."""
        tc = self.train_config()
        if self.preset == "reference" and self.lr is None:
            tc = replace(tc, lr=5e-5)
        return tc

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            pages=self.pages,
            page_width=self.page_width,
            page_height=self.page_height,
            widgets_per_page=self.widgets_per_page,
            distractor_groups=self.distractor_groups,
            M_planted=self.M_planted,
            cluster_size=self.cluster_size,
            split_mode=self.split_mode,
            test_fraction=self.test_fraction,
            seed=self.synth_seed,
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


SECTIONS: dict[str, tuple[str, ...]] = {
    "paths": ("train", "test", "corpus", "weights", "report", "out"),
    "ranker": ("M", "K", "neighbor_source", "visual_mode", "patch", "d_v", "sampling"),
    "predictor": ("chooser", "predictor_mode", "op_oracle", "none_rate"),
    "train": (
        "preset", "lr", "batch_size", "epochs", "negatives_per_positive", "seed", "dropout",
        "d_model", "layers", "heads", "ffn", "max_seq", "d_h",
    ),
    "synth": (
        "pages", "synth_seed", "page_width", "page_height", "widgets_per_page", "distractor_groups",
        "M_planted", "cluster_size", "split_mode", "test_fraction",
    ),
}

_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: str) -> Any:
    kind = _TYPES[name]
    try:
        if "bool" in kind:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw


def read_config_file(path: str | Path) -> dict[str, Any]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (M vs m)
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out: dict[str, Any] = {}
    for section in parser.sections():
        if section == "run":
            for key, raw in parser.items(section):
                if key != "version":
                    raise ConfigError(f"unknown key [run] {key}")
                if raw.strip() != str(CONFIG_VERSION):
                    raise ConfigError(f"unsupported config version {raw.strip()}")
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key [{section}] {key}")
            out[key] = _coerce(key, raw)
    return out


def validate(cfg: RunConfig) -> RunConfig:
    def need(ok: bool, field: str, msg: str) -> None:
        if not ok:
            raise ConfigError(f"{field}: {msg}")

    need(cfg.M is None or cfg.M >= 0, "M", "must be >= 0")
    need(cfg.K >= 1, "K", "must be >= 1")
    need(
        cfg.neighbor_source is None or cfg.neighbor_source in {s.value for s in NeighborSource},
        "neighbor_source",
        "must be visual, tree, or random",
    )
    need(cfg.visual_mode in VISUAL_MODES, "visual_mode", f"must be one of {', '.join(VISUAL_MODES)}")
    need(cfg.predictor_mode in MODES, "predictor_mode", f"must be one of {', '.join(MODES)}")
    need(
        cfg.chooser in ("trained", "lexical") or (cfg.chooser.startswith("scripted:") and len(cfg.chooser) > 9),
        "chooser",
        "must be trained, lexical, or scripted:<path|gt>",
    )
    need(cfg.preset in ("synth", "reference"), "preset", "must be synth or reference")
    need(cfg.patch >= 1, "patch", "must be >= 1")
    need(cfg.d_v >= 7, "d_v", "must be >= 7")
    need(cfg.sampling >= 1, "sampling", "must be >= 1")
    need(cfg.split_mode in SPLIT_MODES, "split_mode", f"must be one of {', '.join(SPLIT_MODES)}")
    need(cfg.pages >= 1, "pages", "must be >= 1")
    need(0.0 <= cfg.none_rate <= 1.0, "none_rate", "must be in [0, 1]")
    try:
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        cfg.synth_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def resolve(file: str | Path | None = None, flags: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults < config file < flags (flags set to None are ignored)."""
    merged: dict[str, Any] = {}
    if file is not None:
        merged.update(read_config_file(file))
    for key, value in (flags or {}).items():
        if value is None:
            continue
        if key not in _TYPES:
            raise ConfigError(f"unknown setting {key}")
        merged[key] = value
    return validate(replace(RunConfig(), **merged))


def dump_config(cfg: RunConfig) -> str:
    lines = ["[run]", f"version = {CONFIG_VERSION}"]
    values = cfg.to_dict()
    for section, keys in SECTIONS.items():
        lines += ["", f"[{section}]"]
        lines += [f"{k} = {values[k]}" for k in keys if values[k] is not None]
    return "\n".join(lines) + "\n"
