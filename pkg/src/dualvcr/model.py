"""Small pre-layer-norm transformer encoder shared by the ranker, chooser, and op head.

Everything runs in float64 on CPU so that finite-difference gradient checks
are meaningful and training is bit-reproducible.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .tokens import PAD

DTYPE = torch.float64


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    layers: int = 2
    heads: int = 2
    ffn: int = 128
    max_seq: int = 256
    n_ranks: int = 7
    d_v: int = 0  # 0 disables the visual projection
    d_h: int = 32
    dropout: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        for name in ("vocab_size", "d_model", "layers", "heads", "ffn", "max_seq", "n_ranks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.heads:
            raise ValueError("heads must divide d_model")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenSeq:
    """One flattened encoder input.

    ``visual`` holds raw (pre-projection) features at positions where
    ``is_visual`` is set; token ids there are ignored.
    """

    token_ids: np.ndarray
    ranks: np.ndarray
    is_visual: np.ndarray | None = None
    visual: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass
class Batch:
    tokens: torch.Tensor  # (B, L) long
    ranks: torch.Tensor  # (B, L) long
    mask: torch.Tensor  # (B, L) bool, True = real position
    is_visual: torch.Tensor | None = None
    visual: torch.Tensor | None = None

    @classmethod
    def collate(cls, seqs: Sequence[TokenSeq], d_v: int = 0) -> "Batch":
        B, L = len(seqs), max(len(s) for s in seqs)
        tokens = np.full((B, L), PAD, dtype=np.int64)
        ranks = np.zeros((B, L), dtype=np.int64)
        mask = np.zeros((B, L), dtype=bool)
        is_vis = np.zeros((B, L), dtype=bool) if d_v else None
        vis = np.zeros((B, L, d_v)) if d_v else None
        for b, s in enumerate(seqs):
            n = len(s)
            tokens[b, :n] = s.token_ids
            ranks[b, :n] = s.ranks
            mask[b, :n] = True
            if d_v and s.is_visual is not None:
                is_vis[b, :n] = s.is_visual
                vis[b, :n] = s.visual
        return cls(
            torch.from_numpy(tokens),
            torch.from_numpy(ranks),
            torch.from_numpy(mask),
            torch.from_numpy(is_vis) if d_v else None,
            torch.from_numpy(vis) if d_v else None,
        )


class EncoderLayer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.d_model
        self.heads = cfg.heads
        self.ln1 = nn.LayerNorm(d, dtype=DTYPE)
        self.qkv = nn.Linear(d, 3 * d, dtype=DTYPE)
        self.out = nn.Linear(d, d, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(d, dtype=DTYPE)
        self.ff1 = nn.Linear(d, cfg.ffn, dtype=DTYPE)
        self.ff2 = nn.Linear(cfg.ffn, d, dtype=DTYPE)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B, L, d = x.shape
        dh = d // self.heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q = q.view(B, L, self.heads, dh).transpose(1, 2)
        k = k.view(B, L, self.heads, dh).transpose(1, 2)
        v = v.view(B, L, self.heads, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1) @ v
        x = x + self.drop(self.out(attn.transpose(1, 2).reshape(B, L, d)))
        return x + self.drop(self.ff2(torch.relu(self.ff1(self.ln2(x)))))


class Backbone(nn.Module):
    """Embeddings (token or projected visual, plus rank and position) and encoder layers."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.tok_emb = nn.Embedding(cfg.vocab_size, d, dtype=DTYPE)
        self.pos_emb = nn.Embedding(cfg.max_seq, d, dtype=DTYPE)
        self.rank_emb = nn.Embedding(cfg.n_ranks, d, dtype=DTYPE)
        if cfg.d_v:
            self.proj1 = nn.Linear(cfg.d_v, cfg.d_h, dtype=DTYPE)
            self.proj2 = nn.Linear(cfg.d_h, d, dtype=DTYPE)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers))
        self.drop = nn.Dropout(cfg.dropout)

    def project(self, feats: torch.Tensor) -> torch.Tensor:
        return self.proj2(torch.relu(self.proj1(feats)))

    def embed(self, batch: Batch) -> torch.Tensor:
        L = batch.tokens.shape[1]
        if L > self.cfg.max_seq:
            raise ValueError(f"sequence length {L} exceeds max_seq {self.cfg.max_seq}")
        x = self.tok_emb(batch.tokens)
        if self.cfg.d_v and batch.visual is not None:
            x = torch.where(batch.is_visual[..., None], self.project(batch.visual), x)
        return x + self.rank_emb(batch.ranks) + self.pos_emb.weight[:L]

    def forward(self, batch: Batch) -> torch.Tensor:
        x = self.drop(self.embed(batch))
        for layer in self.layers:
            x = layer(x, batch.mask)
        return x


def init_weights(module: nn.Module, seed: int) -> None:
    """Seeded initialization, independent of module construction order."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(module.named_parameters()):
            if name.endswith("_emb.weight"):
                p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * 0.1)
            elif ".ln1." in name or ".ln2." in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif p.dim() == 2:
                bound = math.sqrt(6.0 / (p.shape[0] + p.shape[1]))
                p.copy_((torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
            else:
                p.zero_()


def zero_weights(module: nn.Module) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


class RankerNet(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.backbone = Backbone(cfg)
        self.head = nn.Linear(cfg.d_model, 1, dtype=DTYPE)
        self.eval()

    def forward(self, batch: Batch) -> torch.Tensor:
        """Logits of element relevance, shape (B,); CLS sits at position 0."""
        return self.head(self.backbone(batch)[:, 0]).squeeze(-1)


class ChooserNet(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.backbone = Backbone(cfg)
        self.head = nn.Linear(cfg.d_model, 1, dtype=DTYPE)
        self.none_logit = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.eval()

    def forward(self, batch: Batch) -> torch.Tensor:
        return self.head(self.backbone(batch)[:, 0]).squeeze(-1)


class OpNet(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.backbone = Backbone(cfg)
        self.op_head = nn.Linear(cfg.d_model, 3, dtype=DTYPE)
        self.start = nn.Linear(cfg.d_model, 1, dtype=DTYPE)
        self.end = nn.Linear(cfg.d_model, 1, dtype=DTYPE)
        self.eval()

    def forward(self, batch: Batch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h = self.backbone(batch)
        return self.op_head(h[:, 0]), self.start(h).squeeze(-1), self.end(h).squeeze(-1)


@contextmanager
def training(module: nn.Module, seed: int):
    """Train mode with dropout drawn from a private, seeded RNG; eval mode afterwards."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module.train()
        try:
            yield
        finally:
            module.eval()


def adam(module: nn.Module, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(module.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)
