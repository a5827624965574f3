"""Toy multimodal backbone that turns (reference, captions, context frames) into
per-shot condition signals.

Sequence layout for n shots::

    <Reference><Caption_1><Query><Frame_1><Caption_2><Query> ... <Frame_n-1><Caption_n><Query>

Shot indices are 0-based throughout: block ``i`` is the query block that follows
caption ``i``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .errors import ContextOverflow, LengthMismatch, QueryBlockMissing, ResolutionMismatch
from .layers import TransformerBlock
from .schema import template_lexicon

ROLES = ("reference", "caption", "query", "frame")
UNK = "<unk>"

_WORD = re.compile(r"[a-z0-9']+")


class Vocabulary:
    """Whitespace word-level vocabulary; id 0 is ``<unk>``."""

    def __init__(self, words: Sequence[str]):
        self.tokens = [UNK] + sorted(set(words) - {UNK})
        self.index = {w: i for i, w in enumerate(self.tokens)}

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(template_lexicon())

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, 0) for w in _WORD.findall(text.lower())]


def image_to_tensor(img, dtype=torch.float32) -> torch.Tensor:
    """uint8 HxWx3 array -> float tensor in [-1, 1]; float tensors pass through."""
    if isinstance(img, torch.Tensor):
        return img.to(dtype)
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return torch.from_numpy(arr.astype(np.float64) / 127.5 - 1.0).to(dtype)
    return torch.as_tensor(arr, dtype=dtype)


@dataclass
class TokenSequence:
    embeddings: torch.Tensor  # (L, D)
    roles: list[str]  # one tag per position
    spans: list[tuple[str, int, int]] = field(default_factory=list)  # (role, start, end) per block
    query_len: int = 0

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def query_starts(self) -> list[int]:
        return [start for role, start, _ in self.spans if role == "query"]

    @property
    def num_query_blocks(self) -> int:
        return len(self.query_starts)

    def layout(self) -> list[str]:
        """Block-level role list, e.g. ['reference', 'caption', 'query']."""
        return [role for role, _, _ in self.spans]


@dataclass
class ConditionSignal:
    values: torch.Tensor  # (Q, D_cond)
    shot_index: int

    @property
    def shape(self):
        return tuple(self.values.shape)


class QueryAdapter(nn.Module):
    """Stack of self-attention blocks over the query states, then a projection to D_cond."""

    def __init__(self, d_in: int, d_out: int, layers: int, heads: int):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(d_in, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(d_in)
        self.proj = nn.Linear(d_in, d_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return self.proj(self.norm(x))


class ConditionBackbone(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary | None = None):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab or Vocabulary.default()
        d, p = cfg.d_mllm, cfg.mllm_patch
        self.patch_embed = nn.Linear(3 * p * p, d)
        self.token_embed = nn.Embedding(len(self.vocab), d)
        self.role_embed = nn.Embedding(len(ROLES), d)
        self.pos_embed = nn.Parameter(torch.randn(cfg.max_positions, d) * 0.02)
        self.queries = nn.Parameter(torch.randn(cfg.query_len, d) * 0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(d, cfg.heads, lora_rank=cfg.lora_rank, lora_alpha=cfg.lora_alpha)
            for _ in range(cfg.layers)
        )
        self.norm = nn.LayerNorm(d)
        self.adapter = QueryAdapter(d, cfg.d_cond, cfg.adapter_layers, cfg.heads)

    @property
    def dtype(self) -> torch.dtype:
        return self.queries.dtype

    def _role(self, name: str) -> torch.Tensor:
        return self.role_embed.weight[ROLES.index(name)]

    def embed_image(self, img) -> torch.Tensor:
        """Non-overlapping patches -> linear projection; returns ((H/P)*(W/P), D)."""
        x = image_to_tensor(img, self.dtype)
        p, s = self.cfg.mllm_patch, self.cfg.image_size
        if x.ndim != 3 or x.shape[-1] != 3:
            raise ResolutionMismatch(f"expected HxWx3 image, got shape {tuple(x.shape)}")
        h, w = x.shape[0], x.shape[1]
        if h % p or w % p:
            raise ResolutionMismatch(f"image {h}x{w} is not divisible by patch size {p}")
        if (h, w) != (s, s):
            raise ResolutionMismatch(f"image {h}x{w} does not match configured {s}x{s}")
        patches = x.reshape(h // p, p, w // p, p, 3).permute(0, 2, 1, 3, 4).reshape(-1, p * p * 3)
        return self.patch_embed(patches)

    def embed_caption(self, caption: str) -> torch.Tensor:
        ids = self.vocab.encode(caption)
        if not ids:
            return self.queries.new_zeros((0, self.cfg.d_mllm))
        return self.token_embed(torch.tensor(ids, dtype=torch.long))

    def build_sequence(self, reference, captions: Sequence[str], prev_last_frames: Sequence) -> TokenSequence:
        if len(captions) < 1:
            raise LengthMismatch("at least one caption is required")
        if len(prev_last_frames) != len(captions) - 1:
            raise LengthMismatch(
                f"{len(captions)} captions need {len(captions) - 1} previous frames, got {len(prev_last_frames)}"
            )
        parts: list[torch.Tensor] = []
        roles: list[str] = []
        spans: list[tuple[str, int, int]] = []
        pos = 0

        def push(block: torch.Tensor, role: str):
            nonlocal pos
            parts.append(block + self._role(role))
            roles.extend([role] * block.shape[0])
            spans.append((role, pos, pos + block.shape[0]))
            pos += block.shape[0]

        push(self.embed_image(reference), "reference")
        for i, caption in enumerate(captions):
            push(self.embed_caption(caption), "caption")
            push(self.queries, "query")
            if i < len(captions) - 1:
                push(self.embed_image(prev_last_frames[i]), "frame")
        if pos > self.cfg.max_positions:
            raise ContextOverflow(f"sequence length {pos} exceeds max_positions {self.cfg.max_positions}")
        return TokenSequence(torch.cat(parts, dim=0), roles, spans, self.cfg.query_len)

    def hidden_states(self, seq: TokenSequence) -> torch.Tensor:
        n = len(seq)
        if n > self.cfg.max_positions:
            raise ContextOverflow(f"sequence length {n} exceeds max_positions {self.cfg.max_positions}")
        x = (seq.embeddings + self.pos_embed[:n])[None]
        for block in self.blocks:
            x = block(x, causal=True)
        return self.norm(x)[0]

    def compute_conditions(self, seq: TokenSequence) -> list[ConditionSignal]:
        """One causal pass; a condition for every query block in the sequence."""
        h = self.hidden_states(seq)
        q = self.cfg.query_len
        blocks = torch.stack([h[s : s + q] for s in seq.query_starts])
        out = self.adapter(blocks)
        return [ConditionSignal(out[i], i) for i in range(len(seq.query_starts))]

    def compute_condition(self, seq: TokenSequence, shot_index: int) -> ConditionSignal:
        if not 0 <= shot_index < seq.num_query_blocks:
            raise QueryBlockMissing(
                f"shot_index {shot_index} out of range for a sequence with {seq.num_query_blocks} query blocks"
            )
        h = self.hidden_states(seq)
        s = seq.query_starts[shot_index]
        out = self.adapter(h[s : s + self.cfg.query_len][None])[0]
        return ConditionSignal(out, shot_index)


class TextEncoderStub(nn.Module):
    """Frozen caption encoder standing in for the generator's text encoder.

    Token embeddings are mean-pooled, projected to D_cond and broadcast over the
    Q condition rows. An empty caption maps to zeros.
    """

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary | None = None):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab or Vocabulary.default()
        self.embed = nn.Embedding(len(self.vocab), cfg.text_dim)
        self.proj = nn.Linear(cfg.text_dim, cfg.d_cond, bias=False)
        nn.init.normal_(self.proj.weight, std=cfg.text_dim ** -0.5)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, caption: str) -> torch.Tensor:
        ids = self.vocab.encode(caption)
        q, d = self.cfg.query_len, self.cfg.d_cond
        if not ids:
            return self.proj.weight.new_zeros((q, d))
        pooled = self.embed(torch.tensor(ids, dtype=torch.long)).mean(dim=0)
        return self.proj(pooled).expand(q, d).clone()
