"""Prompt encoder, auto prompt generators and the embedding alignment loss.

The prompt encoder is frozen: random Fourier positional features plus fixed
per-type embeddings, all drawn from a seeded generator.  The generators learn
to reproduce its output from the image embedding alone, so that prompts are
not needed at inference.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
from torch import nn

from .exceptions import EmptyMaskError, ShapeMismatchError, ZeroVectorError
from .records import Landmarks, ViewMask


class Task(str, enum.Enum):
    SEG = "SEG"
    HR = "HR"


class Source(str, enum.Enum):
    APG = "APG"
    PROMPT_ENCODER = "PromptEncoder"


N_TOKENS = {Task.SEG: 2, Task.HR: 3}


@dataclass(frozen=True, eq=False)
class PromptEmbedding:
    tokens: torch.Tensor  # (..., n_tokens, d)
    source: Source
    task: Task

    def __post_init__(self):
        if self.tokens.shape[-2] != N_TOKENS[Task(self.task)]:
            raise ShapeMismatchError(
                f"{self.task} embeddings need {N_TOKENS[Task(self.task)]} tokens, got {self.tokens.shape[-2]}")


class PromptEncoder(nn.Module):
    """Frozen sparse-prompt encoder.

    Token types: 0-2 are the landmarks (apex, left and right annulus), 3-4 the
    top-left and bottom-right box corners.
    """

    def __init__(self, dim: int, seed: int = 0, scale: float = 1.0):
        super().__init__()
        if dim % 2:
            raise ValueError("embedding width must be even")
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("gaussian", scale * torch.randn(2, dim // 2, generator=g))
        self.register_buffer("type_embed", torch.randn(5, dim, generator=g))
        self.dim = dim

    def positional(self, coords01: torch.Tensor) -> torch.Tensor:
        """Fourier features of normalised coordinates in [0, 1]^2."""
        proj = (2.0 * coords01 - 1.0) @ self.gaussian.to(coords01.dtype) * (2.0 * math.pi)
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)

    def dense_pe(self, h: int, w: int, dtype=torch.float32) -> torch.Tensor:
        """Positional encoding of an ``h x w`` feature grid (cell centres) -> (d, h, w)."""
        ys = (torch.arange(h, dtype=dtype) + 0.5) / h
        xs = (torch.arange(w, dtype=dtype) + 0.5) / w
        grid = torch.stack(torch.meshgrid(xs, ys, indexing="xy"), dim=-1)
        return self.positional(grid).permute(2, 0, 1)

    def _encode(self, points: torch.Tensor, grid: Tuple[int, int], types) -> torch.Tensor:
        h, w = grid
        norm = torch.stack([(points[..., 0] + 0.5) / w, (points[..., 1] + 0.5) / h], dim=-1)
        return self.positional(norm) + self.type_embed[list(types)].to(points.dtype)

    def points_tensor(self, points: torch.Tensor, grid: Tuple[int, int]) -> torch.Tensor:
        """(..., 3, 2) landmark coordinates -> (..., 3, d)."""
        return self._encode(points, grid, (0, 1, 2))

    def box_tensor(self, corners: torch.Tensor, grid: Tuple[int, int]) -> torch.Tensor:
        """(..., 2, 2) box corners -> (..., 2, d)."""
        return self._encode(corners, grid, (3, 4))

    def forward(self, points, grid):
        return self.points_tensor(points, grid)


def encode_points(lm: Landmarks, grid: Tuple[int, int], encoder: PromptEncoder) -> PromptEmbedding:
    lm.check_inside(grid)
    pts = torch.as_tensor(lm.to_array(), dtype=torch.float32)
    with torch.no_grad():
        tokens = encoder.points_tensor(pts, grid)
    return PromptEmbedding(tokens, Source.PROMPT_ENCODER, Task.HR)


def mask_box(grid: np.ndarray) -> np.ndarray:
    """Tight box corners ``[[x0, y0], [x1, y1]]`` of a nonempty binary mask."""
    rows = np.flatnonzero(np.asarray(grid).any(axis=1))
    cols = np.flatnonzero(np.asarray(grid).any(axis=0))
    if rows.size == 0:
        raise EmptyMaskError("cannot box an empty mask")
    return np.array([[cols[0], rows[0]], [cols[-1], rows[-1]]], dtype=float)


def masks_to_boxes(masks: torch.Tensor) -> torch.Tensor:
    """Batched tight boxes of (B, H, W) masks -> (B, 2, 2); empty masks get the full frame."""
    b, h, w = masks.shape
    rows = masks.any(dim=2)
    cols = masks.any(dim=1)
    ar_h = torch.arange(h)
    ar_w = torch.arange(w)
    big = torch.tensor(10**9)
    y0 = torch.where(rows, ar_h, big).min(dim=1).values
    y1 = torch.where(rows, ar_h, -big).max(dim=1).values
    x0 = torch.where(cols, ar_w, big).min(dim=1).values
    x1 = torch.where(cols, ar_w, -big).max(dim=1).values
    empty = ~rows.any(dim=1)
    x0 = torch.where(empty, 0, x0)
    y0 = torch.where(empty, 0, y0)
    x1 = torch.where(empty, w - 1, x1)
    y1 = torch.where(empty, h - 1, y1)
    return torch.stack([torch.stack([x0, y0], -1), torch.stack([x1, y1], -1)], dim=1).float()


def encode_box(mask: ViewMask, encoder: PromptEncoder) -> PromptEmbedding:
    corners = torch.as_tensor(mask_box(mask.grid), dtype=torch.float32)
    with torch.no_grad():
        tokens = encoder.box_tensor(corners, mask.shape)
    return PromptEmbedding(tokens, Source.PROMPT_ENCODER, Task.SEG)


class _GeneratorBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm0 = nn.LayerNorm(dim)
        self.cross = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, q, keys, values):
        q = self.norm0(q + self.self_attn(q, q, q, need_weights=False)[0])
        q = self.norm1(q + self.cross(q, keys, values, need_weights=False)[0])
        return self.norm2(q + self.mlp(q))


class AutoPromptGenerator(nn.Module):
    """Image embedding -> task-shaped prompt tokens.

    The query set is one learned slot per output token (offset by the task
    token) plus the decoder's mask token, read through ``mask_token_ref``
    without gradient.
    """

    def __init__(self, dim: int, task: Task, heads: int = 4, depth: int = 2):
        super().__init__()
        self.task = Task(task)
        self.n_tokens = N_TOKENS[self.task]
        self.task_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.slots = nn.Parameter(torch.randn(self.n_tokens, dim) * 0.02)
        self.blocks = nn.ModuleList(_GeneratorBlock(dim, heads) for _ in range(depth))
        self.out = nn.Linear(dim, dim)
        self._mask_token_owner = None

    def bind_mask_token(self, owner: nn.Module) -> None:
        # a plain attribute, so the decoder's parameter is not registered twice
        object.__setattr__(self, "_mask_token_owner", owner)

    @property
    def mask_token_ref(self) -> torch.Tensor:
        if self._mask_token_owner is None:
            raise RuntimeError("generator is not bound to a decoder mask token")
        return self._mask_token_owner.mask_token.detach()

    def forward(self, image_embedding: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
        """``image_embedding`` (B, d, h, w), ``pos`` (d, h, w) -> tokens (B, n, d)."""
        b, d, h, w = image_embedding.shape
        if pos.shape != (d, h, w) or self.task_token.shape[0] != d:
            raise ShapeMismatchError(
                f"embedding {tuple(image_embedding.shape)} incompatible with pos {tuple(pos.shape)} "
                f"and width {self.task_token.shape[0]}")
        values = image_embedding.flatten(2).transpose(1, 2)
        keys = values + pos.flatten(1).transpose(0, 1)[None]
        mask_tok = self.mask_token_ref.to(values.dtype).reshape(1, 1, d)
        q = torch.cat([self.slots + self.task_token, mask_tok[0]], dim=0)[None].expand(b, -1, -1)
        for blk in self.blocks:
            q = blk(q, keys, values)
        return self.out(q[:, : self.n_tokens])


def apg_forward(image_embedding: torch.Tensor, generator: AutoPromptGenerator,
                pos: torch.Tensor) -> PromptEmbedding:
    return PromptEmbedding(generator(image_embedding, pos), Source.APG, generator.task)


def alignment_tensor(e_apg: torch.Tensor, e_pe: torch.Tensor) -> torch.Tensor:
    """Mean over tokens (and batch) of ``1 - cos`` between matching token vectors."""
    if e_apg.shape != e_pe.shape:
        raise ShapeMismatchError(f"{tuple(e_apg.shape)} vs {tuple(e_pe.shape)}")
    na = torch.linalg.vector_norm(e_apg, dim=-1)
    nb = torch.linalg.vector_norm(e_pe, dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ZeroVectorError("cosine similarity is undefined for a zero token vector")
    cos = (e_apg * e_pe).sum(-1) / (na * nb)
    return (1.0 - cos).mean()


def alignment_loss(e_apg: PromptEmbedding, e_pe: PromptEmbedding) -> torch.Tensor:
    if Task(e_apg.task) != Task(e_pe.task):
        raise ShapeMismatchError(f"task mismatch: {e_apg.task} vs {e_pe.task}")
    return alignment_tensor(e_apg.tokens, e_pe.tokens)
