"""Frequency-filtered cross-branch attention and its unfiltered counterpart.

Feature maps are ``(c, h, w)`` or batched ``(B, c, h, w)`` tensors.  The
image-encoder map is split into a low band and a high band with complementary
binary masks over the centred spectrum; the landmark branch then queries each
band with a shared key/value projection and fuses the two answers through a
logistic gate.
"""
from __future__ import annotations

import math
from typing import NamedTuple, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import NonFiniteError, ShapeMismatchError


class FrequencyMasks(NamedTuple):
    low: torch.Tensor
    high: torch.Tensor


def build_masks(h: int, w: int, dtype=torch.float32) -> FrequencyMasks:
    """Low-pass mask is one on rows [h/4, 3h/4) x cols [w/4, 3w/4); high-pass is its complement."""
    if h % 4 or w % 4 or h <= 0 or w <= 0:
        raise ValueError(f"mask size must be divisible by 4, got {h}x{w}")
    low = torch.zeros(h, w, dtype=dtype)
    low[h // 4: 3 * h // 4, w // 4: 3 * w // 4] = 1
    return FrequencyMasks(low, 1 - low)


def _check_feature(x: torch.Tensor, name: str) -> None:
    if x.dim() not in (3, 4):
        raise ShapeMismatchError(f"{name} must be (c,h,w) or (B,c,h,w), got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"{name} has non-finite entries")


def band_filter(x: torch.Tensor, mask: torch.Tensor, keep_imag: bool = False):
    """Keep the frequencies selected by ``mask`` (defined on the centred spectrum)."""
    spec = torch.fft.fftshift(torch.fft.fft2(x), dim=(-2, -1))
    out = torch.fft.ifft2(torch.fft.ifftshift(spec * mask, dim=(-2, -1)))
    return out if keep_imag else out.real


def decompose(f_ie: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Split a feature map into its low- and high-frequency parts."""
    _check_feature(f_ie, "F_IE")
    h, w = f_ie.shape[-2:]
    masks = build_masks(h, w, dtype=f_ie.dtype)
    return band_filter(f_ie, masks.low), band_filter(f_ie, masks.high)


class FCBAParams(nn.Module):
    """Query/key/value projections over channels plus the fusion logit ``alpha``."""

    def __init__(self, channels: int, init_scale: float = 1.0):
        super().__init__()
        std = init_scale / math.sqrt(channels)
        self.W_Q = nn.Parameter(torch.randn(channels, channels) * std)
        self.W_K = nn.Parameter(torch.randn(channels, channels) * std)
        self.W_V = nn.Parameter(torch.randn(channels, channels) * std)
        self.alpha = nn.Parameter(torch.zeros(()))

    @property
    def channels(self) -> int:
        return self.W_Q.shape[0]


def _tokens(x: torch.Tensor) -> torch.Tensor:
    # (B, c, h, w) -> (B, h*w, c)
    return x.flatten(2).transpose(1, 2)


def cross_attention(query_src: torch.Tensor, kv_src: torch.Tensor, params) -> torch.Tensor:
    """Single-head scaled dot-product attention from ``query_src`` positions to ``kv_src`` positions."""
    if query_src.shape != kv_src.shape:
        raise ShapeMismatchError(f"query {tuple(query_src.shape)} vs kv {tuple(kv_src.shape)}")
    unbatched = query_src.dim() == 3
    if unbatched:
        query_src, kv_src = query_src[None], kv_src[None]
    b, c, h, w = query_src.shape
    if params.W_Q.shape != (c, c):
        raise ShapeMismatchError(f"projections are {tuple(params.W_Q.shape)}, features have c={c}")
    q = _tokens(query_src) @ params.W_Q
    k = _tokens(kv_src) @ params.W_K
    v = _tokens(kv_src) @ params.W_V
    # default scale of the fused kernel is 1/sqrt(c)
    out = F.scaled_dot_product_attention(q, k, v).transpose(1, 2).reshape(b, c, h, w)
    return out[0] if unbatched else out


def fcba_forward(f_ie: torch.Tensor, f_hc: torch.Tensor, params: FCBAParams) -> torch.Tensor:
    if f_ie.shape != f_hc.shape:
        raise ShapeMismatchError(f"F_IE {tuple(f_ie.shape)} vs F_HC {tuple(f_hc.shape)}")
    f_lp, f_hp = decompose(f_ie)
    a_low = cross_attention(f_hc, f_lp, params)
    a_high = cross_attention(f_hc, f_hp, params)
    gate = torch.sigmoid(params.alpha)
    return f_hc + gate * a_low + (1 - gate) * a_high


def cba_forward(f_ie: torch.Tensor, f_sc: torch.Tensor, params: FCBAParams) -> torch.Tensor:
    if f_ie.shape != f_sc.shape:
        raise ShapeMismatchError(f"F_IE {tuple(f_ie.shape)} vs F_SC {tuple(f_sc.shape)}")
    return f_sc + cross_attention(f_sc, f_ie, params)


class FilteredCrossBranchAttention(FCBAParams):
    def forward(self, f_ie, f_hc):
        return fcba_forward(f_ie, f_hc, self)


class CrossBranchAttention(FCBAParams):
    def forward(self, f_ie, f_sc):
        return cba_forward(f_ie, f_sc, self)
