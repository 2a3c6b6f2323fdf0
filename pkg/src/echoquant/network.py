"""Toy-scale dual-task SAM: adapted ViT encoder, two CNN branches, one shared mask decoder.

Data flow for an input batch ``(B, H, W)``::

    image -> ImageEncoder -> level features F_IE[k], image embedding E
    image -> seg CNN branch (cross-branch attention against F_IE) -> seg features
    image -> HR CNN branch (frequency-filtered attention against F_IE) -> HR features
    E (detached) -> seg / HR prompt generators -> prompt tokens
    E + branch features, prompt tokens -> shared MaskDecoder -> per-task head
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ShapeMismatchError
from .freq_attention import CrossBranchAttention, FilteredCrossBranchAttention
from .prompting import AutoPromptGenerator, PromptEncoder, Task, alignment_tensor, masks_to_boxes


@dataclass
class EncoderConfig:
    input_size: int = 256
    patch_size: int = 16
    embed_dim: int = 128
    depth: int = 4
    heads: int = 4
    adapter_dim: int = 32
    pos_grid: int = 8  # grid of the "pretrained" positional table before rescaling
    cnn_channels: Tuple[int, int, int] = (16, 32, 64)
    cnn_stem_stride: int = 4
    decoder_dim: int = 64
    decoder_depth: int = 2
    fcba_levels: int = 2
    in_chans: int = 3
    seed: int = 0
    encoder_weights: Optional[str] = None

    def __post_init__(self):
        self.cnn_channels = tuple(int(c) for c in self.cnn_channels)
        self.validate()

    @property
    def grid(self) -> int:
        return self.input_size // self.patch_size

    def stage_grids(self) -> List[int]:
        base = self.input_size // self.cnn_stem_stride
        return [base, base // 2, base // 4]

    def validate(self) -> None:
        if self.input_size % self.patch_size:
            raise ValueError(f"input_size {self.input_size} not divisible by patch_size {self.patch_size}")
        dims = (self.embed_dim, self.depth, self.adapter_dim, self.decoder_dim, self.heads,
                self.patch_size, self.pos_grid, *self.cnn_channels)
        if any(v <= 0 for v in dims):
            raise ValueError("all dimensions must be positive")
        if len(self.cnn_channels) != 3:
            raise ValueError("cnn_channels must list three stages")
        if not 1 <= self.fcba_levels <= 3:
            raise ValueError("fcba_levels must be 1, 2 or 3")
        if self.fcba_levels > self.depth:
            raise ValueError("fcba_levels cannot exceed encoder depth")
        for g in self.stage_grids()[3 - self.fcba_levels:]:
            if g % 4 or g <= 0:
                raise ValueError(f"attention stage grid {g} not divisible by 4")
        if self.decoder_dim % 8 or self.embed_dim % self.heads or self.decoder_dim % self.heads:
            raise ValueError("decoder_dim must be divisible by 8 and widths by heads")
        if self.stage_grids()[2] != self.grid:
            raise ValueError(f"deepest CNN grid {self.stage_grids()[2]} must equal encoder grid {self.grid}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_channels"] = list(self.cnn_channels)
        return d


TINY_CONFIG = dict(input_size=32, patch_size=4, embed_dim=16, depth=2, heads=2, adapter_dim=4,
                   pos_grid=4, cnn_channels=(4, 8, 8), cnn_stem_stride=1, decoder_dim=16,
                   decoder_depth=1, fcba_levels=1)


class LayerNorm2d(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class FeatureAdapter(nn.Module):
    """Bottleneck residual adapter; the up-projection starts at zero."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.down = nn.Linear(dim, hidden)
        self.up = nn.Linear(hidden, dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x):
        return x + self.up(F.gelu(self.down(x)))


class PositionAdapter(nn.Module):
    """Rescales a positional table to the working grid, plus a zero-initialised depthwise correction."""

    def __init__(self, dim: int, pos_grid: int):
        super().__init__()
        self.pos_embed = nn.Parameter(torch.randn(1, dim, pos_grid, pos_grid) * 0.02)
        self.conv = nn.Conv2d(dim, dim, 3, padding=1, groups=dim)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, grid: int, adapt: bool = True):
        pos = self.pos_embed
        if pos.shape[-1] != grid:
            pos = F.interpolate(pos, size=(grid, grid), mode="bilinear", align_corners=False)
        return pos + self.conv(pos) if adapt else pos


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, adapter_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.adapter = FeatureAdapter(dim, adapter_dim)

    def forward(self, x, adapt: bool = True):
        y = self.norm1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        return self.adapter(x) if adapt else x


class ImageEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, out_dim: int):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Conv2d(cfg.in_chans, d, cfg.patch_size, stride=cfg.patch_size)
        self.pos = PositionAdapter(d, cfg.pos_grid)
        self.blocks = nn.ModuleList(EncoderBlock(d, cfg.heads, cfg.adapter_dim) for _ in range(cfg.depth))
        n = cfg.fcba_levels
        self.level_ids = [cfg.depth * (k + 1) // n - 1 for k in range(n)]
        self.neck = nn.Sequential(nn.Conv2d(d, out_dim, 1, bias=False), LayerNorm2d(out_dim),
                                  nn.Conv2d(out_dim, out_dim, 3, padding=1, bias=False), LayerNorm2d(out_dim))

    def forward(self, image: torch.Tensor, adapt: bool = True):
        """``image`` (B, in_chans, S, S) -> (list of (B, D, g, g) level maps, (B, d, g, g) embedding)."""
        s = self.cfg.input_size
        if image.dim() != 4 or image.shape[1] != self.cfg.in_chans or image.shape[-2:] != (s, s):
            raise ShapeMismatchError(f"expected (B, {self.cfg.in_chans}, {s}, {s}), got {tuple(image.shape)}")
        x = self.patch_embed(image)
        g = x.shape[-1]
        x = x + self.pos(g, adapt)
        x = x.flatten(2).transpose(1, 2)
        levels = []
        for i, blk in enumerate(self.blocks):
            x = blk(x, adapt)
            if i in self.level_ids:
                levels.append(x.transpose(1, 2).reshape(x.shape[0], -1, g, g))
        emb = self.neck(x.transpose(1, 2).reshape(x.shape[0], -1, g, g))
        return levels, emb

    def load_external(self, path: str):
        """Load an external state dict (e.g. converted pretrained weights); returns unmatched keys."""
        state = torch.load(path, map_location="cpu", weights_only=True)
        return self.load_state_dict(state, strict=False)


def _conv_block(cin, cout, stride):
    groups = math.gcd(4, cout)
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                         nn.GroupNorm(groups, cout), nn.GELU())


class CNNBranch(nn.Module):
    """Three-stage convolutional branch whose deeper stages exchange information with the encoder."""

    def __init__(self, cfg: EncoderConfig, filtered: bool):
        super().__init__()
        c1, c2, c3 = cfg.cnn_channels
        stem = []
        cin, stride_left = cfg.in_chans, cfg.cnn_stem_stride
        while stride_left > 1:
            stem.append(_conv_block(cin, c1, 2))
            cin, stride_left = c1, stride_left // 2
        stem.append(_conv_block(cin, c1, 1))
        self.stages = nn.ModuleList([
            nn.Sequential(*stem),
            nn.Sequential(_conv_block(c1, c2, 2), _conv_block(c2, c2, 1)),
            nn.Sequential(_conv_block(c2, c3, 2), _conv_block(c3, c3, 1)),
        ])
        chans = (c1, c2, c3)
        self.attn_stages = list(range(3 - cfg.fcba_levels, 3))
        attn_cls = FilteredCrossBranchAttention if filtered else CrossBranchAttention
        self.proj = nn.ModuleList(nn.Conv2d(cfg.embed_dim, chans[s], 1) for s in self.attn_stages)
        self.attn = nn.ModuleList(attn_cls(chans[s]) for s in self.attn_stages)

    def forward(self, image, levels):
        feats = []
        x = image
        for s, stage in enumerate(self.stages):
            x = stage(x)
            if s in self.attn_stages:
                k = self.attn_stages.index(s)
                f_ie = self.proj[k](levels[k])
                if f_ie.shape[-2:] != x.shape[-2:]:
                    f_ie = F.interpolate(f_ie, size=x.shape[-2:], mode="bilinear", align_corners=False)
                x = self.attn[k](f_ie, x)
            feats.append(x)
        return feats


class TwoWayBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.t2i = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.i2t = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens, tok_pe, img, img_pe):
        q = tokens + tok_pe
        tokens = self.norm1(tokens + self.self_attn(q, q, tokens, need_weights=False)[0])
        q = tokens + tok_pe
        tokens = self.norm2(tokens + self.t2i(q, img + img_pe, img, need_weights=False)[0])
        tokens = self.norm3(tokens + self.mlp(tokens))
        q = tokens + tok_pe
        img = self.norm4(img + self.i2t(img + img_pe, q, tokens, need_weights=False)[0])
        return tokens, img


class MaskDecoder(nn.Module):
    """Prompt-conditioned decoder shared by both tasks; heads are supplied per call."""

    def __init__(self, dim: int, depth: int, heads: int):
        super().__init__()
        self.mask_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.blocks = nn.ModuleList(TwoWayBlock(dim, heads) for _ in range(depth))
        self.final = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm = nn.LayerNorm(dim)
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(dim, dim // 4, 2, stride=2), LayerNorm2d(dim // 4), nn.GELU(),
            nn.ConvTranspose2d(dim // 4, dim // 8, 2, stride=2), nn.GELU())

    def forward(self, embedding, pos, prompts, skip, head: "OutputHead"):
        """``embedding`` (B, d, g, g), ``pos`` (d, g, g), ``prompts`` (B, n, d), ``skip`` (B, d/8, 4g, 4g)."""
        b, d, g, _ = embedding.shape
        tokens = torch.cat([self.mask_token.expand(b, 1, d), prompts], dim=1)
        tok_pe = tokens
        img = embedding.flatten(2).transpose(1, 2)
        img_pe = pos.flatten(1).transpose(0, 1)[None]
        for blk in self.blocks:
            tokens, img = blk(tokens, tok_pe, img, img_pe)
        q = tokens + tok_pe
        tokens = self.norm(tokens + self.final(q, img + img_pe, img, need_weights=False)[0])
        up = self.upscale(img.transpose(1, 2).reshape(b, d, g, g))
        if skip.shape[-2:] != up.shape[-2:]:
            skip = F.interpolate(skip, size=up.shape[-2:], mode="bilinear", align_corners=False)
        return head(tokens[:, 0], up + skip)


class OutputHead(nn.Module):
    """Hypernetwork: the mask-token output predicts per-channel weights over upscaled features."""

    def __init__(self, dim: int, out_channels: int):
        super().__init__()
        c = dim // 8
        self.out_channels = out_channels
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, out_channels * c))
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, token, feats):
        b, c = feats.shape[:2]
        w = self.mlp(token).reshape(b, self.out_channels, c)
        return torch.einsum("bkc,bchw->bkhw", w, feats) + self.bias[None, :, None, None]


@dataclass
class TaskOutput:
    task: Task
    mask_logits: Optional[torch.Tensor] = None  # (B, H, W)
    heatmaps: Optional[torch.Tensor] = None  # (B, 3, H, W), order P_A, P_L, P_R
    prompt_tokens: Optional[torch.Tensor] = None  # tokens the decoder consumed
    apg_tokens: Optional[torch.Tensor] = None


@dataclass
class LossWeights:
    dice: float = 1.0
    mse: float = 20.0
    align: float = 1.0

    def align_weight(self, epoch: int, warmup_epochs: int) -> float:
        return self.align if epoch < warmup_epochs else 0.0


class DualTaskSAM(nn.Module):
    def __init__(self, cfg: Optional[EncoderConfig] = None):
        super().__init__()
        self.cfg = cfg = cfg or EncoderConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            d = cfg.decoder_dim
            self.encoder = ImageEncoder(cfg, d)
            self.prompt_encoder = PromptEncoder(d, seed=cfg.seed)
            self.seg_branch = CNNBranch(cfg, filtered=False)
            self.hr_branch = CNNBranch(cfg, filtered=True)
            c1, _, c3 = cfg.cnn_channels
            self.seg_fuse = nn.Conv2d(c3, d, 1)
            self.hr_fuse = nn.Conv2d(c3, d, 1)
            self.seg_skip = nn.Conv2d(c1, d // 8, 1)
            self.hr_skip = nn.Conv2d(c1, d // 8, 1)
            self.decoder = MaskDecoder(d, cfg.decoder_depth, cfg.heads)
            self.seg_apg = AutoPromptGenerator(d, Task.SEG, heads=cfg.heads)
            self.hr_apg = AutoPromptGenerator(d, Task.HR, heads=cfg.heads)
            self.seg_head = OutputHead(d, 1)
            self.hr_head = OutputHead(d, 3)
        self.seg_apg.bind_mask_token(self.decoder)
        self.hr_apg.bind_mask_token(self.decoder)
        if cfg.encoder_weights:
            self.encoder.load_external(cfg.encoder_weights)

    def prepare(self, image: torch.Tensor) -> torch.Tensor:
        """(B, H, W) or (B, 1, H, W) intensities in [0, 1] -> (B, in_chans, H, W)."""
        if image.dim() == 3:
            image = image[:, None]
        if image.dim() != 4 or image.shape[1] not in (1, self.cfg.in_chans):
            raise ShapeMismatchError(f"bad image batch shape {tuple(image.shape)}")
        if image.shape[1] == 1:
            image = image.expand(-1, self.cfg.in_chans, -1, -1)
        return image

    def forward(self, image: torch.Tensor, prompts: Optional[Dict[Task, torch.Tensor]] = None
                ) -> Tuple[TaskOutput, TaskOutput]:
        """Run both tasks.  ``prompts`` optionally replaces the generated tokens per task."""
        x = self.prepare(image)
        size = x.shape[-2:]
        levels, emb = self.encoder(x)
        g = emb.shape[-1]
        pos = self.prompt_encoder.dense_pe(g, g, dtype=emb.dtype)
        prompts = prompts or {}
        outs = []
        for task, branch, fuse, skip, apg, head in (
                (Task.SEG, self.seg_branch, self.seg_fuse, self.seg_skip, self.seg_apg, self.seg_head),
                (Task.HR, self.hr_branch, self.hr_fuse, self.hr_skip, self.hr_apg, self.hr_head)):
            feats = branch(x, levels)
            task_emb = emb + fuse(feats[2])
            # alignment gradients stop at the image embedding; task gradients do not
            apg_tokens = apg(emb.detach(), pos)
            if task in prompts:
                used = prompts[task]
            elif emb.requires_grad:
                used = apg(emb, pos)
            else:
                used = apg_tokens
            logits = self.decoder(task_emb, pos, used, skip(feats[0]), head)
            logits = F.interpolate(logits, size=size, mode="bilinear", align_corners=False)
            if task is Task.SEG:
                outs.append(TaskOutput(task, mask_logits=logits[:, 0], prompt_tokens=used, apg_tokens=apg_tokens))
            else:
                outs.append(TaskOutput(task, heatmaps=logits, prompt_tokens=used, apg_tokens=apg_tokens))
        return outs[0], outs[1]

    def reference_prompts(self, masks: torch.Tensor, points: torch.Tensor) -> Dict[Task, torch.Tensor]:
        """Prompt-encoder embeddings of ground-truth boxes and landmarks."""
        grid = tuple(masks.shape[-2:])
        dtype = self.prompt_encoder.gaussian.dtype
        with torch.no_grad():
            seg = self.prompt_encoder.box_tensor(masks_to_boxes(masks.bool()).to(dtype), grid)
            hr = self.prompt_encoder.points_tensor(points.to(dtype), grid)
        return {Task.SEG: seg, Task.HR: hr}


def dice_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Soft Dice loss; batched inputs are reduced per sample, then averaged."""
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    if pred.dim() == 2:
        pred, gt = pred[None], gt[None]
    gt = gt.to(pred.dtype)
    inter = (pred * gt).flatten(1).sum(1)
    denom = pred.flatten(1).sum(1) + gt.flatten(1).sum(1)
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def combine_losses(dice, mse, align, epoch: int, warmup_epochs: int,
                   weights: Optional[LossWeights] = None):
    weights = weights or LossWeights()
    w_align = weights.align_weight(epoch, warmup_epochs)
    total = weights.dice * dice + weights.mse * mse
    if w_align:
        total = total + w_align * align
    return total


def total_loss(seg_out: TaskOutput, hr_out: TaskOutput, targets: Dict[str, torch.Tensor],
               epoch: int, warmup_epochs: int, weights: Optional[LossWeights] = None):
    """Weighted training objective and its logged components.

    ``targets`` holds ``mask`` (B, H, W), ``heatmaps`` (B, 3, H, W) rendered at
    the current sigma, and ``prompts`` (task -> reference tokens).
    """
    weights = weights or LossWeights()
    dice = dice_loss(torch.sigmoid(seg_out.mask_logits), targets["mask"])
    mse = F.mse_loss(hr_out.heatmaps, targets["heatmaps"].to(hr_out.heatmaps.dtype))
    if weights.align_weight(epoch, warmup_epochs):
        ref = targets["prompts"]
        align = (alignment_tensor(seg_out.apg_tokens, ref[Task.SEG].to(seg_out.apg_tokens.dtype))
                 + alignment_tensor(hr_out.apg_tokens, ref[Task.HR].to(hr_out.apg_tokens.dtype)))
    else:
        align = torch.zeros((), dtype=dice.dtype)
    total = combine_losses(dice, mse, align, epoch, warmup_epochs, weights)
    parts = {"dice": float(dice.detach()), "mse": float(mse.detach()), "align": float(align.detach())}
    return total, parts
