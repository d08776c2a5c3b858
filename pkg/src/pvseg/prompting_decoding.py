"""User prompt encoding and mask decoding.

Prompts (positive/negative clicks, boxes, full masks) become sparse tokens
and a dense grid embedding, SAM-convention: clicks and box corners are typed
embeddings plus a fixed 2D sinusoidal encoding of their normalized position;
a mask prompt is convolved down to the feature grid; no prompt at all yields
a learned "no prompt" dense embedding.

The decoder runs two two-way transformer blocks between the token set
(output tokens + prompt tokens + memory prompt tokens) and the image
embedding, decodes three candidate masks with per-token hypernetworks over an
upscaled embedding, scores them with an IoU head, and predicts object
visibility with an occlusion head.  Exactly one candidate (highest predicted
IoU) is propagated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .memory import AttentionLayer


class PromptValidationError(ValueError):
    """Raised for prompts outside the frame or otherwise malformed."""


@dataclass
class Prompt:
    kind: str  # "click" | "box" | "mask"
    frame_index: int
    point: tuple[float, float] | None = None  # (x, y) pixel coords
    polarity: str | None = None  # "positive" | "negative"
    box: tuple[float, float, float, float] | None = None  # (x0, y0, x1, y1)
    mask: np.ndarray | None = None  # binary [h, w]

    @classmethod
    def click(cls, x: float, y: float, polarity: str, frame_index: int) -> "Prompt":
        if polarity not in ("positive", "negative"):
            raise PromptValidationError(f"unknown click polarity {polarity!r}")
        return cls(kind="click", frame_index=frame_index, point=(float(x), float(y)), polarity=polarity)

    @classmethod
    def from_box(cls, x0: float, y0: float, x1: float, y1: float, frame_index: int) -> "Prompt":
        if x0 > x1 or y0 > y1:
            raise PromptValidationError(f"box corners out of order: ({x0}, {y0}, {x1}, {y1})")
        return cls(kind="box", frame_index=frame_index, box=(float(x0), float(y0), float(x1), float(y1)))

    @classmethod
    def from_mask(cls, mask: np.ndarray, frame_index: int) -> "Prompt":
        return cls(kind="mask", frame_index=frame_index, mask=np.asarray(mask))


def sincos_position_encoding(coords: torch.Tensor, dim: int, scale: float = 64.0) -> torch.Tensor:
    """Fixed 2D sinusoidal encoding of normalized (x, y) in [0, 1].

    coords: [k, 2]; returns [k, dim] with dim divisible by 4.
    """
    if dim % 4 != 0:
        raise ValueError("encoding dim must be divisible by 4")
    quarter = dim // 4
    inv_freq = 1.0 / (
        10000 ** (torch.arange(quarter, device=coords.device, dtype=coords.dtype) / quarter)
    )
    ax = coords[:, 0:1] * scale * inv_freq
    ay = coords[:, 1:2] * scale * inv_freq
    return torch.cat([torch.sin(ax), torch.cos(ax), torch.sin(ay), torch.cos(ay)], dim=-1)


def grid_position_encoding(h: int, w: int, dim: int, device=None, dtype=None) -> torch.Tensor:
    """Sinusoidal encoding of grid cell centers, [dim, h, w]."""
    ys, xs = torch.meshgrid(
        torch.arange(h, device=device, dtype=dtype or torch.float32),
        torch.arange(w, device=device, dtype=dtype or torch.float32),
        indexing="ij",
    )
    coords = torch.stack([(xs.reshape(-1) + 0.5) / w, (ys.reshape(-1) + 0.5) / h], dim=1)
    pe = sincos_position_encoding(coords, dim)
    return pe.transpose(0, 1).reshape(dim, h, w)


TYPE_POS_CLICK, TYPE_NEG_CLICK, TYPE_BOX_TL, TYPE_BOX_BR = 0, 1, 2, 3


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class PromptEncoder(nn.Module):
    def __init__(self, dim: int = 128):
        super().__init__()
        self.dim = dim
        self.type_embed = nn.Embedding(4, dim)
        self.no_mask_embed = nn.Parameter(torch.randn(dim) * 0.02)
        self.mask_convs = nn.Sequential(
            nn.Conv2d(1, dim // 4, 3, stride=2, padding=1),
            _norm(dim // 4),
            nn.ReLU(inplace=True),
            nn.Conv2d(dim // 4, dim // 2, 3, stride=2, padding=1),
            _norm(dim // 2),
            nn.ReLU(inplace=True),
            nn.Conv2d(dim // 2, dim, 1),
        )

    def _check_point(self, x: float, y: float, h: int, w: int) -> None:
        if not (0 <= x < w):
            raise PromptValidationError(f"click x={x} outside [0, {w})")
        if not (0 <= y < h):
            raise PromptValidationError(f"click y={y} outside [0, {h})")

    def _point_token(self, x: float, y: float, type_id: int, h: int, w: int) -> torch.Tensor:
        device = self.no_mask_embed.device
        dtype = self.no_mask_embed.dtype
        coords = torch.tensor([[(x + 0.5) / w, (y + 0.5) / h]], device=device, dtype=dtype)
        pe = sincos_position_encoding(coords, self.dim)[0]
        return self.type_embed(torch.tensor(type_id, device=device)) + pe

    def forward(
        self, prompts: list[Prompt], image_hw: tuple[int, int], grid_hw: tuple[int, int]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        h, w = image_hw
        h_l, w_l = grid_hw
        frames = {p.frame_index for p in prompts}
        if len(frames) > 1:
            raise PromptValidationError(f"prompts span multiple frames: {sorted(frames)}")

        sparse = []
        mask_prompt = None
        for p in prompts:
            if p.kind == "click":
                x, y = p.point
                self._check_point(x, y, h, w)
                type_id = TYPE_POS_CLICK if p.polarity == "positive" else TYPE_NEG_CLICK
                sparse.append(self._point_token(x, y, type_id, h, w))
            elif p.kind == "box":
                x0, y0, x1, y1 = p.box
                self._check_point(x0, y0, h, w)
                self._check_point(x1, y1, h, w)
                sparse.append(self._point_token(x0, y0, TYPE_BOX_TL, h, w))
                sparse.append(self._point_token(x1, y1, TYPE_BOX_BR, h, w))
            elif p.kind == "mask":
                if p.mask.shape != (h, w):
                    raise PromptValidationError(
                        f"mask prompt shape {p.mask.shape} does not match frame ({h}, {w})"
                    )
                mask_prompt = p.mask
            else:
                raise PromptValidationError(f"unknown prompt kind {p.kind!r}")

        sparse_tokens = (
            torch.stack(sparse)
            if sparse
            else torch.zeros(0, self.dim, device=self.no_mask_embed.device, dtype=self.no_mask_embed.dtype)
        )
        if mask_prompt is not None:
            m = torch.as_tensor(mask_prompt, device=self.no_mask_embed.device).float()
            m = F.interpolate(m[None, None], size=(4 * h_l, 4 * w_l), mode="bilinear", align_corners=False)
            dense = self.mask_convs(m.to(self.no_mask_embed.dtype))[0]
        else:
            dense = self.no_mask_embed.view(-1, 1, 1).expand(self.dim, h_l, w_l)
        return sparse_tokens, dense


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, depth: int):
        super().__init__()
        dims = [in_dim] + [hidden] * (depth - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class TwoWayBlock(nn.Module):
    """Token self-attention, token-to-image attention, token MLP, then
    image-to-token attention, with residuals and layer norms."""

    def __init__(self, dim: int, num_heads: int, mlp_dim: int, skip_first_pe: bool):
        super().__init__()
        self.skip_first_pe = skip_first_pe
        self.self_attn = AttentionLayer(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_t2i = AttentionLayer(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_dim), nn.GELU(), nn.Linear(mlp_dim, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.cross_i2t = AttentionLayer(dim, num_heads)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, queries, keys, query_pe, key_pe):
        if self.skip_first_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)
        q = queries + query_pe
        k = keys + key_pe
        queries = self.norm2(queries + self.cross_t2i(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))
        q = queries + query_pe
        k = keys + key_pe
        keys = self.norm4(keys + self.cross_i2t(k, q, queries))
        return queries, keys


@dataclass
class SegmentationOutput:
    mask_logits: torch.Tensor  # [num_masks, h, w]
    iou_pred: torch.Tensor  # [num_masks], each in [0, 1]
    object_logit: torch.Tensor  # scalar

    @property
    def object_score(self) -> float:
        return float(torch.sigmoid(self.object_logit.detach()))

    @property
    def selected_index(self) -> int:
        return int(torch.argmax(self.iou_pred))


class MaskDecoder(nn.Module):
    def __init__(
        self,
        dim: int = 128,
        feat_dim: int = 256,
        depth: int = 2,
        num_heads: int = 4,
        mlp_dim: int = 512,
        num_masks: int = 3,
    ):
        super().__init__()
        self.dim = dim
        self.num_masks = num_masks
        self.neck = nn.Conv2d(feat_dim, dim, 1)
        self.iou_token = nn.Embedding(1, dim)
        self.mask_tokens = nn.Embedding(num_masks, dim)
        self.occlusion_token = nn.Embedding(1, dim)
        self.blocks = nn.ModuleList(
            TwoWayBlock(dim, num_heads, mlp_dim, skip_first_pe=(i == 0)) for i in range(depth)
        )
        self.final_attn = AttentionLayer(dim, num_heads)
        self.final_norm = nn.LayerNorm(dim)
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(dim, dim // 4, 2, stride=2),
            _norm(dim // 4),
            nn.GELU(),
            nn.ConvTranspose2d(dim // 4, dim // 8, 2, stride=2),
            nn.GELU(),
        )
        self.mask_mlps = nn.ModuleList(MLP(dim, dim, dim // 8, 3) for _ in range(num_masks))
        self.iou_head = MLP(dim, dim, num_masks, 3)
        self.occlusion_head = MLP(dim, dim, 1, 3)

    def forward(
        self,
        feat: torch.Tensor,
        sparse_tokens: torch.Tensor,
        dense_embedding: torch.Tensor,
        memory_prompts: torch.Tensor | None,
        output_size: tuple[int, int],
    ) -> SegmentationOutput:
        h_l, w_l = feat.shape[1], feat.shape[2]
        out_tokens = torch.cat(
            [self.iou_token.weight, self.mask_tokens.weight, self.occlusion_token.weight], dim=0
        )
        pieces = [out_tokens, sparse_tokens]
        if memory_prompts is not None and memory_prompts.shape[0] > 0:
            pieces.append(memory_prompts)
        tokens = torch.cat(pieces, dim=0)

        src = self.neck(feat.unsqueeze(0))[0] + dense_embedding
        pe = grid_position_encoding(h_l, w_l, self.dim, device=src.device, dtype=src.dtype)
        keys = src.reshape(self.dim, -1).transpose(0, 1)
        key_pe = pe.reshape(self.dim, -1).transpose(0, 1)

        queries = tokens
        for block in self.blocks:
            queries, keys = block(queries, keys, tokens, key_pe)
        q = queries + tokens
        k = keys + key_pe
        queries = self.final_norm(queries + self.final_attn(q, k, keys))

        iou_out = queries[0]
        mask_out = queries[1 : 1 + self.num_masks]
        occl_out = queries[1 + self.num_masks]

        up = self.upscale(keys.transpose(0, 1).reshape(1, self.dim, h_l, w_l))[0]
        hyper = torch.stack([mlp(mask_out[i]) for i, mlp in enumerate(self.mask_mlps)])
        logits = (hyper @ up.reshape(up.shape[0], -1)).reshape(self.num_masks, 4 * h_l, 4 * w_l)
        logits = F.interpolate(
            logits.unsqueeze(0), size=output_size, mode="bilinear", align_corners=False
        )[0]

        iou_pred = torch.sigmoid(self.iou_head(iou_out))
        object_logit = self.occlusion_head(occl_out)[0]
        return SegmentationOutput(mask_logits=logits, iou_pred=iou_pred, object_logit=object_logit)


def finalize_mask(output: SegmentationOutput, threshold: float = 0.5) -> torch.Tensor:
    """Binary [h, w] mask: empty when the occlusion head says the object is
    not visible, else the thresholded best-IoU candidate."""
    logits = output.mask_logits[output.selected_index]
    if output.object_score < 0.5:
        return torch.zeros_like(logits, dtype=torch.uint8)
    return (torch.sigmoid(logits) > threshold).to(torch.uint8)
