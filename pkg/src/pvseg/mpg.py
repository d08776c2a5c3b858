"""Memory prompt tokens: learnable tokens that harvest foreground context
from selected memories and enter the mask decoder as extra prompts.

The tokens cross-attend to flattened memory features with an additive mask
that is 0 at foreground positions and -inf elsewhere, so background memory
content carries exactly zero attention weight.  The attended tokens are then
refined by self-attention and an MLP.  When no foreground is masked in
anywhere (or there are no memories at all), the cross-attention step is
skipped and the raw tokens flow through, which keeps the softmax defined.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .memory import MemoryEntry


def build_memory_context(entries: list[MemoryEntry]) -> tuple[torch.Tensor, torch.Tensor]:
    """Flatten selected entries into (features [M, mem_dim], mask [M] bool)."""
    if not entries:
        return torch.zeros(0, 0), torch.zeros(0, dtype=torch.bool)
    feats, masks = [], []
    for e in entries:
        c = e.features.shape[0]
        feats.append(e.features.reshape(c, -1).transpose(0, 1))
        masks.append(e.mask_lowres.reshape(-1))
    return torch.cat(feats, dim=0), torch.cat(masks, dim=0)


class TokenSelfAttention(nn.Module):
    """Single-head self-attention over the token set."""

    def __init__(self, dim: int):
        super().__init__()
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.scale = dim**-0.5

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self.q_proj(x), self.k_proj(x), self.v_proj(x)
        attn = torch.softmax(q @ k.transpose(0, 1) * self.scale, dim=-1)
        return self.out_proj(attn @ v)


class MemoryPromptGenerator(nn.Module):
    """Produces refined memory prompt tokens [num_tokens, token_dim].

    ``masked=False`` disables the foreground mask (plain cross-attention),
    which is the ablation axis for removing masked cross-attention.
    """

    def __init__(
        self,
        token_dim: int = 128,
        mem_dim: int = 64,
        num_tokens: int = 3,
        masked: bool = True,
        mlp_ratio: float = 2.0,
    ):
        super().__init__()
        self.masked = masked
        self.tokens = nn.Parameter(torch.randn(num_tokens, token_dim) * 0.02)
        self.psi_q = nn.Linear(token_dim, token_dim)
        self.psi_k = nn.Linear(mem_dim, token_dim)
        self.psi_v = nn.Linear(mem_dim, token_dim)
        self.self_attn = TokenSelfAttention(token_dim)
        hidden = int(token_dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(token_dim, hidden), nn.ReLU(), nn.Linear(hidden, token_dim))

    def cross_attend(self, mem_features: torch.Tensor, mem_mask: torch.Tensor) -> torch.Tensor:
        """Masked cross-attention step; returns the updated tokens."""
        g = self.tokens
        if mem_features.shape[0] != mem_mask.shape[0]:
            raise ValueError(
                f"memory features ({mem_features.shape[0]} rows) and mask "
                f"({mem_mask.shape[0]} rows) disagree"
            )
        no_foreground = self.masked and not bool(mem_mask.any())
        if mem_features.shape[0] == 0 or no_foreground:
            return g
        q = self.psi_q(g)
        k = self.psi_k(mem_features)
        v = self.psi_v(mem_features)
        logits = q @ k.transpose(0, 1)
        if self.masked:
            bias = torch.where(
                mem_mask,
                torch.zeros((), dtype=logits.dtype, device=logits.device),
                torch.full((), float("-inf"), dtype=logits.dtype, device=logits.device),
            )
            logits = logits + bias.unsqueeze(0)
        attn = torch.softmax(logits, dim=-1)
        return attn @ v + g

    def forward(self, mem_features: torch.Tensor, mem_mask: torch.Tensor) -> torch.Tensor:
        g1 = self.cross_attend(mem_features, mem_mask)
        g2 = self.self_attn(g1)
        return self.mlp(g2)

    def from_entries(self, entries: list[MemoryEntry]) -> torch.Tensor:
        feats, mask = build_memory_context(entries)
        if feats.numel() == 0:
            feats = feats.to(self.tokens.device, self.tokens.dtype)
        return self.forward(feats, mask)
