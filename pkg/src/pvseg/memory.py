"""Memory subsystem: encoding past predictions, selecting relevant frames,
and conditioning current features on them.

A ``MemoryBank`` pins the prompt-frame entry permanently and keeps a rolling
ring of up to ``capacity`` unprompted entries (oldest evicted first).  The
selector splits the ring into a local set (most recent ``local_window``
entries) and a global set (everything older), scores every candidate by the
dot product of its stored features with the current-frame query, turns each
set's scores into a softmax distribution, and picks ``y`` local plus ``x``
global entries either stochastically (sequential renormalized draws without
replacement) or greedily (``top_k``).  The prompt entry is always included
and never counts against the budget.

Entry features live in the memory embedding space (``mem_dim`` channels), so
similarity queries must be supplied in that space; the tracker passes the
memory encoder's projection of the current frame features.

Memory attention is a stack of pre-norm transformer blocks: self-attention
over the current frame's spatial tokens, cross-attention to the concatenated
memory tokens, and an MLP.  Spatial structure enters through 2D rotary
position embeddings on query/key coordinates; temporal structure enters
through a learned relative-offset embedding added to each entry's tokens, so
the output does not depend on the order of the selected list.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class MemoryEntry:
    features: torch.Tensor  # [mem_dim, h_L, w_L]
    mask_lowres: torch.Tensor  # bool [h_L, w_L]
    frame_index: int
    is_prompt_frame: bool = False

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError(f"frame_index must be >= 0, got {self.frame_index}")
        if self.mask_lowres.dtype != torch.bool:
            raise ValueError("mask_lowres must be a bool tensor")


class MemoryBank:
    """Prompt-frame entry (pinned) plus a bounded ring of unprompted entries
    ordered by frame index ascending."""

    def __init__(self, capacity: int = 20):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.prompt_entry: MemoryEntry | None = None
        self.ring: list[MemoryEntry] = []

    def set_prompt_entry(self, entry: MemoryEntry) -> None:
        entry.is_prompt_frame = True
        self.prompt_entry = entry

    def insert(self, entry: MemoryEntry) -> None:
        """Insert an unprompted entry, replacing any entry for the same frame
        and evicting the oldest once over capacity."""
        self.ring = [e for e in self.ring if e.frame_index != entry.frame_index]
        self.ring.append(entry)
        self.ring.sort(key=lambda e: e.frame_index)
        while len(self.ring) > self.capacity:
            self.ring.pop(0)

    def clear(self) -> None:
        self.prompt_entry = None
        self.ring = []

    def __len__(self) -> int:
        return len(self.ring) + (1 if self.prompt_entry is not None else 0)


@dataclass
class SelectionConfig:
    """How many memories to select: ``x`` from the global (older) set and
    ``y`` from the local (most recent) set, with x + y = z."""

    z: int = 6
    x: int = 3
    y: int = 3
    local_window: int = 6
    mode: str = "top_k"  # or "stochastic"
    uniform_scores: bool = False  # ablation: ignore similarity, sample uniformly

    def __post_init__(self):
        if self.x < 0 or self.y < 0:
            raise ValueError("x and y must be >= 0")
        if self.x + self.y != self.z:
            raise ValueError(f"x + y must equal z ({self.x} + {self.y} != {self.z})")
        if self.local_window < self.y:
            raise ValueError("local_window must be >= y")
        if self.mode not in ("top_k", "stochastic"):
            raise ValueError(f"unknown selection mode {self.mode!r}")


@dataclass
class SimilarityResult:
    """Scores, per-set softmax distributions, and the chosen ring indices
    (local picks then global picks, in draw order)."""

    scores_local: np.ndarray
    scores_global: np.ndarray
    dist_local: np.ndarray
    dist_global: np.ndarray
    chosen_local: list[int] = field(default_factory=list)
    chosen_global: list[int] = field(default_factory=list)
    prompt_included: bool = False

    @property
    def chosen_indices(self) -> list[int]:
        return list(self.chosen_local) + list(self.chosen_global)

    def selected_entries(self, bank: MemoryBank) -> list[MemoryEntry]:
        """Prompt entry first (when present), then picked ring entries in
        frame order."""
        out = [bank.prompt_entry] if self.prompt_included else []
        out.extend(bank.ring[i] for i in sorted(self.chosen_indices))
        return out


def _softmax(scores: np.ndarray) -> np.ndarray:
    if scores.size == 0:
        return scores
    e = np.exp(scores - scores.max())
    return e / e.sum()


def _draw_without_replacement(dist: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    """Sequential draws with renormalization, so indices never repeat. The
    first draw follows ``dist`` exactly."""
    remaining = list(range(len(dist)))
    probs = dist.astype(np.float64).copy()
    picks = []
    for _ in range(min(k, len(remaining))):
        p = probs / probs.sum()
        j = int(rng.choice(len(remaining), p=p))
        picks.append(remaining.pop(j))
        probs = np.delete(probs, j)
    return picks


def _top_k(dist: np.ndarray, frame_indices: list[int], k: int) -> list[int]:
    """Highest-probability picks; ties broken most-recent-first."""
    order = sorted(range(len(dist)), key=lambda i: (-dist[i], -frame_indices[i]))
    return order[: min(k, len(dist))]


def select_memories(
    bank: MemoryBank,
    query: torch.Tensor,
    cfg: SelectionConfig,
    rng: np.random.Generator | int | None = None,
) -> SimilarityResult:
    """Pick memories for the current frame.

    ``query`` must be feature-shaped like the stored entries ([mem_dim, h_L,
    w_L]); scores are plain dot products over all components.  Sets smaller
    than requested are taken whole and never backfilled from the other set.
    """
    ring = bank.ring
    n_local = min(cfg.local_window, len(ring))
    split = len(ring) - n_local
    global_idx = list(range(split))
    local_idx = list(range(split, len(ring)))

    qvec = query.detach().reshape(-1).to(torch.float64)

    def _scores(indices: list[int]) -> np.ndarray:
        if cfg.uniform_scores:
            return np.zeros(len(indices), dtype=np.float64)
        vals = [
            float(torch.dot(ring[i].features.detach().reshape(-1).to(torch.float64), qvec))
            for i in indices
        ]
        return np.asarray(vals, dtype=np.float64)

    scores_local = _scores(local_idx)
    scores_global = _scores(global_idx)
    dist_local = _softmax(scores_local)
    dist_global = _softmax(scores_global)

    if cfg.mode == "stochastic":
        if rng is None:
            raise ValueError("stochastic selection requires an rng or seed")
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        picks_local = _draw_without_replacement(dist_local, cfg.y, rng)
        picks_global = _draw_without_replacement(dist_global, cfg.x, rng)
    else:
        picks_local = _top_k(dist_local, [ring[i].frame_index for i in local_idx], cfg.y)
        picks_global = _top_k(dist_global, [ring[i].frame_index for i in global_idx], cfg.x)

    return SimilarityResult(
        scores_local=scores_local,
        scores_global=scores_global,
        dist_local=dist_local,
        dist_global=dist_global,
        chosen_local=[local_idx[i] for i in picks_local],
        chosen_global=[global_idx[i] for i in picks_global],
        prompt_included=bank.prompt_entry is not None,
    )


# --------------------------------------------------------------------------
# Memory encoder
# --------------------------------------------------------------------------


def downsample_mask(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Area-pool a [h, w] mask to ``size`` and threshold at 0.5 (strict)."""
    pooled = F.adaptive_avg_pool2d(mask.float().unsqueeze(0).unsqueeze(0), size)[0, 0]
    return pooled > 0.5


class MemoryEncoder(nn.Module):
    """Fuses downsampled mask features with projected frame features into a
    memory entry, via convolutions and an output projection."""

    def __init__(self, feat_dim: int = 256, mem_dim: int = 64):
        super().__init__()
        self.mem_dim = mem_dim
        self.feat_proj = nn.Conv2d(feat_dim, mem_dim, 1)
        self.mask_proj = nn.Sequential(
            nn.Conv2d(1, mem_dim, 3, padding=1),
            nn.GroupNorm(min(8, mem_dim), mem_dim),
            nn.ReLU(inplace=True),
        )
        self.fuse = nn.Sequential(
            nn.Conv2d(mem_dim, mem_dim, 3, padding=1),
            nn.GroupNorm(min(8, mem_dim), mem_dim),
            nn.ReLU(inplace=True),
        )
        self.out_proj = nn.Conv2d(mem_dim, mem_dim, 1)

    def project_query(self, features: torch.Tensor) -> torch.Tensor:
        """Project current-frame features into the memory embedding space,
        for similarity scoring against stored entries."""
        return self.feat_proj(features.unsqueeze(0))[0]

    def forward(
        self,
        features: torch.Tensor,
        mask: torch.Tensor,
        frame_index: int,
        is_prompt_frame: bool = False,
    ) -> MemoryEntry:
        if features.ndim != 3:
            raise ValueError(f"features must be [c, h_L, w_L], got {tuple(features.shape)}")
        if mask.ndim != 2:
            raise ValueError(f"mask must be [h, w], got {tuple(mask.shape)}")
        h_l, w_l = features.shape[1], features.shape[2]
        if mask.shape[0] % h_l != 0 or mask.shape[1] % w_l != 0:
            raise ValueError(
                f"mask {tuple(mask.shape)} does not downsample evenly to ({h_l}, {w_l})"
            )
        mask_lowres = downsample_mask(mask, (h_l, w_l))
        x = self.feat_proj(features.unsqueeze(0)) + self.mask_proj(
            mask_lowres.float().unsqueeze(0).unsqueeze(0)
        )
        x = self.out_proj(self.fuse(x))
        return MemoryEntry(
            features=x[0],
            mask_lowres=mask_lowres,
            frame_index=frame_index,
            is_prompt_frame=is_prompt_frame,
        )


# --------------------------------------------------------------------------
# 2D rotary position embedding + attention
# --------------------------------------------------------------------------


def grid_positions(h: int, w: int, device=None) -> torch.Tensor:
    """Integer (row, col) coordinates for a flattened h x w grid, [h*w, 2]."""
    rows = torch.arange(h, device=device).repeat_interleave(w)
    cols = torch.arange(w, device=device).repeat(h)
    return torch.stack([rows, cols], dim=1)


def _rotate_pairs(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    even, odd = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def apply_rope_2d(x: torch.Tensor, positions: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotate per-head features by 2D position: first half of the head dim
    encodes rows, second half columns.

    x: [heads, T, head_dim] with head_dim divisible by 4; positions: [T, 2].
    """
    head_dim = x.shape[-1]
    if head_dim % 4 != 0:
        raise ValueError("head_dim must be divisible by 4 for 2D rotary embedding")
    half = head_dim // 2
    quarter = half // 2
    inv_freq = 1.0 / base ** (
        torch.arange(quarter, device=x.device, dtype=x.dtype) / quarter
    )
    ang_r = positions[:, 0].to(x.dtype).unsqueeze(-1) * inv_freq  # [T, quarter]
    ang_c = positions[:, 1].to(x.dtype).unsqueeze(-1) * inv_freq
    row_part = _rotate_pairs(x[..., :half], torch.cos(ang_r), torch.sin(ang_r))
    col_part = _rotate_pairs(x[..., half:], torch.cos(ang_c), torch.sin(ang_c))
    return torch.cat([row_part, col_part], dim=-1)


class AttentionLayer(nn.Module):
    """Multi-head attention over unbatched token sequences, with optional 2D
    rotary embedding of query/key spatial coordinates."""

    def __init__(self, dim: int, num_heads: int, kv_dim: int | None = None, rope_base: float = 10000.0):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError("dim must divide evenly into heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.rope_base = rope_base
        kv_dim = kv_dim if kv_dim is not None else dim
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        t = x.shape[0]
        return x.view(t, self.num_heads, self.head_dim).transpose(0, 1)  # [H, T, hd]

    def forward(
        self,
        q_in: torch.Tensor,
        k_in: torch.Tensor,
        v_in: torch.Tensor,
        q_pos: torch.Tensor | None = None,
        k_pos: torch.Tensor | None = None,
    ) -> torch.Tensor:
        q = self._split(self.q_proj(q_in))
        k = self._split(self.k_proj(k_in))
        v = self._split(self.v_proj(v_in))
        if q_pos is not None:
            q = apply_rope_2d(q, q_pos, self.rope_base)
        if k_pos is not None:
            k = apply_rope_2d(k, k_pos, self.rope_base)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(0, 1).reshape(q_in.shape[0], -1)
        return self.out_proj(out)


class MemoryAttentionBlock(nn.Module):
    def __init__(self, dim: int, mem_dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = AttentionLayer(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = AttentionLayer(dim, num_heads, kv_dim=mem_dim)
        self.norm3 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, grid_pos, mem_tokens=None, mem_pos=None):
        y = self.norm1(x)
        x = x + self.self_attn(y, y, y, q_pos=grid_pos, k_pos=grid_pos)
        if mem_tokens is not None and mem_tokens.shape[0] > 0:
            y = self.norm2(x)
            x = x + self.cross_attn(y, mem_tokens, mem_tokens, q_pos=grid_pos, k_pos=mem_pos)
        x = x + self.mlp(self.norm3(x))
        return x


class MemoryAttention(nn.Module):
    """Conditions current-frame features on selected memory entries.

    With no memories selected (first frame), cross-attention is skipped and
    only self-attention plus the MLP run.
    """

    def __init__(
        self,
        dim: int = 256,
        mem_dim: int = 64,
        num_blocks: int = 4,
        num_heads: int = 4,
        mlp_ratio: float = 2.0,
        max_offset: int = 32,
    ):
        super().__init__()
        self.max_offset = max_offset
        self.offset_embed = nn.Embedding(max_offset + 1, mem_dim)
        self.blocks = nn.ModuleList(
            MemoryAttentionBlock(dim, mem_dim, num_heads, mlp_ratio) for _ in range(num_blocks)
        )

    def _memory_tokens(
        self, entries: list[MemoryEntry], frame_index: int
    ) -> tuple[torch.Tensor | None, torch.Tensor | None]:
        if not entries:
            return None, None
        toks, pos = [], []
        for e in entries:
            c, h, w = e.features.shape
            offset = min(max(frame_index - e.frame_index, 0), self.max_offset)
            t = e.features.reshape(c, h * w).transpose(0, 1)  # [h*w, mem_dim]
            idx = torch.tensor(offset, device=t.device)
            toks.append(t + self.offset_embed(idx))
            pos.append(grid_positions(h, w, device=t.device))
        return torch.cat(toks, dim=0), torch.cat(pos, dim=0)

    def forward(
        self, feat: torch.Tensor, entries: list[MemoryEntry], frame_index: int
    ) -> torch.Tensor:
        c, h, w = feat.shape
        x = feat.reshape(c, h * w).transpose(0, 1)  # [h*w, dim]
        grid_pos = grid_positions(h, w, device=feat.device)
        mem_tokens, mem_pos = self._memory_tokens(entries, frame_index)
        for block in self.blocks:
            x = block(x, grid_pos, mem_tokens, mem_pos)
        return x.transpose(0, 1).reshape(c, h, w)
