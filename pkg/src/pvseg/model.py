"""Full promptable video segmentation model and its per-object tracker.

``PvsModel`` owns the trainable pieces: image encoder, temporal integrator,
memory encoder/attention, memory prompt generator, prompt encoder, and mask
decoder.  ``ObjectTracker`` runs one object through one video: it caches
per-frame features, selects and attends over the memory bank, decodes with
whatever prompts a frame carries, and commits finished masks back into the
bank.  Propagation from an arbitrary frame replays earlier frames' stored
masks into the bank without re-decoding them, which is exactly the online
interaction semantics (corrections only affect later frames).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .encoder import STAGE_CHANNELS, ImageEncoder
from .memory import MemoryAttention, MemoryBank, MemoryEncoder, SelectionConfig, select_memories
from .mpg import MemoryPromptGenerator
from .prompting_decoding import MaskDecoder, Prompt, PromptEncoder, SegmentationOutput, finalize_mask
from .tfi import TemporalFeatureIntegrator

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    in_channels: int = 3
    window: int = 4
    mem_dim: int = 64
    mem_capacity: int = 20
    attn_blocks: int = 4
    attn_heads: int = 4
    max_temporal_offset: int = 32
    decoder_dim: int = 128
    decoder_depth: int = 2
    decoder_heads: int = 4
    num_masks: int = 3
    mpg_tokens: int = 3
    use_mpg: bool = True
    use_masked_cross_attention: bool = True
    selection: SelectionConfig = field(default_factory=SelectionConfig)

    @property
    def feat_dim(self) -> int:
        return STAGE_CHANNELS[-1]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if isinstance(d.get("selection"), dict):
            d["selection"] = SelectionConfig(**d["selection"])
        return cls(**d)


class PvsModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        c = self.config
        self.image_encoder = ImageEncoder(c.in_channels)
        self.tfi = TemporalFeatureIntegrator(c.in_channels, window=c.window)
        self.memory_encoder = MemoryEncoder(feat_dim=c.feat_dim, mem_dim=c.mem_dim)
        self.memory_attention = MemoryAttention(
            dim=c.feat_dim,
            mem_dim=c.mem_dim,
            num_blocks=c.attn_blocks,
            num_heads=c.attn_heads,
            max_offset=c.max_temporal_offset,
        )
        self.mpg = (
            MemoryPromptGenerator(
                token_dim=c.decoder_dim,
                mem_dim=c.mem_dim,
                num_tokens=c.mpg_tokens,
                masked=c.use_masked_cross_attention,
            )
            if c.use_mpg
            else None
        )
        self.prompt_encoder = PromptEncoder(dim=c.decoder_dim)
        self.mask_decoder = MaskDecoder(
            dim=c.decoder_dim,
            feat_dim=c.feat_dim,
            depth=c.decoder_depth,
            num_heads=c.decoder_heads,
            num_masks=c.num_masks,
        )


class ObjectTracker:
    """Stateful propagation of a single object through a video.

    Interface used by training, evaluation protocols and the service:

    - ``begin()``                      reset memory and caches
    - ``predict(t, prompts)``          decode frame t against the current bank
    - ``predict_mask(t, prompts)``     same, finalized to a binary numpy mask
    - ``advance(t, mask, is_prompt_frame)``  commit a frame's mask to memory

    ``inference=True`` (the default) runs everything under ``torch.no_grad``
    and selects memories greedily; training constructs the tracker with
    ``inference=False`` and an rng for stochastic selection.
    """

    def __init__(
        self,
        model: PvsModel,
        video: np.ndarray | torch.Tensor,
        selection: SelectionConfig | None = None,
        inference: bool = True,
        rng: np.random.Generator | None = None,
    ):
        self.model = model
        param = next(model.parameters())
        self.video = torch.as_tensor(video, dtype=param.dtype, device=param.device)
        if self.video.ndim != 4:
            raise ValueError(f"video must be [n, c, h, w], got {tuple(self.video.shape)}")
        base = selection if selection is not None else model.config.selection
        mode = "top_k" if inference else "stochastic"
        self.selection = dataclasses.replace(base, mode=mode)
        self.inference = inference
        self.rng = rng
        self.bank = MemoryBank(capacity=model.config.mem_capacity)
        self._feat_cache: dict[int, torch.Tensor] = {}

    @property
    def num_frames(self) -> int:
        return self.video.shape[0]

    @property
    def frame_hw(self) -> tuple[int, int]:
        return self.video.shape[2], self.video.shape[3]

    def begin(self) -> None:
        self.bank.clear()
        self._feat_cache.clear()

    def _features(self, t: int) -> torch.Tensor:
        if t not in self._feat_cache:
            lo = max(0, t - self.model.config.window + 1)
            pyramid = self.model.image_encoder(self.video[t])
            feats = self.model.tfi(self.video[lo : t + 1], pyramid)
            self._feat_cache[t] = feats.final
        return self._feat_cache[t]

    def _predict(self, t: int, prompts: list[Prompt]) -> SegmentationOutput:
        feat = self._features(t)
        query = self.model.memory_encoder.project_query(feat)
        result = select_memories(self.bank, query, self.selection, self.rng)
        entries = result.selected_entries(self.bank)
        conditioned = self.model.memory_attention(feat, entries, t)
        memory_prompts = self.model.mpg.from_entries(entries) if self.model.mpg is not None else None
        h, w = self.frame_hw
        sparse, dense = self.model.prompt_encoder(list(prompts), (h, w), feat.shape[1:])
        return self.model.mask_decoder(conditioned, sparse, dense, memory_prompts, (h, w))

    def predict(self, t: int, prompts: list[Prompt] | tuple = ()) -> SegmentationOutput:
        if self.inference:
            with torch.no_grad():
                return self._predict(t, list(prompts))
        return self._predict(t, list(prompts))

    def predict_mask(self, t: int, prompts: list[Prompt] | tuple = ()) -> np.ndarray:
        return finalize_mask(self.predict(t, prompts)).cpu().numpy()

    def advance(self, t: int, mask: np.ndarray | torch.Tensor, is_prompt_frame: bool = False) -> None:
        feat = self._features(t)
        mask_t = torch.as_tensor(np.asarray(mask), dtype=feat.dtype, device=feat.device)
        if self.inference:
            with torch.no_grad():
                entry = self.model.memory_encoder(feat, mask_t, t, is_prompt_frame)
        else:
            entry = self.model.memory_encoder(feat, mask_t, t, is_prompt_frame)
        if is_prompt_frame:
            self.bank.set_prompt_entry(entry)
        else:
            self.bank.insert(entry)


def propagate_video(
    model: PvsModel,
    video: np.ndarray | torch.Tensor,
    prompts_by_frame: dict[int, list[Prompt]],
    selection: SelectionConfig | None = None,
    from_frame: int = 0,
    prior_masks: np.ndarray | None = None,
    prompt_frame: int | None = None,
) -> np.ndarray:
    """Run deterministic inference over a whole video, returning the masklet
    [n, h, w] uint8.

    ``from_frame > 0`` keeps frames before it exactly as given in
    ``prior_masks`` and replays them into the memory bank, so new prompts
    only influence frames from ``from_frame`` onward.
    """
    tracker = ObjectTracker(model, video, selection=selection, inference=True)
    n = tracker.num_frames
    h, w = tracker.frame_hw
    if not 0 <= from_frame < n:
        raise ValueError(f"from_frame {from_frame} outside [0, {n})")
    if prompt_frame is None:
        prompt_frame = min(prompts_by_frame) if prompts_by_frame else 0
    masks = np.zeros((n, h, w), dtype=np.uint8)
    if prior_masks is not None:
        masks[:] = prior_masks
    tracker.begin()
    for t in range(from_frame):
        tracker.advance(t, masks[t], is_prompt_frame=(t == prompt_frame))
    for t in range(from_frame, n):
        masks[t] = tracker.predict_mask(t, prompts_by_frame.get(t, []))
        tracker.advance(t, masks[t], is_prompt_frame=(t == prompt_frame))
    return masks


def save_checkpoint(model: PvsModel, path: str, extra: dict | None = None) -> str:
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str) -> tuple[PvsModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    model = PvsModel(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
