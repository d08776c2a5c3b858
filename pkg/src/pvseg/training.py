"""Losses and the interactive training simulation.

Each step samples an 8-frame sequence (or, with small probability, a single
frame treated as a length-1 video), prompts the first frame with a ground
truth mask / positive click / bounding box at 50/25/25, rolls the tracker
forward with memory updates, and injects one corrective click on a uniformly
chosen later frame — sampled from the prediction error region 90% of the
time and from the ground truth 10%.  The loss combines the weighted mask
loss, an L1 IoU-head loss, and an occlusion cross-entropy at 20:1:1.

Learning rates decay to zero on a cosine; the image encoder starts at 3e-4
with per-stage decay multipliers, everything else at 6e-5.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .data_synth import MaskAnnotation, VideoClip
from .encoder import NUM_STAGES
from .model import ModelConfig, ObjectTracker, PvsModel, save_checkpoint
from .prompting_decoding import Prompt, SegmentationOutput, finalize_mask

MASK_LOSS_WEIGHT = 20.0  # mask : iou : occlusion = 20 : 1 : 1


@dataclass
class LossBundle:
    mask_loss: torch.Tensor
    iou_loss: torch.Tensor
    object_loss: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return MASK_LOSS_WEIGHT * self.mask_loss + self.iou_loss + self.object_loss


@dataclass
class TrainConfig:
    epochs: int = 1
    steps_per_epoch: int | None = None  # defaults to the number of clips
    batch_size: int = 1
    seq_len: int = 8
    max_corrective_frames: int = 1
    prompt_probs: tuple[float, float, float] = (0.5, 0.25, 0.25)  # mask, click, box
    corrective_source_probs: tuple[float, float] = (0.9, 0.1)  # error region, gt
    lr_encoder: float = 3e-4
    lr_other: float = 6e-5
    stage_decay: float = 0.9
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    image_step_prob: float = 0.2  # treat a single frame as a length-1 video
    grad_clip_norm: float | None = 1.0  # global-norm clip; None disables
    seed: int = 0
    optimizer: str = "adamw"  # "sgd" is the plain-gradient-descent debug mode

    def __post_init__(self):
        if abs(sum(self.prompt_probs) - 1.0) > 1e-9:
            raise ValueError("prompt_probs must sum to 1")
        if abs(sum(self.corrective_source_probs) - 1.0) > 1e-9:
            raise ValueError("corrective_source_probs must sum to 1")
        if self.max_corrective_frames not in (0, 1):
            raise ValueError("at most one corrective frame is supported")


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def _check_binary(gt: torch.Tensor) -> None:
    if not torch.logical_or(gt == 0, gt == 1).all():
        raise ValueError("ground truth mask must be binary")


def weighted_mask_loss(pred_logits: torch.Tensor, gt: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Boundary-weighted BCE + weighted IoU loss for one [h, w] mask.

    Pixels whose 31x31 neighborhood disagrees with them (boundaries, thin
    structures, holes) get up to 6x weight.
    """
    if pred_logits.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred_logits.shape)} vs {tuple(gt.shape)}")
    gt = gt.to(pred_logits.dtype)
    _check_binary(gt)
    g = gt.unsqueeze(0).unsqueeze(0)
    local_mean = F.avg_pool2d(g, kernel_size=31, stride=1, padding=15)[0, 0]
    weight = 1.0 + 5.0 * (local_mean - gt).abs()

    bce = F.binary_cross_entropy_with_logits(pred_logits, gt, reduction="none")
    wbce = (weight * bce).sum() / weight.sum()

    prob = torch.sigmoid(pred_logits)
    inter = (weight * prob * gt).sum()
    union = (weight * (prob + gt - prob * gt)).sum()
    wiou = 1.0 - (inter + eps) / (union + eps)
    return wbce + wiou


def binary_iou_value(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """IoU of two binary masks; both-empty counts as 1."""
    pred = pred.float()
    gt = gt.float()
    inter = (pred * gt).sum()
    union = (pred + gt - pred * gt).sum()
    if float(union) == 0.0:
        return torch.ones((), dtype=pred.dtype, device=pred.device)
    return inter / union


def total_loss(
    mask_loss: torch.Tensor,
    iou_pred_selected: torch.Tensor,
    true_iou: torch.Tensor,
    object_logit: torch.Tensor,
    visible: bool,
) -> LossBundle:
    iou_loss = (iou_pred_selected - true_iou.detach()).abs()
    target = torch.tensor(1.0 if visible else 0.0, dtype=object_logit.dtype, device=object_logit.device)
    object_loss = F.binary_cross_entropy_with_logits(object_logit, target)
    return LossBundle(mask_loss=mask_loss, iou_loss=iou_loss, object_loss=object_loss)


def frame_loss(output: SegmentationOutput, gt: torch.Tensor, visible: bool) -> LossBundle:
    """Loss for one decoded frame, supervised on the selected candidate."""
    sel = output.selected_index
    logits = output.mask_logits[sel]
    mask_l = weighted_mask_loss(logits, gt)
    pred_bin = (torch.sigmoid(logits) > 0.5).to(gt.dtype)
    true_iou = binary_iou_value(pred_bin, gt)
    return total_loss(mask_l, output.iou_pred[sel], true_iou, output.object_logit, visible)


# --------------------------------------------------------------------------
# Prompt simulation
# --------------------------------------------------------------------------


def tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    """(x0, y0, x1, y1) bounding box of a nonempty binary mask."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise ValueError("cannot box an empty mask")
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def interior_click_point(region: np.ndarray) -> tuple[int, int]:
    """(x, y) of the region pixel farthest from the region boundary (image
    borders count as boundary); ties break row-major."""
    if region.sum() == 0:
        raise ValueError("cannot click an empty region")
    dist = ndimage.distance_transform_edt(np.pad(region.astype(bool), 1))[1:-1, 1:-1]
    y, x = np.unravel_index(int(np.argmax(dist)), region.shape)
    return int(x), int(y)


def largest_component(region: np.ndarray) -> np.ndarray:
    """Largest 8-connected component of a nonempty binary region; size ties
    break toward the first label in scan order."""
    labels, count = ndimage.label(region, structure=np.ones((3, 3)))
    if count == 0:
        raise ValueError("region is empty")
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, count + 1))
    best = int(np.argmax(sizes)) + 1
    return labels == best


def sample_initial_prompt(gt: np.ndarray, rng: np.random.Generator, frame_index: int = 0) -> Prompt:
    """Ground-truth mask (p=.5), positive click from it (.25), or its tight
    bounding box (.25)."""
    if gt.sum() == 0:
        raise ValueError("empty ground truth on the prompt frame")
    u = rng.random()
    if u < 0.5:
        return Prompt.from_mask(gt, frame_index)
    if u < 0.75:
        ys, xs = np.nonzero(gt)
        i = int(rng.integers(len(ys)))
        return Prompt.click(int(xs[i]), int(ys[i]), "positive", frame_index)
    x0, y0, x1, y1 = tight_box(gt)
    return Prompt.from_box(x0, y0, x1, y1, frame_index)


@dataclass
class ClickSample:
    prompt: Prompt
    source: str  # "error" | "gt"


def sample_corrective_click(
    pred: np.ndarray,
    gt: np.ndarray,
    rng: np.random.Generator | None = None,
    deterministic: bool = False,
    frame_index: int = 0,
    source_probs: tuple[float, float] = (0.9, 0.1),
) -> ClickSample | None:
    """Corrective click from the prediction/gt error region.

    Stochastic mode samples a uniform pixel of the error region with
    probability ``source_probs[0]``, else a uniform ground-truth pixel.
    Deterministic mode (used by the robot user) clicks the interior-most
    pixel of the largest connected error component.  Click polarity follows
    the clicked pixel: positive on false negatives, negative on false
    positives.  Empty error region falls back to a positive gt click; both
    masks empty yields None (nothing to refine).
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    error = pred ^ gt

    def click_at(x: int, y: int) -> Prompt:
        polarity = "positive" if gt[y, x] else "negative"
        return Prompt.click(x, y, polarity, frame_index)

    if not error.any():
        if not gt.any():
            return None
        if deterministic:
            x, y = interior_click_point(gt)
        else:
            if rng is None:
                raise ValueError("stochastic sampling requires an rng")
            ys, xs = np.nonzero(gt)
            i = int(rng.integers(len(ys)))
            x, y = int(xs[i]), int(ys[i])
        return ClickSample(click_at(x, y), "gt")

    if deterministic:
        component = largest_component(error)
        x, y = interior_click_point(component)
        return ClickSample(click_at(x, y), "error")

    if rng is None:
        raise ValueError("stochastic sampling requires an rng")
    use_gt = rng.random() >= source_probs[0] and gt.any()
    region, source = (gt, "gt") if use_gt else (error, "error")
    ys, xs = np.nonzero(region)
    i = int(rng.integers(len(ys)))
    return ClickSample(click_at(int(xs[i]), int(ys[i])), source)


# --------------------------------------------------------------------------
# Schedule and optimizer
# --------------------------------------------------------------------------


def cosine_lr(base: float, step: int, total_steps: int) -> float:
    """Cosine decay from ``base`` at step 0 to exactly 0 at the final step."""
    if total_steps <= 1:
        return base
    progress = min(max(step / (total_steps - 1), 0.0), 1.0)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def build_param_groups(model: PvsModel, cfg: TrainConfig) -> list[dict]:
    """Encoder stem + stages get ``lr_encoder`` with per-stage decay
    multipliers stage_decay**(L - l); everything else gets ``lr_other``."""
    groups = []
    enc = model.image_encoder
    groups.append(
        {
            "params": list(enc.stem.parameters()),
            "base_lr": cfg.lr_encoder * cfg.stage_decay**NUM_STAGES,
            "lr": cfg.lr_encoder * cfg.stage_decay**NUM_STAGES,
            "name": "encoder.stem",
        }
    )
    for l, stage in enumerate(enc.stages, start=1):
        scale = cfg.stage_decay ** (NUM_STAGES - l)
        groups.append(
            {
                "params": list(stage.parameters()),
                "base_lr": cfg.lr_encoder * scale,
                "lr": cfg.lr_encoder * scale,
                "name": f"encoder.stage{l}",
            }
        )
    encoder_ids = {id(p) for g in groups for p in g["params"]}
    rest = [p for p in model.parameters() if id(p) not in encoder_ids]
    groups.append({"params": rest, "base_lr": cfg.lr_other, "lr": cfg.lr_other, "name": "other"})
    return groups


def build_optimizer(model: PvsModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    groups = build_param_groups(model, cfg)
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(groups, betas=cfg.betas, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(groups, momentum=0.0, weight_decay=0.0)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def schedule_lrs(optimizer: torch.optim.Optimizer, step: int, total_steps: int) -> None:
    for group in optimizer.param_groups:
        group["lr"] = cosine_lr(group["base_lr"], step, total_steps)


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


def run_training_sequence(
    model: PvsModel,
    clips: list[VideoClip],
    annotations: list[MaskAnnotation],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> LossBundle:
    """One interactive rollout: prompt frame 0, roll forward with memory,
    one corrective click on a random later frame; mean loss over frames."""
    as_image = rng.random() < cfg.image_step_prob
    for _ in range(64):
        k = int(rng.integers(len(clips)))
        clip, ann = clips[k], annotations[k]
        n = clip.num_frames
        obj = int(rng.integers(ann.masks.shape[0]))
        if as_image or n < cfg.seq_len:
            seq_len = 1
            start = int(rng.integers(n))
        else:
            seq_len = cfg.seq_len
            start = int(rng.integers(n - seq_len + 1))
        gt_seq = ann.masks[obj, start : start + seq_len]
        if gt_seq[0].sum() > 0:
            break
    else:
        raise RuntimeError("could not sample a sequence with a visible prompt-frame object")

    video = clip.frames[start : start + seq_len]
    tracker = ObjectTracker(model, video, inference=False, rng=rng)
    tracker.begin()

    initial = sample_initial_prompt(gt_seq[0], rng, frame_index=0)
    corrective_t = None
    if seq_len > 1 and cfg.max_corrective_frames > 0:
        corrective_t = int(rng.integers(1, seq_len))

    losses: list[LossBundle] = []
    for t in range(seq_len):
        prompts = [initial] if t == 0 else []
        out = tracker.predict(t, prompts)
        if t == corrective_t:
            pred_mask = finalize_mask(out).cpu().numpy()
            click = sample_corrective_click(
                pred_mask, gt_seq[t], rng, source_probs=cfg.corrective_source_probs, frame_index=t
            )
            if click is not None:
                out = tracker.predict(t, [click.prompt])
        gt_t = torch.as_tensor(gt_seq[t], dtype=out.mask_logits.dtype, device=out.mask_logits.device)
        losses.append(frame_loss(out, gt_t, visible=bool(gt_seq[t].sum() > 0)))
        tracker.advance(t, finalize_mask(out), is_prompt_frame=(t == 0))

    def mean(vals):
        return torch.stack(vals).mean()

    return LossBundle(
        mask_loss=mean([b.mask_loss for b in losses]),
        iou_loss=mean([b.iou_loss for b in losses]),
        object_loss=mean([b.object_loss for b in losses]),
    )


def train(
    cfg: TrainConfig,
    clips: list[VideoClip],
    annotations: list[MaskAnnotation],
    out_dir: str,
    model_config: ModelConfig | None = None,
    checkpoint_name: str = "checkpoint.pt",
) -> str:
    """Train a model from scratch; returns the checkpoint path.

    Deterministic for a fixed (cfg.seed, dataset): model init, sampling and
    memory selection all derive from the seed.
    """
    if not clips:
        raise ValueError("empty dataset")
    os.makedirs(out_dir, exist_ok=True)
    # Multi-threaded conv backward partitions work differently across runs
    # once oneDNN caches warm up, which breaks bit-identical checkpoints.
    old_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        return _train_loop(cfg, clips, annotations, out_dir, model_config, checkpoint_name)
    finally:
        torch.set_num_threads(old_threads)


def _train_loop(
    cfg: TrainConfig,
    clips: list[VideoClip],
    annotations: list[MaskAnnotation],
    out_dir: str,
    model_config: ModelConfig | None,
    checkpoint_name: str,
) -> str:
    torch.manual_seed(cfg.seed)
    model = PvsModel(model_config)
    model.train()
    rng = np.random.default_rng(cfg.seed)
    optimizer = build_optimizer(model, cfg)

    steps_per_epoch = cfg.steps_per_epoch or len(clips)
    total_steps = cfg.epochs * steps_per_epoch
    metrics_path = os.path.join(out_dir, "metrics.jsonl")

    step = 0
    with open(metrics_path, "w") as metrics:
        for _ in range(cfg.epochs):
            for _ in range(steps_per_epoch):
                schedule_lrs(optimizer, step, total_steps)
                optimizer.zero_grad()
                sums = {"mask_loss": 0.0, "iou_loss": 0.0, "object_loss": 0.0, "total": 0.0}
                for _ in range(cfg.batch_size):
                    bundle = run_training_sequence(model, clips, annotations, cfg, rng)
                    (bundle.total / cfg.batch_size).backward()
                    for key in ("mask_loss", "iou_loss", "object_loss", "total"):
                        sums[key] += float(getattr(bundle, key).detach()) / cfg.batch_size
                if not all(math.isfinite(v) for v in sums.values()):
                    raise RuntimeError(f"non-finite loss at step {step}: {sums}")
                if cfg.grad_clip_norm is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
                optimizer.step()
                record = {
                    "step": step,
                    **{k: round(v, 6) for k, v in sums.items()},
                    "lr_encoder": optimizer.param_groups[NUM_STAGES]["lr"],
                    "lr_other": optimizer.param_groups[-1]["lr"],
                }
                metrics.write(json.dumps(record) + "\n")
                step += 1

    ckpt_path = os.path.join(out_dir, checkpoint_name)
    save_checkpoint(model, ckpt_path, extra={"train_config": dataclasses.asdict(cfg), "steps": step})
    return ckpt_path
