"""J&F metric and the interactive evaluation protocols.

All protocols drive a deterministic robot user: the initial click lands on
the interior-most pixel of the target, corrective clicks on the interior-most
pixel of the largest connected error component.

- online: initialize frame 0 with N_click clicks, propagate, and whenever a
  frame's IoU against ground truth drops below the pause threshold, stop,
  refine that frame with N_click corrective clicks, and resume from it
  (earlier frames keep their masks); at most N_frame pauses.
- offline: N_pass passes over the whole video; each pass after the first
  refines the lowest-IoU frame with N_click clicks and re-propagates with all
  accumulated prompts conditioning their frames.
- semi-VOS: a single first-frame prompt (clicks, box, or the ground-truth
  mask), one propagation, no refinement.

Protocols talk to a segmenter through three methods — ``begin()``,
``predict_mask(t, prompts)``, ``advance(t, mask, is_prompt_frame)`` — which
``ObjectTracker`` implements; tests substitute stubs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .prompting_decoding import Prompt
from .training import interior_click_point, sample_corrective_click, tight_box


@dataclass
class EvalConfig:
    n_click: int = 3
    n_frame: int = 3  # max online pauses
    n_pass: int = 3  # offline passes
    iou_pause_threshold: float = 0.75
    boundary_tolerance: float = 0.008  # fraction of the image diagonal

    def __post_init__(self):
        if self.n_click < 1:
            raise ValueError("n_click must be >= 1")
        if not (0 < self.iou_pause_threshold < 1):
            raise ValueError("iou_pause_threshold must be in (0, 1)")
        if not (0 < self.boundary_tolerance < 1):
            raise ValueError("boundary_tolerance must be in (0, 1)")


# --------------------------------------------------------------------------
# Metric
# --------------------------------------------------------------------------


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Per-frame IoU; both-empty counts as 1, one-empty as 0."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    p, g = pred.sum(), gt.sum()
    if p == 0 and g == 0:
        return 1.0
    if p == 0 or g == 0:
        return 0.0
    inter = np.logical_and(pred, gt).sum()
    union = np.logical_or(pred, gt).sum()
    return float(inter) / float(union)


def boundary_map(mask: np.ndarray) -> np.ndarray:
    """1-pixel boundary: foreground pixels with a background 4-neighbor,
    where outside the image counts as background."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def boundary_f_score(pred: np.ndarray, gt: np.ndarray, tol_px: float) -> float:
    """Boundary F-measure with matching radius ``tol_px`` (Euclidean)."""
    pb = np.argwhere(boundary_map(pred))
    gb = np.argwhere(boundary_map(gt))
    if len(pb) == 0 and len(gb) == 0:
        return 1.0
    if len(pb) == 0 or len(gb) == 0:
        return 0.0
    d2 = ((pb[:, None, :] - gb[None, :, :]) ** 2).sum(axis=2)
    tol2 = tol_px * tol_px
    precision = float((d2.min(axis=1) <= tol2).sum()) / len(pb)
    recall = float((d2.min(axis=0) <= tol2).sum()) / len(gb)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def boundary_tolerance_px(h: int, w: int, fraction: float) -> int:
    """Matching radius in pixels: ceil(fraction * diagonal), at least 1."""
    return max(1, math.ceil(fraction * math.hypot(h, w)))


def jf_metric(
    pred: np.ndarray, gt: np.ndarray, boundary_tolerance: float = 0.008
) -> tuple[float, float, float]:
    """Region similarity J, boundary accuracy F, and their mean, averaged
    over the frames of a [n, h, w] masklet pair."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim != 3:
        raise ValueError(f"masklets must be [n, h, w], got {pred.shape}")
    n, h, w = pred.shape
    tol = boundary_tolerance_px(h, w, boundary_tolerance)
    j = float(np.mean([mask_iou(pred[t], gt[t]) for t in range(n)]))
    f = float(np.mean([boundary_f_score(pred[t], gt[t], tol) for t in range(n)]))
    return j, f, (j + f) / 2.0


# --------------------------------------------------------------------------
# Robot user
# --------------------------------------------------------------------------


def robot_initial_interaction(segmenter, t: int, gt_t: np.ndarray, n_click: int):
    """N_click-click initialization of a frame: first click at the target's
    interior-most pixel, then deterministic corrective clicks against the
    evolving prediction.  Returns (prompts, final prediction)."""
    x, y = interior_click_point(gt_t)
    prompts = [Prompt.click(x, y, "positive", t)]
    pred = segmenter.predict_mask(t, prompts)
    for _ in range(n_click - 1):
        sample = sample_corrective_click(pred, gt_t, deterministic=True, frame_index=t)
        if sample is None:
            break
        prompts.append(sample.prompt)
        pred = segmenter.predict_mask(t, prompts)
    return prompts, pred


def robot_refinement(segmenter, t: int, gt_t: np.ndarray, pred: np.ndarray, n_click: int,
                     existing: list[Prompt] | None = None):
    """N_click deterministic corrective clicks on an already-predicted frame.
    Returns (new prompts, final prediction)."""
    existing = list(existing or [])
    new_prompts: list[Prompt] = []
    for _ in range(n_click):
        sample = sample_corrective_click(pred, gt_t, deterministic=True, frame_index=t)
        if sample is None:
            break
        new_prompts.append(sample.prompt)
        pred = segmenter.predict_mask(t, existing + new_prompts)
    return new_prompts, pred


# --------------------------------------------------------------------------
# Protocols
# --------------------------------------------------------------------------


@dataclass
class ClipResult:
    clip_id: str
    object_id: int
    j: float
    f: float
    jf: float
    pauses: list[dict] = field(default_factory=list)  # online: {frame, pre_iou, clicks}
    passes: list[dict] = field(default_factory=list)  # offline: {pass, frame, jf}
    clicks: int = 0

    def to_dict(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "object_id": self.object_id,
            "J": round(self.j, 6),
            "F": round(self.f, 6),
            "J&F": round(self.jf, 6),
            "pauses": self.pauses,
            "passes": self.passes,
            "clicks": self.clicks,
        }


@dataclass
class EvalReport:
    mode: str
    config: EvalConfig
    results: list[ClipResult] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    @property
    def mean_j(self) -> float:
        return float(np.mean([r.j for r in self.results])) if self.results else float("nan")

    @property
    def mean_f(self) -> float:
        return float(np.mean([r.f for r in self.results])) if self.results else float("nan")

    @property
    def mean_jf(self) -> float:
        return float(np.mean([r.jf for r in self.results])) if self.results else float("nan")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "config": {
                "n_click": self.config.n_click,
                "n_frame": self.config.n_frame,
                "n_pass": self.config.n_pass,
                "iou_pause_threshold": self.config.iou_pause_threshold,
                "boundary_tolerance": self.config.boundary_tolerance,
            },
            "results": [r.to_dict() for r in self.results],
            "skipped": self.skipped,
            "mean_J": round(self.mean_j, 6) if self.results else None,
            "mean_F": round(self.mean_f, 6) if self.results else None,
            "mean_J&F": round(self.mean_jf, 6) if self.results else None,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def run_online_eval(
    segmenter, gt: np.ndarray, cfg: EvalConfig, clip_id: str = "", object_id: int = 0
) -> ClipResult:
    """Single-pass propagation with pause-and-refine on unreliable frames."""
    n = gt.shape[0]
    masks = np.zeros_like(gt, dtype=np.uint8)
    segmenter.begin()
    prompts0, pred0 = robot_initial_interaction(segmenter, 0, gt[0], cfg.n_click)
    masks[0] = pred0
    segmenter.advance(0, pred0, is_prompt_frame=True)
    clicks = len(prompts0)

    pauses: list[dict] = []
    for t in range(1, n):
        pred = segmenter.predict_mask(t)
        iou = mask_iou(pred, gt[t])
        if iou < cfg.iou_pause_threshold and len(pauses) < cfg.n_frame:
            new_prompts, pred = robot_refinement(segmenter, t, gt[t], pred, cfg.n_click)
            pauses.append({"frame": t, "pre_iou": round(iou, 6), "clicks": len(new_prompts)})
            clicks += len(new_prompts)
        masks[t] = pred
        segmenter.advance(t, pred)

    j, f, jf = jf_metric(masks, gt, cfg.boundary_tolerance)
    return ClipResult(clip_id, object_id, j, f, jf, pauses=pauses, clicks=clicks)


def run_offline_eval(
    segmenter, gt: np.ndarray, cfg: EvalConfig, clip_id: str = "", object_id: int = 0
) -> ClipResult:
    """N_pass whole-video passes, refining the worst frame each pass."""
    n = gt.shape[0]
    prompts_by_frame: dict[int, list[Prompt]] = {}
    masks = np.zeros_like(gt, dtype=np.uint8)
    clicks = 0
    passes: list[dict] = []

    def full_pass() -> np.ndarray:
        out = np.zeros_like(gt, dtype=np.uint8)
        segmenter.begin()
        for t in range(n):
            out[t] = segmenter.predict_mask(t, prompts_by_frame.get(t, []))
            segmenter.advance(t, out[t], is_prompt_frame=(t == 0))
        return out

    for pass_i in range(cfg.n_pass):
        if pass_i == 0:
            segmenter.begin()
            prompts0, pred0 = robot_initial_interaction(segmenter, 0, gt[0], cfg.n_click)
            prompts_by_frame[0] = prompts0
            clicks += len(prompts0)
            masks[0] = pred0
            segmenter.advance(0, pred0, is_prompt_frame=True)
            for t in range(1, n):
                masks[t] = segmenter.predict_mask(t)
                segmenter.advance(t, masks[t])
        else:
            ious = [mask_iou(masks[t], gt[t]) for t in range(n)]
            t_star = int(np.argmin(ious))
            # Replay the current pass up to the worst frame, then refine it.
            segmenter.begin()
            for t in range(t_star):
                segmenter.advance(t, masks[t], is_prompt_frame=(t == 0))
            new_prompts, _ = robot_refinement(
                segmenter, t_star, gt[t_star], masks[t_star], cfg.n_click,
                existing=prompts_by_frame.get(t_star, []),
            )
            prompts_by_frame.setdefault(t_star, []).extend(new_prompts)
            clicks += len(new_prompts)
            masks = full_pass()
            passes.append({"pass": pass_i + 1, "frame": t_star, "clicks": len(new_prompts)})

        j, f, jf = jf_metric(masks, gt, cfg.boundary_tolerance)
        if pass_i == 0:
            passes.append({"pass": 1, "frame": 0, "clicks": len(prompts_by_frame[0])})
        passes[-1]["J&F"] = round(jf, 6)

    j, f, jf = jf_metric(masks, gt, cfg.boundary_tolerance)
    return ClipResult(clip_id, object_id, j, f, jf, passes=passes, clicks=clicks)


SEMIVOS_PROMPT_KINDS = ("click", "box", "mask")


def run_semivos(
    segmenter,
    gt: np.ndarray,
    prompt_kind: str,
    cfg: EvalConfig,
    clip_id: str = "",
    object_id: int = 0,
) -> ClipResult | dict:
    """First-frame-prompt propagation with no refinement.

    Returns a skip record (dict with a reason) when the object has no ground
    truth to prompt from.  When the prompt is the ground-truth mask itself,
    frame 0 is excluded from scoring.
    """
    if prompt_kind not in SEMIVOS_PROMPT_KINDS:
        raise ValueError(f"unknown semi-VOS prompt kind {prompt_kind!r}")
    n = gt.shape[0]
    if gt.sum() == 0:
        return {"clip_id": clip_id, "object_id": object_id, "reason": "object empty on all frames"}
    if gt[0].sum() == 0:
        return {"clip_id": clip_id, "object_id": object_id, "reason": "empty first-frame ground truth"}

    masks = np.zeros_like(gt, dtype=np.uint8)
    segmenter.begin()
    if prompt_kind == "click":
        prompts0, pred0 = robot_initial_interaction(segmenter, 0, gt[0], cfg.n_click)
        clicks = len(prompts0)
    elif prompt_kind == "box":
        x0, y0, x1, y1 = tight_box(gt[0])
        prompts0 = [Prompt.from_box(x0, y0, x1, y1, 0)]
        pred0 = segmenter.predict_mask(0, prompts0)
        clicks = 0
    else:
        prompts0 = [Prompt.from_mask(gt[0], 0)]
        pred0 = segmenter.predict_mask(0, prompts0)
        clicks = 0
    masks[0] = pred0
    segmenter.advance(0, pred0, is_prompt_frame=True)
    for t in range(1, n):
        masks[t] = segmenter.predict_mask(t)
        segmenter.advance(t, masks[t])

    start = 1 if prompt_kind == "mask" else 0
    j, f, jf = jf_metric(masks[start:], gt[start:], cfg.boundary_tolerance)
    return ClipResult(clip_id, object_id, j, f, jf, clicks=clicks)


def evaluate_dataset(
    make_segmenter,
    clips,
    annotations,
    mode: str,
    cfg: EvalConfig,
    prompt_kind: str = "click",
) -> EvalReport:
    """Run one protocol over every (clip, object) pair.

    ``make_segmenter(clip)`` must build a fresh segmenter for the clip's
    video; objects whose protocol preconditions fail are recorded as skipped.
    """
    report = EvalReport(mode=mode, config=cfg)
    for k, (clip, ann) in enumerate(zip(clips, annotations)):
        clip_id = f"clip_{k}"
        for obj in range(ann.masks.shape[0]):
            gt = ann.masks[obj]
            segmenter = make_segmenter(clip)
            if mode in ("online", "offline") and gt[0].sum() == 0:
                report.skipped.append(
                    {"clip_id": clip_id, "object_id": obj, "reason": "empty first-frame ground truth"}
                )
                continue
            if mode == "online":
                result = run_online_eval(segmenter, gt, cfg, clip_id, obj)
            elif mode == "offline":
                result = run_offline_eval(segmenter, gt, cfg, clip_id, obj)
            elif mode == "semivos":
                result = run_semivos(segmenter, gt, prompt_kind, cfg, clip_id, obj)
                if isinstance(result, dict):
                    report.skipped.append(result)
                    continue
            else:
                raise ValueError(f"unknown evaluation mode {mode!r}")
            report.results.append(result)
    return report
