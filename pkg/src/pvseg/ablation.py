"""Directional ablation runner: trains the full model, the selector-off
variant (take the most recent memories instead of relevance selection), and
the no-memory-prompt variant on the same synthetic data and seeds, then
scores all three with the online click protocol on held-out clips.

The point is ordering, not absolute numbers: the full model should beat both
ablations by a clear margin when averaged over seeds.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time

from .data_synth import synth_dataset
from .evaluation import EvalConfig, evaluate_dataset
from .memory import SelectionConfig
from .model import ModelConfig, ObjectTracker, load_checkpoint
from .training import TrainConfig, train

TRAIN_DATA_SPEC = {
    "num_clips": 200,
    "num_frames": 8,
    "height": 64,
    "width": 64,
    "num_objects": 2,
    "backgrounds": ["flat", "noise"],
    "occlusion_prob": 0.6,
}
EVAL_DATA_SPEC = {**TRAIN_DATA_SPEC, "num_clips": 50, "num_objects": 1}
TRAIN_DATA_SEED = 2024
EVAL_DATA_SEED = 7117


def variant_model_config(name: str) -> ModelConfig:
    if name == "full":
        return ModelConfig()
    if name == "selector_off":
        return ModelConfig(selection=SelectionConfig(z=6, x=0, y=6, local_window=6))
    if name == "mpg_off":
        return ModelConfig(use_mpg=False)
    raise ValueError(f"unknown ablation variant {name!r}")


VARIANTS = ("full", "selector_off", "mpg_off")


def run_ablation(
    out_dir: str,
    seeds: tuple[int, ...] = (0, 1, 2),
    train_clips: int = 200,
    eval_clips: int = 50,
    epochs: int = 3,
    steps_per_epoch: int | None = None,
    n_click: int = 3,
    variants: tuple[str, ...] = VARIANTS,
) -> dict:
    """Train and evaluate every (variant, seed) pair; returns and writes the
    results table with per-variant means and margins vs the full model."""
    os.makedirs(out_dir, exist_ok=True)
    train_spec = {**TRAIN_DATA_SPEC, "num_clips": train_clips}
    eval_spec = {**EVAL_DATA_SPEC, "num_clips": eval_clips}
    clips, anns = synth_dataset(train_spec, TRAIN_DATA_SEED)
    eval_clips_data, eval_anns = synth_dataset(eval_spec, EVAL_DATA_SEED)
    eval_cfg = EvalConfig(n_click=n_click)

    results: dict = {
        "train_spec": train_spec,
        "eval_spec": eval_spec,
        "seeds": list(seeds),
        "epochs": epochs,
        "n_click": n_click,
        "variants": {},
    }
    for name in variants:
        per_seed = {}
        for seed in seeds:
            t0 = time.time()
            run_dir = os.path.join(out_dir, f"{name}_seed{seed}")
            train_cfg = TrainConfig(epochs=epochs, steps_per_epoch=steps_per_epoch, seed=seed)
            ckpt = train(train_cfg, clips, anns, run_dir, model_config=variant_model_config(name))
            model, _ = load_checkpoint(ckpt)

            report = evaluate_dataset(
                lambda clip: ObjectTracker(model, clip.frames),
                eval_clips_data,
                eval_anns,
                mode="online",
                cfg=eval_cfg,
            )
            per_seed[str(seed)] = {
                "jf": round(report.mean_jf, 6),
                "j": round(report.mean_j, 6),
                "f": round(report.mean_f, 6),
                "train_seconds": round(time.time() - t0, 1),
            }
            _write(results, out_dir, name, per_seed)
        mean_jf = sum(s["jf"] for s in per_seed.values()) / len(per_seed)
        results["variants"][name] = {"seeds": per_seed, "mean_jf": round(mean_jf, 6)}
        _write(results, out_dir, name, per_seed)

    if "full" in results["variants"]:
        full = results["variants"]["full"]["mean_jf"]
        results["margins_vs_full"] = {
            name: round(full - v["mean_jf"], 6)
            for name, v in results["variants"].items()
            if name != "full"
        }
    path = os.path.join(out_dir, "results.json")
    with open(path, "w") as f:
        json.dump(results, f, indent=2)
    return results


def _write(results: dict, out_dir: str, name: str, per_seed: dict) -> None:
    """Checkpoint partial results so long runs are observable."""
    snapshot = dict(results)
    snapshot.setdefault("variants", {})
    snapshot["variants"] = {**results["variants"], name: {"seeds": per_seed}}
    with open(os.path.join(out_dir, "progress.json"), "w") as f:
        json.dump(snapshot, f, indent=2)
