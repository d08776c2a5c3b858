"""Command-line entry points.

Subcommands:

- ``gen-data``  render a synthetic dataset to disk
- ``train``     train a model on a dataset directory
- ``eval``      run the online / offline / semi-VOS protocol on a dataset
- ``serve``     start the interactive session service
- ``ablation``  train + evaluate the full model against its ablations

Exit codes: 0 success, 2 invalid configuration or arguments, 1 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .data_synth import ConfigurationError, DatasetIntegrityError
from .prompting_decoding import PromptValidationError


def _load_json(path: str) -> dict:
    with open(path) as f:
        return json.load(f)


def cmd_gen_data(args) -> int:
    from .data_synth import synth_dataset, write_dataset

    spec = _load_json(args.config) if args.config else {}
    clips, anns = synth_dataset(spec, args.seed)
    manifest = write_dataset(clips, anns, args.out)
    print(f"wrote {len(clips)} clips to {args.out} (manifest: {manifest})")
    return 0


def cmd_train(args) -> int:
    from .data_synth import read_dataset
    from .model import ModelConfig
    from .training import TrainConfig, train

    raw = _load_json(args.config) if args.config else {}
    model_cfg = ModelConfig.from_dict(raw.pop("model")) if "model" in raw else None
    cfg = TrainConfig(**raw)
    clips, anns = read_dataset(args.data)
    ckpt = train(cfg, clips, anns, args.out, model_config=model_cfg)
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_eval(args) -> int:
    from .data_synth import read_dataset
    from .evaluation import EvalConfig, evaluate_dataset
    from .model import ObjectTracker, load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    clips, anns = read_dataset(args.data)
    cfg = EvalConfig(n_click=args.clicks, n_frame=args.frames, n_pass=args.passes)
    report = evaluate_dataset(
        lambda clip: ObjectTracker(model, clip.frames),
        clips,
        anns,
        mode=args.mode,
        cfg=cfg,
        prompt_kind=args.prompt_kind,
    )
    print(f"mode={report.mode} n_click={cfg.n_click} n_frame={cfg.n_frame} n_pass={cfg.n_pass}")
    print(f"{'clip':<10} {'obj':>3} {'J':>8} {'F':>8} {'J&F':>8}")
    for r in report.results:
        print(f"{r.clip_id:<10} {r.object_id:>3} {r.j:>8.4f} {r.f:>8.4f} {r.jf:>8.4f}")
    for s in report.skipped:
        print(f"{s['clip_id']:<10} {s['object_id']:>3} skipped: {s['reason']}")
    if report.results:
        print(f"{'mean':<10} {'':>3} {report.mean_j:>8.4f} {report.mean_f:>8.4f} {report.mean_jf:>8.4f}")
    if args.report:
        with open(args.report, "w") as f:
            f.write(report.to_json(indent=2))
        print(f"report: {args.report}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .model import load_checkpoint
    from .service import create_app

    model, _ = load_checkpoint(args.checkpoint)
    ui_dir = args.ui_dir if args.ui_dir and os.path.isdir(args.ui_dir) else None
    app = create_app(model, ui_dir=ui_dir)
    port = int(os.environ.get("PVSEG_PORT", args.port))
    uvicorn.run(app, host=args.host, port=port, log_level="warning")
    return 0


def cmd_ablation(args) -> int:
    from .ablation import run_ablation

    results = run_ablation(
        args.out,
        seeds=tuple(args.seeds),
        train_clips=args.train_clips,
        eval_clips=args.eval_clips,
        epochs=args.epochs,
        steps_per_epoch=args.steps_per_epoch,
        n_click=args.clicks,
    )
    for name, entry in results["variants"].items():
        print(f"{name:<14} mean J&F = {entry['mean_jf']:.4f}")
    if "margins_vs_full" in results:
        for name, margin in results["margins_vs_full"].items():
            print(f"full - {name:<14} = {margin:+.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pvseg", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--config", help="JSON dataset spec (see data_synth.DATASET_SPEC_DEFAULTS)")
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON train config; optional 'model' sub-object")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for checkpoint + metrics")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--mode", required=True, choices=["online", "offline", "semivos"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--clicks", type=int, default=3, help="clicks per interaction")
    p.add_argument("--frames", type=int, default=3, help="max online refinements")
    p.add_argument("--passes", type=int, default=3, help="offline passes")
    p.add_argument("--prompt-kind", default="click", choices=["click", "box", "mask"],
                   help="semi-VOS first-frame prompt kind")
    p.add_argument("--report", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="start the session service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--port", type=int, default=8000, help="port (env PVSEG_PORT overrides)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--ui-dir", help="static browser client directory to mount at /")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("ablation", help="run the directional ablation study")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--train-clips", type=int, default=200)
    p.add_argument("--eval-clips", type=int, default=50)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--steps-per-epoch", type=int, default=None)
    p.add_argument("--clicks", type=int, default=3)
    p.set_defaults(func=cmd_ablation)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, PromptValidationError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DatasetIntegrityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
