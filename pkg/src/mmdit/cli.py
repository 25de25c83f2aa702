"""Command-line entry point: data generation, training, animation, dataset
filtering, and property verification.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error. --seed
falls back to the MMDIT_SEED environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import synthface, video
from .datafilter import GateThresholds, aggregate, parse_manifest, render_report_text, report_to_dict
from .diffusion import NoiseSchedule
from .errors import ConfigError, MmditError
from .model import ModelConfig
from .pipeline import AnimationModel, animate
from .training import make_stage_plan, run_stage
from .verify import run_suites

DEFAULT_SEED = 0


def _seed_from(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MMDIT_SEED")
    return int(env) if env else DEFAULT_SEED


def _parse_overrides(pairs):
    """dotted.key=value pairs -> nested dict with JSON-decoded leaves."""
    root = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = root
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return root


def _deep_update(base, extra):
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def _load_run_config(args):
    config = {"model": {}, "stages": {}, "diffusion": {}}
    if getattr(args, "config", None):
        with open(args.config) as f:
            _deep_update(config, json.load(f))
    _deep_update(config, _parse_overrides(getattr(args, "override", None)))
    return config


def _schedule_from(config):
    d = config.get("diffusion", {})
    return NoiseSchedule.linear(
        n_steps=int(d.get("n_steps", 1000)),
        beta_start=float(d.get("beta_start", 1e-4)),
        beta_end=float(d.get("beta_end", 0.02)),
    )


# ---- commands -----------------------------------------------------------------


def cmd_gen_data(args):
    seed = _seed_from(args)
    profiles = args.profiles.split(",")
    clips = synthface.generate_corpus(args.n_clips, args.frames, profiles, seed, args.size)
    synthface.save_corpus(clips, args.out, seed=seed, fps=args.fps)
    print(f"wrote {len(clips)} clips ({args.frames} frames, {args.size}x{args.size}) to {args.out}")
    return 0


def cmd_train(args):
    seed = _seed_from(args)
    config = _load_run_config(args)
    cfg = ModelConfig(**config.get("model", {}))
    stage = args.stage
    if stage == 1:
        if args.init_from:
            model, meta = AnimationModel.load(args.init_from, expect_config=cfg)
            if meta.get("stage") != 1:
                raise ConfigError(f"stage-1 resume needs a stage-1 checkpoint, got {meta}")
        elif args.from_scratch:
            model = AnimationModel.build(cfg, seed)
        else:
            raise ConfigError("stage 1 requires --from-scratch or --init-from")
    else:
        if not args.init_from:
            raise ConfigError(f"stage {stage} requires --init-from with a stage-{stage - 1} checkpoint")
        model, meta = AnimationModel.load(args.init_from, expect_config=cfg)
        prev = meta.get("stage")
        if prev not in (stage - 1, stage):
            raise ConfigError(f"stage {stage} needs a stage-{stage - 1} checkpoint, found stage {prev}")
        children = np.random.SeedSequence(seed).spawn(2)
        if stage == 2 and not model.has_audio:
            model.add_audio_layers(children[0].entropy % (2**32))
        if stage == 3 and not model.has_temporal:
            model.add_temporal_layers(children[1].entropy % (2**32))

    stage_over = config.get("stages", {}).get(str(stage), {})
    plan = make_stage_plan(stage, stage_over, ablate_ma_ml=args.ablate_ma_ml)
    schedule = _schedule_from(config)
    clips = synthface.load_corpus(args.corpus)

    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, f"checkpoint_stage{stage}.mmt")
    log_path = os.path.join(args.out, f"train_stage{stage}.jsonl")
    with open(log_path, "w") as log_file:
        losses = run_stage(model, clips, plan, schedule, seed=seed, log_file=log_file,
                           checkpoint_path=ckpt, checkpoint_every=args.ckpt_every)
    model.save(ckpt, {"stage": stage, "step": plan.steps, "seed": seed,
                      "ablate_ma_ml": args.ablate_ma_ml})
    print(f"stage {stage}: {plan.steps} steps, final loss {losses[-1]:.4f}; "
          f"checkpoint {ckpt}, log {log_path}")
    return 0


def cmd_animate(args):
    seed = _seed_from(args)
    model, _ = AnimationModel.load(args.checkpoint)
    ref_clip = synthface.load_clip(args.ref)
    ref_frame = ref_clip.frames[args.ref_frame]
    ref_lms = ref_clip.landmarks[args.ref_frame]

    driving_frames = driving_lms = None
    audio_track = None
    if args.driving:
        drive = synthface.load_clip(args.driving)
        driving_frames, driving_lms = drive.frames, drive.landmarks
        audio_track = drive.audio_track
    if args.audio:
        audio_track = synthface.read_audio_csv(args.audio)
    if args.modality == "V":
        audio_track = None

    drive_regions = None
    if args.drive_regions:
        drive_regions = ("eye", "mouth") if args.drive_regions == "both" else (args.drive_regions,)

    frames, info = animate(
        model, ref_frame, ref_lms, args.modality,
        driving_frames=driving_frames, driving_landmarks=driving_lms,
        audio_track=audio_track, drive_regions=drive_regions,
        alpha=args.alpha, rescale_mode=args.rescale_mode,
        audio_scale=args.audio_scale, steps=args.steps, mode=args.mode, seed=seed,
    )
    os.makedirs(args.out, exist_ok=True)
    video.write_video_dir(args.out, frames, fps=args.fps, seed=seed,
                          config_hash=info["config_hash"])
    with open(os.path.join(args.out, "animate_info.json"), "w") as f:
        json.dump(info, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {info['frames']} frames to {args.out}")
    return 0


def cmd_filter(args):
    items, errors = parse_manifest(args.manifest, lenient=args.lenient)
    for msg in errors:
        print(f"skipped: {msg}", file=sys.stderr)
    if not items:
        raise ConfigError(f"{args.manifest}: no usable rows")
    thresholds = GateThresholds().with_overrides(_parse_overrides(args.thresholds))
    report = aggregate(items, thresholds)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump(report_to_dict(report), f, indent=2, sort_keys=True)
        f.write("\n")
    text = render_report_text(report)
    with open(os.path.join(args.out, "report.txt"), "w") as f:
        f.write(text)
    print(text, end="")
    return 0


def cmd_verify(args):
    results = run_suites(args.suite)
    failed = 0
    for name, ok, detail in results:
        status = "PASS" if ok else "FAIL"
        print(f"[{status}] {name}: {detail}")
        failed += 0 if ok else 1
    print(f"{len(results) - failed}/{len(results)} properties passed")
    return 0 if failed == 0 else 1


# ---- argument plumbing -----------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="mmdit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic clip corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-clips", type=int, default=32)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--profiles", default="talking",
                   help=f"comma list from {synthface.PROFILES}")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--fps", type=int, default=8)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", help="JSON run config (model/stages/diffusion)")
    p.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init-from", help="checkpoint of the previous stage (or same stage to resume)")
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--ablate-ma-ml", action="store_true",
                   help="train without masked attention and masked loss")
    p.add_argument("--ckpt-every", type=int, default=0)
    p.add_argument("--override", action="append", metavar="dotted.key=value")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("animate", help="generate a video from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ref", required=True, help="clip directory supplying the reference frame")
    p.add_argument("--ref-frame", type=int, default=0)
    p.add_argument("--modality", required=True, choices=("A", "V", "A+V"))
    p.add_argument("--driving", help="driving clip directory (V and A+V)")
    p.add_argument("--audio", help="audio CSV; defaults to the driving clip's track")
    p.add_argument("--drive-regions", choices=("eye", "mouth", "both"))
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--rescale-mode", default="identity_anchored",
                   choices=("literal", "identity_anchored"))
    p.add_argument("--audio-scale", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--mode", default="deterministic", choices=("deterministic", "ancestral"))
    p.add_argument("--fps", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("filter", help="gate a clip manifest and report retention")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--thresholds", action="append", metavar="name=value",
                   help="override gate thresholds (facial_res, sync_c, sync_d, head_angle)")
    p.add_argument("--lenient", action="store_true",
                   help="report malformed lines and continue")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("verify", help="run the property suites")
    p.add_argument("--suite", action="append", required=True,
                   choices=("grad", "attention", "retarget", "schedule", "all"))
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MmditError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
