"""Operator entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
A plain-text key=value config file can seed any training flag; explicit
flags win over file values.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


def build_parser():
    p = argparse.ArgumentParser(prog="gnrf", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic multi-view scene")
    sp.add_argument("--preset", required=True,
                    choices=["orbiting-sphere", "static-box", "two-objects"])
    sp.add_argument("--out", required=True)
    sp.add_argument("--frames", type=int, default=None)
    sp.add_argument("--size", type=int, default=None)
    sp.add_argument("--cameras", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--open", action="store_true", help="omit the enclosing box")

    tp = sub.add_parser("train", help="train a model on a scene")
    tp.add_argument("--scene", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--config", default=None, help="key=value file; flags win")
    for flag, typ, default in TRAIN_FLAGS:
        tp.add_argument(f"--{flag}", type=typ, default=None)

    rp = sub.add_parser("render", help="render layers from a checkpoint")
    rp.add_argument("--ckpt", required=True)
    rp.add_argument("--scene", default=None, help="scene manifest (for --view)")
    rp.add_argument("--view", default=None)
    rp.add_argument("--pose-json", default=None,
                    help='{"rotation":[9],"translation":[3],"fx":..,"width":..}')
    rp.add_argument("--time", type=float, default=0.0)
    rp.add_argument("--layers", default="rgb")
    rp.add_argument("--stride", type=int, default=1)
    rp.add_argument("--out", required=True)

    kp = sub.add_parser("track", help="click-to-track: write mask and overlay")
    kp.add_argument("--ckpt", required=True)
    kp.add_argument("--scene", required=True)
    kp.add_argument("--click", required=True, help="u,v")
    kp.add_argument("--view", required=True)
    kp.add_argument("--time", type=float, default=0.0)
    kp.add_argument("--target-view", default=None)
    kp.add_argument("--target-time", type=float, default=None)
    kp.add_argument("--out", required=True)

    ep = sub.add_parser("eval", help="held-out metric report")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--scene", required=True)
    ep.add_argument("--out", default=None, help="write report JSON here")
    ep.add_argument("--stride", type=int, default=1)

    ap = sub.add_parser("ablate", help="train per swept value; compare")
    ap.add_argument("--scene", required=True)
    ap.add_argument("--axis", required=True, choices=["gears", "topk", "split", "sampling"])
    ap.add_argument("--values", required=True, help="comma-separated")
    ap.add_argument("--out", required=True)
    ap.add_argument("--config", default=None)
    for flag, typ, default in TRAIN_FLAGS:
        ap.add_argument(f"--{flag}", type=typ, default=None)

    vp = sub.add_parser("serve", help="HTTP render/track service on a checkpoint")
    vp.add_argument("--ckpt", required=True)
    vp.add_argument("--scene", default=None)
    vp.add_argument("--port", type=int, default=8090)
    vp.add_argument("--host", default="127.0.0.1")
    return p


# flag name, type, default (defaults mirror the trained hyperparameters)
TRAIN_FLAGS = [
    ("gears", int, 4),
    ("samples", int, 64),
    ("topk", int, 3),
    ("lambda-sem", float, 0.01),
    ("epochs-per-cycle", int, 3),
    ("final-epochs", int, 10),
    ("lr", float, 0.02),
    ("gear-lr", float, 0.02),
    ("lambda-stay", float, 1.0),
    ("v-stop", float, 2e-4),
    ("patch-size", int, 16),
    ("rays-per-batch", int, 2048),
    ("spatial-res", int, 64),
    ("feature-dim", int, 32),
    ("seed", int, 0),
    ("workers", int, 0),
    ("max-cycles", int, 50),
]


def read_config_file(path):
    """Plain key=value lines; '#' starts a comment."""
    known = {flag for flag, _, _ in TRAIN_FLAGS}
    out = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"{path}:{line_no}: unknown key {key!r}")
        out[key] = value
    return out


def resolve_train_settings(args):
    """Merge flag values over config file over defaults."""
    file_vals = read_config_file(args.config) if args.config else {}
    settings = {}
    for flag, typ, default in TRAIN_FLAGS:
        attr = flag.replace("-", "_")
        explicit = getattr(args, attr, None)
        if explicit is not None:
            settings[flag] = explicit
        elif flag in file_vals:
            settings[flag] = typ(file_vals[flag])
        else:
            settings[flag] = default
    return settings


def make_configs(settings, scene):
    from .field import ModelConfig
    from .train import TrainConfig
    mcfg = ModelConfig(
        n_gear=settings["gears"],
        m=settings["feature-dim"],
        d_feat=scene.d_feat,
        spatial_res=settings["spatial-res"],
        frames=scene.frames,
        bbox_min=tuple(scene.bbox_min),
        bbox_max=tuple(scene.bbox_max),
    )
    tcfg = TrainConfig(
        lambda_sem=settings["lambda-sem"],
        epochs_per_cycle=settings["epochs-per-cycle"],
        final_epochs=settings["final-epochs"],
        topk=settings["topk"],
        patch_size=settings["patch-size"],
        lr=settings["lr"],
        gear_lr=settings["gear-lr"],
        lambda_stay=settings["lambda-stay"],
        v_stop=settings["v-stop"],
        rays_per_batch=settings["rays-per-batch"],
        n_samples=settings["samples"],
        max_cycles=settings["max-cycles"],
        seed=settings["seed"],
        workers=settings["workers"],
    )
    return mcfg, tcfg


def cmd_synth(args):
    from .sceneio import preset_by_name, synth_scene
    over = {}
    if args.frames is not None:
        over["frames"] = args.frames
    if args.size is not None:
        over["image_size"] = args.size
    if args.cameras is not None:
        over["camera_count"] = args.cameras
    if args.seed is not None:
        over["seed"] = args.seed
    if args.open:
        over["enclosed"] = False
    preset = preset_by_name(args.preset, **over)
    synth_scene(preset, args.out)
    print(f"wrote scene to {args.out}")
    return 0


def cmd_train(args):
    from .field import GearedModel
    from .sceneio import load_scene, save_checkpoint
    from .train import train, write_log
    scene = load_scene(args.scene)
    settings = resolve_train_settings(args)
    mcfg, tcfg = make_configs(settings, scene)
    rng = np.random.default_rng(tcfg.seed)
    model = GearedModel.create(mcfg, rng)
    model, records = train(model, scene, tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.gnck",
                    cycle=sum(1 for r in records if r["kind"] == "cycle"))
    write_log(records, out / "train_log.jsonl")
    done = records[-1]
    print(f"trained: {done['epochs']} epochs, {done['cycles']} cycles, "
          f"{done['wall_seconds']:.0f}s; checkpoint at {out / 'model.gnck'}")
    return 0


def _camera_for_render(args, model):
    from .cameras import Camera
    from .sceneio import load_scene
    if args.view is not None:
        if args.scene is None:
            raise ValueError("--view needs --scene")
        return load_scene(args.scene).camera(args.view)
    if args.pose_json is None:
        raise ValueError("need --view or --pose-json")
    spec = json.loads(args.pose_json)
    return Camera(spec["fx"], spec["fy"], spec["cx"], spec["cy"], spec["width"],
                  spec["height"], np.asarray(spec["rotation"]).reshape(3, 3),
                  np.asarray(spec["translation"]))


def cmd_render(args):
    from .render import render_layers
    from .sceneio import load_checkpoint, write_ppm, write_tensor
    from .service import gear_to_rgb
    model, _, _ = load_checkpoint(args.ckpt)
    camera = _camera_for_render(args, model)
    layers = tuple(args.layers.split(","))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = render_layers(model, camera, args.time, layers=layers, stride=args.stride)
    tag = f"t{args.time:g}"
    if result.rgb is not None:
        write_ppm(out / f"rgb_{tag}.ppm", result.rgb)
    if result.gear is not None:
        write_ppm(out / f"gear_{tag}.ppm", gear_to_rgb(result.gear))
    if result.depth is not None:
        write_tensor(out / f"depth_{tag}.gnrf", result.depth)
    if result.semantic is not None:
        write_tensor(out / f"semantic_{tag}.gnrf", result.semantic)
    print(f"rendered {','.join(layers)} to {out}")
    return 0


def cmd_track(args):
    from .sceneio import load_checkpoint, load_scene, write_ppm
    from .track import OK, Tracker
    model, _, _ = load_checkpoint(args.ckpt)
    scene = load_scene(args.scene)
    u, v = (int(x) for x in args.click.split(","))
    camera = scene.camera(args.view)
    tracker = Tracker(model)
    session = tracker.start_session(camera, args.time, (u, v))
    if session.status != OK:
        print("no surface under click", file=sys.stderr)
        return 2
    target_cam = scene.camera(args.target_view) if args.target_view else camera
    target_time = args.target_time if args.target_time is not None else args.time
    mask = tracker.mask_at_view(session, target_cam, target_time)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "mask.json", "w") as f:
        json.dump({"width": mask.width, "height": mask.height, "runs": mask.rle(),
                   "status": tracker.status_at(session, target_cam, target_time)}, f)
    from .render import render_layers
    rgb = render_layers(model, target_cam, target_time, layers=("rgb",)).rgb
    overlay = rgb.copy()
    overlay[mask.values] = 0.5 * overlay[mask.values] + 0.5 * np.array([1.0, 0.2, 0.2])
    write_ppm(out / "overlay.ppm", overlay)
    print(f"wrote mask + overlay to {out}")
    return 0


def cmd_eval(args):
    from .sceneio import load_checkpoint, load_scene
    from .train import evaluate_holdout
    model, _, _ = load_checkpoint(args.ckpt)
    scene = load_scene(args.scene)
    report = evaluate_holdout(model, scene, stride=args.stride)
    text = report.to_json(indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_ablate(args):
    from .field import GearedModel
    from .sceneio import load_scene
    from .train import evaluate_holdout, train
    scene = load_scene(args.scene)
    settings = resolve_train_settings(args)
    values = args.values.split(",")
    rows = []
    for value in values:
        mcfg, tcfg = make_configs(settings, scene)
        label = f"{args.axis}={value}"
        if args.axis == "gears":
            mcfg.n_gear = int(value)
        elif args.axis == "topk":
            tcfg.topk = int(value)
        elif args.axis == "split":
            mcfg.split_strategy = value
        elif args.axis == "sampling":
            if value.startswith("uniform"):
                tcfg.use_split = False
                tcfg.n_samples = int(value[len("uniform"):] or tcfg.n_samples)
            elif value != "split":
                raise ValueError(f"sampling value must be 'split' or 'uniformN', got {value!r}")
        rng = np.random.default_rng(tcfg.seed)  # shared base seed across values
        model = GearedModel.create(mcfg, rng)
        model, _records = train(model, scene, tcfg)
        report = evaluate_holdout(model, scene)
        rows.append({"value": label, "psnr": report.mean_psnr, "ssim": report.mean_ssim})
        print(f"{label}: PSNR {report.mean_psnr:.2f}  SSIM {report.mean_ssim:.4f}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"ablation_{args.axis}.json", "w") as f:
        json.dump({"axis": args.axis, "rows": rows}, f, indent=1)
    return 0


def cmd_serve(args):
    import uvicorn
    from .service import create_app
    app = create_app(checkpoint=args.ckpt, scene=args.scene)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "render": cmd_render,
    "track": cmd_track,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "serve": cmd_serve,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    from .sceneio import FormatError
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, ValueError, KeyError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except RuntimeError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
