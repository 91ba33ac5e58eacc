"""Command-line entry point: simulate, train, render, eval, diag.

Exit status is 0 on success, 2 when inputs fail validation and 3 when a run
fails after starting. SAENERF_THREADS caps the worker threads of the
numerical backend; it has to be applied before numpy loads, so the heavy
imports happen inside the command functions.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")
DIAG_COLUMNS = ("step", "loss_total", "loss_norm", "loss_zero_plus", "loss_zero_minus", "taopet_mean",
                "poap", "poap_pos", "n_pos", "n_neg", "n_consistent")

log = logging.getLogger("evrf")


class InvalidInput(ValueError):
    pass


def apply_thread_limit(environ=os.environ) -> int | None:
    raw = environ.get("SAENERF_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise InvalidInput(f"SAENERF_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InvalidInput(f"SAENERF_THREADS must be a positive integer, got {raw!r}")
    for var in THREAD_VARS:
        environ[var] = str(n)
    return n


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"{path}: not valid JSON ({exc})") from None


def cmd_simulate(args) -> None:
    from .pipeline import default_setup, simulate_scene
    from .events import write_events
    from .scene import load_scene

    if args.frames < 1 or args.res < 2 or args.period <= 0:
        raise InvalidInput("need frames >= 1, res >= 2 and period > 0")
    scene = load_scene(args.scene)
    K, traj, cfg = default_setup(scene, resolution=args.res, period=args.period, n_samples=args.samples)
    stream = simulate_scene(scene, K, traj, cfg, n_frames=args.frames, threshold=args.threshold,
                            noise=args.noise, pattern=args.pattern, seed=args.seed)
    write_events(stream, args.out)
    log.info("wrote %d events (%d genuine) to %s", len(stream), stream.meta["n_genuine"], args.out)


def _camera_and_trajectory(meta: dict):
    from .geometry import CameraIntrinsics, trajectory_from_dict

    if "camera" not in meta or "trajectory" not in meta:
        raise InvalidInput("event file carries no camera/trajectory metadata")
    return CameraIntrinsics(**meta["camera"]), trajectory_from_dict(meta["trajectory"])


def cmd_train(args) -> None:
    from .events import read_events
    from .trainer import TrainConfig, load_checkpoint, train

    stream = read_events(args.events)
    K, traj = _camera_and_trajectory(stream.meta)
    raw = _read_json(args.config) if args.config else {}
    if "render" not in raw and "render" in stream.meta:
        raw["render"] = stream.meta["render"]
    config = TrainConfig.from_dict(raw)
    config.resolved_l_max(stream.duration)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and resume.params.arch != config.arch:
        raise InvalidInput("checkpoint architecture differs from the config")
    log_file = open(args.log, "a" if resume else "w") if args.log else None
    try:
        def report(step, params, entry):
            if (step + 1) % max(1, args.print_every) == 0:
                log.info("step %d loss %s poap_pos %s", step + 1, entry["loss_total"], entry["poap_pos"])

        train(stream, traj, K, config, resume=resume, log_file=log_file, checkpoint_path=args.out,
              callback=report)
    finally:
        if log_file is not None:
            log_file.close()
    log.info("checkpoint written to %s", args.out)


def parse_poses(spec: str, meta: dict | None = None):
    """[(name, time, pose)] from a keyframe file, a trajectory JSON, or an orbit spec.

    Orbit spec: ``orbit`` or ``orbit:radius=4,height=1,period=4,views=8,offset=0.37``;
    views are spread evenly over one period starting at ``offset`` of a step.
    """
    from .geometry import OrbitTrajectory, keyframes_from_records, trajectory_from_dict

    if spec.startswith("orbit"):
        base = dict((meta or {}).get("trajectory", {}))
        opts = {"views": 8, "offset": 0.37}
        if ":" in spec:
            for item in spec.split(":", 1)[1].split(","):
                if "=" not in item:
                    raise InvalidInput(f"bad orbit option {item!r}")
                k, v = item.split("=", 1)
                if k not in ("radius", "height", "period", "views", "offset"):
                    raise InvalidInput(f"unknown orbit option {k!r}")
                try:
                    opts[k] = float(v)
                except ValueError:
                    raise InvalidInput(f"orbit option {k} needs a number") from None
        traj = OrbitTrajectory(opts.get("radius", base.get("radius", 4.0)), opts.get("height", base.get("height", 1.0)),
                               opts.get("period", base.get("period", 4.0)))
        n = int(opts["views"])
        if n < 1:
            raise InvalidInput("orbit views must be >= 1")
        times = [(i + opts["offset"]) / n * traj.period for i in range(n)]
        return [(f"view_{i:03d}", t, traj.pose(t)) for i, t in enumerate(times)]
    data = _read_json(spec)
    if isinstance(data, list):
        return [(f"view_{i:03d}", t, P) for i, (t, P) in enumerate(keyframes_from_records(data))]
    traj = trajectory_from_dict(data)
    times = data.get("times")
    if not times:
        raise InvalidInput("trajectory JSON needs a 'times' list")
    return [(f"view_{i:03d}", float(t), traj.pose(float(t))) for i, t in enumerate(times)]


def cmd_render(args) -> None:
    from .events import read_events
    from .geometry import CameraIntrinsics
    from .renderer import RenderConfig, write_png, write_ppm16, render_image
    from .scene import load_scene, render_config_for
    from .trainer import load_checkpoint

    if (args.ckpt is None) == (args.scene is None):
        raise InvalidInput("give exactly one of --ckpt or --scene")
    meta = read_events(args.events).meta if args.events else {}
    if "camera" in meta:
        K = CameraIntrinsics(**meta["camera"])
    else:
        K = CameraIntrinsics.from_fov(args.res, args.res, args.fov)
    views = parse_poses(args.poses, meta)
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        source, cfg = ckpt.params, ckpt.config.render
    else:
        source = load_scene(args.scene)
        if "render" in meta:
            cfg = RenderConfig.from_dict(meta["render"])
        else:
            dist = max(float(sum(x * x for x in P.translation) ** 0.5) for _, _, P in views)
            cfg = render_config_for(source, dist)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for name, t, P in views:
        img = render_image(source, K, P, cfg)
        write_png(out / f"{name}.png", img)
        write_ppm16(out / f"{name}.ppm", img)
        index.append({"name": name, "t_seconds": t})
    (out / "views.json").write_text(json.dumps(index, indent=1))
    log.info("rendered %d views to %s", len(views), out)


def _images_in(directory: Path) -> dict:
    if not directory.is_dir():
        raise InvalidInput(f"{directory} is not a directory")
    found = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in (".png", ".ppm"):
            # prefer the 16-bit copy when both exist
            if p.stem not in found or p.suffix.lower() == ".ppm":
                found[p.stem] = p
    return found


def cmd_eval(args) -> None:
    from .metrics import evaluate_pairs
    from .renderer import read_image

    rendered, target = _images_in(Path(args.rendered)), _images_in(Path(args.target))
    names = sorted(set(rendered) & set(target))
    if not names:
        raise InvalidInput("no image names shared by the rendered and target directories")
    pairs = []
    for n in names:
        a, b = read_image(rendered[n]), read_image(target[n])
        if a.shape != b.shape:
            raise InvalidInput(f"{n}: rendered {a.shape} vs target {b.shape}")
        pairs.append((a, b))
    report = evaluate_pairs(pairs, args.gamma, names)
    d = report.to_dict()
    d["gamma"] = args.gamma
    if args.report:
        Path(args.report).write_text(json.dumps(d, indent=1))
    print(f"mean PSNR {report.mean_psnr:.3f} dB, mean SSIM {report.mean_ssim:.4f} over {len(names)} views")


def cmd_diag(args) -> None:
    rows = []
    with open(args.log) as f:
        for i, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise InvalidInput(f"{args.log}:{i}: not a JSON line ({exc})") from None
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(DIAG_COLUMNS)
        for r in rows:
            w.writerow(["" if r.get(c) is None else r.get(c) for c in DIAG_COLUMNS])
    log.info("wrote %d rows to %s", len(rows), args.out)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="evrf", description="Event-supervised radiance fields on toy scenes.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render a toy scene along an orbit and simulate events")
    s.add_argument("--scene", default="two-blobs", help="preset name or scene JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=120)
    s.add_argument("--period", type=float, default=4.0)
    s.add_argument("--threshold", type=float, default=0.25)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--pattern", default="RGGB", choices=("RGGB", "mono"))
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--res", type=int, default=64)
    s.add_argument("--samples", type=int, default=32)
    s.set_defaults(fn=cmd_simulate)

    t = sub.add_parser("train", help="fit a field to an event file")
    t.add_argument("--events", required=True)
    t.add_argument("--config", help="training config JSON")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="per-step diagnostics (newline-delimited JSON)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--print-every", type=int, default=100)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render views from a checkpoint or a toy scene")
    r.add_argument("--ckpt")
    r.add_argument("--scene")
    r.add_argument("--poses", required=True, help="keyframe JSON, trajectory JSON with times, or orbit[:k=v,...]")
    r.add_argument("--events", help="event file whose camera and orbit to reuse")
    r.add_argument("--res", type=int, default=64)
    r.add_argument("--fov", type=float, default=30.0)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM of rendered views against targets")
    e.add_argument("--rendered", required=True)
    e.add_argument("--target", required=True)
    e.add_argument("--gamma", type=float, default=2.2)
    e.add_argument("--report")
    e.set_defaults(fn=cmd_eval)

    d = sub.add_parser("diag", help="convert a diagnostics log to CSV")
    d.add_argument("--log", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_diag)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        apply_thread_limit()
        args.fn(args)
    except (ValueError, KeyError, TypeError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # anything that breaks after inputs were accepted
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
