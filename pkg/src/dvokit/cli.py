"""Command-line entry points.

Subcommands wire the library to files: ``odometry`` aligns one frame
pair, ``gradcheck`` runs the finite-difference report, ``train-demo``
runs the triplet trainers and emits a CSV trace, ``eval`` / ``eval-ate``
score depth maps and trajectories, and ``synth`` generates fixture
scenes.  Numeric settings come from a ``section.key = value`` config
file; flags carry only modes and paths.

Exit codes: 0 success, 1 I/O or configuration errors, 2 degenerate or
diverged numeric runs, 3 failed gradient checks.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import bundled, fileio, synth
from .config import RunConfig, load_config
from .ddvo import DdvoSettings, ddvo_backward, ddvo_forward, replay_frozen_jacobian
from .dvo import solve_coarse_to_fine
from .errors import (
    ConfigError,
    DegenerateDepth,
    DegenerateOverlap,
    DivergenceDetected,
    DvokitError,
    FileFormatError,
    LengthMismatch,
    NoValidPixels,
    SingularSystem,
)
from .geometry import Pose6D
from .imaging import InverseDepthMap
from .losses import Triplet, normalize_inverse_depth_vjp, triplet_loss
from .metrics import Trajectory, ate, depth_metrics
from .training import train_triplet

EXIT_OK = 0
EXIT_IO = 1
EXIT_DEGENERATE = 2
EXIT_GRADCHECK = 3


def _apply_thread_cap():
    """Honor DDVO_THREADS (0 or unset = automatic)."""
    raw = os.environ.get("DDVO_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"DDVO_THREADS must be an integer, got {raw!r}")
    if cap < 0:
        raise ConfigError("DDVO_THREADS cannot be negative")
    if cap == 0:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(cap)
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=cap)
    except ImportError:
        pass  # env vars still cap any later-loaded pools


def _intrinsics_for(cfg: RunConfig, width, height):
    return cfg.camera.resolve(width, height)


def cmd_odometry(args) -> int:
    cfg = load_config(args.config)
    ref = fileio.read_image(args.ref)
    depth = fileio.read_inverse_depth(args.ref_depth)
    src = fileio.read_image(args.src)
    if (ref.height, ref.width) != (depth.height, depth.width) or (
        ref.height, ref.width
    ) != (src.height, src.width):
        print("error: image and depth dimensions differ", file=sys.stderr)
        return EXIT_IO
    k = _intrinsics_for(cfg, ref.width, ref.height)
    result = solve_coarse_to_fine(ref, depth, src, k, Pose6D.identity(), cfg.dvo)
    print(fileio.format_pose_row(result.pose.matrix()))
    print(
        f"residual {result.final_residual:.17g} "
        f"iterations {'/'.join(str(i) for i in result.iterations_used)} "
        f"valid_fraction {result.valid_fraction:.6f}"
    )
    if args.trajectory is not None:
        fileio.write_trajectory(args.trajectory, [np.eye(4), result.pose.matrix()])
    return EXIT_OK


def _gradcheck_instance(rng, cfg: RunConfig):
    """One small synthetic pair plus solver settings for the check."""
    spec = synth.SceneSpec(
        kind="smooth-height-field",
        texture_seed=int(rng.integers(0, 2**31)),
        width=cfg.gradcheck.width,
        height=cfg.gradcheck.height,
        depth_range=(2.0, 4.0),
        texture_waves=6,
        texture_max_freq=3.0,
        texture_contrast=0.3,
    )
    pose = bundled.random_small_motion(rng, translation_frac=0.01, rotation_deg=0.5)
    ref_img, ref_depth, src_img, _ = synth.make_pair(spec, pose)
    settings = DdvoSettings(
        unroll_iters=cfg.gradcheck.unroll_iters,
        levels=2,
        grad_through_jacobian=cfg.ddvo.grad_through_jacobian,
    )
    return ref_img, ref_depth, src_img, spec.intrinsics, settings


def _rel_err(analytic, numeric):
    scale = max(abs(analytic), abs(numeric), 1e-12)
    return abs(analytic - numeric) / scale


def _solver_check(rng, cfg, frozen):
    """Directional derivative of g . pose(depth) vs central differences."""
    ref_img, ref_depth, src_img, k, settings = _gradcheck_instance(rng, cfg)
    g = rng.normal(size=6)
    direction = rng.normal(size=ref_depth.values.shape)
    direction /= np.linalg.norm(direction)
    _, tape = ddvo_forward(ref_img, ref_depth, src_img, k, settings)
    grad = ddvo_backward(tape, g)
    analytic = float(np.sum(grad * direction))
    h = 1e-6

    def forward(values):
        if frozen:
            pose = replay_frozen_jacobian(tape, values)
        else:
            pose, _ = ddvo_forward(
                ref_img, InverseDepthMap.from_array(values), src_img, k, settings
            )
        return float(g @ pose.as_vector())

    numeric = (
        forward(ref_depth.values + h * direction)
        - forward(ref_depth.values - h * direction)
    ) / (2.0 * h)
    return _rel_err(analytic, numeric)


def _loss_triplet(rng, cfg):
    spec = synth.SceneSpec(
        kind="smooth-height-field",
        texture_seed=int(rng.integers(0, 2**31)),
        # Large enough that the coarsest loss scale keeps a valid interior
        # for any small random motion.
        width=48,
        height=32,
        depth_range=(2.0, 4.0),
        texture_waves=6,
        texture_max_freq=3.0,
        texture_contrast=0.3,
    )
    p21 = bundled.random_small_motion(rng, 0.01, 0.3)
    p23 = bundled.random_small_motion(rng, 0.01, 0.3)
    data = synth.make_triplet(spec, p21, p23)
    # Evaluate away from the photometric optimum: at the exact depths the
    # L1 residuals sit on their kink and finite differences are unreliable.
    depths = tuple(
        InverseDepthMap.from_array(1.1 * d.values) for d in data["gt_inv_depths"]
    )
    return data["images"], depths, p21, p23, data["intrinsics"]


def _loss_depth_check(rng, cfg):
    images, depths, p21, p23, k = _loss_triplet(rng, cfg)
    bd = triplet_loss(Triplet(images, depths, p21, p23), k, cfg.weights)
    direction = rng.normal(size=depths[1].values.shape)
    direction /= np.linalg.norm(direction)
    analytic = float(np.sum(np.asarray(bd.grad_depths[1]) * direction))
    h = 1e-6

    def at(values):
        moved = (
            depths[0],
            InverseDepthMap.from_array(values),
            depths[2],
        )
        return triplet_loss(Triplet(images, moved, p21, p23), k, cfg.weights).total

    base = depths[1].values
    numeric = (at(base + h * direction) - at(base - h * direction)) / (2.0 * h)
    return _rel_err(analytic, numeric)


def _loss_pose_check(rng, cfg):
    images, depths, p21, p23, k = _loss_triplet(rng, cfg)
    bd = triplet_loss(Triplet(images, depths, p21, p23), k, cfg.weights)
    direction = rng.normal(size=6)
    direction /= np.linalg.norm(direction)
    analytic = float(np.asarray(bd.grad_p21) @ direction)
    h = 1e-7

    def at(vec):
        moved = Pose6D.from_vector(vec)
        return triplet_loss(Triplet(images, depths, moved, p23), k, cfg.weights).total

    v = p21.as_vector()
    numeric = (at(v + h * direction) - at(v - h * direction)) / (2.0 * h)
    return _rel_err(analytic, numeric)


def _normalization_check(rng, cfg):
    d = rng.uniform(0.5, 2.0, size=(cfg.gradcheck.height, cfg.gradcheck.width))
    w = rng.normal(size=d.shape)
    direction = rng.normal(size=d.shape)
    direction /= np.linalg.norm(direction)
    grad = normalize_inverse_depth_vjp(d, w)
    analytic = float(np.sum(grad * direction))
    h = 1e-7

    def at(values):
        from .losses import normalize_inverse_depth

        normed = normalize_inverse_depth(InverseDepthMap.from_array(values))
        return float(np.sum(w * normed.values))

    numeric = (at(d + h * direction) - at(d - h * direction)) / (2.0 * h)
    return _rel_err(analytic, numeric)


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    gc = cfg.gradcheck
    rows = []

    def suite(name, check, tol):
        rng = np.random.default_rng(args.seed)
        worst = max(check(rng, cfg) for _ in range(gc.instances))
        rows.append((name, f"{worst:.3e}", "pass" if worst < tol else "FAIL"))
        return worst < tol

    ok = True
    if cfg.ddvo.grad_through_jacobian:
        ok &= suite(
            "solver depth (full chain)",
            lambda r, c: _solver_check(r, c, frozen=False),
            gc.solver_tol,
        )
    else:
        rows.append(("solver depth (full chain)", "-", "skipped (config)"))
        ok &= suite(
            "solver depth (frozen Jacobian)",
            lambda r, c: _solver_check(r, c, frozen=True),
            gc.solver_tol,
        )
    ok &= suite("loss depth gradient", _loss_depth_check, gc.loss_tol)
    ok &= suite("loss pose gradient", _loss_pose_check, gc.loss_tol)
    ok &= suite("depth normalization chain", _normalization_check, gc.loss_tol)

    width = max(len(r[0]) for r in rows)
    print(f"{'component'.ljust(width)}  max_rel_error  status")
    for name, err, status in rows:
        print(f"{name.ljust(width)}  {err:>13}  {status}")
    return EXIT_OK if ok else EXIT_GRADCHECK


def _demo_data(cfg: RunConfig, from_config):
    if from_config:
        step = 0.05 * float(np.mean(cfg.scene.depth_range))
        p21 = Pose6D(np.array([-step, 0.0, 0.3 * step]), np.array([0.0, 0.006, 0.0]))
        p23 = Pose6D(np.array([step, 0.0, -0.24 * step]), np.array([0.0, -0.005, 0.002]))
        return synth.make_triplet(cfg.scene, p21, p23)
    return bundled.training_triplet()


def cmd_train_demo(args) -> int:
    cfg = load_config(args.config)
    data = _demo_data(cfg, args.scene_from_config)
    train_cfg = replace(
        cfg.train_config(), mode=args.mode, normalize_depth=(args.normalize == "on")
    )
    exit_code = EXIT_OK
    try:
        trace = train_triplet(
            data["images"],
            data["intrinsics"],
            train_cfg,
            gt_poses=data["poses"],
            gt_inv_depth=data["gt_inv_depths"][1],
        )
    except DivergenceDetected as exc:
        trace = exc.trace
        print(f"error: {exc}", file=sys.stderr)
        exit_code = EXIT_DEGENERATE
    tmp = str(args.out) + ".tmp"
    trace.to_csv(tmp)
    os.replace(tmp, args.out)
    depth_out = args.depth_out
    if depth_out is None:
        root, _ = os.path.splitext(str(args.out))
        depth_out = root + "_depth.pfm"
    fileio.write_pfm(depth_out, trace.final_inv_depths[1])
    final = trace.records[-1]
    print(
        f"steps {len(trace.records)} total {final.total:.17g} "
        f"mean_inv_depth {final.mean_inv_depth:.17g} gt_error {final.gt_error:.17g}"
    )
    return exit_code


def cmd_eval(args) -> int:
    pred = fileio.read_pfm(args.pred)
    gt = fileio.read_pfm(args.gt)
    m = depth_metrics(pred, gt, align=args.align, max_depth_cap=args.cap)
    print("abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3")
    print(
        ",".join(
            f"{v:.17g}"
            for v in (m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3)
        )
    )
    return EXIT_OK


def cmd_eval_ate(args) -> int:
    pred = Trajectory.from_matrices(fileio.read_trajectory(args.pred))
    gt = Trajectory.from_matrices(fileio.read_trajectory(args.gt))
    mean, std = ate(pred, gt)
    print("ate_mean,ate_std")
    print(f"{mean:.17g},{std:.17g}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.scene
    if args.seed is not None:
        spec = replace(spec, texture_seed=args.seed)
    rng = np.random.default_rng(spec.texture_seed)
    p1 = bundled.random_small_motion(rng, args.translation_frac, args.rotation_deg)
    p2 = bundled.random_small_motion(rng, args.translation_frac, args.rotation_deg)
    ref_img, ref_depth = synth.make_scene(spec)
    view1, _ = synth.render_scene_view(spec, p1)
    view2, _ = synth.render_scene_view(spec, p2)
    out = args.out
    os.makedirs(out, exist_ok=True)
    # PGM copies are for quick viewing; the PFM rasters keep full float
    # precision so a generated pair round-trips through the solver.
    fileio.write_pgm(os.path.join(out, "ref.pgm"), ref_img)
    fileio.write_pgm(os.path.join(out, "view1.pgm"), view1)
    fileio.write_pgm(os.path.join(out, "view2.pgm"), view2)
    fileio.write_pfm(os.path.join(out, "ref.pfm"), ref_img.gray())
    fileio.write_pfm(os.path.join(out, "view1.pfm"), view1.gray())
    fileio.write_pfm(os.path.join(out, "view2.pfm"), view2.gray())
    fileio.write_pfm(os.path.join(out, "ref_depth.pfm"), ref_depth.values)
    fileio.write_trajectory(
        os.path.join(out, "poses.txt"), [p1.matrix(), p2.matrix()]
    )
    print(f"wrote scene fixtures to {out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dvokit",
        description="Direct visual odometry, gradient checks, training demos, "
        "metrics, and synthetic fixtures.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("odometry", help="align a frame pair and print the pose")
    p.add_argument("ref", help="reference image (PGM/PPM/PFM)")
    p.add_argument("ref_depth", help="reference inverse depth (PFM)")
    p.add_argument("src", help="source image")
    p.add_argument("--config", default=None)
    p.add_argument("--trajectory", default=None, help="also write a 2-pose file")
    p.set_defaults(handler=cmd_odometry)

    p = sub.add_parser("gradcheck", help="finite-difference gradient report")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("train-demo", help="run a triplet training demo")
    p.add_argument("--mode", required=True,
                   choices=("fixed-pose-gt", "pose-param", "ddvo", "ddvo-hybrid", "dvo-em"))
    p.add_argument("--normalize", choices=("on", "off"), default="on")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="trace CSV path")
    p.add_argument("--depth-out", default=None, help="final inverse depth PFM path")
    p.add_argument("--scene-from-config", action="store_true",
                   help="synthesize the clip from the config's scene section "
                   "instead of the bundled one")
    p.set_defaults(handler=cmd_train_demo)

    p = sub.add_parser("eval", help="score a depth map against ground truth")
    p.add_argument("pred", help="predicted depth (PFM)")
    p.add_argument("gt", help="ground-truth depth (PFM)")
    p.add_argument("--align", action="store_true", help="median scale alignment")
    p.add_argument("--cap", type=float, default=None, help="max ground-truth depth")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("eval-ate", help="absolute trajectory error over 5-frame snippets")
    p.add_argument("pred", help="predicted trajectory (12 floats per line)")
    p.add_argument("gt", help="ground-truth trajectory")
    p.set_defaults(handler=cmd_eval_ate)

    p = sub.add_parser("synth", help="generate a synthetic scene fixture")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None, help="override scene.texture_seed")
    p.add_argument("--translation-frac", type=float, default=0.01)
    p.add_argument("--rotation-deg", type=float, default=0.5)
    p.set_defaults(handler=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_thread_cap()
        return args.handler(args)
    except (FileFormatError, ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (
        DegenerateOverlap,
        SingularSystem,
        NoValidPixels,
        DegenerateDepth,
        LengthMismatch,
        DivergenceDetected,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except DvokitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())
