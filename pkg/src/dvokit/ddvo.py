"""Differentiable direct visual odometry.

The forward pass unrolls a fixed number of Gauss-Newton iterations per
pyramid level (no early stopping, so the computation graph is identical
for every input) and records a tape.  The backward pass replays the tape
in reverse and produces the exact gradient of the output pose with
respect to the reference inverse-depth map, treating the in-view mask as
a constant (it is piecewise constant almost everywhere).

Depth enters the unrolled computation three ways:

(a) inside the warp that resamples the source image each iteration;
(b) inside the translational columns of the precomputed Jacobian J;
(c) through the damped normal-equation solve (J^T W J + lambda I)^-1,
    the pseudo-inverse path, including the trace-scaled default damping.

Paths (b) and (c) can be switched off (``grad_through_jacobian=False``)
to measure their contribution; path (a) is always active.

All internal pose state is kept in matrix form (R, t); exponential
coordinates appear only at the pose update deltas and at the final
output, where the log map is differentiated through its right Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateOverlap, InstanceTooLarge, SingularSystem, TapeMismatch
from .dvo import (
    MIN_VALID_FRACTION,
    _well_conditioned,
    build_jacobian,
    default_damping,
)
from .geometry import (
    EPSILON_Z,
    CameraIntrinsics,
    Pose6D,
    skew,
    so3_exp,
    so3_log,
    so3_right_jacobian,
    so3_right_jacobian_inv,
)
from .imaging import (
    ImageBuffer,
    InverseDepthMap,
    bilinear_grad_many,
    bilinear_many,
    gradient_arr,
    pyramid_arr,
    upsample2_grad_arr,
)
from .synth import pixel_grid

# Dense-Jacobian test helper refuses instances larger than this.
MAX_DENSE_PIXELS = 4096

# Trace coefficient of the default damping, lambda = c * sum(J*J) / 6.
_DAMPING_COEFF = 1e-6


@dataclass(frozen=True)
class DdvoSettings:
    """Unrolled-solver knobs.

    ``levels=1`` runs on the finest scale only (the warm-started hybrid
    mode); larger values run coarse-to-fine from the given init.
    """

    unroll_iters: int = 3
    levels: int = 1
    damping: float | None = None
    init_pose: Pose6D = field(default_factory=Pose6D.identity)
    grad_through_jacobian: bool = True

    def __post_init__(self):
        if self.unroll_iters < 1 or self.levels < 1:
            raise ValueError("unroll_iters and levels must be >= 1")
        if self.damping is not None and self.damping < 0.0:
            raise ValueError("damping must be non-negative")


@dataclass(frozen=True)
class _IterRecord:
    """Pose state entering one unrolled iteration plus the update it produced."""

    R: np.ndarray
    t: np.ndarray
    delta: np.ndarray


@dataclass(frozen=True)
class _LevelRecord:
    """Per-level constants and the iteration trail at that level."""

    ref_gray: np.ndarray
    src_gray: np.ndarray
    depth: np.ndarray
    k: CameraIntrinsics
    J: np.ndarray
    lam: float
    u: np.ndarray
    v: np.ndarray
    iters: tuple


@dataclass(frozen=True)
class DdvoTape:
    """Everything needed to replay the unrolled solve in reverse."""

    settings: DdvoSettings
    levels: tuple
    R_final: np.ndarray
    t_final: np.ndarray
    finest_shape: tuple

    def __len__(self):
        return sum(len(lv.iters) for lv in self.levels)


@dataclass(frozen=True)
class PoseDepthJacobian:
    """Dense 6 x N pose-by-depth Jacobian (test-support only)."""

    matrix: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("PoseDepthJacobian requires finite entries")


def _warp_terms(level: _LevelRecord, R, t):
    """Deterministic replay of one iteration's warp at pose (R, t).

    Returns the source samples, validity weights, camera-frame points,
    safe depths, and pixel lookup coordinates.
    """
    dirs = np.stack([level.u, level.v, np.ones_like(level.u)], axis=-1)
    P = dirs @ R.T + level.depth[..., None] * t
    front = P[..., 2] > EPSILON_Z
    z = np.where(front, P[..., 2], 1.0)
    px = (P[..., 0] / z) * level.k.fx + level.k.cx
    py = (P[..., 1] / z) * level.k.fy + level.k.cy
    sampled, in_view = bilinear_many(level.src_gray, px, py)
    mask = front & in_view
    return sampled, mask, P, z, px, py, dirs


def ddvo_forward(ref_img: ImageBuffer, ref_depth: InverseDepthMap,
                 src_img: ImageBuffer, k: CameraIntrinsics,
                 settings: DdvoSettings):
    """Run the fixed unrolled solve; returns ``(pose, tape)``."""
    if (ref_img.height, ref_img.width) != (ref_depth.height, ref_depth.width):
        raise ValueError("reference image and depth grids differ")
    if (ref_img.height, ref_img.width) != (src_img.height, src_img.width):
        raise ValueError("reference and source grids differ")

    ref_pyr = pyramid_arr(ref_img.gray(), settings.levels)
    src_pyr = pyramid_arr(src_img.gray(), settings.levels)
    depth_pyr = pyramid_arr(ref_depth.values, settings.levels)

    R = so3_exp(settings.init_pose.omega)
    t = settings.init_pose.t.copy()
    level_records = []
    for lv in reversed(range(settings.levels)):
        ref_gray = ref_pyr[lv]
        src_gray = src_pyr[lv]
        depth = depth_pyr[lv]
        k_lv = k.at_level(lv)
        J, u, v = build_jacobian(ref_gray, depth, k_lv)
        lam = settings.damping if settings.damping is not None else default_damping(J)
        if not _well_conditioned(J.T @ J + lam * np.eye(6)):
            raise SingularSystem("reference image lacks texture for a 6-DoF solve")
        level = _LevelRecord(ref_gray, src_gray, depth, k_lv, J, lam, u, v, ())
        ref_flat = ref_gray.ravel()
        iters = []
        for _ in range(settings.unroll_iters):
            sampled, mask, _, _, _, _, _ = _warp_terms(level, R, t)
            wvec = mask.ravel().astype(float)
            if wvec.mean() < MIN_VALID_FRACTION:
                raise DegenerateOverlap(
                    f"only {wvec.mean():.1%} of pixels remained in view"
                )
            Jw = J * wvec[:, None]
            H = J.T @ Jw + lam * np.eye(6)
            if not _well_conditioned(H):
                raise SingularSystem("weighted normal equations became singular")
            delta = np.linalg.solve(H, Jw.T @ ref_flat - Jw.T @ sampled.ravel())
            iters.append(_IterRecord(R, t, delta))
            Rd = so3_exp(delta[3:])
            t = Rd @ t + delta[:3]
            R = Rd @ R
        level_records.append(
            _LevelRecord(ref_gray, src_gray, depth, k_lv, J, lam, u, v, tuple(iters))
        )

    tape = DdvoTape(
        settings=settings,
        levels=tuple(level_records),
        R_final=R,
        t_final=t,
        finest_shape=(ref_depth.height, ref_depth.width),
    )
    return Pose6D(t, so3_log(R)), tape


def _vee_antisym(M):
    """Axis vector of the antisymmetric part: vee((M - M^T) / 2)."""
    return 0.5 * np.array(
        [M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]]
    )


def ddvo_backward(tape: DdvoTape, grad_pose) -> np.ndarray:
    """Vector-Jacobian product ``(d pose / d depth)^T @ grad_pose``.

    Returns the gradient on the finest (input) depth grid.  The tape is
    replayed level by level in reverse execution order; gradients picked
    up on coarser grids flow back through the area-average downsampling
    that produced them.
    """
    g = np.asarray(grad_pose, dtype=float).ravel()
    if g.size != 6:
        raise TapeMismatch(f"pose seed must have 6 entries, got {g.size}")
    if len(tape.levels) != tape.settings.levels or any(
        len(lv.iters) != tape.settings.unroll_iters for lv in tape.levels
    ):
        raise TapeMismatch("tape does not cover the configured unroll")

    # Seed on (t, omega) -> seed on the final (R, t) matrices.  For the
    # log map, a right perturbation R exp([e]x) moves omega by Jr^-1 e,
    # so the matrix adjoint is R [Jr^-T g_omega]x / 2 (it only ever meets
    # tangent-space variations, for which the antisymmetric lift is exact).
    omega = so3_log(tape.R_final)
    g_t = g[:3].copy()
    g_R = 0.5 * tape.R_final @ skew(so3_right_jacobian_inv(omega).T @ g[3:])

    grad_depth = np.zeros(tape.finest_shape)
    through_j = tape.settings.grad_through_jacobian
    default_lam = tape.settings.damping is None

    # Levels were executed coarsest -> finest and stored in that order.
    for level_index, level in reversed(list(enumerate(tape.levels))):
        J = level.J
        ref_flat = level.ref_gray.ravel()
        g_J = np.zeros_like(J) if through_j else None
        g_lam = 0.0
        g_d_level = np.zeros_like(level.depth)

        for it in reversed(level.iters):
            R, t, delta = it.R, it.t, it.delta
            sampled, mask, P, z, px, py, dirs = _warp_terms(level, R, t)
            wvec = mask.ravel().astype(float)
            Jw = J * wvec[:, None]
            H = J.T @ Jw + level.lam * np.eye(6)
            r = ref_flat - sampled.ravel()

            # Pose update: t' = Rd t + dt, R' = Rd R.
            Rd = so3_exp(delta[3:])
            g_Rd = g_R @ R.T + np.outer(g_t, t)
            g_R_prev = Rd.T @ g_R
            g_t_prev = Rd.T @ g_t
            g_delta = np.empty(6)
            g_delta[:3] = g_t
            g_delta[3:] = so3_right_jacobian(delta[3:]).T @ (
                2.0 * _vee_antisym(Rd.T @ g_Rd)
            )

            # delta = H^-1 b with b = Jw^T r; reverse through the solve.
            q = np.linalg.solve(H, g_delta)
            Jq = J @ q
            g_r = wvec * Jq
            if through_j:
                Jd = J @ delta
                g_J += wvec[:, None] * (
                    r[:, None] * q[None, :]
                    - Jd[:, None] * q[None, :]
                    - Jq[:, None] * delta[None, :]
                )
                g_lam += -float(q @ delta)

            # r = ref - bilinear(src, px, py); mask weight already in g_r.
            g_sampled = -g_r.reshape(level.depth.shape)
            gx, gy = bilinear_grad_many(level.src_gray, px, py)
            g_px = g_sampled * gx
            g_py = g_sampled * gy

            # Projection px = fx * Px/Pz + cx (and likewise py).
            g_u = g_px * level.k.fx
            g_v = g_py * level.k.fy
            up = P[..., 0] / z
            vp = P[..., 1] / z
            g_P = np.stack(
                [g_u / z, g_v / z, -(up * g_u + vp * g_v) / z], axis=-1
            )

            # P = dirs @ R^T + d * t.
            g_d_level += np.einsum("hwc,c->hw", g_P, t)
            g_t_prev += np.einsum("hw,hwc->c", level.depth, g_P)
            g_R_prev += np.einsum("hwc,hwd->cd", g_P, dirs)

            g_R, g_t = g_R_prev, g_t_prev

        if through_j:
            if default_lam:
                g_J += g_lam * (_DAMPING_COEFF / 3.0) * J
            # Only the translational columns of J carry depth; their
            # coefficients are the normalized-coordinate gradient terms.
            gxa, gya = gradient_arr(level.ref_gray)
            gu = (gxa * level.k.fx).ravel()
            gv = (gya * level.k.fy).ravel()
            uu = level.u.ravel()
            vv = level.v.ravel()
            g_d_level += (
                g_J[:, 0] * gu
                + g_J[:, 1] * gv
                - g_J[:, 2] * (gu * uu + gv * vv)
            ).reshape(level.depth.shape)

        # Lift the level gradient back to the finest grid through the
        # area-average pyramid (adjoint of repeated 2x2 pooling).  The
        # tape stores levels coarsest-first, so the pyramid depth of this
        # record is the reverse of its list position.
        pyr_level = tape.settings.levels - 1 - level_index
        shapes = [tape.finest_shape]
        for _ in range(pyr_level):
            h, w = shapes[-1]
            shapes.append((h // 2, w // 2))
        lifted = g_d_level
        for target in reversed(shapes[:-1]):
            lifted = upsample2_grad_arr(lifted, target)
        grad_depth += lifted

    return grad_depth


def replay_frozen_jacobian(tape: DdvoTape, depth_values) -> Pose6D:
    """Re-run the unroll warping with ``depth_values`` but keeping the
    tape's Jacobians and damping fixed.

    This is the forward map whose exact derivative the partial-chain
    backward (``grad_through_jacobian=False``) computes, so the two can
    be checked against each other by finite differences.
    """
    settings = tape.settings
    depth_pyr = pyramid_arr(np.asarray(depth_values, dtype=float), settings.levels)
    R = so3_exp(settings.init_pose.omega)
    t = settings.init_pose.t.copy()
    for i, level in enumerate(tape.levels):
        depth = depth_pyr[settings.levels - 1 - i]
        frozen = _LevelRecord(
            level.ref_gray, level.src_gray, depth, level.k,
            level.J, level.lam, level.u, level.v, (),
        )
        ref_flat = level.ref_gray.ravel()
        for _ in range(settings.unroll_iters):
            sampled, mask, _, _, _, _, _ = _warp_terms(frozen, R, t)
            wvec = mask.ravel().astype(float)
            Jw = level.J * wvec[:, None]
            H = level.J.T @ Jw + level.lam * np.eye(6)
            delta = np.linalg.solve(H, Jw.T @ ref_flat - Jw.T @ sampled.ravel())
            Rd = so3_exp(delta[3:])
            t = Rd @ t + delta[:3]
            R = Rd @ R
    return Pose6D(t, so3_log(R))


def pose_depth_jacobian_dense(ref_img: ImageBuffer, ref_depth: InverseDepthMap,
                              src_img: ImageBuffer, k: CameraIntrinsics,
                              settings: DdvoSettings) -> PoseDepthJacobian:
    """Materialize the full 6 x N pose-by-depth Jacobian (small inputs only)."""
    n = ref_depth.height * ref_depth.width
    if n > MAX_DENSE_PIXELS:
        raise InstanceTooLarge(
            f"{n} pixels exceeds the dense-Jacobian cap of {MAX_DENSE_PIXELS}"
        )
    _, tape = ddvo_forward(ref_img, ref_depth, src_img, k, settings)
    rows = []
    for r in range(6):
        seed = np.zeros(6)
        seed[r] = 1.0
        rows.append(ddvo_backward(tape, seed).ravel())
    return PoseDepthJacobian(np.stack(rows, axis=0))
