"""Desk-scale training loops over a three-frame clip.

The depth "network" is a per-pixel logit raster pushed through the
sigmoid decode ``d = 10 * sigmoid(l) + 0.01``; poses come from one of
five interchangeable sources:

* ``fixed-pose-gt``: ground-truth poses, isolating the depth objective;
* ``pose-param``: two 6-vector pose parameters optimized jointly with
  the depth by Adam (a stand-in for a learned pose predictor);
* ``ddvo``: the differentiable solver run from identity each step, with
  gradients flowing into the depth both directly through the loss and
  through the solver's pose output;
* ``ddvo-hybrid``: pose-param warmup, then the differentiable solver
  initialized from the (frozen) pose parameters;
* ``dvo-em``: the non-differentiable solver re-run every step, its pose
  treated as a constant for the depth update (EM-style alternation).

Every run is seeded and bit-reproducible; traces capture the loss
split, the mean inverse depth entering the loss (the scale-drift
curve), and the ground-truth depth error when ground truth is given.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .ddvo import DdvoSettings, ddvo_backward, ddvo_forward
from .dvo import DvoSettings, solve_coarse_to_fine
from .errors import DivergenceDetected, ShapeMismatch
from .geometry import CameraIntrinsics, Pose6D
from .imaging import ImageBuffer, InverseDepthMap
from .losses import (
    LossWeights,
    Triplet,
    normalize_inverse_depth,
    normalize_inverse_depth_vjp,
    triplet_loss,
)
from .metrics import depth_metrics

TRAIN_MODES = ("fixed-pose-gt", "pose-param", "ddvo", "ddvo-hybrid", "dvo-em")

# Decode range of the sigmoid depth parameterization.
DEPTH_SCALE = 10.0
DEPTH_OFFSET = 0.01


@dataclass(frozen=True)
class DepthParam:
    """Per-pixel unconstrained parameters for an inverse-depth raster."""

    logits: np.ndarray

    def decode(self):
        """Inverse depth in (0.01, 10.01)."""
        return DEPTH_SCALE / (1.0 + np.exp(-self.logits)) + DEPTH_OFFSET

    def decode_grad(self):
        """Elementwise d(decode)/d(logit)."""
        s = 1.0 / (1.0 + np.exp(-self.logits))
        return DEPTH_SCALE * s * (1.0 - s)

    @staticmethod
    def from_inverse_depth(values):
        """Logits whose decode reproduces ``values`` (clipped to range)."""
        v = np.clip(
            (np.asarray(values, dtype=float) - DEPTH_OFFSET) / DEPTH_SCALE,
            1e-9, 1.0 - 1e-9,
        )
        return DepthParam(np.log(v / (1.0 - v)))

    @staticmethod
    def initial(shape, rng):
        """Constant logit decoding to d = 1, plus small seeded noise."""
        base = np.log(0.099 / 0.901)
        return DepthParam(base + rng.uniform(-0.01, 0.01, size=shape))


@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators for one parameter array."""

    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def fresh(shape, lr=1e-4):
        return AdamState(0, np.zeros(shape), np.zeros(shape), lr=lr)


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update; returns ``(params, state)``."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeMismatch(
            f"parameter shape {params.shape}, gradient shape {grads.shape}, "
            f"state shape {state.m.shape}"
        )
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, step=step, m=m, v=v)


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for one training run."""

    mode: str = "fixed-pose-gt"
    normalize_depth: bool = True
    steps: int = 100
    lr: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    ddvo: DdvoSettings = field(default_factory=lambda: DdvoSettings(unroll_iters=3, levels=4))
    dvo: DvoSettings = field(default_factory=lambda: DvoSettings(levels=4))
    pose_warmup_steps: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if self.pose_warmup_steps < 0:
            raise ValueError("pose_warmup_steps must be non-negative")


@dataclass(frozen=True)
class TrainStepRecord:
    step: int
    total: float
    appearance: float
    prior: float
    mean_inv_depth: float
    gt_error: float  # NaN when no ground truth was supplied


@dataclass(frozen=True)
class TrainTrace:
    """Per-step records plus the final model state."""

    records: tuple
    final_inv_depths: tuple
    final_poses: tuple  # (p21, p23) used at the last step
    diverged: bool = False

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["step", "total", "appearance", "prior", "mean_inv_depth", "gt_error"]
            )
            for r in self.records:
                writer.writerow(
                    [
                        r.step,
                        f"{r.total:.17g}",
                        f"{r.appearance:.17g}",
                        f"{r.prior:.17g}",
                        f"{r.mean_inv_depth:.17g}",
                        f"{r.gt_error:.17g}",
                    ]
                )


def _gt_abs_rel(pred_inv_depth, gt_inv_depth):
    """Median-aligned abs-rel error between depths (not inverse depths)."""
    pred = 1.0 / np.maximum(pred_inv_depth, 1e-9)
    gt = 1.0 / np.maximum(gt_inv_depth, 1e-9)
    return depth_metrics(pred, gt, align=True).abs_rel


def train_triplet(images, k: CameraIntrinsics, cfg: TrainConfig,
                  gt_poses=None, gt_inv_depth=None,
                  init_inv_depths=None) -> TrainTrace:
    """Optimize per-pixel inverse depth over a triplet.

    ``images`` are the three frames; ``gt_poses = (p21, p23)`` is
    required for ``fixed-pose-gt`` and used to score ``gt_error`` of the
    middle frame when ``gt_inv_depth`` is given.  ``init_inv_depths``
    overrides the default depth initialization (three rasters).

    Raises DivergenceDetected when the loss turns non-finite; the
    partial trace is attached to the exception as ``.trace``.
    """
    if cfg.mode == "fixed-pose-gt" and gt_poses is None:
        raise ValueError("fixed-pose-gt mode requires ground-truth poses")
    rng = np.random.default_rng(cfg.seed)
    shape = (images[0].height, images[0].width)
    if init_inv_depths is not None:
        logits = np.stack(
            [DepthParam.from_inverse_depth(d).logits for d in init_inv_depths]
        )
    else:
        logits = np.stack([DepthParam.initial(shape, rng).logits for _ in range(3)])
    depth_state = AdamState.fresh(logits.shape, lr=cfg.lr)
    pose_vec = np.zeros(12)  # (p21, p23) as stacked 6-vectors
    pose_state = AdamState.fresh(pose_vec.shape, lr=cfg.lr)

    records = []
    last_poses = (Pose6D.identity(), Pose6D.identity())
    last_depths = None
    for step in range(cfg.steps):
        param = DepthParam(logits)
        raw = param.decode()
        if cfg.normalize_depth:
            loss_depths = [
                normalize_inverse_depth(InverseDepthMap.from_array(raw[i]))
                for i in range(3)
            ]
        else:
            loss_depths = [InverseDepthMap.from_array(raw[i]) for i in range(3)]

        pose_from_params = (
            Pose6D.from_vector(pose_vec[:6]),
            Pose6D.from_vector(pose_vec[6:]),
        )
        tapes = None
        train_pose_params = False
        if cfg.mode == "fixed-pose-gt":
            p21, p23 = gt_poses
        elif cfg.mode == "pose-param":
            p21, p23 = pose_from_params
            train_pose_params = True
        elif cfg.mode == "dvo-em":
            p21 = solve_coarse_to_fine(
                images[1], loss_depths[1], images[0], k, Pose6D.identity(), cfg.dvo
            ).pose
            p23 = solve_coarse_to_fine(
                images[1], loss_depths[1], images[2], k, Pose6D.identity(), cfg.dvo
            ).pose
        else:
            if cfg.mode == "ddvo-hybrid" and step < cfg.pose_warmup_steps:
                p21, p23 = pose_from_params
                train_pose_params = True
            else:
                init21 = Pose6D.identity()
                init23 = Pose6D.identity()
                if cfg.mode == "ddvo-hybrid":
                    init21, init23 = pose_from_params
                p21, tape21 = ddvo_forward(
                    images[1], loss_depths[1], images[0], k,
                    replace(cfg.ddvo, init_pose=init21),
                )
                p23, tape23 = ddvo_forward(
                    images[1], loss_depths[1], images[2], k,
                    replace(cfg.ddvo, init_pose=init23),
                )
                tapes = (tape21, tape23)

        bd = triplet_loss(
            Triplet(tuple(images), tuple(loss_depths), p21, p23), k, cfg.weights
        )
        mean_inv = float(np.mean([d.values.mean() for d in loss_depths]))
        gt_error = float("nan")
        if gt_inv_depth is not None:
            gt_error = _gt_abs_rel(raw[1], gt_inv_depth.values)
        records.append(
            TrainStepRecord(step, bd.total, float(sum(bd.appearance_per_scale)),
                            float(sum(bd.prior_per_scale)), mean_inv, gt_error)
        )
        last_poses = (p21, p23)
        last_depths = tuple(d.values for d in loss_depths)
        if not np.isfinite(bd.total):
            trace = TrainTrace(tuple(records), last_depths, last_poses, diverged=True)
            err = DivergenceDetected(f"loss became non-finite at step {step}")
            err.trace = trace
            raise err

        grad_loss_depths = [np.asarray(g) for g in bd.grad_depths]
        if tapes is not None:
            grad_loss_depths[1] = grad_loss_depths[1] + ddvo_backward(
                tapes[0], bd.grad_p21
            )
            grad_loss_depths[1] = grad_loss_depths[1] + ddvo_backward(
                tapes[1], bd.grad_p23
            )
        if cfg.normalize_depth:
            grad_raw = np.stack(
                [
                    normalize_inverse_depth_vjp(raw[i], grad_loss_depths[i])
                    for i in range(3)
                ]
            )
        else:
            grad_raw = np.stack(grad_loss_depths)
        grad_logits = grad_raw * param.decode_grad()
        logits, depth_state = adam_step(depth_state, logits, grad_logits)
        if train_pose_params:
            pose_grad = np.concatenate([bd.grad_p21, bd.grad_p23])
            pose_vec, pose_state = adam_step(pose_state, pose_vec, pose_grad)

    return TrainTrace(tuple(records), last_depths, last_poses)


def em_alternation(images, k: CameraIntrinsics, cfg: TrainConfig,
                   gt_poses=None, gt_inv_depth=None,
                   init_inv_depths=None) -> TrainTrace:
    """EM-style alternation: re-solve the pose every depth step."""
    return train_triplet(
        images, k, replace(cfg, mode="dvo-em"),
        gt_poses=gt_poses, gt_inv_depth=gt_inv_depth,
        init_inv_depths=init_inv_depths,
    )
