"""Deterministic synthetic scenes with exact depth and pose ground truth.

A scene is a surface in the reference camera frame carrying a band-limited
procedural texture (a seeded sum of sinusoids over the reference-view
projection coordinates).  Smooth textures keep bilinear-interpolation error
small, which is what makes the finite-difference and pose-recovery oracles
tight.

Views at other poses are produced two ways:

* analytically (``render_scene_view``): each view pixel's ray is intersected
  with the surface exactly and the texture is evaluated in closed form, so a
  rendered pair is photometrically consistent to machine precision;
* generically (``render_view``): warp each target pixel into an arbitrary
  reference raster using the target view's own depth and sample bilinearly.

Poses follow the package convention: a view's pose maps reference-frame
points into the view frame, ``X_view = R @ X_ref + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import EPSILON_Z, CameraIntrinsics, Pose6D, so3_exp
from .imaging import ImageBuffer, InverseDepthMap, bilinear_many

SCENE_KINDS = ("textured-plane", "two-plane", "smooth-height-field")


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of a procedural scene."""

    kind: str = "textured-plane"
    texture_seed: int = 0
    width: int = 160
    height: int = 128
    depth_range: tuple = (2.0, 4.0)
    intrinsics: CameraIntrinsics | None = None
    # Texture spectrum: wave count and maximum frequency in cycles per
    # normalized image unit.  Higher frequencies shrink the solver's
    # single-level convergence basin.
    texture_waves: int = 8
    texture_max_freq: float = 8.0
    # Peak-to-midpoint amplitude of the texture around 0.5; at most 0.45
    # so values stay inside [0.05, 0.95].
    texture_contrast: float = 0.45
    # Height-field relief as a fraction of the mean depth.
    height_amplitude: float = 0.15

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.width < 16 or self.height < 16:
            raise ValueError("scene grid must be at least 16x16")
        near, far = self.depth_range
        if not (0.0 < near <= far):
            raise ValueError("depth range must be positive and ordered")
        if not 0.0 < self.texture_contrast <= 0.45:
            raise ValueError("texture_contrast must lie in (0, 0.45]")
        if self.intrinsics is None:
            k = CameraIntrinsics(
                float(self.width),
                float(self.width),
                (self.width - 1) / 2.0,
                (self.height - 1) / 2.0,
            )
            object.__setattr__(self, "intrinsics", k)


def _texture(spec: SceneSpec):
    """Closure evaluating the procedural texture at normalized coords."""
    rng = np.random.default_rng(spec.texture_seed)
    n = spec.texture_waves
    freqs = rng.uniform(1.0, spec.texture_max_freq, size=n)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=n)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n)
    # 1/f amplitudes give a natural spectrum; normalized so values stay
    # within [0.05, 0.95].
    amps = 1.0 / freqs
    amps = amps * (spec.texture_contrast / np.sum(amps))
    fu = freqs * np.cos(angles)
    fv = freqs * np.sin(angles)

    def tex(u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        acc = np.full(u.shape, 0.5)
        for k in range(n):
            acc = acc + amps[k] * np.sin(2.0 * np.pi * (fu[k] * u + fv[k] * v) + phases[k])
        return acc

    return tex


def _height_field(spec: SceneSpec):
    """Closure z(u, v): surface depth along the reference ray (u, v, 1)."""
    near, far = spec.depth_range
    z0 = 0.5 * (near + far)
    rng = np.random.default_rng(spec.texture_seed + 1)

    if spec.kind == "textured-plane":
        def depth(u, v):
            return np.full(np.broadcast(u, v).shape, z0)

        return depth

    if spec.kind == "two-plane":
        def depth(u, v):
            u = np.asarray(u, dtype=float)
            return np.where(u < 0.0, near, far)

        return depth

    # smooth-height-field: low-frequency relief around the mean depth
    amp = spec.height_amplitude * z0
    freqs = rng.uniform(0.5, 2.0, size=3)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=3)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)

    def depth(u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        acc = np.zeros(np.broadcast(u, v).shape)
        for k in range(3):
            fu = freqs[k] * np.cos(angles[k])
            fv = freqs[k] * np.sin(angles[k])
            acc = acc + np.sin(2.0 * np.pi * (fu * u + fv * v) + phases[k])
        return z0 + amp * acc / 3.0

    return depth


def pixel_grid(width, height, k: CameraIntrinsics):
    """Normalized coordinates (u, v) of every pixel center."""
    xs = (np.arange(width) - k.cx) / k.fx
    ys = (np.arange(height) - k.cy) / k.fy
    return np.meshgrid(xs, ys)


def make_scene(spec: SceneSpec):
    """Reference image and ground-truth inverse depth for a scene."""
    u, v = pixel_grid(spec.width, spec.height, spec.intrinsics)
    tex = _texture(spec)
    depth = _height_field(spec)
    img = ImageBuffer(tex(u, v))
    inv_depth = InverseDepthMap.from_array(1.0 / depth(u, v))
    return img, inv_depth


def _intersect_rays(spec: SceneSpec, p: Pose6D, dirs):
    """Intersect view-frame rays ``lambda * dirs`` with the scene surface.

    ``dirs`` has shape (..., 3).  Returns ``(lam, u_ref, v_ref, valid)``
    where ``lam`` is the view-frame depth of the hit and ``(u_ref, v_ref)``
    its reference-view projection.
    """
    R = so3_exp(p.omega)
    a = dirs @ R  # R^T applied to each direction
    b = -(R.T @ p.t)
    depth = _height_field(spec)

    if spec.kind == "two-plane":
        near, far = spec.depth_range
        best_lam = None
        best_uv = None
        best_score = None
        for z_plane, side in ((near, -1.0), (far, 1.0)):
            lam = (z_plane - b[2]) / a[..., 2]
            z_ref = lam * a[..., 2] + b[2]
            u = (lam * a[..., 0] + b[0]) / z_ref
            v = (lam * a[..., 1] + b[1]) / z_ref
            on_side = (u * side) >= 0.0
            ok = (lam > EPSILON_Z) & on_side
            # Prefer the membership-consistent hit; fall back to the nearer one.
            score = np.where(ok, lam, np.where(lam > EPSILON_Z, lam + 1e6, np.inf))
            if best_lam is None:
                best_lam, best_uv, best_score = lam, (u, v), score
            else:
                take = score < best_score
                best_lam = np.where(take, lam, best_lam)
                best_uv = (np.where(take, u, best_uv[0]), np.where(take, v, best_uv[1]))
                best_score = np.minimum(score, best_score)
        valid = np.isfinite(best_score)
        lam = np.where(valid, best_lam, 1.0)
        return lam, best_uv[0], best_uv[1], valid

    z0 = depth(0.0, 0.0) if spec.kind == "textured-plane" else None
    if spec.kind == "textured-plane":
        lam = (float(z0) - b[2]) / a[..., 2]
    else:
        # Fixed-point iteration lam <- (z(u(lam), v(lam)) - b_z) / a_z.
        # Contraction factor ~ relief slope / mean depth, far below 1.
        near, far = spec.depth_range
        lam = (0.5 * (near + far) - b[2]) / a[..., 2]
        for _ in range(60):
            z_ref = lam * a[..., 2] + b[2]
            u = (lam * a[..., 0] + b[0]) / z_ref
            v = (lam * a[..., 1] + b[1]) / z_ref
            lam = (depth(u, v) - b[2]) / a[..., 2]
    z_ref = lam * a[..., 2] + b[2]
    valid = (lam > EPSILON_Z) & (z_ref > EPSILON_Z)
    safe = np.where(valid, z_ref, 1.0)
    u = (lam * a[..., 0] + b[0]) / safe
    v = (lam * a[..., 1] + b[1]) / safe
    return np.where(valid, lam, 1.0), u, v, valid


def _view_dirs(spec: SceneSpec):
    u, v = pixel_grid(spec.width, spec.height, spec.intrinsics)
    return np.stack([u, v, np.ones_like(u)], axis=-1)


def scene_view_depth(spec: SceneSpec, p: Pose6D) -> InverseDepthMap:
    """Exact inverse depth of the scene as seen from pose ``p``."""
    lam, _, _, valid = _intersect_rays(spec, p, _view_dirs(spec))
    inv = np.where(valid, 1.0 / lam, 0.0)
    return InverseDepthMap.from_array(inv)


def render_scene_view(spec: SceneSpec, p: Pose6D):
    """Analytic rendering of the scene from pose ``p``.

    Returns ``(image, mask)``; masked-out pixels carry the texture midpoint.
    """
    lam, u, v, valid = _intersect_rays(spec, p, _view_dirs(spec))
    tex = _texture(spec)
    img = np.where(valid, tex(u, v), 0.5)
    return ImageBuffer(img), valid


def render_view(ref: ImageBuffer, target_depth: InverseDepthMap, p: Pose6D,
                k: CameraIntrinsics):
    """Render the view at pose ``p`` by inverse-warping the reference raster.

    ``target_depth`` is the target view's own inverse depth (the analytic
    per-view depth, not a screen-space resample of the reference depth).
    Each target pixel is mapped back into the reference frame through
    ``T(p)^-1`` and bilinearly sampled; the mask is false where the lookup
    left the reference raster or went behind either camera.
    """
    h, w = target_depth.height, target_depth.width
    u, v = pixel_grid(w, h, k)
    d = target_depth.values
    R = so3_exp(p.omega)
    # X_ref = R^T (x_tgt / d - t); scaled by d to stay finite at d = 0.
    dirs = np.stack([u, v, np.ones_like(u)], axis=-1)
    scaled = dirs - d[..., None] * p.t  # d * (x/d - t)
    X = scaled @ R  # row-vector form of R^T @ scaled
    front = X[..., 2] > EPSILON_Z * np.maximum(d, EPSILON_Z)
    z = np.where(front, X[..., 2], 1.0)
    ur = X[..., 0] / z
    vr = X[..., 1] / z
    px = ur * k.fx + k.cx
    py = vr * k.fy + k.cy
    planes = []
    in_view = np.ones((h, w), dtype=bool)
    for c in range(ref.channels):
        vals, ok = bilinear_many(ref.plane(c), px, py)
        planes.append(vals)
        in_view &= ok
    mask = front & in_view
    out = np.stack(planes, axis=-1) * mask[..., None]
    return ImageBuffer(out), mask


def make_pair(spec: SceneSpec, p: Pose6D):
    """Reference image/depth plus an analytically rendered source view.

    The returned tuple is ``(ref_img, ref_inv_depth, src_img, mask)`` where
    ``p`` maps reference-frame points into the source frame.
    """
    ref_img, ref_depth = make_scene(spec)
    src_img, mask = render_scene_view(spec, p)
    return ref_img, ref_depth, src_img, mask


def make_triplet(spec: SceneSpec, p21: Pose6D, p23: Pose6D):
    """Three photometrically consistent views with exact depths and poses.

    Frame 2 is the reference (identity pose); ``p21`` and ``p23`` map
    frame-2 points into frames 1 and 3.  Returns a dict with images,
    ground-truth inverse depths, and the two poses.
    """
    img2, d2 = make_scene(spec)
    img1, _ = render_scene_view(spec, p21)
    img3, _ = render_scene_view(spec, p23)
    d1 = scene_view_depth(spec, p21)
    d3 = scene_view_depth(spec, p23)
    return {
        "images": (img1, img2, img3),
        "gt_inv_depths": (d1, d2, d3),
        "poses": (p21, p23),
        "intrinsics": spec.intrinsics,
    }
