"""Fine-stage machinery: depth candidates, cost volume, weighting factor and
the depth regularization losses.

The cost volume is gradient-free by construction (argmin over candidates), so
it is computed in float64 numpy with explicit elementwise formulas; this keeps
it exactly reproducible against a scalar per-pixel reference. The
regularization losses are torch so they can drive the refined depth network,
with gradients blocked from the frozen coarse depth and the weighting factor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .geometry import CameraIntrinsics, RigidTransform
from .losses import LossReport

CANDIDATE_COUNT = 32


@dataclass(frozen=True)
class DepthCandidates:
    """Ordered depth hypotheses spanning [d_min, d_max] of a coarse depth map."""

    values: np.ndarray
    d_min: float
    d_max: float
    degenerate: bool = False

    def __post_init__(self):
        v = self.values
        if v.ndim != 1 or v.size == 0:
            raise ValueError("candidate list must be a non-empty 1-D array")
        if not self.degenerate:
            if np.any(np.diff(v) <= 0):
                raise ValueError("candidates must be strictly increasing")
            if v[0] != self.d_min or v[-1] != self.d_max:
                raise ValueError("candidates must start at d_min and end at d_max")


def build_depth_candidates(depth: np.ndarray | torch.Tensor,
                           count: int = CANDIDATE_COUNT,
                           spacing: str = "linear") -> DepthCandidates:
    """Candidates between the per-image min and max of a coarse depth map.

    Linear spacing in depth by default; spacing="inverse" spaces linearly in
    1/depth instead. A constant depth map yields a flagged single-candidate
    volume.
    """
    d = np.asarray(depth, dtype=np.float64)
    d_min = float(d.min())
    d_max = float(d.max())
    if d_min <= 0 or not np.isfinite([d_min, d_max]).all():
        raise ValueError("depth map must be strictly positive and finite")
    if d_min == d_max:
        return DepthCandidates(np.array([d_min]), d_min, d_max, degenerate=True)
    if spacing == "linear":
        values = np.linspace(d_min, d_max, count)
    elif spacing == "inverse":
        values = 1.0 / np.linspace(1.0 / d_min, 1.0 / d_max, count)
        values[0], values[-1] = d_min, d_max
    else:
        raise ValueError("unknown candidate spacing %r" % spacing)
    return DepthCandidates(values, d_min, d_max)


class CostVolumeDepth(NamedTuple):
    depth: np.ndarray        # (H, W) argmin depth
    fallback: np.ndarray     # (H, W) bool, pixels where every candidate was invalid
    costs: np.ndarray        # (K, H, W) mean-absolute color distances (inf = invalid)


def _bilinear_sample_channel(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Border-clamped bilinear sampling of one channel, lerp form."""
    h, w = img.shape
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x)
    y0 = np.floor(y)
    wx = x - x0
    wy = y - y0
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)
    x1i = np.minimum(x0i + 1, w - 1)
    y1i = np.minimum(y0i + 1, h - 1)
    v00 = img[y0i, x0i]
    v01 = img[y0i, x1i]
    v10 = img[y1i, x0i]
    v11 = img[y1i, x1i]
    top = v00 + wx * (v01 - v00)
    bot = v10 + wx * (v11 - v10)
    return top + wy * (bot - top)


def cost_volume_depth(target: np.ndarray, source: np.ndarray,
                      pose: RigidTransform, intrinsics: CameraIntrinsics,
                      candidates: DepthCandidates,
                      fallback_depth: np.ndarray | None = None,
                      box_filter: bool = False) -> CostVolumeDepth:
    """Per-pixel depth among candidates minimizing the warped color distance.

    For every candidate a fronto-parallel plane at that depth is warped into
    the source view (pose is target-to-source, from the frozen pose network);
    the cost is the channel-mean absolute difference to the target. Ties break
    toward the smaller index, i.e. the nearer depth. Pixels where every
    candidate lands out of bounds (or behind the camera) fall back to
    `fallback_depth` and are flagged.

    box_filter=True averages costs over a 3x3 neighborhood before the argmin.
    """
    target = np.asarray(target, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    if target.shape != source.shape or target.ndim != 3:
        raise ValueError("target and source must be matching (C, H, W) arrays")
    c, h, w = target.shape
    rot = pose.rotation.detach().cpu().numpy().astype(np.float64)
    tr = pose.translation.detach().cpu().numpy().astype(np.float64)
    fx, fy, cx, cy = intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy

    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64), indexing="xy")
    rx = (uu - cx) / fx
    ry = (vv - cy) / fy

    # Rotated ray directions are candidate-independent; each candidate plane
    # only shifts them by translation/depth. Working with depth-normalized
    # points keeps zero-motion costs bitwise identical across candidates.
    ax = rot[0, 0] * rx + rot[0, 1] * ry + rot[0, 2]
    ay = rot[1, 0] * rx + rot[1, 1] * ry + rot[1, 2]
    az = rot[2, 0] * rx + rot[2, 1] * ry + rot[2, 2]

    k = candidates.values.size
    costs = np.empty((k, h, w), dtype=np.float64)
    for ki in range(k):
        d = candidates.values[ki]
        qx = ax + tr[0] / d
        qy = ay + tr[1] / d
        qz = az + tr[2] / d
        behind = qz <= 1e-12
        qz_safe = np.where(behind, 1.0, qz)
        su = fx * (qx / qz_safe) + cx
        sv = fy * (qy / qz_safe) + cy
        oob = (su < 0) | (su > w - 1) | (sv < 0) | (sv > h - 1) | behind
        acc = np.zeros((h, w), dtype=np.float64)
        for ci in range(c):
            warped = _bilinear_sample_channel(source[ci], su, sv)
            acc = acc + np.abs(warped - target[ci])
        cost = acc / c
        cost[oob] = np.inf
        costs[ki] = cost

    if box_filter:
        filt = np.where(np.isfinite(costs), costs, 0.0)
        good = np.isfinite(costs).astype(np.float64)
        pad = ((0, 0), (1, 1), (1, 1))
        sp = np.pad(filt, pad, mode="edge")
        gp = np.pad(good, pad, mode="edge")
        smoothed = np.zeros_like(costs)
        counts = np.zeros_like(costs)
        for dy in range(3):
            for dx in range(3):
                smoothed += sp[:, dy:dy + h, dx:dx + w]
                counts += gp[:, dy:dy + h, dx:dx + w]
        with np.errstate(invalid="ignore"):
            averaged = np.where(counts > 0, smoothed / np.maximum(counts, 1), np.inf)
        costs = np.where(np.isfinite(costs), averaged, np.inf)

    best = np.argmin(costs, axis=0)
    depth = candidates.values[best]
    fallback = ~np.isfinite(costs).any(axis=0)
    if fallback.any():
        if fallback_depth is None:
            raise ValueError("pixels with no valid candidate but no fallback depth given")
        fb = np.asarray(fallback_depth, dtype=np.float64)
        depth = np.where(fallback, fb, depth)
    return CostVolumeDepth(depth, fallback, costs)


@dataclass(frozen=True)
class WeightingFactor:
    """Pixel-wise regularization weight and its floor indicator.

    lambda_cv >= 1 everywhere; mu_cv = 1 exactly where lambda_cv = 1, which
    masks the allowable-difference floor wherever the cost-volume depth
    disagrees with the coarse depth (moving object regions).
    """

    lambda_cv: torch.Tensor
    mu_cv: torch.Tensor
    delta_d: float


def cv_weighting_factor(coarse_depth: torch.Tensor, cv_depth: torch.Tensor,
                        delta_d: float) -> WeightingFactor:
    """lambda_cv = max(|D1 - Dcv| / delta, 1); mu_cv = [lambda_cv = 1]."""
    if delta_d <= 0:
        raise ValueError("delta_d must be positive")
    d1 = torch.as_tensor(coarse_depth)
    dcv = torch.as_tensor(cv_depth).to(d1.dtype)
    lam = ((d1 - dcv).abs() / delta_d).clamp(min=1.0).detach()
    mu = (lam == 1.0).to(lam.dtype)
    return WeightingFactor(lam, mu, delta_d)


def regularization_loss_basic(coarse_depth: torch.Tensor, refined_depth: torch.Tensor,
                              delta_d: float) -> torch.Tensor:
    """max(|D1 - D2|, delta): free refinement inside the allowable band."""
    diff = (coarse_depth.detach() - refined_depth).abs()
    floor = torch.full_like(diff, delta_d)
    return torch.maximum(diff, floor)


def regularization_loss(coarse_depth: torch.Tensor, refined_depth: torch.Tensor,
                        weighting: WeightingFactor) -> torch.Tensor:
    """lambda_cv * max(|D1 - D2|, mu_cv * delta) per pixel.

    Gradient flows only into the refined depth: the coarse depth and the
    weighting factor are detached here regardless of how they were built.
    """
    d1 = coarse_depth.detach()
    lam = weighting.lambda_cv.detach()
    mu = weighting.mu_cv.detach()
    diff = (d1 - refined_depth).abs()
    return lam * torch.maximum(diff, mu * weighting.delta_d)


def fine_total_loss(rep: torch.Tensor, reg: torch.Tensor, rho: float,
                    valid: torch.Tensor | None = None) -> LossReport:
    """Unmasked whole-image reprojection mean plus rho-weighted regularization mean."""
    if valid is not None:
        keep = valid.to(rep.dtype)
        count = keep.sum().clamp(min=1)
        rep_scalar = (rep * keep).sum() / count
    else:
        rep_scalar = rep.mean()
    reg_scalar = reg.mean()
    total = rep_scalar + rho * reg_scalar
    return LossReport(
        total=total,
        parts={"reprojection": rep_scalar, "regularization": reg_scalar},
        weights={"reprojection": 1.0, "regularization": rho},
        maps={"reprojection": rep, "regularization": reg},
    )


def consistency_filter_mask(depth_t: torch.Tensor, depth_src: torch.Tensor,
                            pose: RigidTransform, intrinsics: CameraIntrinsics,
                            threshold: float) -> torch.Tensor:
    """3D-consistency exclusion mask used by the filtering-baseline ablation.

    Warps the source-frame depth into the target view and marks pixels whose
    absolute difference to the transformed target depth exceeds
    threshold * depth_t. Pixels that cannot be checked (out of bounds or
    behind the camera) are left unmarked; the reprojection loss already
    excludes them.
    """
    from .geometry import project_with_depth, warp_image

    grid, z_trans = project_with_depth(depth_t, pose, intrinsics)
    sampled, oob = warp_image(depth_src[None] if depth_src.dim() == 2 else depth_src,
                              grid.coords)
    sampled = sampled[0] if depth_src.dim() == 2 else sampled
    inconsistent = (sampled - z_trans).abs() > threshold * depth_t
    return (inconsistent & grid.valid & ~oob).to(depth_t.dtype)
