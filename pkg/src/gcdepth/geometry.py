"""Pinhole camera geometry: projection, rigid transforms and differentiable warping.

Conventions used throughout the package:
  * camera frame: x right, y down, z forward (depth = z)
  * pixel coordinates (u, v) = (column, row), pixel centers on integer grid
  * images are (C, H, W) or (B, C, H, W) tensors, depth maps (H, W) or (B, H, W)

All functions are pure and dtype-preserving; pass float64 tensors for
double-precision verification work.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch

_EPS_Z = 1e-8
_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels for an image of size width x height."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive, got fx=%r fy=%r" % (self.fx, self.fy))
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point (%r, %r) outside image %dx%d"
                             % (self.cx, self.cy, self.width, self.height))

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics for the same camera after resizing the image."""
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(self.fx * sx, self.fy * sy,
                                self.cx * sx, self.cy * sy, width, height)

    def matrix(self, dtype=torch.float64) -> torch.Tensor:
        k = torch.zeros(3, 3, dtype=dtype)
        k[0, 0], k[1, 1] = self.fx, self.fy
        k[0, 2], k[1, 2] = self.cx, self.cy
        k[2, 2] = 1.0
        return k

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"])


def axis_angle_to_rotation(axis_angle: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula; accepts (..., 3) axis-angle vectors, returns (..., 3, 3).

    Differentiable and stable at zero rotation (series expansion near 0).
    """
    theta = torch.linalg.norm(axis_angle, dim=-1, keepdim=True).clamp(min=1e-12)
    axis = axis_angle / theta
    theta = theta[..., 0]
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = torch.zeros_like(x)
    k = torch.stack([
        torch.stack([zero, -z, y], dim=-1),
        torch.stack([z, zero, -x], dim=-1),
        torch.stack([-y, x, zero], dim=-1),
    ], dim=-2)
    eye = torch.eye(3, dtype=axis_angle.dtype, device=axis_angle.device)
    eye = eye.expand(k.shape)
    s = torch.sin(theta)[..., None, None]
    c1 = (1.0 - torch.cos(theta))[..., None, None]
    return eye + s * k + c1 * (k @ k)


@dataclass(frozen=True)
class RigidTransform:
    """Rigid body motion: x' = rotation @ x + translation.

    rotation: (3, 3) orthonormal, det +1; translation: (3,). Stored as torch
    tensors so the transform can carry gradients when built from network output.
    """

    rotation: torch.Tensor
    translation: torch.Tensor

    def __post_init__(self):
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("rotation must be (3,3) and translation (3,)")
        if not self.rotation.requires_grad:
            r = self.rotation.detach()
            err = (r.T @ r - torch.eye(3, dtype=r.dtype)).abs().max().item()
            if err > _ORTHO_TOL:
                raise ValueError("rotation not orthonormal (max |R^T R - I| = %.3g)" % err)
            if torch.linalg.det(r).item() < 0:
                raise ValueError("rotation has negative determinant")

    @classmethod
    def identity(cls, dtype=torch.float64) -> "RigidTransform":
        return cls(torch.eye(3, dtype=dtype), torch.zeros(3, dtype=dtype))

    @classmethod
    def from_axis_angle(cls, axis_angle: torch.Tensor, translation: torch.Tensor) -> "RigidTransform":
        return cls(axis_angle_to_rotation(axis_angle), translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.transpose(-1, -2)
        return RigidTransform(rt, -(rt @ self.translation))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self . other)(x) = self(other(x))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        """Transform (..., 3) points."""
        return points @ self.rotation.transpose(-1, -2) + self.translation

    def matrix(self) -> torch.Tensor:
        m = torch.eye(4, dtype=self.rotation.dtype)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to(self, dtype) -> "RigidTransform":
        return RigidTransform(self.rotation.to(dtype), self.translation.to(dtype))


def pose_vec_to_transform(vec: torch.Tensor) -> RigidTransform:
    """6-vector (axis-angle, translation) to a rigid transform; zeros map to identity."""
    vec = torch.as_tensor(vec)
    if vec.shape != (6,):
        raise ValueError("pose vector must have 6 elements, got shape %r" % (tuple(vec.shape),))
    if not torch.isfinite(vec).all():
        raise ValueError("pose vector contains non-finite values")
    return RigidTransform.from_axis_angle(vec[:3], vec[3:])


class PixelGrid(NamedTuple):
    """Continuous source-image sampling locations with a per-pixel validity flag.

    coords: (..., H, W, 2) as (u, v); valid: (..., H, W) bool, False where the
    transformed point fell on or behind the camera plane.
    """

    coords: torch.Tensor
    valid: torch.Tensor


def pixel_coordinate_grid(height: int, width: int, dtype=torch.float64,
                          device=None) -> torch.Tensor:
    """(H, W, 2) grid of pixel-center coordinates (u, v)."""
    u = torch.arange(width, dtype=dtype, device=device)
    v = torch.arange(height, dtype=dtype, device=device)
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    return torch.stack([uu, vv], dim=-1)


def backproject(depth: torch.Tensor, intrinsics: CameraIntrinsics) -> torch.Tensor:
    """Depth (..., H, W) to camera-space points (..., H, W, 3)."""
    h, w = depth.shape[-2:]
    grid = pixel_coordinate_grid(h, w, dtype=depth.dtype, device=depth.device)
    rx = (grid[..., 0] - intrinsics.cx) / intrinsics.fx
    ry = (grid[..., 1] - intrinsics.cy) / intrinsics.fy
    return torch.stack([depth * rx, depth * ry, depth], dim=-1)


def project_batch(depth: torch.Tensor, rotation: torch.Tensor,
                  translation: torch.Tensor, intrinsics: CameraIntrinsics) -> PixelGrid:
    """Batched projection: depth (B, H, W), rotation (B, 3, 3), translation (B, 3)."""
    if not torch.isfinite(depth).all():
        raise ValueError("depth map contains non-finite values")
    points = backproject(depth, intrinsics)
    moved = torch.einsum("bij,bhwj->bhwi", rotation.to(depth.dtype), points) \
        + translation.to(depth.dtype)[:, None, None, :]
    z = moved[..., 2]
    valid = z > _EPS_Z
    z_safe = torch.where(valid, z, torch.ones_like(z))
    u = intrinsics.fx * (moved[..., 0] / z_safe) + intrinsics.cx
    v = intrinsics.fy * (moved[..., 1] / z_safe) + intrinsics.cy
    return PixelGrid(torch.stack([u, v], dim=-1), valid)


def project(depth: torch.Tensor, pose: RigidTransform,
            intrinsics: CameraIntrinsics) -> PixelGrid:
    """Project target pixels into a source view via depth and relative pose.

    Backprojects each pixel with its depth, applies `pose` (target-to-source)
    and reprojects with the same intrinsics. Points with transformed z <= 0
    are flagged invalid rather than raising; non-finite depth is a hard error.
    """
    if not torch.isfinite(depth).all():
        raise ValueError("depth map contains non-finite values")
    points = backproject(depth, intrinsics)
    pose = pose.to(depth.dtype)
    moved = points @ pose.rotation.T + pose.translation
    z = moved[..., 2]
    valid = z > _EPS_Z
    z_safe = torch.where(valid, z, torch.ones_like(z))
    u = intrinsics.fx * (moved[..., 0] / z_safe) + intrinsics.cx
    v = intrinsics.fy * (moved[..., 1] / z_safe) + intrinsics.cy
    return PixelGrid(torch.stack([u, v], dim=-1), valid)


def project_with_depth(depth: torch.Tensor, pose: RigidTransform,
                       intrinsics: CameraIntrinsics) -> tuple[PixelGrid, torch.Tensor]:
    """Like project but also returns the transformed z (depth in the source frame)."""
    grid = project(depth, pose, intrinsics)
    points = backproject(depth, intrinsics)
    moved = points @ pose.to(depth.dtype).rotation.T + pose.to(depth.dtype).translation
    return grid, moved[..., 2]


class WarpResult(NamedTuple):
    values: torch.Tensor
    oob: torch.Tensor


def warp_image(source: torch.Tensor, coords: torch.Tensor) -> WarpResult:
    """Bilinear sample of `source` (..., C, H, W) at `coords` (..., H', W', 2).

    Coordinates outside the image clamp to the border; the returned `oob`
    mask (..., H', W') marks them. Differentiable in both source and coords.
    Sampling at exactly integer in-bounds coordinates reproduces source
    values bit-exactly.
    """
    if coords.shape[-1] != 2:
        raise ValueError("coords must have a trailing dimension of 2 (u, v)")
    if source.dim() == 3:
        if coords.dim() != 3:
            raise ValueError("unbatched source needs unbatched (H, W, 2) coords")
        out, oob = warp_image(source[None], coords[None])
        return WarpResult(out[0], oob[0])
    if source.dim() != 4 or coords.dim() != 4:
        raise ValueError("expected (B, C, H, W) source with (B, H', W', 2) coords")
    if source.shape[0] != coords.shape[0]:
        raise ValueError("batch mismatch between source and coords")

    b, c, h, w = source.shape
    x = coords[..., 0]
    y = coords[..., 1]
    oob = (x < 0) | (x > w - 1) | (y < 0) | (y > h - 1)

    x = x.clamp(0, w - 1)
    y = y.clamp(0, h - 1)
    x0 = x.floor()
    y0 = y.floor()
    wx = (x - x0).unsqueeze(1)
    wy = (y - y0).unsqueeze(1)
    x0l = x0.long()
    y0l = y0.long()
    x1l = (x0l + 1).clamp(max=w - 1)
    y1l = (y0l + 1).clamp(max=h - 1)

    flat = source.reshape(b, c, h * w)

    def pick(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, -1).expand(b, c, -1)
        return flat.gather(2, idx).reshape(b, c, *yi.shape[1:])

    v00 = pick(y0l, x0l)
    v01 = pick(y0l, x1l)
    v10 = pick(y1l, x0l)
    v11 = pick(y1l, x1l)
    top = v00 + wx * (v01 - v00)
    bot = v10 + wx * (v11 - v10)
    return WarpResult(top + wy * (bot - top), oob)


def depth_to_disparity(depth: torch.Tensor) -> torch.Tensor:
    return 1.0 / depth


def disparity_to_depth(disparity: torch.Tensor) -> torch.Tensor:
    return 1.0 / disparity


def normalize_disparity(disparity: torch.Tensor) -> torch.Tensor:
    """Disparity divided by its mean; output mean is 1. Scale invariant by construction.

    Batched input (B, H, W) normalizes each image by its own mean.
    """
    mean = disparity.mean(dim=(-2, -1), keepdim=True)
    if not torch.isfinite(mean).all() or (mean <= 0).any():
        raise ValueError("disparity mean must be finite and positive")
    return disparity / mean


def sigmoid_to_depth(sig: torch.Tensor, min_depth: float, max_depth: float
                     ) -> tuple[torch.Tensor, torch.Tensor]:
    """Network sigmoid output to (disparity, depth).

    Disparity interpolates between 1/max_depth and 1/min_depth, so depth is
    confined to [min_depth, max_depth] by construction.
    """
    min_disp = 1.0 / max_depth
    max_disp = 1.0 / min_depth
    disp = min_disp + (max_disp - min_disp) * sig
    return disp, 1.0 / disp


def visibility_mask(depth_target: torch.Tensor, depth_source: torch.Tensor,
                    pose: RigidTransform, intrinsics: CameraIntrinsics,
                    rel_tol: float = 0.03) -> torch.Tensor:
    """Pixels of the target view that are also visible in the source view.

    A target pixel passes when its transformed depth agrees with the source
    depth map sampled at the reprojected location (no occlusion), the point is
    in front of the source camera and inside the source image. Useful for
    excluding occluded/out-of-bounds pixels from photometric oracles.
    """
    grid, z = project_with_depth(depth_target, pose, intrinsics)
    sampled, oob = warp_image(depth_source[None], grid.coords)
    consistent = (sampled[0] - z).abs() <= rel_tol * z.abs().clamp(min=1e-6)
    return grid.valid & ~oob & consistent


def validate_depth_map(depth: torch.Tensor, min_depth: float, max_depth: float) -> None:
    """Raise if a depth map violates its range/finiteness invariants."""
    if not torch.isfinite(depth).all():
        raise ValueError("depth map contains non-finite values")
    lo, hi = depth.min().item(), depth.max().item()
    if lo < min_depth or hi > max_depth:
        raise ValueError("depth values [%g, %g] outside valid range [%g, %g]"
                         % (lo, hi, min_depth, max_depth))
