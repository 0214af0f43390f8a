"""Coarse-stage training losses.

Photometric reprojection error (L1 + SSIM), per-source minimum with
automasking, dynamic-class masking, edge-aware disparity smoothness and its
ground-contact-weighted variant that ties object disparity to the ground
pixel directly below.

Per-pixel maps keep whatever batch layout the inputs carry; scalar
reductions average over every contributing term ("mean of contributing
terms"), so gradient maps of different sizes pool into a single mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights of the training objective.

    alpha weighs the L1 term inside the photometric error (the SSIM term gets
    1 - alpha); beta weighs the smoothness/ground-contact term in the coarse
    total; rho weighs the depth regularization in the fine total; gamma is the
    vertical-gradient weight inside dynamic-class object regions.
    """

    alpha: float = 0.85
    beta: float = 0.001
    rho: float = 0.1
    gamma: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.beta <= 0 or self.rho <= 0 or self.gamma <= 0:
            raise ValueError("beta, rho and gamma must be positive")


@dataclass
class LossReport:
    """Named scalar losses plus the per-pixel maps they were reduced from.

    total must equal the weighted combination of parts recorded in `weights`
    (checked by `verify`).
    """

    total: torch.Tensor
    parts: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    maps: dict = field(default_factory=dict)

    def verify(self, tol: float = 1e-6) -> None:
        combo = sum(self.weights.get(name, 1.0) * float(value.detach() if hasattr(value, "detach") else value)
                    for name, value in self.parts.items())
        total = float(self.total.detach() if hasattr(self.total, "detach") else self.total)
        if abs(total - combo) > tol * max(1.0, abs(total)):
            raise AssertionError("total %.9g != weighted parts %.9g" % (total, combo))


def _mean_pool3(x: torch.Tensor) -> torch.Tensor:
    pad = F.pad(x, (1, 1, 1, 1), mode="reflect")
    return F.avg_pool2d(pad, 3, 1)


def ssim_error(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """(1 - SSIM)/2 per pixel and channel, 3x3 average-pool windows.

    Inputs (B, C, H, W) in [0, 1]; output same shape, clamped to [0, 1].
    """
    mu_x = _mean_pool3(x)
    mu_y = _mean_pool3(y)
    sigma_x = _mean_pool3(x * x) - mu_x * mu_x
    sigma_y = _mean_pool3(y * y) - mu_y * mu_y
    sigma_xy = _mean_pool3(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + _SSIM_C1) * (2 * sigma_xy + _SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + _SSIM_C1) * (sigma_x + sigma_y + _SSIM_C2)
    return ((1 - num / den) / 2).clamp(0, 1)


def photometric_error(target: torch.Tensor, warped: torch.Tensor,
                      alpha: float = 0.85, alpha_on_l1: bool = True) -> torch.Tensor:
    """Per-pixel photometric error between a target frame and a warped source.

    alpha * L1 + (1 - alpha) * SSIMerr with channel-mean L1; set
    alpha_on_l1=False for the swapped weighting used by some baselines.
    Accepts (C, H, W) or (B, C, H, W); returns (H, W) or (B, H, W).
    """
    if target.shape != warped.shape:
        raise ValueError("target %r and warped %r shapes differ"
                         % (tuple(target.shape), tuple(warped.shape)))
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    squeeze = target.dim() == 3
    if squeeze:
        target, warped = target[None], warped[None]
    l1 = (target - warped).abs().mean(1)
    ssim = ssim_error(target, warped).mean(1)
    if alpha_on_l1:
        err = alpha * l1 + (1 - alpha) * ssim
    else:
        err = alpha * ssim + (1 - alpha) * l1
    return err[0] if squeeze else err


class MinReprojection(NamedTuple):
    values: torch.Tensor    # per-pixel loss, zero where automasked or nowhere valid
    automask: torch.Tensor  # 1 where some warped source beats every identity error
    valid: torch.Tensor     # bool, pixels with at least one valid source


def min_reprojection_with_automask(
        warped_errors: Sequence[torch.Tensor],
        identity_errors: Sequence[torch.Tensor],
        valid_masks: Sequence[torch.Tensor] | None = None) -> MinReprojection:
    """Per-pixel minimum over source errors, automasked against unwarped errors.

    automask = 1 where min(warped) < min(identity): pixels whose appearance is
    already explained without motion (static w.r.t. camera) drop out. Invalid
    pixels (per valid_masks) never win the minimum; pixels invalid in every
    source are reported in `valid` and contribute zero.
    """
    if len(warped_errors) == 0:
        raise ValueError("need at least one warped source error map")
    if len(identity_errors) != len(warped_errors):
        raise ValueError("identity and warped error lists must pair up")
    werr = torch.stack(list(warped_errors))
    ierr = torch.stack(list(identity_errors))
    if valid_masks is not None:
        vm = torch.stack([m.to(torch.bool) for m in valid_masks])
        werr = torch.where(vm, werr, torch.full_like(werr, torch.inf))
        valid = vm.any(0)
    else:
        valid = torch.ones(werr.shape[1:], dtype=torch.bool, device=werr.device)
    min_w = werr.min(0).values
    min_i = ierr.min(0).values
    automask = (min_w < min_i).to(werr.dtype)
    values = torch.where(valid, min_w * automask, torch.zeros_like(min_w))
    return MinReprojection(values, automask, valid)


def masked_reprojection(rep: torch.Tensor, dynamic_mask: torch.Tensor) -> torch.Tensor:
    """(1 - M) * rep: removes dynamic-class object pixels from the error map."""
    if rep.shape != dynamic_mask.shape:
        raise ValueError("error map %r and mask %r shapes differ"
                         % (tuple(rep.shape), tuple(dynamic_mask.shape)))
    return (1 - dynamic_mask) * rep


def masked_mean(rep: torch.Tensor, dynamic_mask: torch.Tensor,
                valid: torch.Tensor | None = None) -> torch.Tensor:
    """Mean of rep over pixels outside the dynamic mask (and inside valid).

    Reducing over the surviving pixels only keeps mask area from diluting the
    static-region signal.
    """
    keep = dynamic_mask < 0.5
    if valid is not None:
        keep = keep & valid
    count = keep.sum()
    if count.item() == 0:
        return rep.sum() * 0.0
    return (rep * keep.to(rep.dtype)).sum() / count.to(rep.dtype)


def _gradient_terms(disp: torch.Tensor, image: torch.Tensor,
                    y_weight: torch.Tensor | None = None
                    ) -> tuple[torch.Tensor, torch.Tensor]:
    """Edge-weighted |∂x d| and |∂y d| term maps shared by both smoothness losses."""
    if disp.dim() == 2:
        disp = disp[None]
    if image.dim() == 3:
        image = image[None]
    grad_d_x = (disp[:, :, 1:] - disp[:, :, :-1]).abs()
    grad_d_y = (disp[:, 1:, :] - disp[:, :-1, :]).abs()
    grad_i_x = (image[:, :, :, 1:] - image[:, :, :, :-1]).abs().mean(1)
    grad_i_y = (image[:, :, 1:, :] - image[:, :, :-1, :]).abs().mean(1)
    tx = grad_d_x * torch.exp(-grad_i_x)
    if y_weight is None:
        ty = grad_d_y * torch.exp(-grad_i_y)
    else:
        if y_weight.dim() == 2:
            y_weight = y_weight[None]
        ty = grad_d_y * y_weight * torch.exp(-grad_i_y)
    return tx, ty


def edge_aware_smoothness(disp_normalized: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Mean of |∂x d̂| e^{-|∂x I|} and |∂y d̂| e^{-|∂y I|} over all gradient terms.

    Expects mean-normalized disparity; color gradients are channel means of
    absolute forward differences.
    """
    tx, ty = _gradient_terms(disp_normalized, image)
    return (tx.sum() + ty.sum()) / (tx.numel() + ty.numel())


def ground_prior_mask(dynamic_mask: torch.Tensor, gamma: float) -> torch.Tensor:
    """Per-gradient weights gamma inside object rows, 1 elsewhere.

    The vertical gradient between rows i and i+1 takes the upper pixel's mask
    value, so the bottom object row is tied to the ground pixel below it.
    Input (H, W) or (B, H, W); output drops the last row.
    """
    m = dynamic_mask[..., :-1, :]
    return gamma * m + (1 - m)


def gds_loss(disp_normalized: torch.Tensor, image: torch.Tensor,
             dynamic_mask: torch.Tensor, gamma: float) -> torch.Tensor:
    """Disparity smoothness with ground-contact weighting of the vertical term.

    Color edges inside and around dynamic-class objects are removed by masking
    the image with (1 - M) before taking gradients; only the vertical
    disparity gradient is weighted by the ground-prior mask, which pulls
    object disparity down to its contact point on the ground.
    """
    if dynamic_mask.dim() == image.dim() - 1:
        mask_c = dynamic_mask.unsqueeze(-3)
    else:
        mask_c = dynamic_mask
    masked_image = (1 - mask_c) * image
    weight = ground_prior_mask(dynamic_mask, gamma)
    tx, ty = _gradient_terms(disp_normalized, masked_image, y_weight=weight)
    return (tx.sum() + ty.sum()) / (tx.numel() + ty.numel())


def coarse_total_loss(rep: torch.Tensor, dynamic_mask: torch.Tensor,
                      smooth: torch.Tensor, beta: float,
                      valid: torch.Tensor | None = None) -> LossReport:
    """Masked-mean reprojection plus beta-weighted smoothness/ground-contact term."""
    rep_scalar = masked_mean(rep, dynamic_mask, valid)
    total = rep_scalar + beta * smooth
    return LossReport(
        total=total,
        parts={"reprojection": rep_scalar, "smoothness": smooth},
        weights={"reprojection": 1.0, "smoothness": beta},
        maps={"reprojection": rep, "dynamic_mask": dynamic_mask},
    )
