"""Median-scaled depth metrics over whole-image and dynamic-object regions,
plus depth/error-map and point-cloud export.

Metrics follow the standard protocol: predictions are rescaled by the ratio of
ground-truth to prediction medians over the valid whole-image region, clamped
to [1e-3, 80] scene units, then the seven error/accuracy numbers are computed
per image and averaged over the test set. DOR restricts the pixel set to the
dynamic-class mask while keeping the whole-image scaling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics

EVAL_MIN_DEPTH = 1e-3
EVAL_MAX_DEPTH = 80.0

METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")


@dataclass
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    region: str = "WIR"
    sample_count: int = 0
    empty: bool = False

    def __post_init__(self):
        if not self.empty:
            vals = [getattr(self, n) for n in METRIC_NAMES]
            if not all(math.isfinite(v) for v in vals):
                raise ValueError("non-finite metric in %r" % (vals,))
            if not self.delta1 <= self.delta2 <= self.delta3:
                raise ValueError("accuracy ratios must be non-decreasing")

    @classmethod
    def empty_region(cls, region: str) -> "MetricsReport":
        return cls(*(float("nan"),) * 7, region=region, sample_count=0, empty=True)

    def to_dict(self) -> dict:
        return asdict(self)


def median_scale(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """pred * (median(gt[valid]) / median(pred[valid])), clamped to the eval range."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("median scaling needs a non-empty valid mask")
    pred_med = float(np.median(pred[valid]))
    gt_med = float(np.median(gt[valid]))
    if pred_med == 0 or gt_med == 0:
        raise ValueError("zero median depth; cannot scale")
    scaled = pred * (gt_med / pred_med)
    return np.clip(scaled, EVAL_MIN_DEPTH, EVAL_MAX_DEPTH)


def compute_metrics(pred: np.ndarray, gt: np.ndarray, region: np.ndarray,
                    region_tag: str = "WIR") -> MetricsReport:
    """Seven standard depth metrics over the region's pixels (pred pre-scaled)."""
    region = np.asarray(region, dtype=bool)
    if not region.any():
        return MetricsReport.empty_region(region_tag)
    p = pred[region]
    g = gt[region]
    thresh = np.maximum(g / p, p / g)
    d1 = float((thresh < 1.25).mean())
    d2 = float((thresh < 1.25 ** 2).mean())
    d3 = float((thresh < 1.25 ** 3).mean())
    abs_rel = float(np.mean(np.abs(p - g) / g))
    sq_rel = float(np.mean((p - g) ** 2 / g))
    rmse = float(np.sqrt(np.mean((p - g) ** 2)))
    rmse_log = float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2)))
    return MetricsReport(abs_rel, sq_rel, rmse, rmse_log, d1, d2, d3,
                         region=region_tag, sample_count=1)


def evaluate_prediction(pred: np.ndarray, gt: np.ndarray, dynamic_mask: np.ndarray,
                        scale: bool = True) -> dict:
    """WIR and DOR reports for one image; whole-image median scaling for both."""
    valid = (gt > EVAL_MIN_DEPTH) & (gt < EVAL_MAX_DEPTH)
    gt_c = np.clip(gt, EVAL_MIN_DEPTH, EVAL_MAX_DEPTH)
    scaled = median_scale(pred, gt_c, valid) if scale else np.clip(
        pred, EVAL_MIN_DEPTH, EVAL_MAX_DEPTH)
    dyn = np.asarray(dynamic_mask) > 0.5
    return {
        "WIR": compute_metrics(scaled, gt_c, valid, "WIR"),
        "DOR": compute_metrics(scaled, gt_c, valid & dyn, "DOR"),
    }


def aggregate_reports(reports: list[MetricsReport], region_tag: str) -> MetricsReport:
    """Average per-image reports; images with an empty region are skipped."""
    alive = [r for r in reports if not r.empty]
    if not alive:
        return MetricsReport.empty_region(region_tag)
    mean = lambda name: float(np.mean([getattr(r, name) for r in alive]))
    return MetricsReport(*(mean(n) for n in METRIC_NAMES), region=region_tag,
                         sample_count=len(alive))


def metrics_to_json(reports: dict, path: Path | None = None) -> str:
    payload = {tag: rep.to_dict() for tag, rep in reports.items()}
    text = json.dumps(payload, indent=1, sort_keys=True)
    if path is not None:
        Path(path).write_text(text)
    return text


def format_metrics_table(reports: dict) -> str:
    lines = ["region  " + "  ".join("%8s" % n for n in METRIC_NAMES) + "  samples"]
    for tag, r in reports.items():
        if r.empty:
            lines.append("%-6s  (empty region)" % tag)
        else:
            row = "  ".join("%8.4f" % getattr(r, n) for n in METRIC_NAMES)
            lines.append("%-6s  %s  %7d" % (tag, row, r.sample_count))
    return "\n".join(lines)


def colorize_disparity(disparity: np.ndarray, percentile: float = 95.0) -> np.ndarray:
    """Disparity to an RGB image via a luminance-monotone colormap (magma)."""
    import matplotlib

    vmax = np.percentile(disparity, percentile)
    scaled = np.clip(disparity / max(vmax, 1e-12), 0.0, 1.0)
    rgba = matplotlib.colormaps["magma"](scaled)
    return rgba[..., :3].astype(np.float32)


def colorize_error(error: np.ndarray, max_error: float | None = None) -> np.ndarray:
    """Error map on a blue (small) to red (large) ramp."""
    if max_error is None:
        max_error = float(np.percentile(error, 95))
    e = np.clip(error / max(max_error, 1e-12), 0.0, 1.0)
    rgb = np.stack([e, 0.15 * np.ones_like(e), 1.0 - e], axis=-1)
    return rgb.astype(np.float32)


def export_point_cloud(path: Path, depth: np.ndarray, image: np.ndarray,
                       intrinsics: CameraIntrinsics,
                       valid: np.ndarray | None = None) -> int:
    """ASCII 'x y z r g b' per valid pixel, backprojected through the intrinsics."""
    h, w = depth.shape
    uu, vv = np.meshgrid(np.arange(w), np.arange(h), indexing="xy")
    x = (uu - intrinsics.cx) / intrinsics.fx * depth
    y = (vv - intrinsics.cy) / intrinsics.fy * depth
    keep = np.ones_like(depth, dtype=bool) if valid is None else np.asarray(valid, bool)
    rgb = np.clip(np.moveaxis(image, 0, 2) * 255.0, 0, 255).astype(np.uint8)
    count = 0
    with open(path, "w") as f:
        for i in range(h):
            for j in range(w):
                if keep[i, j]:
                    f.write("%.6f %.6f %.6f %d %d %d\n"
                            % (x[i, j], y[i, j], depth[i, j], *rgb[i, j]))
                    count += 1
    return count


def render_outputs(out_dir: Path, name: str, image: np.ndarray, disparity: np.ndarray,
                   intrinsics: CameraIntrinsics, gt_depth: np.ndarray | None = None
                   ) -> dict:
    """Write colorized disparity, an error map when GT exists, and a point cloud."""
    from PIL import Image as PILImage

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}

    def save_rgb(tag, rgb):
        p = out_dir / ("%s_%s.png" % (name, tag))
        PILImage.fromarray(np.round(rgb * 255.0).astype(np.uint8), "RGB").save(p)
        written[tag] = p

    save_rgb("disp", colorize_disparity(disparity))
    depth = 1.0 / np.maximum(disparity, 1e-12)
    if gt_depth is not None:
        valid = (gt_depth > EVAL_MIN_DEPTH) & (gt_depth < EVAL_MAX_DEPTH)
        scaled = median_scale(depth, gt_depth, valid)
        err = np.abs(scaled - gt_depth) / gt_depth
        save_rgb("error", colorize_error(err, max_error=0.25))
        depth = scaled
    pc = out_dir / ("%s_points.xyz" % name)
    export_point_cloud(pc, depth, image, intrinsics)
    written["points"] = pc
    return written
