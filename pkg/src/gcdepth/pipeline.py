"""Two-stage training orchestration.

Coarse stage: depth and pose networks train jointly on the masked minimum
reprojection loss plus the ground-contact smoothness term. The trained pair is
then frozen; the fine stage clones the depth network and refines it with the
unmasked reprojection loss, regularized toward the frozen coarse depth with a
cost-volume-derived per-pixel weight.

Both temporal neighbors serve as reprojection sources with per-pixel minimum
and automasking in both stages; geometry-invalid pixels are excluded from all
loss means.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import costreg, losses
from .config import ConfigError, TrainConfig
from .data import DatasetManifest, SceneSample, load_manifest, load_sample
from .evalviz import aggregate_reports, evaluate_prediction
from .geometry import (CameraIntrinsics, RigidTransform, axis_angle_to_rotation,
                       normalize_disparity, project_batch, warp_image)
from .models import (Checkpoint, DepthNetworkSpec, PoseNetworkSpec,
                     build_depth_network, build_pose_network, depth_forward,
                     load_checkpoint, pose_forward, save_checkpoint,
                     state_dict_hash)

ABLATION_VARIANTS = {
    # coarse-stage variants: (mask reprojection, smoothness kind)
    "a": {"stage": "coarse", "mask_reprojection": False, "smoothness_in_coarse": "plain"},
    "b": {"stage": "coarse", "mask_reprojection": True, "smoothness_in_coarse": "plain"},
    "c": {"stage": "coarse", "mask_reprojection": True, "smoothness_in_coarse": "gds"},
    # fine-stage variants: regularizer choice
    "d": {"stage": "fine", "fine_regularizer": "none"},
    "e": {"stage": "fine", "fine_regularizer": "filter"},
    "f": {"stage": "fine", "fine_regularizer": "basic"},
    "g": {"stage": "fine", "fine_regularizer": "weighted"},
}


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss; message carries the last finite step."""


@dataclass
class StageState:
    """Live networks plus the frozen references of the fine stage."""

    depth_net: torch.nn.Module
    pose_net: torch.nn.Module
    depth_spec: DepthNetworkSpec
    pose_spec: PoseNetworkSpec
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    frozen_depth: torch.nn.Module | None = None
    frozen_pose: torch.nn.Module | None = None
    frozen_depth_hash: str = ""
    frozen_pose_hash: str = ""
    stats: dict = field(default_factory=dict)


def _batch_indices(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start:start + batch_size]
    rest = n % batch_size
    if rest and n < batch_size:
        yield order


def _collate(samples: list[SceneSample]):
    batch = {
        "target": torch.stack([s.target for s in samples]),
        "prev": torch.stack([s.prev for s in samples]),
        "next": torch.stack([s.next for s in samples]),
        "mask": torch.stack([s.dynamic_mask for s in samples]),
    }
    k0 = samples[0].intrinsics
    for s in samples[1:]:
        if s.intrinsics != k0:
            raise ConfigError("mixed intrinsics inside one batch are not supported")
    batch["intrinsics"] = k0
    return batch


def _pose_pair(pose_net, batch):
    """Target-to-source transforms for both neighbors, (B, 3, 3) and (B, 3).

    Frames go through the pose network in temporal order; the transform toward
    the earlier frame is inverted.
    """
    vec_p = pose_forward(pose_net, batch["prev"], batch["target"])
    vec_n = pose_forward(pose_net, batch["target"], batch["next"])
    out = {}
    r_p = axis_angle_to_rotation(vec_p[:, :3])
    t_p = vec_p[:, 3:]
    rt = r_p.transpose(1, 2)
    out["prev"] = (rt, -torch.einsum("bij,bj->bi", rt, t_p))
    out["next"] = (axis_angle_to_rotation(vec_n[:, :3]), vec_n[:, 3:])
    return out


def _reprojection(batch, depth, poses, config: TrainConfig):
    """Min-over-sources photometric error with automasking for one depth map."""
    k = batch["intrinsics"]
    target = batch["target"]
    warped_errs, iden_errs, valids = [], [], []
    for name in ("prev", "next"):
        rot, tr = poses[name]
        grid = project_batch(depth, rot, tr, k)
        warped, oob = warp_image(batch[name], grid.coords)
        err = losses.photometric_error(target, warped, config.weights.alpha,
                                       config.alpha_on_l1)
        warped_errs.append(err)
        iden_errs.append(losses.photometric_error(target, batch[name],
                                                  config.weights.alpha,
                                                  config.alpha_on_l1))
        valids.append(grid.valid & ~oob)
    if not config.automask:
        werr = torch.stack(warped_errs)
        vm = torch.stack(valids)
        werr = torch.where(vm, werr, torch.full_like(werr, torch.inf))
        valid = vm.any(0)
        vals = torch.where(valid, werr.min(0).values, torch.zeros_like(werr[0]))
        return losses.MinReprojection(vals, torch.ones_like(vals), valid)
    return losses.min_reprojection_with_automask(warped_errs, iden_errs, valids)


def _assert_mask_excluded(rep_scalar, rep_map, mask, valid):
    """Poison dynamic-mask pixels and re-reduce: the scalar must not move."""
    poisoned = rep_map.detach().clone()
    poisoned[mask > 0.5] = 1e12
    check = losses.masked_mean(poisoned, mask, valid)
    if not torch.isclose(check, rep_scalar.detach(), rtol=1e-9, atol=1e-9):
        raise AssertionError("a dynamic-mask pixel leaked into the reprojection mean")


def coarse_step(batch, state: StageState, config: TrainConfig) -> losses.LossReport:
    out = depth_forward(state.depth_net, batch["target"], state.depth_spec)
    poses = _pose_pair(state.pose_net, batch)
    mask = batch["mask"]
    zero_mask = torch.zeros_like(mask)
    totals, rep_parts, smooth_parts = [], [], []
    for s in sorted(out["disp"]):
        rep = _reprojection(batch, out["depth"][s], poses, config)
        loss_mask = mask if config.mask_reprojection else zero_mask
        d_hat = normalize_disparity(out["disp"][s])
        if config.smoothness_in_coarse == "gds":
            smooth = losses.gds_loss(d_hat, batch["target"], mask, config.weights.gamma)
        elif config.smoothness_in_coarse == "plain":
            smooth = losses.edge_aware_smoothness(d_hat, batch["target"])
        else:
            smooth = torch.zeros((), dtype=d_hat.dtype)
        report = losses.coarse_total_loss(rep.values, loss_mask, smooth,
                                          config.weights.beta, valid=rep.valid)
        if config.mask_reprojection:
            _assert_mask_excluded(report.parts["reprojection"], rep.values, mask, rep.valid)
        totals.append(report.total)
        rep_parts.append(report.parts["reprojection"])
        smooth_parts.append(smooth)
    total = torch.stack(totals).mean()
    return losses.LossReport(
        total=total,
        parts={"reprojection": torch.stack(rep_parts).mean(),
               "smoothness": torch.stack(smooth_parts).mean()},
        weights={"reprojection": 1.0, "smoothness": config.weights.beta},
    )


def _delta_d(coarse_depth: torch.Tensor, config: TrainConfig) -> float:
    if config.delta_d_global_cap:
        return config.delta_d_fraction * 80.0
    return config.delta_d_fraction * float(coarse_depth.max())


def _weighting_for_sample(i, batch, d1, poses, config: TrainConfig):
    """Cost-volume depth and weighting factor for one image of the batch."""
    d1_np = d1[i].detach().numpy().astype(np.float64)
    candidates = costreg.build_depth_candidates(
        d1_np, config.candidate_count, config.candidate_spacing)
    k = batch["intrinsics"]
    target = batch["target"][i].numpy()
    sources = ["prev"] if config.cost_source == "prev" else ["prev", "next"]
    vols = []
    for name in sources:
        rot, tr = poses[name]
        pose = RigidTransform(rot[i].detach(), tr[i].detach())
        vols.append(costreg.cost_volume_depth(
            target, batch[name][i].numpy(), pose, k, candidates,
            fallback_depth=d1_np, box_filter=config.cost_box_filter))
    if len(vols) == 1:
        dcv = vols[0].depth
    else:
        combined = np.where(np.isfinite(vols[0].costs), vols[0].costs, np.inf)
        other = np.where(np.isfinite(vols[1].costs), vols[1].costs, np.inf)
        both = np.isfinite(combined) & np.isfinite(other)
        merged = np.where(both, 0.5 * (combined + other), np.minimum(combined, other))
        best = np.argmin(merged, axis=0)
        dcv = candidates.values[best]
        dead = ~np.isfinite(merged).any(axis=0)
        dcv = np.where(dead, d1_np, dcv)
    delta = _delta_d(d1[i], config)
    return costreg.cv_weighting_factor(d1[i], torch.from_numpy(dcv).to(d1.dtype), delta)


def fine_step(batch, state: StageState, config: TrainConfig) -> losses.LossReport:
    with torch.no_grad():
        d1 = depth_forward(state.frozen_depth, batch["target"], state.depth_spec)
        d1 = d1["depth"][min(state.depth_spec.scales)]
        poses = _pose_pair(state.frozen_pose, batch)
        weightings = None
        if config.fine_regularizer == "weighted":
            cache = state.stats.setdefault("weighting_cache", {})
            key = batch.get("cache_key")
            if config.cache_weighting and key is not None and key in cache:
                weightings = cache[key]
            else:
                lams, mus, deltas = [], [], []
                for i in range(batch["target"].shape[0]):
                    w = _weighting_for_sample(i, batch, d1, poses, config)
                    lams.append(w.lambda_cv)
                    mus.append(w.mu_cv)
                    deltas.append(w.delta_d)
                weightings = (torch.stack(lams), torch.stack(mus), deltas)
                if config.cache_weighting and key is not None:
                    cache[key] = weightings
            lam, mu, _ = weightings
            if (lam < 1).any() or ((lam == 1) != (mu == 1)).any():
                raise AssertionError("weighting factor violated lambda/mu invariants")
            state.stats["lambda_min"] = min(state.stats.get("lambda_min", np.inf),
                                            float(lam.min()))
            state.stats["lambda_checks"] = state.stats.get("lambda_checks", 0) + 1
        filter_masks = None
        if config.fine_regularizer == "filter":
            filter_masks = {}
            for name in ("prev", "next"):
                rot, tr = poses[name]
                d1_src = depth_forward(state.frozen_depth, batch[name],
                                       state.depth_spec)["depth"][min(state.depth_spec.scales)]
                fm = []
                for i in range(batch["target"].shape[0]):
                    pose = RigidTransform(rot[i], tr[i])
                    fm.append(costreg.consistency_filter_mask(
                        d1[i], d1_src[i], pose, batch["intrinsics"],
                        config.filter_threshold))
                filter_masks[name] = torch.stack(fm)

    out = depth_forward(state.depth_net, batch["target"], state.depth_spec)
    totals, rep_parts, reg_parts = [], [], []
    for s in sorted(out["disp"]):
        rep = _reprojection(batch, out["depth"][s], poses, config)
        valid = rep.valid
        rep_vals = rep.values
        if filter_masks is not None:
            excluded = (filter_masks["prev"] > 0.5) | (filter_masks["next"] > 0.5)
            valid = valid & ~excluded
            rep_vals = torch.where(excluded, torch.zeros_like(rep_vals), rep_vals)
        if config.fine_regularizer == "weighted":
            lam, mu, deltas = weightings
            reg = _regularize_per_sample(d1, out["depth"][s], lam, mu, deltas)
        elif config.fine_regularizer == "basic":
            reg = torch.stack([
                costreg.regularization_loss_basic(d1[i], out["depth"][s][i],
                                                  _delta_d(d1[i], config))
                for i in range(d1.shape[0])])
        else:
            reg = torch.zeros_like(out["depth"][s])
        report = costreg.fine_total_loss(rep_vals, reg, config.weights.rho, valid=valid)
        totals.append(report.total)
        rep_parts.append(report.parts["reprojection"])
        reg_parts.append(report.parts["regularization"])
    total = torch.stack(totals).mean()
    return losses.LossReport(
        total=total,
        parts={"reprojection": torch.stack(rep_parts).mean(),
               "regularization": torch.stack(reg_parts).mean()},
        weights={"reprojection": 1.0, "regularization": config.weights.rho},
    )


def _regularize_per_sample(d1, d2, lam, mu, deltas):
    out = []
    for i in range(d1.shape[0]):
        w = costreg.WeightingFactor(lam[i], mu[i], deltas[i])
        out.append(costreg.regularization_loss(d1[i], d2[i], w))
    return torch.stack(out)


class _Loader:
    """Deterministic lazy batch loader over a dataset manifest."""

    def __init__(self, manifest: DatasetManifest, config: TrainConfig):
        self.manifest = manifest
        self.config = config

    def epoch_batches(self, epoch: int):
        rng = np.random.default_rng((self.config.seed, epoch))
        for idx in _batch_indices(len(self.manifest), self.config.batch_size, rng):
            samples = [load_sample(self.manifest, int(i)) for i in idx]
            batch = _collate(samples)
            batch["cache_key"] = tuple(int(i) for i in idx)
            yield batch


def _make_state(config: TrainConfig, lr: float, depth_state=None, pose_state=None
                ) -> StageState:
    dspec = DepthNetworkSpec(backbone=config.backbone, scales=tuple(config.scales),
                             min_depth=config.min_depth, max_depth=config.max_depth,
                             base_channels=config.base_channels)
    pspec = PoseNetworkSpec(backbone=config.backbone, base_channels=config.base_channels)
    torch.manual_seed(config.seed)
    depth_net = build_depth_network(dspec)
    pose_net = build_pose_network(pspec)
    if depth_state is not None:
        depth_net.load_state_dict(depth_state)
    if pose_state is not None:
        pose_net.load_state_dict(pose_state)
    params = list(depth_net.parameters()) + list(pose_net.parameters())
    optimizer = torch.optim.Adam(params, lr=lr)
    return StageState(depth_net, pose_net, dspec, pspec, optimizer)


def _train_loop(state: StageState, loader: _Loader, config: TrainConfig,
                epochs: int, step_fn, out_dir: Path, tag: str,
                log=print) -> list:
    out_dir.mkdir(parents=True, exist_ok=True)
    scheduler = None
    if config.lr_schedule == "exp0.9":
        scheduler = torch.optim.lr_scheduler.ExponentialLR(state.optimizer, 0.9)
    history = []
    last_finite = None
    best_val = np.inf
    config_hash = config.config_hash()
    val_batch = None
    for epoch in range(epochs):
        state.epoch = epoch
        epoch_losses = []
        t0 = time.time()
        for step, batch in enumerate(loader.epoch_batches(epoch)):
            if val_batch is None:
                val_batch = batch
            report = step_fn(batch, state, config)
            loss = report.total
            if not torch.isfinite(loss):
                raise DivergenceError(
                    "non-finite loss at epoch %d step %d; last finite step: %r"
                    % (epoch, step, last_finite))
            state.optimizer.zero_grad()
            loss.backward()
            state.optimizer.step()
            last_finite = {"epoch": epoch, "step": step, "loss": loss.item()}
            epoch_losses.append(loss.item())
        if scheduler is not None:
            scheduler.step()
        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        history.append(mean_loss)
        log("[%s] epoch %d/%d  loss %.6f  (%.1fs)"
            % (tag, epoch + 1, epochs, mean_loss, time.time() - t0))
        ckpt_path = out_dir / ("%s_epoch_%03d.pt" % (tag, epoch))
        _save_stage_checkpoint(ckpt_path, state, tag, epoch, config_hash, history)
        with torch.no_grad():
            val = float(step_fn(val_batch, state, config).total)
        if val < best_val:
            best_val = val
            _save_stage_checkpoint(out_dir / ("%s_best.pt" % tag), state, tag,
                                   epoch, config_hash, history)
    _save_stage_checkpoint(out_dir / ("%s_final.pt" % tag), state, tag,
                           epochs - 1, config_hash, history)
    (out_dir / ("%s_history.json" % tag)).write_text(json.dumps(history))
    return history


def _save_stage_checkpoint(path, state: StageState, stage, epoch, config_hash, history):
    extra = {"loss_history": list(history)}
    if state.frozen_depth_hash:
        extra["frozen_depth_hash"] = state.frozen_depth_hash
        extra["frozen_pose_hash"] = state.frozen_pose_hash
    save_checkpoint(path, state.depth_net, state.pose_net, stage, epoch,
                    config_hash, state.depth_spec, state.pose_spec, extra=extra)


def train_coarse(config: TrainConfig, log=print) -> Path:
    """Joint depth+pose training on masked reprojection plus GDS/smoothness."""
    manifest = load_manifest(Path(config.dataset))
    loader = _Loader(manifest, config)
    state = _make_state(config, config.coarse_lr)
    out_dir = Path(config.out_dir)
    _train_loop(state, loader, config, config.coarse_epochs, coarse_step,
                out_dir, "coarse", log=log)
    return out_dir / "coarse_final.pt"


def train_fine(config: TrainConfig, coarse_ckpt: Path, log=print) -> Path:
    """Refine a cloned depth network with unmasked reprojection + regularization."""
    ckpt = load_checkpoint(coarse_ckpt)
    if ckpt.stage != "coarse":
        raise ConfigError("fine stage needs a coarse checkpoint, got %r" % ckpt.stage)
    manifest = load_manifest(Path(config.dataset))
    if (manifest.height, manifest.width) != (config.height, config.width):
        raise ConfigError("dataset resolution %s does not match config %s"
                          % ((manifest.height, manifest.width),
                             (config.height, config.width)))
    loader = _Loader(manifest, config)
    state = _make_state(config, config.fine_lr,
                        depth_state=ckpt.depth_state, pose_state=ckpt.pose_state)
    state.optimizer = torch.optim.Adam(state.depth_net.parameters(), lr=config.fine_lr)
    state.frozen_depth = ckpt.build_depth().eval()
    state.frozen_pose = ckpt.build_pose().eval()
    for p in state.frozen_depth.parameters():
        p.requires_grad_(False)
    for p in state.frozen_pose.parameters():
        p.requires_grad_(False)
    state.frozen_depth_hash = state_dict_hash(state.frozen_depth)
    state.frozen_pose_hash = state_dict_hash(state.frozen_pose)
    out_dir = Path(config.out_dir)
    _train_loop(state, loader, config, config.fine_epochs, fine_step,
                out_dir, "fine", log=log)
    if state_dict_hash(state.frozen_depth) != state.frozen_depth_hash:
        raise AssertionError("frozen coarse depth network changed during the fine stage")
    if state_dict_hash(state.frozen_pose) != state.frozen_pose_hash:
        raise AssertionError("frozen pose network changed during the fine stage")
    return out_dir / "fine_final.pt"


def evaluate_checkpoint(ckpt_path: Path, dataset: Path, batch_size: int = 8,
                        scale: bool = True) -> dict:
    """Whole-image and dynamic-object metrics of a checkpoint on a dataset."""
    ckpt = load_checkpoint(ckpt_path)
    net = ckpt.build_depth().eval()
    manifest = load_manifest(Path(dataset))
    if not manifest.has_gt:
        raise ConfigError("evaluation needs a dataset with ground-truth depth")
    finest = min(ckpt.depth_spec.scales)
    wir, dor = [], []
    with torch.no_grad():
        for start in range(0, len(manifest), batch_size):
            samples = [load_sample(manifest, i)
                       for i in range(start, min(start + batch_size, len(manifest)))]
            images = torch.stack([s.target for s in samples])
            depth = depth_forward(net, images, ckpt.depth_spec)["depth"][finest]
            for s, d in zip(samples, depth):
                reports = evaluate_prediction(d.numpy().astype(np.float64),
                                              s.gt_depth.numpy().astype(np.float64),
                                              s.dynamic_mask.numpy(), scale=scale)
                wir.append(reports["WIR"])
                dor.append(reports["DOR"])
    return {"WIR": aggregate_reports(wir, "WIR"), "DOR": aggregate_reports(dor, "DOR")}


def run_ablation(variant: str, config: TrainConfig, coarse_ckpt: Path | None = None,
                 eval_dataset: Path | None = None, log=print) -> dict:
    """Train one named experiment and evaluate it on the held-out split.

    Coarse variants (a, b, c) train from scratch; fine variants (d, e, f, g)
    refine the supplied coarse checkpoint (from variant c).
    """
    if variant not in ABLATION_VARIANTS:
        raise ConfigError("unknown ablation variant %r (a..g)" % variant)
    override = ABLATION_VARIANTS[variant]
    cfg = config.replace(**{k: v for k, v in override.items() if k != "stage"})
    cfg = cfg.replace(stage="ablation-" + variant,
                      out_dir=str(Path(config.out_dir) / ("exp_" + variant)))
    if override["stage"] == "coarse":
        ckpt = train_coarse(cfg, log=log)
    else:
        if coarse_ckpt is None:
            raise ConfigError("fine ablation %r needs a coarse checkpoint" % variant)
        ckpt = train_fine(cfg, coarse_ckpt, log=log)
    result = {"variant": variant, "checkpoint": str(ckpt)}
    if eval_dataset is not None:
        reports = evaluate_checkpoint(ckpt, eval_dataset)
        result["metrics"] = {tag: rep.to_dict() for tag, rep in reports.items()}
    return result
