"""Dataset ingestion and export.

Directory layout::

    <root>/
      manifest.json                    clip list, frame counts, resolution
      intrinsics.json                  per-clip pinhole parameters
      clips/<id>/frame_<k>.png         8-bit RGB frames
      masks/<id>/frame_<k>.png         16-bit single-channel instance ids
      masks/<id>/classes.json          instance id -> class name
      gt/<id>/depth_<k>.raw            raw float32 depth (synthetic only)
      gt/<id>/poses.json               4x4 world-from-camera per frame

The raw depth format is endianness-fixed: magic ``GCD1``, little-endian uint32
height and width, then height*width little-endian float32 values row-major.

Instance masks binarize to the dynamic-class mask by looking up each id's
class in the sidecar and testing membership in DYNAMIC_CLASSES.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .geometry import CameraIntrinsics, RigidTransform
from .synth import DYNAMIC_CLASSES, RenderedClip, generate_random_clip

_DEPTH_MAGIC = b"GCD1"


class DataError(ValueError):
    """A dataset file is missing or malformed; the message names the sample."""


@dataclass
class SceneSample:
    """One training triplet: target frame, both neighbors, mask and intrinsics.

    Ground-truth fields are populated for synthetic data only. Poses map
    target-frame camera points into the neighbor frames.
    """

    target: torch.Tensor
    prev: torch.Tensor
    next: torch.Tensor
    intrinsics: CameraIntrinsics
    dynamic_mask: torch.Tensor
    gt_depth: torch.Tensor | None = None
    gt_pose_prev: RigidTransform | None = None
    gt_pose_next: RigidTransform | None = None
    instance_ids: torch.Tensor | None = None
    clip_id: str = ""
    frame_index: int = 0

    def __post_init__(self):
        shapes = {tuple(self.target.shape), tuple(self.prev.shape), tuple(self.next.shape)}
        if len(shapes) != 1:
            raise DataError("frame shapes differ in sample %s/%d: %s"
                            % (self.clip_id, self.frame_index, shapes))
        if tuple(self.dynamic_mask.shape) != tuple(self.target.shape[-2:]):
            raise DataError("mask misaligned with target in sample %s/%d"
                            % (self.clip_id, self.frame_index))


def _pose_between(world_from_cam_a: np.ndarray, world_from_cam_b: np.ndarray) -> RigidTransform:
    rel = np.linalg.inv(world_from_cam_b) @ world_from_cam_a
    return RigidTransform(torch.from_numpy(rel[:3, :3].copy()),
                          torch.from_numpy(rel[:3, 3].copy()))


def binarize_instance_mask(ids: np.ndarray, class_map: dict) -> np.ndarray:
    """Instance ids to a {0,1} dynamic-class mask via the id -> class mapping."""
    mask = np.zeros(ids.shape, dtype=np.float32)
    for inst_id, cls in class_map.items():
        if cls in DYNAMIC_CLASSES:
            mask[ids == int(inst_id)] = 1.0
    return mask


def samples_from_clip(clip: RenderedClip) -> list[SceneSample]:
    """In-memory triplets (with full ground truth) for every interior frame."""
    out = []
    for t in range(1, len(clip) - 1):
        mask = binarize_instance_mask(clip.instance_ids[t], clip.class_map)
        out.append(SceneSample(
            target=torch.from_numpy(clip.images[t].copy()),
            prev=torch.from_numpy(clip.images[t - 1].copy()),
            next=torch.from_numpy(clip.images[t + 1].copy()),
            intrinsics=clip.intrinsics,
            dynamic_mask=torch.from_numpy(mask),
            gt_depth=torch.from_numpy(clip.depths[t].astype(np.float32)),
            gt_pose_prev=_pose_between(clip.world_from_camera[t], clip.world_from_camera[t - 1]),
            gt_pose_next=_pose_between(clip.world_from_camera[t], clip.world_from_camera[t + 1]),
            instance_ids=torch.from_numpy(clip.instance_ids[t].copy()),
            clip_id=clip.clip_id,
            frame_index=t,
        ))
    return out


def write_depth_raw(path: Path, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_DEPTH_MAGIC)
        f.write(struct.pack("<II", depth.shape[0], depth.shape[1]))
        f.write(depth.tobytes())


def read_depth_raw(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _DEPTH_MAGIC:
            raise DataError("bad depth file magic in %s" % path)
        h, w = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(h * w * 4), dtype="<f4")
    return data.reshape(h, w).copy()


def export_clip(clip: RenderedClip, root: Path) -> None:
    """Write one rendered clip into the dataset layout (images 8-bit exact)."""
    root = Path(root)
    cdir = root / "clips" / clip.clip_id
    mdir = root / "masks" / clip.clip_id
    gdir = root / "gt" / clip.clip_id
    for d in (cdir, mdir, gdir):
        d.mkdir(parents=True, exist_ok=True)
    for t in range(len(clip)):
        rgb = np.round(np.moveaxis(clip.images[t], 0, 2) * 255.0).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(cdir / ("frame_%04d.png" % t))
        ids = clip.instance_ids[t].astype(np.uint16)
        Image.fromarray(ids).save(mdir / ("frame_%04d.png" % t))
        write_depth_raw(gdir / ("depth_%04d.raw" % t), clip.depths[t])
    with open(mdir / "classes.json", "w") as f:
        json.dump({str(k): v for k, v in sorted(clip.class_map.items())}, f, indent=1,
                  sort_keys=True)
    with open(gdir / "poses.json", "w") as f:
        json.dump({
            "world_from_camera": [m.tolist() for m in clip.world_from_camera],
            "object_velocity": {str(k): list(v) for k, v in sorted(clip.object_velocity.items())},
        }, f, sort_keys=True)


@dataclass
class DatasetManifest:
    root: Path
    height: int
    width: int
    clips: list = field(default_factory=list)          # (clip_id, n_frames)
    intrinsics: dict = field(default_factory=dict)     # clip_id -> CameraIntrinsics
    has_gt: bool = False
    samples: list = field(default_factory=list)        # (clip_id, frame_index)

    def __len__(self) -> int:
        return len(self.samples)


def write_manifest(root: Path, clips: list[RenderedClip]) -> None:
    root = Path(root)
    manifest = {
        "format": "gcdepth-dataset-v1",
        "height": clips[0].spec.height,
        "width": clips[0].spec.width,
        "clips": [{"id": c.clip_id, "frames": len(c)} for c in clips],
    }
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    with open(root / "intrinsics.json", "w") as f:
        json.dump({c.clip_id: c.intrinsics.to_dict() for c in clips}, f,
                  indent=1, sort_keys=True)


def generate_dataset(root: Path, n_clips: int, frames: int, seed: int,
                     width: int = 192, height: int = 64,
                     moving_fraction: float = 0.5) -> DatasetManifest:
    """Render and export a deterministic synthetic dataset."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    clips = []
    for i in range(n_clips):
        clip = generate_random_clip(seed + 7919 * i, frames,
                                    clip_id="clip_%06d" % i,
                                    width=width, height=height,
                                    moving_fraction=moving_fraction)
        export_clip(clip, root)
        clips.append(clip)
    write_manifest(root, clips)
    return load_manifest(root)


def load_manifest(root: Path) -> DatasetManifest:
    """Read and validate the dataset: every referenced file must exist up front."""
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError("no manifest.json under %s" % root)
    with open(mpath) as f:
        raw = json.load(f)
    if raw.get("format") != "gcdepth-dataset-v1":
        raise DataError("unrecognized dataset format in %s" % mpath)
    with open(root / "intrinsics.json") as f:
        intr = {k: CameraIntrinsics.from_dict(v) for k, v in json.load(f).items()}
    manifest = DatasetManifest(root=root, height=raw["height"], width=raw["width"],
                               has_gt=(root / "gt").exists())
    for entry in raw["clips"]:
        cid, n = entry["id"], entry["frames"]
        if cid not in intr:
            raise DataError("clip %s missing from intrinsics.json" % cid)
        for t in range(n):
            img = root / "clips" / cid / ("frame_%04d.png" % t)
            msk = root / "masks" / cid / ("frame_%04d.png" % t)
            if not img.exists():
                raise DataError("clip %s frame %d: missing image %s" % (cid, t, img))
            if not msk.exists():
                raise DataError("clip %s frame %d: missing mask %s" % (cid, t, msk))
        if not (root / "masks" / cid / "classes.json").exists():
            raise DataError("clip %s: missing masks/%s/classes.json" % (cid, cid))
        manifest.clips.append((cid, n))
        manifest.intrinsics[cid] = intr[cid]
        for t in range(1, n - 1):
            manifest.samples.append((cid, t))
    return manifest


def _load_image(path: Path, sample_name: str) -> torch.Tensor:
    img = Image.open(path)
    if img.mode != "RGB":
        raise DataError("sample %s: image %s is %s, expected RGB"
                        % (sample_name, path, img.mode))
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(np.moveaxis(arr, 2, 0).copy())


def _load_mask(path: Path, class_map: dict, sample_name: str) -> tuple[torch.Tensor, torch.Tensor]:
    img = Image.open(path)
    if img.mode not in ("I;16", "I", "L"):
        raise DataError("sample %s: mask %s has mode %s, expected single-channel ids"
                        % (sample_name, path, img.mode))
    ids = np.asarray(img, dtype=np.int32)
    mask = binarize_instance_mask(ids, class_map)
    uniq = np.unique(mask)
    if not np.all(np.isin(uniq, (0.0, 1.0))):
        raise DataError("sample %s: mask not binary after thresholding" % sample_name)
    return torch.from_numpy(mask), torch.from_numpy(ids)


def load_sample(manifest: DatasetManifest, index: int,
                resolution: tuple | None = None) -> SceneSample:
    """Load and decode one triplet; intrinsics scale to the requested resolution."""
    cid, t = manifest.samples[index]
    name = "%s/%d" % (cid, t)
    root = manifest.root
    with open(root / "masks" / cid / "classes.json") as f:
        class_map = json.load(f)

    frames = []
    for k in (t, t - 1, t + 1):
        frames.append(_load_image(root / "clips" / cid / ("frame_%04d.png" % k), name))
    mask, ids = _load_mask(root / "masks" / cid / ("frame_%04d.png" % t), class_map, name)
    if tuple(mask.shape) != tuple(frames[0].shape[-2:]):
        raise DataError("sample %s: mask size %s != image size %s"
                        % (name, tuple(mask.shape), tuple(frames[0].shape[-2:])))

    intrinsics = manifest.intrinsics[cid]
    if resolution is not None and tuple(resolution) != (manifest.height, manifest.width):
        h, w = resolution
        frames = [torch.nn.functional.interpolate(f[None], size=(h, w), mode="bilinear",
                                                  align_corners=False)[0] for f in frames]
        mask = (torch.nn.functional.interpolate(mask[None, None], size=(h, w),
                                                mode="nearest")[0, 0])
        ids = None
        intrinsics = intrinsics.scaled(w, h)

    gt_depth = None
    pose_prev = pose_next = None
    gdir = root / "gt" / cid
    if gdir.exists():
        dpath = gdir / ("depth_%04d.raw" % t)
        if dpath.exists() and resolution is None:
            gt_depth = torch.from_numpy(read_depth_raw(dpath))
        with open(gdir / "poses.json") as f:
            poses = json.load(f)
        wfc = [np.asarray(m, dtype=np.float64) for m in poses["world_from_camera"]]
        pose_prev = _pose_between(wfc[t], wfc[t - 1])
        pose_next = _pose_between(wfc[t], wfc[t + 1])

    return SceneSample(
        target=frames[0], prev=frames[1], next=frames[2],
        intrinsics=intrinsics, dynamic_mask=mask,
        gt_depth=gt_depth, gt_pose_prev=pose_prev, gt_pose_next=pose_next,
        instance_ids=ids, clip_id=cid, frame_index=t,
    )
