"""Scan dataset model and directory IO.

A dataset directory contains:
    intrinsics.json            fx, fy, cx, cy, width, height, depth_max
    bounds.json                min/max xyz of the scene box
    objects.json               [{object_id, per_view_captions}, ...]
    frames/NNNN.rgb.png        8-bit RGB
    frames/NNNN.depth.png      16-bit grayscale, millimeters, 0 = invalid
    frames/NNNN.pose.json      camera-to-world quaternion + translation
    frames/NNNN.mask.png       8-bit labels, pixel = 1-based object index, 0 = none

Frame order is the lexicographic order of the frame stems.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, Pose


class DatasetError(ValueError):
    """Missing file or malformed content in a dataset directory."""


@dataclass(frozen=True)
class RGBDFrame:
    rgb: np.ndarray                      # (H, W, 3) uint8
    depth: np.ndarray                    # (H, W) float64 meters, 0 = invalid
    camera_pose: Pose                    # camera-to-world
    masks: dict[str, np.ndarray]         # object_id -> (H, W) bool

    def __post_init__(self):
        h, w = self.depth.shape
        if self.rgb.shape != (h, w, 3):
            raise DatasetError("rgb and depth dimensions disagree")
        for oid, m in self.masks.items():
            if m.shape != (h, w):
                raise DatasetError(f"mask for {oid!r} has wrong dimensions")
        if np.any(self.depth < 0):
            raise DatasetError("negative depth")
        self.rgb.setflags(write=False)
        self.depth.setflags(write=False)
        for m in self.masks.values():
            m.setflags(write=False)


@dataclass(frozen=True)
class SceneObject:
    object_id: str
    per_view_captions: list[str] = field(default_factory=list)
    aggregated_caption: str = ""


@dataclass(frozen=True)
class SceneDataset:
    frames: list[RGBDFrame]
    intrinsics: CameraIntrinsics
    objects: list[SceneObject]
    scene_bounds: np.ndarray             # (2, 3) min/max, meters
    depth_max: float = 10.0

    def __post_init__(self):
        if not self.frames:
            raise DatasetError("no frames")
        b = np.asarray(self.scene_bounds, dtype=np.float64).reshape(2, 3)
        if np.any(b[1] <= b[0]):
            raise DatasetError("scene bounds must have positive extent")
        b.setflags(write=False)
        object.__setattr__(self, "scene_bounds", b)
        ids = [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate object_id")
        known = set(ids)
        for i, f in enumerate(self.frames):
            unknown = set(f.masks) - known
            if unknown:
                raise DatasetError(f"frame {i} mask references unknown object_id {sorted(unknown)}")

    def object_by_id(self, object_id: str) -> SceneObject:
        for o in self.objects:
            if o.object_id == object_id:
                return o
        raise DatasetError(f"unknown object_id {object_id!r}")

    def with_objects(self, objects: list[SceneObject]) -> "SceneDataset":
        return SceneDataset(self.frames, self.intrinsics, objects,
                            np.array(self.scene_bounds), self.depth_max)


@dataclass(frozen=True)
class TaskSpec:
    movable_object_id: str
    relevant_object_ids: list[str]
    goal_caption: str
    normalizing_caption: str

    def __post_init__(self):
        if self.movable_object_id not in self.relevant_object_ids:
            raise DatasetError("movable object must be among the relevant objects")
        if not self.goal_caption or not self.normalizing_caption:
            raise DatasetError("captions must be non-empty")

    def to_dict(self) -> dict:
        return {
            "movable_object_id": self.movable_object_id,
            "relevant_object_ids": list(self.relevant_object_ids),
            "goal_caption": self.goal_caption,
            "normalizing_caption": self.normalizing_caption,
        }

    @staticmethod
    def from_dict(d: dict) -> "TaskSpec":
        return TaskSpec(d["movable_object_id"], list(d["relevant_object_ids"]),
                        d["goal_caption"], d["normalizing_caption"])


# ---------------------------------------------------------------------------
# directory IO
# ---------------------------------------------------------------------------

def _read_json(path: Path) -> dict:
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    with open(path) as f:
        return json.load(f)


def load_dataset(path: str | Path) -> SceneDataset:
    """Load and validate a dataset directory."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"not a directory: {root}")

    intr_raw = _read_json(root / "intrinsics.json")
    intrinsics = CameraIntrinsics(
        fx=float(intr_raw["fx"]), fy=float(intr_raw["fy"]),
        cx=float(intr_raw["cx"]), cy=float(intr_raw["cy"]),
        width=int(intr_raw["width"]), height=int(intr_raw["height"]))
    depth_max = float(intr_raw.get("depth_max", 10.0))

    bounds_raw = _read_json(root / "bounds.json")
    bounds = np.array([bounds_raw["min"], bounds_raw["max"]], dtype=np.float64)

    objects_raw = _read_json(root / "objects.json")
    objects = [SceneObject(o["object_id"], list(o.get("per_view_captions", [])),
                           o.get("aggregated_caption", ""))
               for o in objects_raw]
    index_to_id = {i + 1: o.object_id for i, o in enumerate(objects)}

    frames_dir = root / "frames"
    stems = sorted({p.name.split(".")[0] for p in frames_dir.glob("*.rgb.png")}) \
        if frames_dir.is_dir() else []
    if not stems:
        raise DatasetError(f"no frames in {frames_dir}")

    frames = []
    for stem in stems:
        rgb_path = frames_dir / f"{stem}.rgb.png"
        depth_path = frames_dir / f"{stem}.depth.png"
        pose_path = frames_dir / f"{stem}.pose.json"
        mask_path = frames_dir / f"{stem}.mask.png"
        for p in (rgb_path, depth_path, pose_path, mask_path):
            if not p.exists():
                raise DatasetError(f"missing file: {p}")

        rgb = np.asarray(Image.open(rgb_path).convert("RGB"), dtype=np.uint8)
        depth_mm = np.asarray(Image.open(depth_path), dtype=np.float64)
        depth = depth_mm / 1000.0
        if np.any(depth > depth_max + 1e-9):
            raise DatasetError(f"depth beyond depth_max in {depth_path}")
        pose = Pose.from_dict(_read_json(pose_path))
        labels = np.asarray(Image.open(mask_path), dtype=np.int32)
        present = [int(v) for v in np.unique(labels) if v != 0]
        unknown = [v for v in present if v not in index_to_id]
        if unknown:
            raise DatasetError(
                f"mask {mask_path} references unknown object index {unknown}")
        masks = {index_to_id[v]: labels == v for v in present}
        frames.append(RGBDFrame(rgb=rgb, depth=depth, camera_pose=pose, masks=masks))

    return SceneDataset(frames=frames, intrinsics=intrinsics, objects=objects,
                        scene_bounds=bounds, depth_max=depth_max)


def save_dataset(root: str | Path, intrinsics: CameraIntrinsics, depth_max: float,
                 bounds: np.ndarray, objects: list[SceneObject],
                 frames: list[tuple[np.ndarray, np.ndarray, Pose, np.ndarray]]) -> Path:
    """Write a dataset directory.  Each frame is (rgb, depth_m, pose, label_image).

    Inverse of load_dataset up to depth quantization (stored as millimeters).
    """
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)

    intr = intrinsics.to_dict()
    intr["depth_max"] = depth_max
    with open(root / "intrinsics.json", "w") as f:
        json.dump(intr, f, indent=1, sort_keys=True)
    b = np.asarray(bounds, dtype=np.float64)
    with open(root / "bounds.json", "w") as f:
        json.dump({"min": list(b[0]), "max": list(b[1])}, f, indent=1, sort_keys=True)
    with open(root / "objects.json", "w") as f:
        json.dump([{"object_id": o.object_id,
                    "per_view_captions": o.per_view_captions} for o in objects],
                  f, indent=1, sort_keys=True)

    for i, (rgb, depth, pose, labels) in enumerate(frames):
        stem = f"{i:04d}"
        Image.fromarray(rgb.astype(np.uint8)).save(root / "frames" / f"{stem}.rgb.png")
        depth_mm = np.round(np.clip(depth, 0, depth_max) * 1000.0).astype(np.uint16)
        Image.fromarray(depth_mm).save(root / "frames" / f"{stem}.depth.png")
        with open(root / "frames" / f"{stem}.pose.json", "w") as f:
            json.dump(pose.to_dict(), f, indent=1, sort_keys=True)
        Image.fromarray(labels.astype(np.uint8)).save(root / "frames" / f"{stem}.mask.png")
    return root
