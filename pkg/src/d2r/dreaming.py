"""The imagination loop: enumerate candidate poses on a position lattice with
discrete orientation bins, filter by physical validity, render the survivors,
score them against the goal and normalizing captions, smooth the score field
over positions, and select the best pose.

Candidate pose = grid translation composed with (orientation bin * base
orientation); the delta applied to the foreground models is therefore the bin
rotation about the object centroid followed by translation to the grid point.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

from .geometry import Pose, compose_poses, invert_pose, quat_multiply, quat_to_matrix
from .physics import PhysicsParams, validate_candidates
from .render import RenderCamera, RenderedArrangement, compose_render_batch, raycast_volume
from .scoring import Scorer, batch_similarity, normalized_score
from .volumetric import TsdfVolume, VoxelOccupancy

DEFAULT_CANDIDATE_CAP = 2_000_000


class ConfigurationError(ValueError):
    pass


class NoFeasiblePoseError(RuntimeError):
    pass


@dataclass(frozen=True)
class PoseLattice:
    bounds: np.ndarray                   # (2, 3) min/max, meters
    position_step: float
    orientations: list[np.ndarray]      # unit quaternions
    base_pose: Pose

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        object.__setattr__(self, "bounds", b)
        if self.position_step <= 0:
            raise ConfigurationError("position_step must be positive")
        if not self.orientations:
            raise ConfigurationError("orientations must be nonempty")
        for q in self.orientations:
            if abs(np.linalg.norm(q) - 1.0) > 1e-9:
                raise ConfigurationError("orientations must be unit quaternions")

    def axis_coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        out = []
        for a in range(3):
            n = int(np.floor((self.bounds[1, a] - self.bounds[0, a])
                             / self.position_step + 1e-9)) + 1
            out.append(self.bounds[0, a] + np.arange(n) * self.position_step)
        return tuple(out)

    @property
    def grid_shape(self) -> tuple[int, int, int, int]:
        xs, ys, zs = self.axis_coords()
        return (len(xs), len(ys), len(zs), len(self.orientations))

    @property
    def candidate_count(self) -> int:
        return int(np.prod(self.grid_shape))

    def candidate_pose(self, index: tuple[int, int, int, int]) -> Pose:
        """World pose of the movable object at a lattice cell."""
        xs, ys, zs = self.axis_coords()
        ix, iy, iz, io = index
        grid_point = np.array([xs[ix], ys[iy], zs[iz]])
        rot = quat_multiply(self.orientations[io], self.base_pose.rotation)
        return Pose(rot, grid_point)

    def candidate_delta(self, index: tuple[int, int, int, int]) -> Pose:
        """Transform taking the object's current placement to the candidate."""
        return compose_poses(self.candidate_pose(index), invert_pose(self.base_pose))


def sample_candidate_poses(lattice: PoseLattice,
                           cap: int = DEFAULT_CANDIDATE_CAP
                           ) -> Iterator[tuple[tuple[int, int, int, int], Pose]]:
    """Deterministic row-major enumeration of candidate world poses."""
    total = lattice.candidate_count
    if total > cap:
        raise ConfigurationError(
            f"lattice has {total} candidates, above the cap of {cap}")
    nx, ny, nz, no = lattice.grid_shape
    for ix in range(nx):
        for iy in range(ny):
            for iz in range(nz):
                for io in range(no):
                    idx = (ix, iy, iz, io)
                    yield idx, lattice.candidate_pose(idx)


@dataclass
class ScoreField:
    lattice: PoseLattice
    valid: np.ndarray            # bool, grid_shape
    raw: np.ndarray              # float, NaN where invalid
    smoothed: np.ndarray         # float, NaN where invalid

    def __post_init__(self):
        shape = self.lattice.grid_shape
        for name in ("valid", "raw", "smoothed"):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ConfigurationError(f"{name} has shape {arr.shape}, expected {shape}")

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


@dataclass(frozen=True)
class EvalSettings:
    physics: PhysicsParams = field(default_factory=PhysicsParams)
    scorer_batch: int = 64
    render_batch: int = 256
    eps: float = 1e-4
    use_normalization: bool = True
    candidate_cap: int = DEFAULT_CANDIDATE_CAP
    diagnostic_dump: Path | None = None


def _candidate_transforms(lattice: PoseLattice) -> tuple[np.ndarray, np.ndarray]:
    """Delta rotations (n, 3, 3) and translations (n, 3) for all candidates in
    enumeration order."""
    xs, ys, zs = lattice.axis_coords()
    grid = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    rot_mats = np.stack([quat_to_matrix(q) for q in lattice.orientations])
    base_t = lattice.base_pose.translation
    offsets = rot_mats @ base_t                      # (no, 3)

    n_pos, no = len(grid), len(rot_mats)
    rotations = np.tile(rot_mats, (n_pos, 1, 1))
    translations = (grid[:, None, :] - offsets[None, :, :]).reshape(-1, 3)
    return rotations, translations


def evaluate_candidates(lattice: PoseLattice, fg_occ: VoxelOccupancy,
                        fg_vol: TsdfVolume, bg_vol: TsdfVolume,
                        cam: RenderCamera, task, scorer: Scorer,
                        settings: EvalSettings = EvalSettings(),
                        visual_bg: TsdfVolume | None = None) -> ScoreField:
    """Validity-filtered render-and-score sweep over the whole lattice.

    bg_vol is the physics background; visual_bg (default: same volume) is
    rendered, letting callers hide distractor objects from the scorer while
    still colliding against them.
    """
    total = lattice.candidate_count
    if total > settings.candidate_cap:
        raise ConfigurationError(
            f"lattice has {total} candidates, above the cap of {settings.candidate_cap}")

    shape = lattice.grid_shape
    rotations, translations = _candidate_transforms(lattice)
    valid_flat = validate_candidates(fg_occ, rotations, translations, bg_vol,
                                     settings.physics)
    valid = valid_flat.reshape(shape)
    raw = np.full(shape, np.nan)

    captions = [task.goal_caption]
    if settings.use_normalization:
        captions.append(task.normalizing_caption)

    render_bg = visual_bg if visual_bg is not None else bg_vol
    bg_rendered = raycast_volume(render_bg, cam)

    valid_idx = np.flatnonzero(valid_flat)
    raw_flat = raw.reshape(-1)
    try:
        for rlo in range(0, len(valid_idx), settings.render_batch):
            render_chunk = valid_idx[rlo:rlo + settings.render_batch]
            indices = [tuple(int(v) for v in np.unravel_index(fi, shape))
                       for fi in render_chunk]
            deltas = [Pose(lattice.orientations[idx[3]], translations[fi])
                      for idx, fi in zip(indices, render_chunk)]
            arrangements = compose_render_batch(bg_rendered, fg_vol, deltas, cam,
                                                indices, lattice.base_pose)
            for slo in range(0, len(arrangements), settings.scorer_batch):
                batch = arrangements[slo:slo + settings.scorer_batch]
                flat_ids = render_chunk[slo:slo + settings.scorer_batch]
                sims = batch_similarity(scorer, batch, captions).values
                for row, flat_i in enumerate(flat_ids):
                    goal_sim = float(sims[row, 0])
                    if settings.use_normalization:
                        raw_flat[flat_i] = normalized_score(
                            goal_sim, float(sims[row, 1]), settings.eps)
                    else:
                        raw_flat[flat_i] = goal_sim
    except Exception:
        if settings.diagnostic_dump is not None:
            partial = ScoreField(lattice, valid, raw, raw.copy())
            save_field_csv(partial, settings.diagnostic_dump)
        raise

    return ScoreField(lattice, valid, raw, raw.copy())


def smooth_score_field(field: ScoreField, sigma: float) -> ScoreField:
    """Per-orientation-bin 3-D Gaussian smoothing over the position axes with
    mask-renormalized weights; sigma is in meters, 0 is the identity."""
    if sigma < 0:
        raise ConfigurationError("sigma must be nonnegative")
    if sigma == 0:
        return ScoreField(field.lattice, field.valid.copy(), field.raw.copy(),
                          field.raw.copy())

    cells = sigma / field.lattice.position_step
    radius = int(np.ceil(3 * cells))
    k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / cells) ** 2)
    kernel = k[:, None, None] * k[None, :, None] * k[None, None, :]
    kernel /= kernel.sum()

    smoothed = np.full_like(field.raw, np.nan)
    for o in range(field.lattice.grid_shape[3]):
        v = field.valid[..., o].astype(np.float64)
        if not v.any():
            continue
        r = np.nan_to_num(field.raw[..., o]) * v
        num = ndimage.convolve(r, kernel, mode="constant", cval=0.0)
        den = ndimage.convolve(v, kernel, mode="constant", cval=0.0)
        out = np.full(v.shape, np.nan)
        ok = v > 0
        out[ok] = num[ok] / den[ok]
        smoothed[..., o] = out
    return ScoreField(field.lattice, field.valid.copy(), field.raw.copy(), smoothed)


def select_goal_pose(field: ScoreField) -> tuple[Pose, tuple[int, int, int, int]]:
    """Argmax of the smoothed score over valid cells; ties break to the lowest
    enumeration index."""
    if field.n_valid == 0:
        raise NoFeasiblePoseError("no feasible pose: every candidate is invalid")
    scores = np.where(field.valid, field.smoothed, -np.inf)
    flat = int(np.argmax(scores.reshape(-1)))
    index = tuple(int(v) for v in np.unravel_index(flat, field.lattice.grid_shape))
    return field.lattice.candidate_pose(index), index


# ---------------------------------------------------------------------------
# CSV export / import
# ---------------------------------------------------------------------------

def save_field_csv(field: ScoreField, path: str | Path,
                   movable_object_id: str | None = None) -> None:
    lat = field.lattice
    meta = {
        "bounds": [list(lat.bounds[0]), list(lat.bounds[1])],
        "position_step": lat.position_step,
        "orientations": [[float(x) for x in q] for q in lat.orientations],
        "base_pose": lat.base_pose.to_dict(),
    }
    if movable_object_id is not None:
        meta["movable_object_id"] = movable_object_id
    with open(path, "w", newline="") as f:
        f.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        writer = csv.writer(f)
        writer.writerow(["ix", "iy", "iz", "iori", "valid", "raw", "smoothed"])
        nx, ny, nz, no = lat.grid_shape
        for ix in range(nx):
            for iy in range(ny):
                for iz in range(nz):
                    for io in range(no):
                        idx = (ix, iy, iz, io)
                        writer.writerow([
                            ix, iy, iz, io, int(field.valid[idx]),
                            repr(float(field.raw[idx])),
                            repr(float(field.smoothed[idx])),
                        ])


def load_field_csv(path: str | Path) -> tuple[ScoreField, dict]:
    with open(path) as f:
        header = f.readline()
        if not header.startswith("# "):
            raise ConfigurationError(f"{path} is missing the metadata header")
        meta = json.loads(header[2:])
        reader = csv.reader(f)
        names = next(reader)
        if names[:4] != ["ix", "iy", "iz", "iori"]:
            raise ConfigurationError(f"unexpected columns {names}")
        rows = list(reader)

    lattice = PoseLattice(
        bounds=np.array(meta["bounds"], dtype=np.float64),
        position_step=float(meta["position_step"]),
        orientations=[np.asarray(q, dtype=np.float64) for q in meta["orientations"]],
        base_pose=Pose.from_dict(meta["base_pose"]))
    shape = lattice.grid_shape
    valid = np.zeros(shape, dtype=bool)
    raw = np.full(shape, np.nan)
    smoothed = np.full(shape, np.nan)
    for row in rows:
        idx = tuple(int(v) for v in row[:4])
        valid[idx] = bool(int(row[4]))
        raw[idx] = float(row[5])
        smoothed[idx] = float(row[6])
    return ScoreField(lattice, valid, raw, smoothed), meta
