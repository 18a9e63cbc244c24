"""End-to-end orchestration: instruction -> models -> score field -> pose.

Method variants (used by the ablation harness) toggle which frames are fused,
whether distractors stay visible to the scorer, whether captions are
normalized, whether smoothing runs, and whether scoring is skipped entirely
in favor of a random physically valid pose.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .config import PipelineConfig
from .dataset import SceneDataset, TaskSpec
from .dreaming import (EvalSettings, PoseLattice, ScoreField, evaluate_candidates,
                       select_goal_pose, smooth_score_field, NoFeasiblePoseError)
from .geometry import Pose, orientation_set, quat_to_matrix, unproject_pixel
from .instruct import Instruction, ParsedTask, aggregate_dataset_captions, parse_instruction
from .physics import PhysicsParams, validate_candidates
from .render import RenderCamera
from .scoring import (ConfigurationError, OracleScorer, RecordingScorer,
                      RelationSpec, RemoteScorer, ReplayScorer, Scorer)
from .volumetric import (BackgroundPolicy, ForegroundPolicy, TsdfVolume,
                         VoxelOccupancy, integrate_frame, voxelize_object)


@dataclass(frozen=True)
class VariantSpec:
    """One method variant of the ablation matrix."""
    name: str
    one_view: bool = False
    show_distractors: bool = False
    physics_only: bool = False
    use_normalization: bool = True
    vis_prior: bool = False
    smoothing: bool = True


VARIANTS = {v.name: v for v in [
    VariantSpec("full"),
    VariantSpec("one_view", one_view=True),
    VariantSpec("distract", show_distractors=True),
    VariantSpec("physics_only", physics_only=True),
    VariantSpec("no_norm", use_normalization=False),
    VariantSpec("vis_prior", vis_prior=True, use_normalization=False),
    VariantSpec("no_smooth", smoothing=False),
]}


@dataclass
class SceneModels:
    fg_vol: TsdfVolume
    fg_occ: VoxelOccupancy
    bg_physics: TsdfVolume
    bg_visual: TsdfVolume
    base_pose: Pose
    frames_used: list[int]


@dataclass
class DreamResult:
    parsed: ParsedTask
    models: SceneModels
    camera: RenderCamera
    field: ScoreField
    selected_pose: Pose
    selected_index: tuple[int, int, int, int]
    selected_delta: Pose
    variant: VariantSpec


def choose_eval_camera(dataset: SceneDataset, cfg: PipelineConfig) -> RenderCamera:
    """The dataset frame whose optical axis passes closest to the scene-bounds
    centroid, with intrinsics downscaled to the render resolution."""
    centroid = dataset.scene_bounds.mean(axis=0)
    best, best_dist = 0, np.inf
    for i, frame in enumerate(dataset.frames):
        origin = frame.camera_pose.translation
        axis = quat_to_matrix(frame.camera_pose.rotation) @ np.array([0.0, 0.0, 1.0])
        s = max(0.0, float(np.dot(centroid - origin, axis)))
        dist = float(np.linalg.norm(centroid - (origin + s * axis)))
        if dist < best_dist:
            best, best_dist = i, dist
    intr = dataset.intrinsics.scaled(cfg.render_width, cfg.render_height)
    return RenderCamera(intr, dataset.frames[best].camera_pose)


def _foreground_bounds(dataset: SceneDataset, object_id: str,
                       frames: list[int], margin: float) -> tuple[np.ndarray, np.ndarray]:
    """Bounding box of the object's unprojected masked pixels."""
    pts = []
    for fi in frames:
        frame = dataset.frames[fi]
        mask = frame.masks.get(object_id)
        if mask is None:
            continue
        ys, xs = np.nonzero(mask & (frame.depth > 0))
        if len(ys) == 0:
            continue
        stride = max(1, len(ys) // 400)
        for y, x in zip(ys[::stride], xs[::stride]):
            pts.append(unproject_pixel(x + 0.5, y + 0.5, frame.depth[y, x],
                                       dataset.intrinsics, frame.camera_pose))
    if not pts:
        raise ConfigurationError(
            f"object {object_id!r} has no masked depth in the selected frames")
    pts = np.array(pts)
    return pts.min(axis=0) - margin, pts.max(axis=0) + margin


def build_models(dataset: SceneDataset, parsed: ParsedTask, cfg: PipelineConfig,
                 variant: VariantSpec = VARIANTS["full"]) -> SceneModels:
    """Fuse the foreground volume, the physics background (everything except
    the movable object), and the visual background (additionally hiding
    distractors unless the variant shows them)."""
    frame_ids = [0] if variant.one_view else list(range(len(dataset.frames)))
    movable = parsed.task.movable_object_id

    fg_lo, fg_hi = _foreground_bounds(dataset, movable, frame_ids,
                                      margin=4 * cfg.fg_voxel + 0.01)
    # tight truncation: the behind-surface band otherwise inflates small
    # objects beyond what silhouette carving can veto at scan resolution
    fg_vol = TsdfVolume.from_bounds(fg_lo, fg_hi, cfg.fg_voxel, 2 * cfg.fg_voxel)
    bg_physics = TsdfVolume.from_bounds(dataset.scene_bounds[0], dataset.scene_bounds[1],
                                        cfg.bg_voxel, cfg.truncation_factor * cfg.bg_voxel)
    hide = {movable} if variant.show_distractors else {movable, *parsed.distractor_ids}
    separate_visual = hide != {movable}
    bg_visual = (TsdfVolume.from_bounds(dataset.scene_bounds[0], dataset.scene_bounds[1],
                                        cfg.bg_voxel, cfg.truncation_factor * cfg.bg_voxel)
                 if separate_visual else bg_physics)

    for fi in frame_ids:
        frame = dataset.frames[fi]
        integrate_frame(fg_vol, frame, dataset.intrinsics, ForegroundPolicy(movable))
        integrate_frame(bg_physics, frame, dataset.intrinsics,
                        BackgroundPolicy(frozenset({movable})))
        if separate_visual:
            integrate_frame(bg_visual, frame, dataset.intrinsics,
                            BackgroundPolicy(frozenset(hide)))

    fg_occ = voxelize_object(fg_vol)
    if fg_occ.count == 0:
        raise ConfigurationError(f"foreground object {movable!r} fused to nothing")
    base_pose = Pose(translation=fg_occ.centroid())
    return SceneModels(fg_vol, fg_occ, bg_physics, bg_visual, base_pose, frame_ids)


def make_scorer(cfg: PipelineConfig, relation: RelationSpec | None = None) -> Scorer:
    if cfg.scorer == "oracle":
        if relation is None:
            raise ConfigurationError(
                "oracle scorer needs a ground-truth relation (synthetic scenes only)")
        scorer: Scorer = OracleScorer(relation)
    elif cfg.scorer == "remote":
        endpoint = cfg.resolved_endpoint()
        if not endpoint:
            raise ConfigurationError("remote scorer needs an endpoint "
                                     "(--endpoint or D2R_SCORER_URL)")
        scorer = RemoteScorer(endpoint, timeout=cfg.timeout,
                              max_retries=cfg.max_retries, batch_size=cfg.scorer_batch)
    elif cfg.scorer == "replay":
        if not cfg.replay_fixture:
            raise ConfigurationError("replay scorer needs replay_fixture")
        scorer = ReplayScorer(cfg.replay_fixture)
    else:
        raise ConfigurationError(f"unknown scorer kind {cfg.scorer!r}")
    if cfg.record_fixture:
        scorer = RecordingScorer(scorer, cfg.record_fixture)
    return scorer


def build_lattice(dataset: SceneDataset, models: SceneModels, cfg: PipelineConfig,
                  hints: dict | None = None) -> PoseLattice:
    """Lattice from task hints when present, else the scene bounds."""
    if hints:
        lo = np.asarray(hints["lo"], dtype=np.float64)
        hi = np.asarray(hints["hi"], dtype=np.float64)
        step = float(hints.get("step", cfg.position_step))
        names = hints.get("orientations", cfg.orientation_set)
    else:
        lo, hi = dataset.scene_bounds[0].copy(), dataset.scene_bounds[1].copy()
        step = cfg.position_step
        names = cfg.orientation_set
    return PoseLattice(bounds=np.array([lo, hi]), position_step=step,
                       orientations=orientation_set(names),
                       base_pose=models.base_pose)


def parse_dataset_instruction(dataset: SceneDataset, instruction: str,
                              one_view: bool = False,
                              endpoint: str | None = None) -> ParsedTask:
    objects = aggregate_dataset_captions(dataset.objects,
                                         view_limit=1 if one_view else None)
    return parse_instruction(Instruction(instruction), objects, endpoint=endpoint)


def run_dream(dataset: SceneDataset, parsed: ParsedTask, cfg: PipelineConfig,
              scorer: Scorer | None, variant: VariantSpec = VARIANTS["full"],
              lattice_hints: dict | None = None,
              physics_overrides: dict | None = None,
              models: SceneModels | None = None) -> DreamResult:
    """Full imagination pass.  `models` may be supplied to reuse fused volumes
    across variants that share the same fusion configuration."""
    task = parsed.task
    if variant.vis_prior:
        task = TaskSpec(task.movable_object_id, task.relevant_object_ids,
                        task.normalizing_caption, task.normalizing_caption)
        parsed = ParsedTask(task, parsed.distractor_ids)

    if models is None:
        models = build_models(dataset, parsed, cfg, variant)
    camera = choose_eval_camera(dataset, cfg)
    lattice = build_lattice(dataset, models, cfg, lattice_hints)

    phys = dict(clearance=cfg.clearance, drop=cfg.drop)
    if physics_overrides:
        phys.update(physics_overrides)
    params = PhysicsParams(clearance=phys["clearance"], drop=phys["drop"],
                           scene_bounds=dataset.scene_bounds)

    if variant.physics_only:
        field = _validity_only_field(lattice, models, params)
        rng = np.random.default_rng(cfg.rng_seed)
        valid_flat = np.flatnonzero(field.valid.reshape(-1))
        if len(valid_flat) == 0:
            raise NoFeasiblePoseError("no feasible pose: every candidate is invalid")
        flat = int(rng.choice(valid_flat))
        index = tuple(int(v) for v in np.unravel_index(flat, lattice.grid_shape))
        pose = lattice.candidate_pose(index)
    else:
        if scorer is None:
            raise ConfigurationError(f"variant {variant.name!r} needs a scorer")
        settings = EvalSettings(physics=params, scorer_batch=cfg.scorer_batch,
                                eps=cfg.eps,
                                use_normalization=variant.use_normalization,
                                candidate_cap=cfg.candidate_cap)
        field = evaluate_candidates(lattice, models.fg_occ, models.fg_vol,
                                    models.bg_physics, camera, task, scorer,
                                    settings, visual_bg=models.bg_visual)
        sigma = cfg.smoothing_sigma() if variant.smoothing else 0.0
        field = smooth_score_field(field, sigma)
        pose, index = select_goal_pose(field)

    delta = lattice.candidate_delta(index)
    return DreamResult(parsed=parsed, models=models, camera=camera, field=field,
                       selected_pose=pose, selected_index=index,
                       selected_delta=delta, variant=variant)


def _validity_only_field(lattice: PoseLattice, models: SceneModels,
                         params: PhysicsParams) -> ScoreField:
    from .dreaming import _candidate_transforms
    rotations, translations = _candidate_transforms(lattice)
    valid = validate_candidates(models.fg_occ, rotations, translations,
                                models.bg_physics, params).reshape(lattice.grid_shape)
    nan = np.full(lattice.grid_shape, np.nan)
    return ScoreField(lattice, valid, nan, nan.copy())
