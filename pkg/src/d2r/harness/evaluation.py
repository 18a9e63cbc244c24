"""Success-region evaluation of rollouts and the ablation matrix.

A rollout generates (or receives) a scene, runs one method variant on one
task, checks the selected pose against the authored success region, and
simulates pick-and-place for execution success.  Position success, full-pose
success, and execution success are reported separately and nest downward.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..config import PipelineConfig
from ..dataset import SceneDataset, load_dataset
from ..dreaming import NoFeasiblePoseError, ScoreField, select_goal_pose
from ..geometry import Pose, quat_to_matrix
from ..instruct import ParseError
from ..physics import PhysicsParams, is_physically_valid
from ..pipeline import (DreamResult, SceneModels, VARIANTS, VariantSpec,
                        build_models, make_scorer, parse_dataset_instruction,
                        run_dream)
from ..planner import PlannerConfig, plan_rrt_connect, simulate_pick_place
from ..scoring import RelationSpec, Scorer
from .synthetic import SyntheticSceneSpec, generate_synthetic_scene, load_ground_truth


@dataclass(frozen=True)
class SuccessRegion:
    """Axis-aligned position box plus an optional orientation condition: the
    rotated body axis must stay within tolerance_rad of a world axis."""
    lo: np.ndarray
    hi: np.ndarray
    axis_body: np.ndarray | None = None
    axis_world: np.ndarray | None = None
    tolerance_rad: float | None = None

    @staticmethod
    def from_dict(d: dict) -> "SuccessRegion":
        axis_body = d.get("axis_body")
        return SuccessRegion(
            lo=np.asarray(d["lo"], dtype=np.float64),
            hi=np.asarray(d["hi"], dtype=np.float64),
            axis_body=np.asarray(axis_body, dtype=np.float64) if axis_body else None,
            axis_world=np.asarray(d["axis_world"], dtype=np.float64) if axis_body else None,
            tolerance_rad=float(d["tolerance_rad"]) if axis_body else None)

    def position_ok(self, pose: Pose) -> bool:
        t = pose.translation
        return bool(np.all(t >= self.lo) and np.all(t <= self.hi))

    def orientation_ok(self, pose: Pose) -> bool:
        if self.axis_body is None:
            return True
        rotated = quat_to_matrix(pose.rotation) @ self.axis_body
        cosang = np.clip(np.dot(rotated, self.axis_world)
                         / (np.linalg.norm(rotated) * np.linalg.norm(self.axis_world)),
                         -1.0, 1.0)
        return bool(np.arccos(cosang) <= self.tolerance_rad)

    def check(self, pose: Pose) -> tuple[bool, bool]:
        pos = self.position_ok(pose)
        return pos, pos and self.orientation_ok(pose)


@dataclass
class RolloutOutcome:
    task_name: str
    variant: str
    position_success: bool = False
    full_pose_success: bool = False
    execution_success: bool = False
    selected_pose: Pose | None = None
    selected_valid: bool = False
    frames_used: list[int] = field(default_factory=list)
    failure_reason: str = ""


def _oracle_scorer(task_gt: dict, gt: dict) -> Scorer:
    positions = {o["object_id"]: np.asarray(o["pose"]["translation"])
                 for o in gt["objects"]}
    relation = RelationSpec.from_dict(task_gt["relation"], positions)
    from ..scoring import OracleScorer
    return OracleScorer(relation)


def evaluate_task(dataset: SceneDataset, task_gt: dict, cfg: PipelineConfig,
                  variant: VariantSpec, scorer: Scorer | None = None,
                  gt: dict | None = None, models: SceneModels | None = None,
                  plan: bool = True) -> RolloutOutcome:
    """One rollout of one variant on one task of a synthetic dataset."""
    out = RolloutOutcome(task_name=task_gt["name"], variant=variant.name)
    try:
        parsed = parse_dataset_instruction(dataset, task_gt["instruction"],
                                           one_view=variant.one_view)
        if scorer is None and not variant.physics_only:
            if gt is None:
                raise ValueError("oracle scoring needs the ground-truth sidecar")
            scorer = _oracle_scorer(task_gt, gt)
        result = run_dream(dataset, parsed, cfg, scorer, variant,
                           lattice_hints=task_gt.get("lattice"),
                           physics_overrides=task_gt.get("physics"),
                           models=models)
    except (ParseError, NoFeasiblePoseError) as e:
        out.failure_reason = f"{type(e).__name__}: {e}"
        return out

    out.selected_pose = result.selected_pose
    out.frames_used = result.models.frames_used

    phys = task_gt.get("physics", {})
    params = PhysicsParams(clearance=phys.get("clearance", cfg.clearance),
                           drop=phys.get("drop", cfg.drop),
                           scene_bounds=dataset.scene_bounds)
    out.selected_valid = is_physically_valid(
        result.models.fg_occ, result.selected_delta, result.models.bg_physics,
        params).valid

    region = SuccessRegion.from_dict(task_gt["success_region"])
    out.position_success, out.full_pose_success = region.check(result.selected_pose)

    if plan:
        pcfg = PlannerConfig(rng_seed=cfg.rng_seed, clearance=params.clearance,
                             sample_bounds=dataset.scene_bounds)
        try:
            path = plan_rrt_connect(Pose.identity(), result.selected_delta,
                                    result.models.fg_occ, result.models.bg_physics,
                                    pcfg)
        except Exception as e:
            out.failure_reason = f"planner: {e}"
            path = None
        if path is not None:
            state = simulate_pick_place(parsed.task, result.models.base_pose,
                                        result.selected_pose, path)
            out.execution_success = out.full_pose_success and state.executed
    return out


def paired_rollout(dataset: SceneDataset, task_gt: dict, gt: dict,
                   cfg: PipelineConfig, plan: bool = True
                   ) -> tuple[RolloutOutcome, RolloutOutcome]:
    """Full method and Physics-Only on the same scene, sharing fused models."""
    parsed = parse_dataset_instruction(dataset, task_gt["instruction"])
    models = build_models(dataset, parsed, cfg, VARIANTS["full"])
    full = evaluate_task(dataset, task_gt, cfg, VARIANTS["full"], gt=gt,
                         models=models, plan=plan)
    rand = evaluate_task(dataset, task_gt, cfg, VARIANTS["physics_only"], gt=gt,
                         models=models, plan=False)
    return full, rand


# ---------------------------------------------------------------------------
# ablation matrix
# ---------------------------------------------------------------------------

@dataclass
class CellCounts:
    n: int = 0
    position: int = 0
    full_pose: int = 0
    execution: int = 0

    def add(self, o: RolloutOutcome) -> None:
        self.n += 1
        self.position += o.position_success
        self.full_pose += o.full_pose_success
        self.execution += o.execution_success


@dataclass
class EvalReport:
    variants: list[str]
    tasks: list[str]
    cells: dict[tuple[str, str], CellCounts]
    outcomes: list[RolloutOutcome] = field(default_factory=list)

    def rate(self, variant: str, task: str, kind: str = "position") -> float:
        cell = self.cells.get((variant, task))
        if cell is None or cell.n == 0:
            return float("nan")
        return getattr(cell, kind) / cell.n

    def mean_rate(self, variant: str, kind: str = "position") -> float:
        rates = [self.rate(variant, t, kind) for t in self.tasks]
        rates = [r for r in rates if not np.isnan(r)]
        return float(np.mean(rates)) if rates else float("nan")

    def to_text(self) -> str:
        width = max([len(v) for v in self.variants] + [8])
        cols = self.tasks + ["mean"]
        header = "variant".ljust(width) + "".join(c.rjust(max(len(c) + 2, 12))
                                                  for c in cols)
        lines = [header, "-" * len(header)]
        for v in self.variants:
            row = v.ljust(width)
            for t in self.tasks:
                r = self.rate(v, t)
                cell = "-" if np.isnan(r) else f"{100 * r:.0f}"
                row += cell.rjust(max(len(t) + 2, 12))
            m = self.mean_rate(v)
            row += ("-" if np.isnan(m) else f"{100 * m:.0f}").rjust(12)
            lines.append(row)
        return "\n".join(lines)

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["variant", "task", "n_rollouts", "position_success",
                             "full_pose_success", "execution_success"])
            for v in self.variants:
                for t in self.tasks:
                    c = self.cells.get((v, t), CellCounts())
                    writer.writerow([v, t, c.n, c.position, c.full_pose, c.execution])


@dataclass
class AblationConfig:
    scene_kind: str = "shopping"
    repeats: int = 7
    master_seed: int = 0
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    task_filter: list[str] | None = None
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    workdir: Path = Path("ablation_scenes")
    workers: int = 1
    plan: bool = False


def _dataset_for_repeat(acfg: AblationConfig, repeat: int) -> tuple[SceneDataset, dict]:
    seed = int(np.random.SeedSequence(acfg.master_seed,
                                      spawn_key=(repeat,)).generate_state(1)[0] % (2**31))
    out = Path(acfg.workdir) / f"{acfg.scene_kind}_r{repeat}_s{seed}"
    if not (out / "ground_truth.json").exists():
        generate_synthetic_scene(
            SyntheticSceneSpec(acfg.scene_kind, rng_seed=seed), out)
    return load_dataset(out), load_ground_truth(out)


def run_ablations(acfg: AblationConfig) -> EvalReport:
    """Variants x tasks x repeats; scenes are shuffled and re-rendered between
    repeats and shared across variants for pairwise fairness."""
    scenes = [_dataset_for_repeat(acfg, r) for r in range(acfg.repeats)]
    task_names = [t["name"] for t in scenes[0][1]["tasks"]]
    if acfg.task_filter:
        task_names = [t for t in task_names if t in acfg.task_filter]

    jobs = []
    for repeat, (dataset, gt) in enumerate(scenes):
        tasks = {t["name"]: t for t in gt["tasks"]}
        for task_name in task_names:
            for vname in acfg.variants:
                jobs.append((repeat, dataset, gt, tasks[task_name], vname))

    def run(job) -> RolloutOutcome:
        repeat, dataset, gt, task_gt, vname = job
        cfg = PipelineConfig(**{**acfg.pipeline.__dict__})
        cfg.rng_seed = int(np.random.SeedSequence(
            acfg.master_seed, spawn_key=(repeat, hash(vname) % 2**31)
        ).generate_state(1)[0] % (2**31))
        return evaluate_task(dataset, task_gt, cfg, VARIANTS[vname], gt=gt,
                             plan=acfg.plan)

    if acfg.workers > 1:
        with ThreadPoolExecutor(max_workers=acfg.workers) as pool:
            outcomes = list(pool.map(run, jobs))
    else:
        outcomes = [run(j) for j in jobs]

    cells: dict[tuple[str, str], CellCounts] = {}
    for outcome in outcomes:
        cell = cells.setdefault((outcome.variant, outcome.task_name), CellCounts())
        cell.add(outcome)
    return EvalReport(variants=list(acfg.variants), tasks=task_names,
                      cells=cells, outcomes=outcomes)


# ---------------------------------------------------------------------------
# heatmap export
# ---------------------------------------------------------------------------

_VIRIDIS_STOPS = np.array([
    [68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]],
    dtype=np.float64)


def _viridis(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0) * (len(_VIRIDIS_STOPS) - 1)
    i0 = np.clip(np.floor(x).astype(int), 0, len(_VIRIDIS_STOPS) - 2)
    frac = (x - i0)[..., None]
    return _VIRIDIS_STOPS[i0] * (1 - frac) + _VIRIDIS_STOPS[i0 + 1] * frac


def export_heatmap(field: ScoreField, out: str | Path, scale: int = 8) -> Path:
    """Top-down heatmap: max of the smoothed score over z and orientations,
    invalid columns transparent, red marker at the selected cell."""
    if field.n_valid == 0:
        raise NoFeasiblePoseError("cannot render a heatmap of an all-invalid field")

    scores = np.where(field.valid, np.nan_to_num(field.smoothed, nan=-np.inf), -np.inf)
    flat = scores.reshape(scores.shape[0], scores.shape[1], -1).max(axis=2)
    has_valid = field.valid.reshape(field.valid.shape[0], field.valid.shape[1], -1).any(axis=2)

    finite = flat[has_valid & np.isfinite(flat)]
    if len(finite) == 0:        # validity-only field (no scores recorded)
        norm = np.full_like(flat, 0.5)
    else:
        lo, hi = float(finite.min()), float(finite.max())
        norm = (flat - lo) / (hi - lo) if hi > lo else np.full_like(flat, 0.5)

    rgba = np.zeros(flat.shape + (4,), dtype=np.uint8)
    colors = _viridis(np.nan_to_num(norm, nan=0.0, posinf=1.0, neginf=0.0))
    rgba[..., :3] = colors.astype(np.uint8)
    rgba[..., 3] = np.where(has_valid, 255, 0)

    _, best = select_goal_pose(field)
    rgba[best[0], best[1]] = [255, 0, 0, 255]

    # image rows = y (flipped for a conventional top-down view), columns = x
    img = np.transpose(rgba, (1, 0, 2))[::-1]
    if scale > 1:
        img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    out = Path(out)
    Image.fromarray(img, mode="RGBA").save(out)
    return out
