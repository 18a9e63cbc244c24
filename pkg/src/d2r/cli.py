"""Command-line entry point `d2r`.

Subcommands: synth (generate a synthetic scan), fuse (build and export the
volumes for a task), dream (full imagination run), plan (transit plan from a
saved score field), eval (ablation matrix), heatmap (render a score-field CSV).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import PipelineConfig, load_config
from .dataset import load_dataset
from .dreaming import load_field_csv, save_field_csv, select_goal_pose
from .geometry import Pose
from .harness import (AblationConfig, SyntheticSceneSpec, export_heatmap,
                      generate_synthetic_scene, load_ground_truth, run_ablations)
from .pipeline import (VARIANTS, build_models, make_scorer,
                       parse_dataset_instruction, run_dream)
from .planner import PlannerConfig, plan_rrt_connect, save_path_json
from .render import save_render_png
from .scoring import RelationSpec
from .volumetric import save_mesh_obj, save_occupancy_csv, extract_mesh


def _add_config_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="pipeline config YAML (defaults applied otherwise)")


def _load_cfg(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    for name in ("scorer", "endpoint", "record_fixture", "replay_fixture"):
        value = getattr(args, name.replace("-", "_"), None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "seed", None) is not None:
        cfg.rng_seed = args.seed
    return cfg


def cmd_synth(args) -> int:
    spec = SyntheticSceneSpec(scene_kind=args.scene, rng_seed=args.seed or 0)
    if args.spec:
        with open(args.spec) as f:
            data = yaml.safe_load(f)
        spec = SyntheticSceneSpec(**data)
    out = generate_synthetic_scene(spec, args.out)
    print(f"wrote dataset to {out}")
    return 0


def cmd_fuse(args) -> int:
    cfg = _load_cfg(args)
    dataset = load_dataset(args.dataset)
    with open(args.task) as f:
        task = json.load(f)
    parsed = parse_dataset_instruction(dataset, task["instruction"])
    models = build_models(dataset, parsed, cfg)
    out = Path(args.out or (Path(args.dataset) / "fused"))
    out.mkdir(parents=True, exist_ok=True)
    save_mesh_obj(extract_mesh(models.fg_vol), out / "foreground.obj")
    save_mesh_obj(extract_mesh(models.bg_physics), out / "background.obj")
    save_occupancy_csv(models.fg_occ, out / "foreground_occupancy.csv")
    print(f"wrote meshes and occupancy to {out}")
    return 0


def _find_task(gt: dict, name: str | None, instruction: str | None) -> dict | None:
    for t in gt.get("tasks", []):
        if name and t["name"] == name:
            return t
        if instruction and t["instruction"].strip().lower() == instruction.strip().lower():
            return t
    return None


def cmd_dream(args) -> int:
    cfg = _load_cfg(args)
    dataset = load_dataset(args.dataset)
    out = Path(args.out or "d2r_out")
    out.mkdir(parents=True, exist_ok=True)

    task_gt = None
    gt = None
    try:
        gt = load_ground_truth(args.dataset)
        task_gt = _find_task(gt, args.task, args.instruction)
    except FileNotFoundError:
        pass

    relation = None
    if gt is not None and task_gt is not None and "relation" in task_gt:
        positions = {o["object_id"]: np.asarray(o["pose"]["translation"])
                     for o in gt["objects"]}
        relation = RelationSpec.from_dict(task_gt["relation"], positions)
    scorer = make_scorer(cfg, relation)

    instruction = args.instruction or (task_gt or {}).get("instruction")
    if not instruction:
        print("error: need --instruction (or --task with a ground-truth sidecar)",
              file=sys.stderr)
        return 2
    parsed = parse_dataset_instruction(dataset, instruction)
    variant = VARIANTS[args.variant]
    result = run_dream(dataset, parsed, cfg, scorer, variant,
                       lattice_hints=(task_gt or {}).get("lattice"),
                       physics_overrides=(task_gt or {}).get("physics"))

    save_field_csv(result.field, out / "score_field.csv",
                   movable_object_id=parsed.task.movable_object_id)
    export_heatmap(result.field, out / "heatmap.png")
    best = result.field.lattice.candidate_delta(result.selected_index)
    from .render import compose_render, raycast_volume
    arrangement = compose_render(result.models.bg_visual, result.models.fg_vol,
                                 best, result.camera,
                                 candidate_index=result.selected_index,
                                 base_pose=result.models.base_pose)
    save_render_png(arrangement, out / "best_render.png")
    with open(out / "selected_pose.json", "w") as f:
        json.dump({"pose": result.selected_pose.to_dict(),
                   "index": list(result.selected_index),
                   "goal_caption": result.parsed.task.goal_caption},
                  f, indent=1, sort_keys=True)
    print(f"selected pose {np.round(result.selected_pose.translation, 4).tolist()} "
          f"index {result.selected_index}; outputs in {out}")
    return 0


def cmd_plan(args) -> int:
    cfg = _load_cfg(args)
    dataset = load_dataset(args.dataset)
    field, meta = load_field_csv(args.field)
    movable = meta.get("movable_object_id")
    if movable is None:
        print("error: score field has no movable_object_id metadata", file=sys.stderr)
        return 2
    instruction = args.instruction
    if instruction is None:
        gt = load_ground_truth(args.dataset)
        for t in gt["tasks"]:
            if movable in t["instruction"]:
                instruction = t["instruction"]
                break
    if instruction is None:
        print("error: pass --instruction to identify the task", file=sys.stderr)
        return 2
    parsed = parse_dataset_instruction(dataset, instruction)
    models = build_models(dataset, parsed, cfg)
    pose, index = select_goal_pose(field)
    delta = field.lattice.candidate_delta(index)
    pcfg = PlannerConfig(rng_seed=cfg.rng_seed, clearance=cfg.clearance,
                         sample_bounds=dataset.scene_bounds)
    path = plan_rrt_connect(Pose.identity(), delta, models.fg_occ,
                            models.bg_physics, pcfg)
    out = Path(args.out or "path.json")
    save_path_json(path, out)
    status = "found" if path.found else "NOT FOUND"
    print(f"path {status}: {len(path.waypoints)} waypoints, "
          f"length {path.length:.3f} m, {path.iterations_used} iterations -> {out}")
    return 0 if path.found else 1


def cmd_eval(args) -> int:
    with open(args.config) as f:
        data = yaml.safe_load(f) or {}
    pipeline = PipelineConfig(**data.get("pipeline", {}))
    acfg = AblationConfig(
        scene_kind=data.get("scene_kind", "shopping"),
        repeats=int(data.get("repeats", 7)),
        master_seed=int(data.get("master_seed", 0)),
        variants=data.get("variants", list(VARIANTS)),
        task_filter=data.get("task_filter"),
        pipeline=pipeline,
        workdir=Path(data.get("workdir", "ablation_scenes")),
        workers=int(data.get("workers", 1)),
        plan=bool(data.get("plan", False)),
    )
    report = run_ablations(acfg)
    print(report.to_text())
    out = Path(args.out or "ablation_report.csv")
    report.save_csv(out)
    print(f"\nwrote {out}")
    return 0


def cmd_heatmap(args) -> int:
    field, _ = load_field_csv(args.field)
    out = export_heatmap(field, args.out, scale=args.scale)
    print(f"wrote {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="d2r",
                                     description="rearrangement by imagining and "
                                                 "scoring candidate object placements")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scan dataset")
    p.add_argument("--spec", type=Path, help="scene spec YAML")
    p.add_argument("--scene", default="mini",
                   choices=["mini", "shopping", "pool", "shelf"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fuse", help="fuse volumes for a task and export meshes")
    p.add_argument("--dataset", required=True, type=Path)
    p.add_argument("--task", required=True, type=Path,
                   help="JSON file with an 'instruction' field")
    p.add_argument("--out", type=Path)
    _add_config_arg(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("dream", help="imagine and select the goal pose")
    p.add_argument("--dataset", required=True, type=Path)
    p.add_argument("--instruction")
    p.add_argument("--task", help="task name from the ground-truth sidecar")
    p.add_argument("--scorer", choices=["oracle", "remote", "replay"])
    p.add_argument("--endpoint")
    p.add_argument("--replay-fixture", dest="replay_fixture")
    p.add_argument("--record-fixture", dest="record_fixture")
    p.add_argument("--variant", default="full", choices=sorted(VARIANTS))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    _add_config_arg(p)
    p.set_defaults(func=cmd_dream)

    p = sub.add_parser("plan", help="plan a transit path from a score field")
    p.add_argument("--field", required=True, type=Path)
    p.add_argument("--dataset", required=True, type=Path)
    p.add_argument("--instruction")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    _add_config_arg(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("eval", help="run the ablation matrix")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="render a score-field CSV as a PNG")
    p.add_argument("--field", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--scale", type=int, default=8)
    p.set_defaults(func=cmd_heatmap)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
