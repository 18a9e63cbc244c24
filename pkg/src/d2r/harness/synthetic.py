"""Synthetic desk scenes rendered analytically into the scan-dataset format.

Each scene kind (mini, shopping, pool, shelf) builds a primitive-object layout
randomized by seed, renders exact depth/color/instance masks from a
hemispherical camera trajectory, and writes the dataset directory plus a
ground_truth.json sidecar holding object poses, per-task relations, success
regions, and lattice hints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dataset import SceneObject, save_dataset
from ..geometry import (CameraIntrinsics, Pose, look_at_pose,
                        quat_from_axis_angle, quat_to_matrix)
from ..instruct import Instruction, aggregate_captions, parse_instruction
from . import primitives as prim


class GenerationError(ValueError):
    """Scene spec cannot be realized (e.g. interpenetrating objects)."""


@dataclass(frozen=True)
class GtObject:
    object_id: str
    shape: prim.Shape
    pose: Pose
    color: tuple[int, int, int]
    captions: list[str]


@dataclass(frozen=True)
class SceneElement:
    """Unlabeled furniture (tables, shelf boards): rendered and fused but not
    a mask object."""
    shape: prim.Shape
    pose: Pose
    color: tuple[int, int, int]


@dataclass
class GtTask:
    name: str
    instruction: str
    relation: dict
    success_region: dict
    lattice: dict
    physics: dict


@dataclass
class SceneModel:
    objects: list[GtObject]
    elements: list[SceneElement]
    bounds: np.ndarray
    look_at: np.ndarray
    camera_radius: float
    elevations_deg: list[float]
    tasks: list[GtTask]
    table_top_z: float = 0.0


@dataclass
class SyntheticSceneSpec:
    scene_kind: str = "mini"
    rng_seed: int = 0
    n_frames: int | None = None
    image_width: int | None = None
    image_height: int | None = None
    pool_shape: str = "triangle"
    custom_objects: list[GtObject] = field(default_factory=list)
    custom_elements: list[SceneElement] = field(default_factory=list)


def default_scene_spec(kind: str, seed: int = 0, **kw) -> SyntheticSceneSpec:
    return SyntheticSceneSpec(scene_kind=kind, rng_seed=seed, **kw)


_KIND_DEFAULTS = {
    # kind: (n_frames, width, height)
    "mini": (8, 96, 72),
    "shopping": (24, 200, 150),
    "pool": (24, 200, 150),
    "shelf": (24, 200, 150),
    "custom": (8, 96, 72),
}


# ---------------------------------------------------------------------------
# shape (de)serialization for the sidecar
# ---------------------------------------------------------------------------

def shape_to_dict(s: prim.Shape) -> dict:
    if isinstance(s, prim.Sphere):
        return {"kind": "sphere", "radius": s.radius}
    if isinstance(s, prim.Box):
        return {"kind": "box", "half_extents": list(s.half_extents)}
    if isinstance(s, prim.Cylinder):
        return {"kind": "cylinder", "radius": s.radius, "half_height": s.half_height}
    if isinstance(s, prim.OpenBox):
        return {"kind": "open_box", "outer_half": list(s.outer_half),
                "height": s.height, "thickness": s.thickness}
    raise TypeError(f"unknown shape {s!r}")


def shape_from_dict(d: dict) -> prim.Shape:
    kind = d["kind"]
    if kind == "sphere":
        return prim.Sphere(d["radius"])
    if kind == "box":
        return prim.Box(tuple(d["half_extents"]))
    if kind == "cylinder":
        return prim.Cylinder(d["radius"], d["half_height"])
    if kind == "open_box":
        return prim.OpenBox(tuple(d["outer_half"]), d["height"], d["thickness"])
    raise ValueError(f"unknown shape kind {kind!r}")


# ---------------------------------------------------------------------------
# scene builders
# ---------------------------------------------------------------------------

def _table(half_xy: float, color=(172, 152, 132), half_y: float | None = None) -> SceneElement:
    hy = half_xy if half_y is None else half_y
    return SceneElement(prim.Box((half_xy, hy, 0.02)),
                        Pose(translation=[0.0, 0.0, -0.02]), color)


def _lattice(lo, hi, step, orientations) -> dict:
    return {"lo": list(map(float, lo)), "hi": list(map(float, hi)),
            "step": float(step), "orientations": orientations}


def _physics(clearance=0.002, drop=0.025) -> dict:
    return {"clearance": clearance, "drop": drop}


def _region(lo, hi, axis_body=None, axis_world=None, tolerance_rad=None) -> dict:
    out = {"lo": list(map(float, lo)), "hi": list(map(float, hi))}
    if axis_body is not None:
        out["axis_body"] = list(map(float, axis_body))
        out["axis_world"] = list(map(float, axis_world))
        out["tolerance_rad"] = float(tolerance_rad)
    return out


def _point_relation(target, sigma_pos=0.05, **axis) -> dict:
    return {"kind": "point", "target": list(map(float, target)),
            "sigma_pos": sigma_pos, **axis}


def _ring_relation(center, radius, sigma_pos=0.05, **axis) -> dict:
    return {"kind": "ring", "center": list(map(float, center)),
            "radius": float(radius), "sigma_pos": sigma_pos, **axis}


def _line_relation(object_ids, sigma_pos=0.05, **axis) -> dict:
    return {"kind": "line", "object_ids": list(object_ids),
            "sigma_pos": sigma_pos, **axis}


def _upright_axis(current_axis) -> dict:
    return {"axis_body": list(map(float, current_axis)),
            "axis_world": [0.0, 0.0, 1.0], "sigma_rot": 0.5}


def _build_mini(rng: np.random.Generator, spec: SyntheticSceneSpec) -> SceneModel:
    angles = rng.permutation([90.0, 210.0, 330.0]) + rng.uniform(-10, 10, 3)
    radius = 0.14
    spots = [np.array([radius * np.cos(np.deg2rad(a)),
                       radius * np.sin(np.deg2rad(a))]) for a in angles]

    apple = GtObject("apple", prim.Sphere(0.032),
                     Pose(translation=[*spots[0], 0.032]), (200, 40, 35),
                     ["a red apple", "a red apple", "an apple"])
    bowl = GtObject("bowl", prim.OpenBox((0.07, 0.07), 0.045, 0.015),
                    Pose(translation=[*spots[1], 0.0]), (70, 100, 200),
                    ["a blue and white bowl", "a blue bowl", "a blue and white bowl"])
    cup = GtObject("cup", prim.Cylinder(0.028, 0.04),
                   Pose(translation=[*spots[2], 0.04]), (60, 170, 90),
                   ["a green cup", "a cup", "a green cup"])

    bc = bowl.pose.translation
    in_bowl_z = 0.015 + 0.032
    lattice = _lattice((-0.24, -0.24, 0.025), (0.24, 0.24, 0.105), 0.02, "single")
    tasks = [
        GtTask("apple_in_bowl", "put the apple inside the bowl",
               _point_relation((bc[0], bc[1], in_bowl_z)),
               _region((bc[0] - 0.022, bc[1] - 0.022, 0.040),
                       (bc[0] + 0.022, bc[1] + 0.022, 0.095)),
               lattice, _physics()),
        GtTask("apple_beside_bowl", "put the apple beside the bowl",
               _ring_relation((bc[0], bc[1], 0.032), 0.135),
               _region((bc[0] - 0.19, bc[1] - 0.19, 0.02),
                       (bc[0] + 0.19, bc[1] + 0.19, 0.095)),
               lattice, _physics()),
    ]
    return SceneModel(
        objects=[apple, bowl, cup],
        elements=[_table(0.4)],
        bounds=np.array([[-0.3, -0.3, -0.05], [0.3, 0.3, 0.25]]),
        look_at=np.array([0.0, 0.0, 0.03]),
        camera_radius=0.55, elevations_deg=[40, 55, 70], tasks=tasks)


_SHOPPING_ROSTER = [
    ("apple", prim.Sphere(0.032), (200, 40, 35),
     ["a red apple", "a red apple", "an apple"]),
    ("orange", prim.Sphere(0.030), (240, 150, 40),
     ["an orange", "an orange", "a round orange"]),
    ("bowl", prim.OpenBox((0.07, 0.07), 0.045, 0.015), (70, 100, 200),
     ["a blue and white bowl", "a blue bowl", "a blue and white bowl"]),
    ("metal_box", prim.OpenBox((0.075, 0.075), 0.055, 0.015), (150, 150, 160),
     ["a square metal box", "a metal box", "a square metal box"]),
    ("basket", prim.OpenBox((0.083, 0.083), 0.06, 0.015), (165, 115, 60),
     ["a wicker basket", "a woven basket", "a wicker basket"]),
    ("cookies", prim.Box((0.035, 0.025, 0.015)), (210, 170, 110),
     ["a packet of cookies", "a pack of chocolate cookies", "a packet of cookies"]),
    ("banana", prim.Box((0.05, 0.015, 0.015)), (230, 210, 60),
     ["a yellow banana", "a ripe banana", "a yellow banana"]),
    ("cup", prim.Cylinder(0.028, 0.04), (60, 170, 90),
     ["a green cup", "a cup", "a green cup"]),
    ("fork", prim.Box((0.06, 0.01, 0.005)), (190, 190, 200),
     ["a silver fork", "a fork", "a silver fork"]),
]


def _build_shopping(rng: np.random.Generator, spec: SyntheticSceneSpec) -> SceneModel:
    cells = [np.array([fx, fy]) * 0.28 for fx in (-1, 0, 1) for fy in (-1, 0, 1)]
    order = rng.permutation(len(_SHOPPING_ROSTER))
    objects = []
    for slot, idx in enumerate(order):
        oid, shape, color, caps = _SHOPPING_ROSTER[idx]
        xy = cells[slot] + rng.uniform(-0.015, 0.015, 2)
        z = prim.rest_height(shape)
        objects.append(GtObject(oid, shape, Pose(translation=[*xy, z]), color, caps))
    by_id = {o.object_id: o for o in objects}

    def receptacle_point(rec_id: str, item_r: float) -> tuple:
        rec = by_id[rec_id]
        c = rec.pose.translation
        return (c[0], c[1], rec.shape.thickness + item_r)

    def interior_region(rec_id: str, margin_x: float, margin_y: float,
                        z_lo: float, z_hi: float) -> dict:
        c = by_id[rec_id].pose.translation
        return _region((c[0] - margin_x, c[1] - margin_y, z_lo),
                       (c[0] + margin_x, c[1] + margin_y, z_hi))

    lattice = _lattice((-0.42, -0.42, 0.025), (0.42, 0.42, 0.105), 0.02, "single")
    bowl_c = by_id["bowl"].pose.translation
    tasks = [
        GtTask("apple_in_bowl", "put the apple inside the bowl",
               _point_relation(receptacle_point("bowl", 0.032)),
               interior_region("bowl", 0.022, 0.022, 0.040, 0.095),
               lattice, _physics()),
        GtTask("apple_beside_bowl", "put the apple beside the bowl",
               _ring_relation((bowl_c[0], bowl_c[1], 0.032), 0.135),
               _region((bowl_c[0] - 0.19, bowl_c[1] - 0.19, 0.02),
                       (bowl_c[0] + 0.19, bowl_c[1] + 0.19, 0.095)),
               lattice, _physics()),
        GtTask("orange_in_bowl", "put the orange inside the bowl",
               _point_relation(receptacle_point("bowl", 0.030)),
               interior_region("bowl", 0.024, 0.024, 0.038, 0.092),
               lattice, _physics()),
        GtTask("cookies_in_box", "put the cookies inside the metal box",
               _point_relation(receptacle_point("metal_box", 0.015)),
               interior_region("metal_box", 0.023, 0.033, 0.025, 0.085),
               lattice, _physics()),
        GtTask("banana_in_basket", "put the banana inside the basket",
               _point_relation(receptacle_point("basket", 0.015)),
               interior_region("basket", 0.016, 0.051, 0.025, 0.085),
               lattice, _physics()),
    ]
    return SceneModel(
        objects=objects,
        elements=[_table(0.6)],
        bounds=np.array([[-0.45, -0.45, -0.05], [0.45, 0.45, 0.30]]),
        look_at=np.array([0.0, 0.0, 0.02]),
        camera_radius=0.85, elevations_deg=[42, 55, 68], tasks=tasks)


_BALL_COLORS = [(230, 200, 40), (60, 90, 200), (200, 50, 40), (120, 60, 160),
                (240, 140, 40), (40, 150, 90), (150, 40, 40), (230, 200, 40),
                (60, 90, 200), (200, 50, 40), (120, 60, 160), (240, 140, 40)]
_BALL_NAMES = ["yellow", "blue", "red", "purple", "orange", "green",
               "maroon", "yellow", "blue", "red", "purple", "orange"]


def _pool_slots(shape: str) -> list[np.ndarray]:
    s = 0.064
    if shape == "triangle":
        slots = []
        for row, count in enumerate((3, 4, 5)):
            y = 0.10 - row * s * np.sin(np.pi / 3)
            xs = (np.arange(count) - (count - 1) / 2) * s
            slots.extend(np.array([x, y]) for x in xs)
        return slots               # 12 slots
    if shape == "x":
        d = s / np.sqrt(2)
        slots = [np.array([k * d, k * d]) for k in range(-2, 3)]
        slots += [np.array([k * d, -k * d]) for k in range(-2, 3) if k != 0]
        return slots               # 9 slots
    raise GenerationError(f"unknown pool shape {shape!r}")


def _build_pool(rng: np.random.Generator, spec: SyntheticSceneSpec) -> SceneModel:
    r = 0.026
    slots = _pool_slots(spec.pool_shape)
    center_jitter = rng.uniform(-0.04, 0.04, 2)
    slots = [sl + center_jitter for sl in slots]
    removed = int(rng.integers(len(slots)))

    objects = []
    for i, sl in enumerate(slots):
        if i == removed:
            continue
        name = _BALL_NAMES[i % len(_BALL_NAMES)]
        objects.append(GtObject(
            f"ball_{i}", prim.Sphere(r), Pose(translation=[*sl, r]),
            _BALL_COLORS[i % len(_BALL_COLORS)],
            [f"a {name} pool ball", "a pool ball", f"a {name} pool ball"]))
    black_xy = np.array([rng.uniform(-0.2, 0.2), -0.30 + rng.uniform(-0.03, 0.03)])
    objects.append(GtObject("black_ball", prim.Sphere(r),
                            Pose(translation=[*black_xy, r]), (25, 25, 30),
                            ["a black pool ball", "a black ball", "a black pool ball"]))

    slot_xy = slots[removed]
    shape_word = "triangle" if spec.pool_shape == "triangle" else "x shape"
    lattice = _lattice((-0.30, -0.38, 0.02), (0.30, 0.20, 0.06), 0.02, "single")
    tasks = [GtTask(
        f"complete_{spec.pool_shape}",
        f"put the black ball in a {shape_word} with the other balls",
        _point_relation((slot_xy[0], slot_xy[1], r), sigma_pos=0.04),
        _region((slot_xy[0] - 0.02, slot_xy[1] - 0.02, 0.015),
                (slot_xy[0] + 0.02, slot_xy[1] + 0.02, 0.06)),
        lattice, _physics())]
    return SceneModel(
        objects=objects,
        elements=[_table(0.6, color=(40, 120, 60))],
        bounds=np.array([[-0.45, -0.45, -0.05], [0.45, 0.45, 0.25]]),
        look_at=np.array([0.0, -0.05, 0.0]),
        camera_radius=0.85, elevations_deg=[45, 60, 72], tasks=tasks)


def _build_shelf(rng: np.random.Generator, spec: SyntheticSceneSpec) -> SceneModel:
    shelf_top = 0.20
    board = SceneElement(prim.Box((0.25, 0.07, 0.01)),
                         Pose(translation=[0.0, 0.15, 0.19]), (120, 90, 60))
    supports = [SceneElement(prim.Box((0.01, 0.07, 0.095)),
                             Pose(translation=[sx, 0.15, 0.095]), (110, 82, 55))
                for sx in (-0.24, 0.24)]

    jx = lambda: float(rng.uniform(-0.005, 0.005))
    bottle = lambda: prim.Cylinder(0.022, 0.07)
    b_blue = GtObject("bottle_blue", bottle(),
                      Pose(translation=[-0.125 + jx(), 0.15, shelf_top + 0.07]),
                      (40, 70, 190),
                      ["a blue glass bottle", "a blue bottle", "a blue glass bottle"])
    b_brown = GtObject("bottle_brown", bottle(),
                       Pose(translation=[0.05 + jx(), 0.15, shelf_top + 0.07]),
                       (130, 80, 40),
                       ["a brown glass bottle", "a brown bottle", "a brown glass bottle"])
    lying_rot = quat_from_axis_angle((0, 1, 0), np.pi / 2)   # local z -> world x
    b_green = GtObject("bottle_green", bottle(),
                       Pose(lying_rot, [rng.uniform(-0.15, 0.10),
                                        rng.uniform(-0.14, -0.04), 0.022]),
                       (50, 160, 70),
                       ["a green glass bottle", "a green bottle", "a green glass bottle"])
    book = GtObject("book", prim.Box((0.015, 0.035, 0.06)),
                    Pose(translation=[0.18 + jx(), 0.18, shelf_top + 0.06]),
                    (180, 50, 60),
                    ["a red hardcover book", "a red book", "a red hardcover book"])
    plant = GtObject("plant", prim.Cylinder(0.03, 0.03),
                     Pose(translation=[-0.195 + jx(), 0.15, shelf_top + 0.03]),
                     (100, 140, 70),
                     ["a potted plant", "a small plant", "a potted plant"])
    objects = [b_blue, b_brown, b_green, book, plant]

    # current symmetry axis of the lying movable bottle, in world frame
    axis_now = quat_to_matrix(b_green.pose.rotation) @ np.array([0.0, 0.0, 1.0])
    upright = _upright_axis(axis_now)
    stand_z = shelf_top + 0.07
    lattice = _lattice((-0.23, 0.09, 0.23), (0.23, 0.21, 0.33), 0.02, "octahedral24")
    phys = _physics()

    book_c = book.pose.translation
    front_y = book_c[1] - 0.035 - 0.022 - 0.012
    plant_c = plant.pose.translation
    tasks = [
        GtTask("bottles_in_row", "put the green bottle in a row with the other bottles",
               _line_relation(["bottle_blue", "bottle_brown"], sigma_pos=0.06, **upright),
               _region((-0.23, 0.115, stand_z - 0.01), (0.23, 0.185, stand_z + 0.05),
                       axis_body=axis_now, axis_world=(0, 0, 1), tolerance_rad=0.35),
               lattice, phys),
        GtTask("bottle_front_of_book", "put the green bottle in front of the book",
               _point_relation((book_c[0], front_y, stand_z), sigma_pos=0.05, **upright),
               _region((book_c[0] - 0.045, 0.085, stand_z - 0.01),
                       (book_c[0] + 0.045, book_c[1] - 0.035 - 0.022, stand_z + 0.05),
                       axis_body=axis_now, axis_world=(0, 0, 1), tolerance_rad=0.35),
               lattice, phys),
        GtTask("bottle_near_plant", "put the green bottle near the plant",
               _ring_relation((plant_c[0], plant_c[1], stand_z), 0.066,
                              sigma_pos=0.05, **upright),
               _region((plant_c[0] - 0.12, plant_c[1] - 0.08, stand_z - 0.01),
                       (plant_c[0] + 0.12, plant_c[1] + 0.08, stand_z + 0.05),
                       axis_body=axis_now, axis_world=(0, 0, 1), tolerance_rad=0.35),
               lattice, phys),
    ]
    return SceneModel(
        objects=objects,
        elements=[_table(0.45, half_y=0.35), board, *supports],
        bounds=np.array([[-0.32, -0.26, -0.05], [0.32, 0.26, 0.40]]),
        look_at=np.array([0.0, 0.05, 0.12]),
        camera_radius=0.80, elevations_deg=[25, 42, 60], tasks=tasks)


def _build_custom(rng: np.random.Generator, spec: SyntheticSceneSpec) -> SceneModel:
    if not spec.custom_objects:
        raise GenerationError("custom scene requires custom_objects")
    elements = spec.custom_elements or [_table(0.4)]
    return SceneModel(
        objects=list(spec.custom_objects), elements=list(elements),
        bounds=np.array([[-0.3, -0.3, -0.05], [0.3, 0.3, 0.25]]),
        look_at=np.array([0.0, 0.0, 0.03]),
        camera_radius=0.55, elevations_deg=[40, 55, 70], tasks=[])


_BUILDERS = {
    "mini": _build_mini,
    "shopping": _build_shopping,
    "pool": _build_pool,
    "shelf": _build_shelf,
    "custom": _build_custom,
}


# ---------------------------------------------------------------------------
# validation and rendering
# ---------------------------------------------------------------------------

def _check_interpenetration(model: SceneModel) -> None:
    """Conservative circle/z-interval overlap test of objects against objects
    and furniture.  Resting contact passes; volume overlap over 1 mm fails."""
    entries = [(o.object_id, o.shape, o.pose) for o in model.objects]
    furniture = [(f"element_{i}", e.shape, e.pose)
                 for i, e in enumerate(model.elements)]
    tol = 1e-3
    for i, (id_a, sh_a, po_a) in enumerate(entries):
        others = entries[i + 1:] + furniture
        for id_b, sh_b, po_b in others:
            za = prim.z_interval(sh_a, po_a)
            zb = prim.z_interval(sh_b, po_b)
            z_overlap = min(za[1], zb[1]) - max(za[0], zb[0])
            if z_overlap <= tol:
                continue
            d = np.linalg.norm(po_a.translation[:2] - po_b.translation[:2])
            if d < (prim.footprint_radius(sh_a, po_a)
                    + prim.footprint_radius(sh_b, po_b) - tol):
                raise GenerationError(f"objects {id_a!r} and {id_b!r} interpenetrate")


def _hemisphere_poses(model: SceneModel, n: int, rng: np.random.Generator) -> list[Pose]:
    az0 = float(rng.uniform(0, 2 * np.pi))
    poses = []
    for k in range(n):
        az = az0 + 2 * np.pi * k / n
        el = np.deg2rad(model.elevations_deg[k % len(model.elevations_deg)])
        offset = model.camera_radius * np.array([
            np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        poses.append(look_at_pose(model.look_at + offset, model.look_at))
    return poses


def _bounding_sphere(shape: prim.Shape, pose: Pose) -> tuple[np.ndarray, float]:
    z_lo, z_hi = prim.z_interval(shape, pose)
    center = pose.translation.copy()
    center[2] = 0.5 * (z_lo + z_hi)
    r_xy = prim.footprint_radius(shape, pose)
    return center, float(np.hypot(r_xy, 0.5 * (z_hi - z_lo)))


def render_frame(model: SceneModel, cam: Pose, intr: CameraIntrinsics,
                 backdrop=(225, 225, 230)):
    """Exact render: per-pixel nearest primitive hit.

    Small objects are intersected only inside their projected bounding-sphere
    pixel window.  Returns (rgb uint8, depth meters with 0 = miss, labels
    uint8 with the 1-based object index and 0 for furniture/miss).
    """
    h, w = intr.height, intr.width
    u = (np.arange(w) + 0.5 - intr.cx) / intr.fx
    v = (np.arange(h) + 0.5 - intr.cy) / intr.fy
    uu, vv = np.meshgrid(u, v)
    raw = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    norms = np.linalg.norm(raw, axis=1)
    dirs_cam = raw / norms[:, None]
    r = quat_to_matrix(cam.rotation)
    dirs = dirs_cam @ r.T
    origin = np.asarray(cam.translation, dtype=np.float64)
    origins = np.broadcast_to(origin, dirs.shape)

    n_px = len(dirs)
    best_t = np.full(n_px, np.inf)
    labels = np.zeros(n_px, dtype=np.uint8)
    colors = np.tile(np.asarray(backdrop, dtype=np.float64), (n_px, 1))

    cam_inv_r = r.T
    casts = [(0, e.shape, e.pose, e.color) for e in model.elements]
    casts += [(i + 1, o.shape, o.pose, o.color) for i, o in enumerate(model.objects)]
    for label, shape, pose, color in casts:
        center, radius = _bounding_sphere(shape, pose)
        p_cam = cam_inv_r @ (center - origin)
        dist = np.linalg.norm(p_cam)
        window = None
        if dist > radius and p_cam[2] > 0:
            # conservative pixel window around the projected bounding sphere
            r_px = max(intr.fx, intr.fy) * radius / max(p_cam[2] - radius, 1e-6)
            cu = intr.fx * p_cam[0] / p_cam[2] + intr.cx
            cv = intr.fy * p_cam[1] / p_cam[2] + intr.cy
            x0 = max(0, int(np.floor(cu - r_px - 1)))
            x1 = min(w, int(np.ceil(cu + r_px + 2)))
            y0 = max(0, int(np.floor(cv - r_px - 1)))
            y1 = min(h, int(np.ceil(cv + r_px + 2)))
            if x0 >= x1 or y0 >= y1:
                continue
            if (x1 - x0) * (y1 - y0) < 0.5 * n_px:
                cols, rows = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
                window = (rows * w + cols).reshape(-1)
        sel = slice(None) if window is None else window
        t = prim.ray_intersect(shape, pose, origins[sel], dirs[sel])
        closer = t < best_t[sel]
        if window is None:
            best_t = np.where(closer, t, best_t)
            labels[closer] = label
            colors[closer] = color
        else:
            upd = window[closer]
            best_t[upd] = t[closer]
            labels[upd] = label
            colors[upd] = color

    hit = np.isfinite(best_t)
    depth = np.zeros(n_px)
    # depth is the camera-frame z of the hit point: t is euclidean, the ray's
    # camera z component is 1/|raw|
    depth[hit] = best_t[hit] / norms[hit]
    rgb = colors.reshape(h, w, 3).astype(np.uint8)
    return rgb, depth.reshape(h, w), labels.reshape(h, w)


def _default_intrinsics(width: int, height: int) -> CameraIntrinsics:
    f = 0.85 * max(width, height)
    return CameraIntrinsics(fx=f, fy=f, cx=width / 2, cy=height / 2,
                            width=width, height=height)


def generate_synthetic_scene(spec: SyntheticSceneSpec, out_dir: str | Path) -> Path:
    """Render the scene spec into a dataset directory with a ground-truth
    sidecar.  Deterministic per seed: same spec -> byte-identical directory."""
    if spec.scene_kind not in _BUILDERS:
        raise GenerationError(f"unknown scene kind {spec.scene_kind!r}")
    rng = np.random.default_rng(spec.rng_seed)
    model = _BUILDERS[spec.scene_kind](rng, spec)
    _check_interpenetration(model)

    n_frames, def_w, def_h = _KIND_DEFAULTS[spec.scene_kind]
    if spec.n_frames is not None:
        n_frames = spec.n_frames
    width = spec.image_width or def_w
    height = spec.image_height or def_h
    intr = _default_intrinsics(width, height)

    cam_poses = _hemisphere_poses(model, n_frames, rng)
    frames = []
    for cam in cam_poses:
        rgb, depth, labels = render_frame(model, cam, intr)
        frames.append((rgb, depth, cam, labels))

    objects = [SceneObject(o.object_id,
                           [o.captions[k % len(o.captions)] for k in range(n_frames)])
               for o in model.objects]

    out = Path(out_dir)
    save_dataset(out, intr, depth_max=3.0, bounds=model.bounds,
                 objects=objects, frames=frames)

    # attach goal captions to each task's relation via the rule parser, so the
    # geometric oracle can recognize the goal caption at scoring time
    parsed_objects = [SceneObject(o.object_id, o.per_view_captions,
                                  aggregate_captions(o.per_view_captions))
                      for o in objects]
    tasks_out = []
    for t in model.tasks:
        parsed = parse_instruction(Instruction(t.instruction), parsed_objects)
        relation = dict(t.relation)
        relation["goal_caption"] = parsed.task.goal_caption
        tasks_out.append({
            "name": t.name,
            "instruction": t.instruction,
            "relation": relation,
            "success_region": t.success_region,
            "lattice": t.lattice,
            "physics": t.physics,
        })

    sidecar = {
        "scene_kind": spec.scene_kind,
        "rng_seed": spec.rng_seed,
        "table_top_z": model.table_top_z,
        "objects": [{
            "object_id": o.object_id,
            "shape": shape_to_dict(o.shape),
            "pose": o.pose.to_dict(),
            "color": list(o.color),
        } for o in model.objects],
        "tasks": tasks_out,
    }
    with open(out / "ground_truth.json", "w") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)
    return out


def load_ground_truth(dataset_dir: str | Path) -> dict:
    path = Path(dataset_dir) / "ground_truth.json"
    if not path.exists():
        raise FileNotFoundError(f"no ground-truth sidecar at {path}")
    with open(path) as f:
        return json.load(f)
