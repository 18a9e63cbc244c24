import numpy as np
import pytest

from d2r.dataset import load_dataset
from d2r.geometry import Pose
from d2r.harness import SyntheticSceneSpec, generate_synthetic_scene
from d2r.harness.synthetic import GtObject, SceneElement
from d2r.harness import primitives as prim
from d2r.volumetric import BackgroundPolicy, TsdfVolume, integrate_frame

SPHERE_CENTER = np.array([0.0, 0.0, 0.1])
SPHERE_RADIUS = 0.1


@pytest.fixture(scope="session")
def mini_dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "mini"
    generate_synthetic_scene(SyntheticSceneSpec("mini", rng_seed=3), out)
    return out


@pytest.fixture(scope="session")
def mini_dataset(mini_dataset_dir):
    return load_dataset(mini_dataset_dir)


@pytest.fixture(scope="session")
def sphere_dataset_dir(tmp_path_factory):
    """24 exact scans of a 0.1 m sphere resting on a table."""
    ball = GtObject("ball", prim.Sphere(SPHERE_RADIUS),
                    Pose(translation=SPHERE_CENTER), (200, 60, 50),
                    ["a large red ball"])
    table = SceneElement(prim.Box((0.5, 0.5, 0.02)),
                         Pose(translation=[0, 0, -0.021]), (170, 150, 130))
    spec = SyntheticSceneSpec("custom", rng_seed=0, n_frames=24,
                              image_width=160, image_height=120,
                              custom_objects=[ball], custom_elements=[table])
    out = tmp_path_factory.mktemp("data") / "sphere"
    generate_synthetic_scene(spec, out)
    return out


@pytest.fixture(scope="session")
def sphere_dataset(sphere_dataset_dir):
    return load_dataset(sphere_dataset_dir)


@pytest.fixture(scope="session")
def sphere_volume(sphere_dataset):
    vol = TsdfVolume.from_bounds([-0.16, -0.16, -0.06], [0.16, 0.16, 0.26], 0.005)
    for f in sphere_dataset.frames:
        integrate_frame(vol, f, sphere_dataset.intrinsics, BackgroundPolicy(frozenset()))
    return vol


def sphere_scene_sdf(points: np.ndarray) -> np.ndarray:
    """True signed distance of the sphere-on-table scene (table top at z=0)."""
    pts = np.atleast_2d(points)
    ball = np.linalg.norm(pts - SPHERE_CENTER, axis=1) - SPHERE_RADIUS
    return np.minimum(ball, pts[:, 2])
