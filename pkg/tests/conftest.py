import numpy as np
import pytest

from lumafeat.dataset import augment_dataset, sample_camera_views
from lumafeat.geometry import Intrinsics
from lumafeat.renderer import sample_illumination_sweep
from lumafeat.scene import (
    FeatureSet,
    ObjectSpec,
    align_pair,
    compose_scene,
    make_procedural_object,
)

TOY_INTRINSICS = Intrinsics(fx=80.0, fy=80.0, cx=32.0, cy=24.0, width=64, height=48)


def build_toy_corpus(out_dir, n_scenes=2, n_views=2, n_illum=3, n_eval=2,
                     intrinsics=TOY_INTRINSICS, seed=0):
    """Small textured corpus with detected-and-lifted feature sets."""
    from lumafeat.dataset import build_object_feature_set
    from lumafeat.scene import Placement, place_pairs

    shapes = ["cube", "plane", "sphere", "cylinder"]
    scenes = []
    for si in range(n_scenes):
        obj, _ = make_procedural_object(
            ObjectSpec(shape=shapes[si % 4], seed=seed + si, point_count=1600,
                       texture_cell=0.22))
        solo = place_pairs([align_pair(FeatureSet(), obj)],
                           [Placement(0, np.eye(3), np.zeros(3))])
        features = build_object_feature_set(solo, intrinsics, n_views=4,
                                            seed=seed + 50 + si,
                                            occlusion_tol=0.05)
        pair = align_pair(features, obj)
        scenes.append(compose_scene([pair], seed=seed + 100 + si,
                                    translation_box=0.4, scene_id=f"s{si:03d}"))

    views = [sample_camera_views(
        n_views, seed=seed + 200 + si, target=scene.centroid(),
        radius_range=(2.4 * scene.bounding_radius(), 3.0 * scene.bounding_radius()),
        elevation_range_deg=(20.0, 60.0))
        for si, scene in enumerate(scenes)]
    conditions = sample_illumination_sweep(n_illum, seed=seed + 300)
    eval_conditions = sample_illumination_sweep(
        max(n_eval, 2), seed=seed + 400, id_prefix="eval")[:n_eval]
    manifest = augment_dataset(scenes, views, intrinsics, conditions,
                               eval_conditions, out_dir, label_seed=seed + 500,
                               occlusion_tol=0.05)
    return manifest, scenes


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_corpus") / "data"
    manifest, scenes = build_toy_corpus(root)
    return manifest, root
