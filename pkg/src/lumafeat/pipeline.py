"""Pipeline stages wired to the config file.

Every stage writes a small stage manifest carrying the hash of the config
sections it depends on; a rerun with the same hash is a no-op, and a stage
refuses to run while its upstream manifest is missing or stale. Artifact
layout under the output root:

    objects/          pair files + objects.json
    scenes/           scene files + scenes.json
    data/             rendered dataset (see lumafeat.dataset)
    train[_<mode>]/   checkpoints + record.jsonl
    eval/             metric reports (JSON + aligned text)
    bench/            runtime + kernel benchmark report
    plots/            loss curves + metric-vs-illumination charts
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import splat
from .config import (
    config_hash,
    derive_seed,
    intrinsics_from,
    model_config_from,
    sweep_ranges_from,
    train_config_from,
)
from .dataset import (
    DatasetManifest,
    IoFailure,
    build_object_feature_set,
    label_dataset,
    load_group,
    render_dataset,
    sample_camera_views,
    sample_visible_camera_views,
)
from .detector import SupersetConfig, sample_adaptation_homography, warp_image
from .evaluation import (
    EVAL_SCORE_THRESHOLD,
    evaluate_on_groups,
    format_ablation_report,
    format_detection_report,
    homography_correctness,
    runtime_benchmark,
    save_report,
)
from .geometry import Homography
from .model import extract, init_network, load_checkpoint
from .renderer import sample_illumination_sweep, save_conditions
from .scene import (
    FeatureSet,
    ObjectSpec,
    Placement,
    align_pair,
    compose_scene,
    load_pair,
    load_scene,
    make_procedural_object,
    place_pairs,
    save_pair,
    save_scene,
)
from .training import train_loop


class StageError(RuntimeError):
    pass


class UpToDate(Exception):
    """Raised internally when a stage's outputs already match the config."""


def _stage_manifest(path):
    path = Path(path)
    if not path.exists():
        return None
    return json.loads(path.read_text())


def _check_up_to_date(manifest_path, digest):
    existing = _stage_manifest(manifest_path)
    if existing is not None and existing.get("config_hash") == digest:
        raise UpToDate(str(manifest_path))


def _require_upstream(manifest_path, stage_name, digest=None):
    existing = _stage_manifest(manifest_path)
    if existing is None:
        raise StageError(f"missing upstream manifest {manifest_path} "
                         f"(run `{stage_name}` first)")
    if digest is not None and existing.get("config_hash") != digest:
        raise StageError(f"upstream manifest {manifest_path} is stale "
                         f"(rerun `{stage_name}`)")
    return existing


OBJECT_SECTIONS = ["render", "objects"]
SCENE_SECTIONS = OBJECT_SECTIONS + ["scenes"]
RENDER_SECTIONS = SCENE_SECTIONS + ["views", "illumination"]
LABEL_SECTIONS = RENDER_SECTIONS + ["dataset"]
TRAIN_SECTIONS = LABEL_SECTIONS + ["model", "training"]


def stage_gen_objects(cfg, out_root):
    """Procedural objects + detect-and-lifted feature sets."""
    out = Path(out_root) / "objects"
    digest = config_hash(cfg, OBJECT_SECTIONS)
    _check_up_to_date(out / "objects.json", digest)
    out.mkdir(parents=True, exist_ok=True)

    obj_cfg = cfg["objects"]
    intrinsics = intrinsics_from(cfg)
    superset = SupersetConfig(
        n_homographies=obj_cfg["superset_homographies"],
        threshold_quantile=obj_cfg["detector_quantile"],
        nms_radius=obj_cfg["nms_radius"],
        max_points=obj_cfg["max_superset_points"],
    )
    files = []
    for i in range(obj_cfg["count"]):
        spec = ObjectSpec(
            shape=obj_cfg["shapes"][i % len(obj_cfg["shapes"])],
            texture=obj_cfg["textures"][i % len(obj_cfg["textures"])],
            size=obj_cfg["size"],
            point_count=obj_cfg["point_count"],
            texture_cell=obj_cfg["texture_cell"],
            seed=derive_seed(cfg["seed"], f"object-{i}"),
        )
        obj, _ = make_procedural_object(spec)
        solo = place_pairs([align_pair(FeatureSet(), obj)],
                           [Placement(0, np.eye(3), np.zeros(3))])
        features = build_object_feature_set(
            solo, intrinsics, n_views=obj_cfg["bootstrap_views"],
            seed=derive_seed(cfg["seed"], f"object-features-{i}"),
            superset=superset, occlusion_tol=cfg["dataset"]["occlusion_tol"])
        # keep features safely inside the pair-invariant bound
        keep = np.linalg.norm(features.points3d, axis=1) <= obj.bounding_radius * 1.05
        pair = align_pair(FeatureSet(features.points3d[keep]), obj)
        stem = f"obj{i:03d}"
        save_pair(out / stem, pair)
        files.append({"stem": stem, "object_id": obj.object_id,
                      "n_features": int(keep.sum())})
    (out / "objects.json").write_text(json.dumps(
        {"config_hash": digest, "objects": files}, indent=1))
    return out / "objects.json"


def stage_gen_scenes(cfg, out_root):
    """Compose pairs into scenes with seeded random rigid placements."""
    root = Path(out_root)
    digest = config_hash(cfg, SCENE_SECTIONS)
    objects_manifest = _require_upstream(root / "objects" / "objects.json",
                                         "gen-objects",
                                         config_hash(cfg, OBJECT_SECTIONS))
    _check_up_to_date(root / "scenes" / "scenes.json", digest)
    out = root / "scenes"
    out.mkdir(parents=True, exist_ok=True)

    pairs = [load_pair(root / "objects" / entry["stem"])
             for entry in objects_manifest["objects"]]
    scn_cfg = cfg["scenes"]
    per_scene = scn_cfg["pairs_per_scene"]
    files = []
    for i in range(scn_cfg["count"]):
        count = per_scene[i] if isinstance(per_scene, list) else per_scene
        rng = np.random.default_rng(derive_seed(cfg["seed"], f"scene-pick-{i}"))
        chosen = sorted(rng.choice(len(pairs), size=min(count, len(pairs)),
                                   replace=False).tolist())
        scene = compose_scene([pairs[j] for j in chosen],
                              seed=derive_seed(cfg["seed"], f"scene-{i}"),
                              scene_id=f"s{i:03d}",
                              translation_box=scn_cfg["translation_box"])
        name = f"s{i:03d}.json"
        save_scene(out / name, scene,
                   {k: f"../objects/obj{j:03d}" for k, j in enumerate(chosen)})
        files.append(name)
    (out / "scenes.json").write_text(json.dumps(
        {"config_hash": digest, "scenes": files}, indent=1))
    return out / "scenes.json"


def _load_scenes(root):
    manifest = _stage_manifest(root / "scenes" / "scenes.json")
    return [load_scene(root / "scenes" / name) for name in manifest["scenes"]]


def stage_render(cfg, out_root, jobs=1):
    """Render every (scene, view, illumination) triple, train + held-out."""
    root = Path(out_root)
    digest = config_hash(cfg, RENDER_SECTIONS)
    _require_upstream(root / "scenes" / "scenes.json", "gen-scenes",
                      config_hash(cfg, SCENE_SECTIONS))
    existing = _stage_manifest(root / "data" / "manifest.json")
    if existing is not None and existing.get("config_hash") == digest:
        raise UpToDate(str(root / "data" / "manifest.json"))

    scenes = _load_scenes(root)
    intrinsics = intrinsics_from(cfg)
    views_cfg = cfg["views"]
    views = []
    for si, scene in enumerate(scenes):
        bounding = scene.bounding_radius()
        views.append(sample_visible_camera_views(
            scene, intrinsics, views_cfg["count"],
            seed=derive_seed(cfg["seed"], f"views-{si}"),
            radius_range=(views_cfg["radius_factor"][0] * bounding,
                          views_cfg["radius_factor"][1] * bounding),
            elevation_range_deg=tuple(views_cfg["elevation_deg"]),
            occlusion_tol=cfg["dataset"]["occlusion_tol"],
            min_visible=views_cfg["min_visible_keypoints"]))

    ranges = sweep_ranges_from(cfg)
    illum_cfg = cfg["illumination"]
    conditions = sample_illumination_sweep(
        illum_cfg["train_count"], seed=derive_seed(cfg["seed"], "illum-train"),
        ranges=ranges)
    eval_count = illum_cfg["eval_count"]
    eval_conditions = []
    if eval_count > 0:
        eval_conditions = sample_illumination_sweep(
            max(eval_count, 2), seed=derive_seed(cfg["seed"], "illum-eval"),
            ranges=ranges, id_prefix="eval")[:eval_count]

    manifest = render_dataset(
        scenes, views, intrinsics, conditions, eval_conditions, root / "data",
        seeds={"global": cfg["seed"]}, config_hash=digest, jobs=jobs)
    return root / "data" / "manifest.json", manifest


def stage_labels(cfg, out_root):
    """Project feature sets into every view; finalize the dataset manifest."""
    root = Path(out_root)
    digest = config_hash(cfg, LABEL_SECTIONS)
    upstream = _require_upstream(root / "data" / "manifest.json", "render",
                                 config_hash(cfg, RENDER_SECTIONS))
    if upstream.get("complete") and upstream.get("label_hash") == digest:
        raise UpToDate(str(root / "data" / "manifest.json"))

    manifest = DatasetManifest.load(root / "data" / "manifest.json")
    scenes = _load_scenes(root)
    manifest = label_dataset(
        manifest, scenes, root / "data",
        label_seed=derive_seed(cfg["seed"], "labels"),
        occlusion_tol=cfg["dataset"]["occlusion_tol"])
    # stamp the label hash for idempotence while keeping the render hash
    payload = manifest.to_json_dict()
    payload["label_hash"] = digest
    (root / "data" / "manifest.json").write_text(json.dumps(payload, indent=1))
    return root / "data" / "manifest.json", manifest


def _train_dir(root, ablation):
    return Path(root) / ("train" if ablation == "full" else f"train_{ablation}")


def stage_train(cfg, out_root, ablation=None):
    """Train one extractor; ablation picks the loss configuration."""
    root = Path(out_root)
    digest = config_hash(cfg, TRAIN_SECTIONS)
    upstream = _require_upstream(root / "data" / "manifest.json", "labels")
    if not upstream.get("complete"):
        raise StageError("dataset manifest incomplete (run `labels` first)")

    config = train_config_from(cfg, ablation=ablation)
    out = _train_dir(root, config.ablation)
    stamp = out / "train.json"
    run_digest = f"{digest}:{config.ablation}"
    existing = _stage_manifest(stamp)
    if existing is not None and existing.get("config_hash") == run_digest:
        raise UpToDate(str(stamp))
    out.mkdir(parents=True, exist_ok=True)

    manifest = DatasetManifest.load(root / "data" / "manifest.json")
    checkpoint, record = train_loop(manifest, root / "data", config, out)
    stamp.write_text(json.dumps({
        "config_hash": run_digest,
        "checkpoint": str(checkpoint.name),
        "steps": config.steps,
        "ablation": config.ablation,
        "final_total": record.entries[-1]["total"] if record.entries else None,
    }, indent=1))
    return checkpoint, record


def _extract_fn(network, eval_cfg):
    def fn(image):
        return extract(network, image,
                       score_threshold=eval_cfg["score_threshold"],
                       nms_radius=eval_cfg["nms_radius"],
                       max_keypoints=eval_cfg["max_keypoints"])
    return fn


def _homography_pairs(groups, count, width, height, seed):
    """Synthetic warped pairs from the brightest held-out render of each
    group, cycling through groups until ``count`` pairs exist."""
    from .evaluation import brightest_index

    rng = np.random.default_rng(seed)
    pairs = []
    gi = 0
    while len(pairs) < count and groups:
        group = groups[gi % len(groups)]
        images = group.eval_images if group.eval_images else group.images
        image = images[brightest_index(images)]
        h = sample_adaptation_homography(rng, width, height,
                                         max_rotation_deg=15.0,
                                         scale_range=(0.9, 1.1),
                                         perspective_frac=0.05)
        warped, _ = warp_image(image, h)
        pairs.append((image, warped, h))
        gi += 1
    return pairs


def stage_eval(cfg, out_root):
    """Detection/similarity metrics for every trained checkpoint, plus the
    homography-estimation protocol on synthetic warped pairs."""
    root = Path(out_root)
    _require_upstream(root / "data" / "manifest.json", "labels")
    out = root / "eval"
    out.mkdir(parents=True, exist_ok=True)

    manifest = DatasetManifest.load(root / "data" / "manifest.json")
    if not manifest.complete:
        raise StageError("dataset manifest incomplete (run `labels` first)")
    groups = [load_group(manifest, i, root / "data")
              for i in range(len(manifest.groups))]
    eval_cfg = cfg["eval"]

    runs = {}
    for mode in ("full", "no_similarity", "no_disparity"):
        ckpt = _train_dir(root, mode) / "model.pt"
        if ckpt.exists():
            runs[mode] = ckpt
    if not runs:
        raise StageError("no trained checkpoints found (run `train` first)")

    epsilon = eval_cfg["epsilon"]
    detection_rows, ablation_rows = [], []
    payload = {"epsilon": epsilon, "runs": {}}

    # random-init baseline shares the protocol
    baseline = init_network(model_config_from(cfg),
                            seed=derive_seed(cfg["seed"], "baseline"))
    named_networks = [("random_init", baseline)]
    for mode, ckpt in runs.items():
        network, _ = load_checkpoint(ckpt)
        named_networks.append((mode, network))

    for name, network in named_networks:
        fn = _extract_fn(network, eval_cfg)
        report = evaluate_on_groups(
            [g.eval_images if g.eval_images else g.images for g in groups],
            fn, epsilon=epsilon)
        per_condition = _per_condition_repeatability(groups, fn, epsilon)
        report["per_condition_repeatability"] = per_condition
        if name in runs or name == "full":
            h_pairs = _homography_pairs(
                groups, eval_cfg["homography_pairs"],
                manifest.width, manifest.height,
                seed=derive_seed(cfg["seed"], "homography-pairs"))
            h_report = homography_correctness(
                h_pairs, fn, epsilon=eval_cfg["homography_epsilon"],
                iterations=eval_cfg["ransac_iterations"],
                seed=derive_seed(cfg["seed"], "ransac") % (2 ** 32))
            report["homography_correctness"] = h_report.correctness
            report["homography_corner_errors"] = [
                e if np.isfinite(e) else None for e in h_report.corner_errors]
        payload["runs"][name] = report
        detection_rows.append((name, report["repeatability"],
                               report["location_error"], report["sp_mse"],
                               report["sp_cs"]))
        ablation_rows.append((name, report["sp_mse"], report["dp_mse"],
                              report["sp_cs"], report["dp_cs"]))

    save_report(out / "report.json", payload)
    detection_text = format_detection_report(detection_rows)
    ablation_text = format_ablation_report(ablation_rows)
    (out / "detection_table.txt").write_text(detection_text + "\n")
    (out / "ablation_table.txt").write_text(ablation_text + "\n")
    return out / "report.json", payload


def _per_condition_repeatability(groups, extract_fn, epsilon):
    """Repeatability keyed by held-out condition id (for the plots stage)."""
    from .evaluation import brightest_index, match_to_reference

    per = {}
    for group in groups:
        images = group.eval_images if group.eval_images else group.images
        ids = group.eval_image_ids if group.eval_images else group.image_ids
        extractions = [extract_fn(img) for img in images]
        ref_idx = brightest_index(images)
        reference = extractions[ref_idx]
        if len(reference.keypoints) == 0:
            for i, cid in enumerate(ids):
                if i != ref_idx:
                    per.setdefault(cid, []).append(0.0)
            continue
        for i, (cid, ext) in enumerate(zip(ids, extractions)):
            if i == ref_idx:
                continue
            matches = match_to_reference(reference.keypoints, ext.keypoints,
                                         epsilon)
            per.setdefault(cid, []).append(len(matches) / len(reference.keypoints))
    return {cid: float(np.mean(vals)) for cid, vals in sorted(per.items())}


def stage_bench(cfg, out_root):
    """Extractor runtime benchmark + splat kernel backend comparison."""
    root = Path(out_root)
    out = root / "bench"
    out.mkdir(parents=True, exist_ok=True)
    bench_cfg = cfg["bench"]

    ckpt = _train_dir(root, "full") / "model.pt"
    if ckpt.exists():
        network, _ = load_checkpoint(ckpt)
        source = str(ckpt)
    else:
        network = init_network(model_config_from(cfg),
                               seed=derive_seed(cfg["seed"], "bench"))
        source = "random-init (no checkpoint found)"

    fn = _extract_fn(network, cfg["eval"])
    runtime = runtime_benchmark(fn, n_frames=bench_cfg["frames"],
                                size=(bench_cfg["width"], bench_cfg["height"]))
    kernel = benchmark_splat_backends(cfg)
    payload = {"extractor": runtime, "extractor_source": source,
               "splat_kernel": kernel}
    save_report(out / "report.json", payload)
    lines = [
        f"extractor ({source}):",
        f"  {runtime['mean_ms']:.2f} ms/frame +- {runtime['std_ms']:.2f} "
        f"over {runtime['n_frames']} frames of {bench_cfg['width']}x{bench_cfg['height']}",
        f"  published reference: {runtime['reference_ms']['gpu']} ms GPU / "
        f"{runtime['reference_ms']['cpu']} ms CPU (context, not asserted)",
        f"splat kernel (active: {kernel['active']}):",
    ]
    for name, stats in kernel["backends"].items():
        lines.append(f"  {name}: {stats['mean_ms']:.2f} ms/frame")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    return out / "report.json", payload


def benchmark_splat_backends(cfg, frames=5):
    """Render the same frame with every available splat backend."""
    import time

    from .renderer import render_scene

    intrinsics = intrinsics_from(cfg)
    obj, _ = make_procedural_object(ObjectSpec(
        shape="cube", seed=derive_seed(cfg["seed"], "bench-scene"),
        point_count=cfg["objects"]["point_count"]))
    scene = place_pairs([align_pair(FeatureSet(), obj)],
                        [Placement(0, np.eye(3), np.zeros(3))])
    views = sample_camera_views(1, seed=0, target=scene.centroid(),
                                radius_range=(2.6, 2.6))
    conditions = sample_illumination_sweep(2, seed=0)
    results = {}
    for backend in splat.available_backends():
        previous = splat.set_backend(backend)
        try:
            render_scene(scene, views[0], intrinsics, conditions[0])  # warm
            start = time.perf_counter()
            for _ in range(frames):
                render_scene(scene, views[0], intrinsics, conditions[0])
            elapsed = (time.perf_counter() - start) / frames
        finally:
            splat.set_backend(previous)
        results[backend] = {"mean_ms": elapsed * 1000.0, "frames": frames}
    return {"backends": results, "active": splat.active_backend()}


def stage_plots(cfg, out_root):
    """Loss curves and metric-vs-illumination charts as static images."""
    from . import plots

    root = Path(out_root)
    out = root / "plots"
    out.mkdir(parents=True, exist_ok=True)
    made = []
    for mode in ("full", "no_similarity", "no_disparity"):
        record = _train_dir(root, mode) / "record.jsonl"
        if record.exists():
            target = out / (f"loss_{mode}.png")
            plots.loss_curves(record, target, title=f"training losses ({mode})")
            made.append(target)
    report = root / "eval" / "report.json"
    if report.exists():
        target = out / "repeatability_vs_illumination.png"
        plots.metric_vs_illumination(report, target)
        made.append(target)
    if not made:
        raise StageError("nothing to plot (run `train` and `eval` first)")
    return made
