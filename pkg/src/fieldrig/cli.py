"""End-to-end pipeline commands.

Six subcommands cover the full loop: gen-data simulates characters and
sensor captures, train fits the implicit fields, reconstruct extracts an
animatable model, animate re-poses it along a clip, eval scores it against
the analytic ground truth, and ablate reruns training across encoder,
sampler, or head variants with shared seeds.

Every command is a pure function of (config, input files, seed): re-running
with the same inputs rewrites identical bytes.  The fully resolved config is
dumped next to each command's outputs so the artifacts are self-describing.

Exit codes: 0 success, 2 validation/config error, 3 degenerate result
(e.g. the occupancy field never crosses the iso level).
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from .animation import fk_transforms, lbs_deform, read_clip, write_clip
from .character import (CharacterConfig, PARENTS, Pose, analytic_joints,
                        build_character, character_bounds, character_mesh,
                        identity_pose, read_character, read_pose, sample_pose,
                        synthesize_clip, write_character, write_pose)
from .extraction import (EmptyReconstructionError, InvalidModelError,
                         extract_animatable_model, read_model, write_model)
from .fields import BRANCHES, read_checkpoint, write_checkpoint
from .geomcore import (Camera, FeatureMap2D, RigidTransform, TriangleMesh,
                       rotation_about_axis, unit, write_obj)
from .metrics import (MetricsReport, chamfer, format_metrics_text, mpjpe,
                      normal_consistency, p2s, retarget_error,
                      write_metrics_csv, write_metrics_text)
from .sensorsim import (LidarConfig, make_sensor_sample, normalize_transform,
                        read_camera, read_pfm, read_pgm, read_point_cloud,
                        render_depth_silhouette, simulate_lidar, write_camera,
                        write_pfm, write_pgm, write_point_cloud)
from .training import LossWeights, TrainConfig, train, write_loss_history

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEGENERATE = 3


class ConfigError(ValueError):
    """Invalid configuration or command arguments (exit code 2)."""


# Every knob an experiment can turn, with its default.  User config files
# override entries of this tree; unknown keys are rejected so typos cannot
# silently fall back to defaults.
DEFAULT_CONFIG = {
    "seed": 0,
    "characters": {
        "count": 1,
        "height_range": [1.5, 1.9],
        "proportion_jitter": 0.08,
        "radius_jitter": 0.10,
        "beta": 200.0,
    },
    "poses": {
        "per_character": 4,
        "max_angle_deg": 40.0,
        "include_rest": True,
    },
    "sensors": {
        "voxel_resolution": 32,
        "voxel_extent": 2.4,
        "mesh_resolution": 96,       # capture-side surface resolution
        "image_width": 128,
        "image_height": 128,
        "fov_fill": 0.85,            # subject height as a fraction of the image
        "distance_range": [3.8, 4.5],
        "camera_height": 1.0,
        "lidar": {
            "origin": [0.0, 0.0, 1.8],
            "azimuth_step_deg": 0.18,
            "elevation_start_deg": 2.0,
            "elevation_stop_deg": -24.0,
            "elevation_step_deg": 0.4,
            "drop_rate": 0.10,
            "range_noise": 0.01,
        },
    },
    "training": {
        "steps": 2000,
        "n_occ": 512,
        "n_pose": 512,
        "n_skin": 512,
        "mix_occ": 0.9,
        "mix_pose": 0.8,
        "sigma_surf": 0.03,
        "sigma_joint": 0.10,
        "sigma_heat": 0.05,
        "learning_rate": 1e-3,
        "rho": 0.99,
        "epsilon": 1e-8,
        "decay_steps": [],
        "weights": [1.0, 1.0, 1.0],  # occupancy, pose, skinning loss weights
        "vox_channels": 16,
        "im_channels": 16,
        "hidden": 128,
        "surface_resolution": 48,
        "branches": list(BRANCHES),
    },
    "extraction": {
        "resolution": 128,
        "iso": 0.5,
        "chunk": 65536,
    },
    "metrics": {
        "n_samples": 10000,
        "seed": 0,
        "gt_resolution": 128,
        "clip_frames": 120,
        "clip_seed": 0,
        "base_frames": [0, 5, 10],
        "offsets": [3, 5, 10, 20, 100],
    },
    "ablation": {
        "axis": "sampling",          # sampling | viewpoint | heads
        "seeds": [0, 1, 2],
        "steps": 500,
        "extraction_resolution": 64,
        "metric_samples": 2000,
    },
}

# Ablation variants per axis: a name plus TrainConfig overrides.  Variants
# share per-seed randomness so rows differ only in the toggled mechanism.
ABLATION_AXES = {
    "sampling": (
        ("both", {}),
        ("uniform", {"mix_occ": 0.0, "mix_pose": 0.0}),
        ("biased", {"mix_occ": 1.0, "mix_pose": 1.0}),
    ),
    "viewpoint": (
        ("full", {}),
        ("image_only", {"branches": ["im"]}),
    ),
    "heads": (
        ("both", {}),
        ("occ", {"weights": [1.0, 0.0, 0.0]}),
        ("pose", {"weights": [0.0, 1.0, 0.0]}),
    ),
}

METRIC_NAMES = ("chamfer", "p2s", "normal", "mpjpe", "retarget")


# ---------------------------------------------------------------------------
# Configuration


def _merge(base: dict, override: dict, prefix: str = "") -> None:
    for key, value in override.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        cur = base[key]
        if isinstance(cur, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {name!r} must be a table")
            _merge(cur, value, name + ".")
        elif isinstance(cur, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"config key {name!r} expects true/false")
            base[key] = value
        elif isinstance(cur, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"config key {name!r} expects an integer")
            base[key] = value
        elif isinstance(cur, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"config key {name!r} expects a number")
            base[key] = float(value)
        elif isinstance(cur, str):
            if not isinstance(value, str):
                raise ConfigError(f"config key {name!r} expects a string")
            base[key] = value
        else:
            if not isinstance(value, list):
                raise ConfigError(f"config key {name!r} expects a list")
            base[key] = value


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _int_list(values, name, minimum=0):
    _require(isinstance(values, list) and len(values) > 0,
             f"{name} must be a nonempty list")
    for v in values:
        _require(isinstance(v, int) and not isinstance(v, bool) and v >= minimum,
                 f"{name} entries must be integers >= {minimum}")
    return [int(v) for v in values]


def _validate_config(cfg: dict) -> None:
    _require(cfg["seed"] >= 0, "seed must be nonnegative")

    ch = cfg["characters"]
    _require(ch["count"] >= 1, "characters.count must be at least 1")
    _require(len(ch["height_range"]) == 2, "characters.height_range needs [lo, hi]")
    try:
        _character_config(cfg).validate()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"characters: {exc}")

    po = cfg["poses"]
    _require(po["per_character"] >= 1, "poses.per_character must be at least 1")
    _require(0.0 < po["max_angle_deg"] <= 90.0,
             "poses.max_angle_deg must lie in (0, 90]")

    se = cfg["sensors"]
    _require(se["voxel_resolution"] >= 2, "sensors.voxel_resolution must be >= 2")
    _require(se["voxel_extent"] > 0, "sensors.voxel_extent must be positive")
    _require(se["mesh_resolution"] >= 8, "sensors.mesh_resolution must be >= 8")
    for key in ("image_width", "image_height"):
        _require(se[key] >= 8 and se[key] % 4 == 0,
                 f"sensors.{key} must be a multiple of 4, at least 8")
    _require(0.0 < se["fov_fill"] <= 1.0, "sensors.fov_fill must lie in (0, 1]")
    dr = se["distance_range"]
    _require(len(dr) == 2 and 0 < dr[0] <= dr[1],
             "sensors.distance_range needs 0 < lo <= hi")
    try:
        _lidar_config(cfg)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"sensors.lidar: {exc}")

    try:
        _train_config(cfg, seed=cfg["seed"])
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"training: {exc}")

    ex = cfg["extraction"]
    _require(ex["resolution"] >= 2, "extraction.resolution must be >= 2")
    _require(0.0 < ex["iso"] < 1.0, "extraction.iso must lie in (0, 1)")
    _require(ex["chunk"] >= 1, "extraction.chunk must be positive")

    me = cfg["metrics"]
    _require(me["n_samples"] >= 1, "metrics.n_samples must be positive")
    _require(me["seed"] >= 0, "metrics.seed must be nonnegative")
    _require(me["gt_resolution"] >= 2, "metrics.gt_resolution must be >= 2")
    _require(me["clip_frames"] >= 1, "metrics.clip_frames must be positive")
    _require(me["clip_seed"] >= 0, "metrics.clip_seed must be nonnegative")
    bases = _int_list(me["base_frames"], "metrics.base_frames")
    offsets = _int_list(me["offsets"], "metrics.offsets", minimum=1)
    _require(max(bases) + max(offsets) < me["clip_frames"],
             "metrics.base_frames + offsets must stay inside the clip")

    ab = cfg["ablation"]
    _require(ab["axis"] in ABLATION_AXES,
             "ablation.axis must be one of " + "/".join(sorted(ABLATION_AXES)))
    _int_list(ab["seeds"], "ablation.seeds")
    _require(ab["steps"] >= 1, "ablation.steps must be positive")
    _require(ab["extraction_resolution"] >= 2,
             "ablation.extraction_resolution must be >= 2")
    _require(ab["metric_samples"] >= 1, "ablation.metric_samples must be positive")


def load_config(path=None, seed=None) -> dict:
    """Defaults overlaid with a JSON config file and an optional seed."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        _merge(cfg, user)
    if seed is not None:
        _require(seed >= 0, "seed must be nonnegative")
        cfg["seed"] = int(seed)
    _validate_config(cfg)
    return cfg


def _write_resolved(cfg: dict, out_dir: Path) -> None:
    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _character_config(cfg: dict) -> CharacterConfig:
    ch = cfg["characters"]
    return CharacterConfig(height_range=tuple(ch["height_range"]),
                           proportion_jitter=ch["proportion_jitter"],
                           radius_jitter=ch["radius_jitter"], beta=ch["beta"])


def _lidar_config(cfg: dict) -> LidarConfig:
    li = dict(cfg["sensors"]["lidar"])
    li["origin"] = np.asarray(li["origin"], dtype=np.float64)
    return LidarConfig(**li)


def _train_config(cfg: dict, seed: int, **overrides) -> TrainConfig:
    t = dict(cfg["training"])
    t.update(overrides)
    weights = t.pop("weights")
    if not isinstance(weights, (list, tuple)) or len(weights) != 3:
        raise ConfigError("training.weights must list the three loss weights")
    tc = TrainConfig(seed=seed, steps=t["steps"], n_occ=t["n_occ"],
                     n_pose=t["n_pose"], n_skin=t["n_skin"],
                     mix_occ=t["mix_occ"], mix_pose=t["mix_pose"],
                     sigma_surf=t["sigma_surf"], sigma_joint=t["sigma_joint"],
                     sigma_heat=t["sigma_heat"],
                     learning_rate=t["learning_rate"], rho=t["rho"],
                     epsilon=t["epsilon"],
                     decay_steps=tuple(int(s) for s in t["decay_steps"]),
                     weights=LossWeights(*(float(w) for w in weights)),
                     vox_channels=t["vox_channels"],
                     im_channels=t["im_channels"], hidden=t["hidden"],
                     surface_resolution=t["surface_resolution"],
                     branches=tuple(t["branches"]))
    try:
        tc.validate()
    except ValueError as exc:
        raise ConfigError(str(exc))
    return tc


def _subseed(*parts) -> int:
    """Stable 64-bit stream id for a tuple of small integers."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Scene IO


def _lookat(position, target) -> RigidTransform:
    """World-to-camera extrinsics aiming +z at `target`, +y downward."""
    p = np.asarray(position, dtype=np.float64)
    z = unit(np.asarray(target, dtype=np.float64) - p)
    x = np.cross([0.0, 0.0, -1.0], z)
    n = float(np.linalg.norm(x))
    if n < 1e-9:
        raise ConfigError("camera would look straight along the vertical axis")
    x = x / n
    r = np.stack([x, np.cross(z, x), z])
    return RigidTransform(r, -r @ p)


def _generate_scene(char, pose, scene_dir: Path, cfg: dict, ci: int, pi: int):
    """Capture one placed character and write its canonical-frame files."""
    se = cfg["sensors"]
    rng = np.random.default_rng([cfg["seed"], 29, ci, pi])
    dist = rng.uniform(*se["distance_range"])
    azimuth = rng.uniform(0.0, 2.0 * np.pi)
    yaw = rng.uniform(0.0, 2.0 * np.pi)
    offset = np.array([dist * np.cos(azimuth), dist * np.sin(azimuth), 0.0])
    world = RigidTransform(rotation_about_axis([0.0, 0.0, 1.0], yaw), offset)

    mesh = character_mesh(char, pose, resolution=se["mesh_resolution"])
    mesh_w = TriangleMesh(world.apply(mesh.vertices), mesh.faces.copy())

    lidar_seed = _subseed(cfg["seed"], 31, ci, pi)
    points_w = simulate_lidar(mesh_w, _lidar_config(cfg), lidar_seed)

    center, side = character_bounds(char, pose)
    target = world.apply(center)
    cam_pos = np.array([0.0, 0.0, se["camera_height"]])
    focal = se["fov_fill"] * se["image_height"] \
        * float(np.linalg.norm(target - cam_pos)) / side
    camera_w = Camera(focal, focal, se["image_width"] / 2.0,
                      se["image_height"] / 2.0, se["image_width"],
                      se["image_height"], _lookat(cam_pos, target))
    image = render_depth_silhouette(mesh_w, camera_w)

    # Undo the placement: points move into the canonical frame, the camera
    # keeps rendering the same pixels via adjusted extrinsics.
    norm = normalize_transform(yaw, offset)
    points = norm.apply(points_w)
    camera = Camera(focal, focal, camera_w.cx, camera_w.cy, camera_w.width,
                    camera_w.height, camera_w.extrinsics.compose(norm.inverse()))

    scene_dir.mkdir(parents=True, exist_ok=True)
    write_character(char, scene_dir / "character.json")
    write_pose(pose, scene_dir / "pose.json")
    write_point_cloud(points, scene_dir / "cloud.s3pc")
    write_pfm(image.values[..., 0], scene_dir / "depth.pfm")
    write_pgm(image.values[..., 1], scene_dir / "mask.pgm")
    write_camera(camera, scene_dir / "camera.json")
    meta = {
        "character_index": ci,
        "pose_index": pi,
        "voxel_resolution": se["voxel_resolution"],
        "voxel_extent": se["voxel_extent"],
        "yaw": float(yaw),
        "offset": [float(offset[0]), float(offset[1])],
        "lidar_seed": lidar_seed,
        "n_points": int(len(points)),
    }
    with open(scene_dir / "scene.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return meta


def load_scene(scene_dir):
    """Scene directory -> (character, pose, SensorSample)."""
    d = Path(scene_dir)
    try:
        with open(d / "scene.json") as fh:
            meta = json.load(fh)
        char = read_character(d / "character.json")
        pose = read_pose(d / "pose.json")
        points = read_point_cloud(d / "cloud.s3pc")
        depth = read_pfm(d / "depth.pfm")
        mask = read_pgm(d / "mask.pgm")
        camera = read_camera(d / "camera.json")
    except OSError as exc:
        raise ConfigError(f"cannot load scene {d}: {exc}")
    if depth.shape != mask.shape:
        raise ConfigError(f"scene {d}: depth and mask disagree on size")
    image = FeatureMap2D(np.stack([depth, mask], axis=-1))
    extent = float(meta["voxel_extent"])
    return char, pose, make_sensor_sample(
        points if len(points) else None, image, camera,
        voxel_resolution=int(meta["voxel_resolution"]), voxel_extent=extent,
        canonical_origin=[0.0, 0.0, 0.5 * extent])


def _read_manifest(data_dir) -> list:
    path = Path(data_dir) / "manifest.jsonl"
    try:
        with open(path) as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise ConfigError(f"cannot read manifest: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest is not line-delimited JSON: {exc}")
    if not rows:
        raise ConfigError("manifest lists no scenes")
    return rows


def _load_dataset(data_dir) -> list:
    return [load_scene(Path(data_dir) / row["scene"])
            for row in _read_manifest(data_dir)]


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg, out)
    ch_cfg = _character_config(cfg)
    rows = []
    for ci in range(cfg["characters"]["count"]):
        char = build_character([cfg["seed"], 17, ci], ch_cfg)
        clip = synthesize_clip(char, cfg["metrics"]["clip_frames"],
                               [cfg["metrics"]["clip_seed"], ci])
        write_clip(clip, out / f"clip_{ci:03d}.json")
        for pi in range(cfg["poses"]["per_character"]):
            if pi == 0 and cfg["poses"]["include_rest"]:
                pose = identity_pose(char.n_joints)
            else:
                pose = sample_pose(char, [cfg["seed"], 23, ci, pi],
                                   cfg["poses"]["max_angle_deg"])
            name = f"scene_{ci:03d}_{pi:03d}"
            meta = _generate_scene(char, pose, out / name, cfg, ci, pi)
            rows.append({"scene": name, "character": ci, "pose": pi,
                         "lidar_seed": meta["lidar_seed"],
                         "n_points": meta["n_points"]})
    with open(out / "manifest.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"wrote {len(rows)} scenes and "
          f"{cfg['characters']['count']} clips under {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    dataset = _load_dataset(args.data)
    tc = _train_config(cfg, seed=cfg["seed"])
    try:
        params, history = train(dataset, tc)
    except ValueError as exc:
        raise ConfigError(str(exc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg, out)
    write_checkpoint(params, out / "checkpoint.s3f1")
    write_loss_history(history, out / "loss_history.csv")
    final = history[-1][4] if history else float("nan")
    print(f"trained {tc.steps} steps on {len(dataset)} scenes; "
          f"final loss {final:.6g}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = load_config(args.config, args.seed)
    if args.resolution is not None:
        _require(args.resolution >= 2, "--resolution must be >= 2")
        cfg["extraction"]["resolution"] = args.resolution
    if args.iso is not None:
        _require(0.0 < args.iso < 1.0, "--iso must lie in (0, 1)")
        cfg["extraction"]["iso"] = args.iso
    ex = cfg["extraction"]
    params = read_checkpoint(args.checkpoint)
    if params.n_bones != len(PARENTS):
        raise ConfigError("checkpoint skinning head does not match the "
                          f"{len(PARENTS)}-bone humanoid skeleton")
    _, _, sample = load_scene(args.scene)
    model = extract_animatable_model(params, sample,
                                     resolution=ex["resolution"],
                                     iso=ex["iso"], chunk=ex["chunk"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg, out)
    write_model(model, out)
    print(f"reconstructed {model.mesh.n_vertices} vertices / "
          f"{model.mesh.n_faces} faces at {ex['resolution']}^3")
    return EXIT_OK


def _parse_frames(spec, n_frames: int) -> list:
    if spec is None:
        return list(range(n_frames))
    frames = []
    for token in spec.split(","):
        token = token.strip()
        if token:
            try:
                frames.append(int(token))
            except ValueError:
                raise ConfigError(f"--frames entry {token!r} is not an integer")
    _require(len(frames) > 0, "--frames lists no frames")
    for f in frames:
        _require(0 <= f < n_frames,
                 f"frame {f} outside the clip's {n_frames} frames")
    return frames


def cmd_animate(args) -> int:
    cfg = load_config(args.config, args.seed)
    model = read_model(args.model)
    clip = read_clip(args.clip)
    if clip.rotations.shape[1] != len(model.joints):
        raise ConfigError("clip joint count does not match the model skeleton")
    frames = _parse_frames(args.frames, clip.n_frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg, out)
    for f in frames:
        tr = fk_transforms(model.parents, model.joints, clip.rotations[f],
                           clip.root_translations[f])
        posed = lbs_deform(model.mesh.vertices, model.weights, tr)
        write_obj(TriangleMesh(posed, model.mesh.faces.copy()),
                  out / f"frame_{f:04d}.obj")
    print(f"animated {len(frames)} frames into {out}")
    return EXIT_OK


def _parse_metrics(spec: str) -> list:
    names = [t.strip() for t in spec.split(",") if t.strip()]
    _require(len(names) > 0, "--metrics lists no metrics")
    for name in names:
        if name not in METRIC_NAMES:
            raise ConfigError(f"unknown metric {name!r}; choose from "
                              + ", ".join(METRIC_NAMES))
    return names


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.seed)
    requested = _parse_metrics(args.metrics)
    model = read_model(args.model)
    char, pose, _ = load_scene(args.scene)
    me = cfg["metrics"]
    n, seed = me["n_samples"], me["seed"]

    gt_cache = {}

    def gt_mesh():
        if "mesh" not in gt_cache:
            gt_cache["mesh"] = character_mesh(char, pose,
                                              resolution=me["gt_resolution"])
        return gt_cache["mesh"]

    report = MetricsReport(n_samples=n, seed=seed)
    if "chamfer" in requested:
        report.chamfer_cm = chamfer(model.mesh, gt_mesh(), n, seed)
    if "p2s" in requested:
        report.p2s_cm = p2s(model.mesh, gt_mesh(), n, seed)
    if "normal" in requested:
        report.normal_consistency = normal_consistency(model.mesh, gt_mesh(),
                                                       n, seed)
    if "mpjpe" in requested:
        report.mpjpe_cm = mpjpe(model.joints, analytic_joints(char, pose))
    if "retarget" in requested:
        with open(Path(args.scene) / "scene.json") as fh:
            ci = int(json.load(fh).get("character_index", 0))
        clip = synthesize_clip(char, me["clip_frames"], [me["clip_seed"], ci])
        sweep = {}
        for off in me["offsets"]:
            errs = [retarget_error(
                model, char,
                Pose(clip.rotations[b + off], clip.root_translations[b + off]),
                resolution=me["gt_resolution"], n=n, seed=seed)
                for b in me["base_frames"]]
            sweep[int(off)] = float(np.median(errs))
        report.retarget_error_cm = sweep

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg, out)
    write_metrics_csv(report, out / "metrics.csv")
    write_metrics_text(report, out / "metrics.txt")
    print(format_metrics_text(report), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.seed)
    ab = cfg["ablation"]
    variants = ABLATION_AXES[ab["axis"]]
    dataset = _load_dataset(args.data)
    gt_char, gt_pose, eval_sample = dataset[0]
    gt_mesh = character_mesh(gt_char, gt_pose,
                             resolution=cfg["metrics"]["gt_resolution"])
    gt_joints = analytic_joints(gt_char, gt_pose)
    n, seed = ab["metric_samples"], cfg["metrics"]["seed"]

    results = []
    for name, overrides in variants:
        for s in ab["seeds"]:
            tc = _train_config(cfg, seed=int(s), steps=ab["steps"], **overrides)
            try:
                params, _ = train(dataset, tc)
            except ValueError as exc:
                raise ConfigError(str(exc))
            try:
                model = extract_animatable_model(
                    params, eval_sample,
                    resolution=ab["extraction_resolution"],
                    iso=cfg["extraction"]["iso"], chunk=cfg["extraction"]["chunk"])
            except (EmptyReconstructionError, InvalidModelError):
                results.append((name, s) + (float("nan"),) * 4)
                continue
            results.append((name, s,
                            chamfer(model.mesh, gt_mesh, n, seed),
                            p2s(model.mesh, gt_mesh, n, seed),
                            normal_consistency(model.mesh, gt_mesh, n, seed),
                            mpjpe(model.joints, gt_joints)))

    lines = ["variant,seed,chamfer_cm,p2s_cm,normal_consistency,mpjpe_cm"]
    for name, s, *values in results:
        lines.append(",".join([name, str(s)]
                              + [format(v, ".6g") for v in values]))
    for name, _ in variants:
        block = np.array([values for row_name, _, *values in results
                          if row_name == name])
        med = np.median(block, axis=0)
        lines.append(",".join([name, "median"]
                              + [format(v, ".6g") for v in med]))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg, out)
    with open(out / "ablation.csv", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


def _add_common(parser) -> None:
    parser.add_argument("--config", default=None,
                        help="JSON file overriding the default config")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the root seed")
    parser.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fieldrig",
        description="single-view character reconstruction and reanimation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate characters and sensor scenes")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit the implicit fields to a dataset")
    p.add_argument("data", help="dataset directory with manifest.jsonl")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct",
                       help="extract an animatable model from a checkpoint")
    p.add_argument("checkpoint", help="checkpoint file (.s3f1)")
    p.add_argument("scene", help="scene directory")
    _add_common(p)
    p.add_argument("--resolution", type=int, default=None,
                   help="extraction grid resolution")
    p.add_argument("--iso", type=float, default=None,
                   help="occupancy iso level")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("animate", help="re-pose a model along a clip")
    p.add_argument("model", help="model directory")
    p.add_argument("clip", help="animation clip file")
    _add_common(p)
    p.add_argument("--frames", default=None,
                   help="comma-separated frame subset (default: all)")
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("eval", help="score a model against analytic ground truth")
    p.add_argument("model", help="model directory")
    p.add_argument("scene", help="scene directory")
    _add_common(p)
    p.add_argument("--metrics", default="chamfer,p2s,normal,mpjpe",
                   help="comma-separated subset of "
                        + ",".join(METRIC_NAMES))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate",
                       help="train and score variants along one config axis")
    p.add_argument("data", help="dataset directory with manifest.jsonl")
    _add_common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EmptyReconstructionError, InvalidModelError) as exc:
        print(f"degenerate result: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
