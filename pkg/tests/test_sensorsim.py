"""Sensor simulation: ray casting, LiDAR, depth camera, voxelization, files."""

import filecmp

import numpy as np
import pytest

from fieldrig.geomcore import (Camera, RigidTransform, TriangleMesh,
                               make_icosphere)
from fieldrig.sensorsim import (LidarConfig, PointCloudFormatError,
                                TriangleGridIndex, _moller_trumbore,
                                make_sensor_sample, normalize_frame,
                                read_camera, read_pfm, read_pgm,
                                read_point_cloud, render_depth_silhouette,
                                simulate_lidar, voxelize, write_camera,
                                write_pfm, write_pgm, write_point_cloud)


# ---------------------------------------------------------------------------
# Ray casting


def test_grid_index_matches_brute_force():
    mesh = make_icosphere(2, radius=0.6, center=(0.1, 0.0, 0.2))
    index = TriangleGridIndex(mesh)
    rng = np.random.default_rng(0)
    origin = np.array([3.0, 0.5, 0.4])
    dirs = rng.standard_normal((300, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t_idx, hit_idx = index.intersect(origin, dirs)

    tri = mesh.vertices[mesh.faces]
    t_best = np.full(len(dirs), np.inf)
    for v0, v1, v2 in tri:
        t, hit = _moller_trumbore(origin[None, :], dirs,
                                  v0[None, :], v1[None, :], v2[None, :])
        t_best = np.where(hit & (t < t_best), t, t_best)
    hit_bf = np.isfinite(t_best)
    assert np.array_equal(hit_idx, hit_bf)
    assert np.abs(t_idx[hit_idx] - t_best[hit_bf]).max() < 1e-12


def test_ray_sphere_depth_is_analytic():
    mesh = make_icosphere(4, radius=0.5)
    index = TriangleGridIndex(mesh)
    origin = np.array([0.0, 0.0, 4.0])
    t, hit = index.intersect(origin, np.array([[0.0, 0.0, -1.0]]))
    assert hit[0]
    assert abs(t[0] - 3.5) < 2e-3  # icosphere chord sag only


# ---------------------------------------------------------------------------
# LiDAR


def sphere_scene(radius=0.5, center=(0.0, 0.0, 1.0)):
    return make_icosphere(3, radius=radius, center=center)


def wide_lidar(**kw):
    kw.setdefault("origin", [4.0, 0.0, 1.0])
    kw.setdefault("azimuth_step_deg", 0.5)
    kw.setdefault("elevation_start_deg", 12.0)
    kw.setdefault("elevation_stop_deg", -12.0)
    kw.setdefault("elevation_step_deg", 0.5)
    kw.setdefault("drop_rate", 0.0)
    kw.setdefault("range_noise", 0.0)
    return LidarConfig(**kw)


def test_lidar_config_validation():
    with pytest.raises(ValueError):
        LidarConfig(drop_rate=1.0)  # certain drop leaves no scan at all
    with pytest.raises(ValueError):
        LidarConfig(drop_rate=-0.1)
    with pytest.raises(ValueError):
        LidarConfig(azimuth_step_deg=0.0)
    with pytest.raises(ValueError):
        LidarConfig(elevation_start_deg=-5.0, elevation_stop_deg=5.0)
    with pytest.raises(ValueError):
        LidarConfig(range_noise=-0.01)


def test_lidar_ray_directions_are_unit_and_counted():
    cfg = wide_lidar(azimuth_step_deg=1.0, elevation_start_deg=2.0,
                     elevation_stop_deg=-2.0, elevation_step_deg=1.0)
    dirs = cfg.ray_directions()
    assert dirs.shape == (5 * 360, 3)
    assert np.abs(np.linalg.norm(dirs, axis=1) - 1.0).max() < 1e-12


def test_lidar_hits_lie_on_sphere():
    mesh = sphere_scene()
    pts = simulate_lidar(mesh, wide_lidar(), seed=0)
    assert len(pts) > 500
    r = np.linalg.norm(pts - [0.0, 0.0, 1.0], axis=1)
    assert np.abs(r - 0.5).max() < 5e-3  # chord sag of the icosphere


def test_lidar_noise_std_matches_config():
    # calibration check: noisy minus clean ranges, >= 10k rays, sigma 1 cm
    wall = TriangleMesh(np.array([[0.0, -10.0, -9.0], [0.0, 10.0, -9.0],
                                  [0.0, 10.0, 11.0], [0.0, -10.0, 11.0]]),
                        np.array([[0, 1, 2], [0, 2, 3]]))
    cfg_c = wide_lidar()
    cfg_n = wide_lidar(range_noise=0.01)
    clean = simulate_lidar(wall, cfg_c, seed=3)
    noisy = simulate_lidar(wall, cfg_n, seed=3)
    assert len(clean) == len(noisy) and len(clean) >= 10000
    origin = np.array([4.0, 0.0, 1.0])
    resid = (np.linalg.norm(noisy - origin, axis=1)
             - np.linalg.norm(clean - origin, axis=1))
    assert 0.009 <= resid.std() <= 0.011
    assert abs(resid.mean()) < 5e-4


def test_lidar_noise_is_per_ray_slot():
    # dropping rays must not shift the noise attached to surviving slots
    mesh = sphere_scene()
    full = simulate_lidar(mesh, wide_lidar(range_noise=0.01), seed=7)
    half = simulate_lidar(mesh, wide_lidar(range_noise=0.01, drop_rate=0.5),
                          seed=7)
    view = full.view([("", full.dtype)] * 3)
    in_full = np.isin(half.view([("", half.dtype)] * 3), view)
    assert in_full.all()
    assert 0.4 < len(half) / len(full) < 0.6


def test_lidar_deterministic_per_seed():
    mesh = sphere_scene()
    cfg = wide_lidar(range_noise=0.01, drop_rate=0.2)
    a = simulate_lidar(mesh, cfg, seed=5)
    b = simulate_lidar(mesh, cfg, seed=5)
    c = simulate_lidar(mesh, cfg, seed=6)
    assert np.array_equal(a, b)
    assert a.shape != c.shape or not np.array_equal(a, c)


def test_lidar_misses_leave_no_points():
    mesh = sphere_scene(center=(0.0, 0.0, 50.0))  # far above the scan band
    pts = simulate_lidar(mesh, wide_lidar(), seed=0)
    assert len(pts) == 0


# ---------------------------------------------------------------------------
# Depth camera


def front_camera(res=128, focal=220.0, distance=4.0):
    # camera at +z looking back toward the origin (identity would look away)
    rot = np.diag([1.0, -1.0, -1.0])  # +z forward becomes -z world
    extr = RigidTransform(rot, -rot @ np.array([0.0, 0.0, distance]))
    return Camera(focal, focal, res / 2.0, res / 2.0, res, res, extr)


def test_silhouette_disc_pixel_count():
    r, d = 0.5, 4.0
    cam = front_camera()
    img = render_depth_silhouette(make_icosphere(4, radius=r), cam)
    mask = img.values[..., 1]
    # pinhole projection of a sphere: disc of radius f*r/sqrt(d^2 - r^2)
    r_px = cam.fx * r / np.sqrt(d * d - r * r)
    expect = np.pi * r_px * r_px
    assert abs(mask.sum() - expect) / expect < 0.03
    ys, xs = np.nonzero(mask)
    assert abs(xs.mean() - (cam.cx - 0.5)) < 1.0
    assert abs(ys.mean() - (cam.cy - 0.5)) < 1.0


def test_depth_within_a_centimetre():
    r, d = 0.5, 4.0
    cam = front_camera()
    img = render_depth_silhouette(make_icosphere(4, radius=r), cam)
    depth = img.values[..., 0]
    mask = img.values[..., 1] > 0
    assert np.all(depth[~mask] == 0.0)
    ys, xs = np.nonzero(mask)
    # analytic first intersection along each pixel ray with the sphere
    dirs = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy,
                     np.ones(len(xs))], axis=1)
    o = np.array([0.0, 0.0, -d])  # camera-space sphere centre sits ahead
    # solve |o + t*dir|^2 = r^2 in camera space with origin at the camera
    b = dirs @ -o
    n2 = np.einsum("ij,ij->i", dirs, dirs)
    disc = b * b - n2 * (o @ o - r * r)
    ok = disc >= 0
    t_hit = (b[ok] - np.sqrt(disc[ok])) / n2[ok]
    err = np.abs(depth[ys[ok], xs[ok]] - t_hit)
    assert err.max() < 0.01


# ---------------------------------------------------------------------------
# Canonical frame and voxels


def test_normalize_frame_hand_case():
    pts = np.array([[2.0, 1.0, 3.0]])
    out = normalize_frame(pts, yaw=np.pi / 2, center=[1.0, 1.0, 9.0])
    # subtract horizontal centre -> (1, 0, 3); rotate -90deg about z -> (0, -1, 3)
    assert np.abs(out - [[0.0, -1.0, 3.0]]).max() < 1e-12


def test_voxelize_counts_and_bounds():
    pts = np.array([[0.05, 0.05, 0.05],    # cell (1, 1, 1) of a 2^3 grid
                    [0.05, 0.05, 0.05],
                    [-0.05, -0.05, -0.05],  # cell (0, 0, 0)
                    [5.0, 0.0, 0.0]])       # outside, ignored
    g = voxelize(pts, resolution=2, extent=0.4, center=(0.0, 0.0, 0.0))
    assert g.values.sum() == 3.0
    assert g.values[1, 1, 1, 0] == 2.0
    assert g.values[0, 0, 0, 0] == 1.0
    with pytest.raises(ValueError):
        voxelize(pts, resolution=0, extent=1.0)
    with pytest.raises(ValueError):
        voxelize(pts, resolution=4, extent=0.0)


def test_sensor_sample_geometry():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(500, 3)) * 0.2 + [0.0, 0.0, 1.0]
    sample = make_sensor_sample(pts, None, None, voxel_resolution=8,
                                voxel_extent=2.0, viewpoint=[3.0, 0.0, 1.0])
    assert np.abs(sample.canonical_origin - pts.mean(axis=0)).max() < 1e-12
    expect_ray = (pts.mean(axis=0) - [3.0, 0.0, 1.0])
    expect_ray /= np.linalg.norm(expect_ray)
    assert np.abs(sample.view_ray - expect_ray).max() < 1e-12
    assert sample.voxels.values.sum() == 500.0  # all points near the centre


def test_sensor_sample_requires_origin_and_camera():
    with pytest.raises(ValueError):
        make_sensor_sample(None, None, None, 8, 2.0, viewpoint=[1, 0, 0])
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(10, 3))
    with pytest.raises(ValueError):
        make_sensor_sample(pts, None, None, 8, 2.0)  # no camera, no viewpoint


# ---------------------------------------------------------------------------
# File formats


def test_point_cloud_round_trip_bytes(tmp_path):
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(257, 3))
    p1, p2 = tmp_path / "a.s3pc", tmp_path / "b.s3pc"
    write_point_cloud(pts, p1)
    again = read_point_cloud(p1)
    write_point_cloud(again, p2)
    assert filecmp.cmp(p1, p2, shallow=False)
    assert np.abs(again - pts).max() < 1e-6  # f32 quantization only


def test_point_cloud_reader_rejects_corruption(tmp_path):
    path = tmp_path / "bad.s3pc"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(PointCloudFormatError):
        read_point_cloud(path)
    path.write_bytes(b"S3PC" + (100).to_bytes(4, "little") + b"\x00" * 24)
    with pytest.raises(PointCloudFormatError):
        read_point_cloud(path)


def test_pfm_round_trip_bytes(tmp_path):
    rng = np.random.default_rng(5)
    depth = rng.random((17, 23)) * 5.0
    p1, p2 = tmp_path / "a.pfm", tmp_path / "b.pfm"
    write_pfm(depth, p1)
    again = read_pfm(p1)
    write_pfm(again, p2)
    assert filecmp.cmp(p1, p2, shallow=False)
    assert again.shape == (17, 23)
    assert np.abs(again - depth).max() < 1e-6


def test_pgm_round_trip_bytes(tmp_path):
    rng = np.random.default_rng(6)
    mask = (rng.random((9, 11)) > 0.5).astype(float)
    p1, p2 = tmp_path / "a.pgm", tmp_path / "b.pgm"
    write_pgm(mask, p1)
    again = read_pgm(p1)
    write_pgm(again, p2)
    assert filecmp.cmp(p1, p2, shallow=False)
    assert np.array_equal(again, mask)


def test_camera_round_trip_bytes(tmp_path):
    cam = front_camera(res=64, focal=111.25, distance=3.7)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    write_camera(cam, p1)
    again = read_camera(p1)
    write_camera(again, p2)
    assert filecmp.cmp(p1, p2, shallow=False)
    assert again.fx == cam.fx and again.width == cam.width
    assert np.array_equal(again.extrinsics.rotation, cam.extrinsics.rotation)


def test_camera_reader_rejects_bad_rotation(tmp_path):
    cam = front_camera(res=32)
    path = tmp_path / "c.json"
    write_camera(cam, path)
    import json
    doc = json.loads(path.read_text())
    doc["rotation"][0][0] = 5.0
    path.write_text(json.dumps(doc))
    with pytest.raises(PointCloudFormatError):
        read_camera(path)
