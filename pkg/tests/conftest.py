"""Shared builders for small deterministic test scenes and field params."""

import numpy as np
import pytest

from fieldrig.character import (build_character, character_bounds,
                                character_mesh, identity_pose)
from fieldrig.cli import _lookat
from fieldrig.fields import init_field_params
from fieldrig.geomcore import Camera, FeatureMap2D
from fieldrig.sensorsim import (LidarConfig, make_sensor_sample,
                                render_depth_silhouette, simulate_lidar)


@pytest.fixture(scope="session")
def char0():
    return build_character(0)


def tiny_field_params(seed=3, **kw):
    """Small random field params; checks stay fast, dims stay distinct."""
    kw.setdefault("vox_channels", 3)
    kw.setdefault("im_channels", 4)
    kw.setdefault("hidden", 6)
    kw.setdefault("n_joints", 5)
    kw.setdefault("n_bones", 5)
    kw.setdefault("im_in", 2)
    return init_field_params(seed, **kw)


def synthetic_sample(seed=0, n_points=200, vox=6, extent=1.6, hw=16,
                     with_image=True):
    """A geometrically coherent sample from a random blob of points.

    The camera sits at the origin looking down +z, the blob floats at
    z = 2, so every point projects with positive depth.
    """
    rng = np.random.default_rng(seed)
    pts = rng.normal(0.0, 0.3, size=(n_points, 3)) + np.array([0.0, 0.0, 2.0])
    if with_image:
        image = FeatureMap2D(rng.random((hw, hw, 2)))
        camera = Camera(float(hw), float(hw), hw / 2.0, hw / 2.0, hw, hw)
        return make_sensor_sample(pts, image, camera,
                                  voxel_resolution=vox, voxel_extent=extent)
    return make_sensor_sample(pts, None, None, voxel_resolution=vox,
                              voxel_extent=extent, viewpoint=[0.0, 0.0, 0.0])


def tiny_scene(seed=0, mesh_res=24, img=24, vox=8, extent=2.2,
               with_lidar=True, with_image=True, pose=None):
    """One captured character scene at toy sensor resolutions."""
    char = build_character(seed)
    if pose is None:
        pose = identity_pose(char.n_joints)
    mesh = character_mesh(char, pose, resolution=mesh_res)
    center, side = character_bounds(char, pose)
    cam_pos = center + np.array([0.0, -3.0, 0.2])
    dist = float(np.linalg.norm(center - cam_pos))

    camera = None
    image = None
    if with_image:
        focal = 0.8 * img * dist / side
        camera = Camera(focal, focal, img / 2.0, img / 2.0, img, img,
                        _lookat(cam_pos, center))
        image = render_depth_silhouette(mesh, camera)

    points = None
    if with_lidar:
        lidar = LidarConfig(origin=cam_pos, azimuth_step_deg=1.2,
                            elevation_start_deg=20.0,
                            elevation_stop_deg=-30.0, elevation_step_deg=1.0,
                            drop_rate=0.0, range_noise=0.0)
        points = simulate_lidar(mesh, lidar, seed=1)

    sample = make_sensor_sample(
        points, image, camera, voxel_resolution=vox, voxel_extent=extent,
        canonical_origin=None if points is not None else center,
        viewpoint=None if camera is not None else cam_pos)
    return char, pose, sample
