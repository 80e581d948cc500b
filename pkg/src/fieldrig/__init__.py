"""fieldrig: animatable character reconstruction from single-view sensor data.

Implicit occupancy / joint-heatmap / skinning-weight fields are trained on
simulated LiDAR clouds and depth images of procedural capsule characters,
then extracted into a watertight mesh with joints and skinning weights and
re-animated with IK/FK and linear blend skinning.
"""

__version__ = "0.1.0"
