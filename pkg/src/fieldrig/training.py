"""Query-point samplers, losses, exact gradients, and the training loop.

Each step draws fresh query points from one (character, pose, sensor
sample) scene: occupancy points as a biased near-surface/uniform mix with
analytic inside/outside targets, heatmap points clustered round-robin at
the posed joints with Gaussian-of-distance targets, and skinning points
near the rest-pose surface with analytic blend targets.

Gradients are hand-derived reverse mode through the heads, the shared
point encoding, the interpolation stencils, and both encoders, accumulated
in float64.  They are validated against central finite differences, so
every forward op upcasts its float32 storage before computing.  The
optimizer is RMSProp with a step-indexed learning-rate decay schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .character import (analytic_joints, analytic_occupancy, analytic_skinning,
                        character_bounds, character_mesh)
from .fields import (BRANCHES, FieldParams, branch_flags, init_field_params,
                     iter_params, params_astype, point_encoding,
                     point_encoding_backward, _encode_image,
                     _encode_image_backward, _encode_volumetric,
                     _encode_volumetric_backward, _mlp_backward, _mlp_forward,
                     _sigmoid, _softmax)
from .geomcore import FeatureMap2D, VoxelGrid
from .metrics import sample_surface

SIGMA_SURF = 0.03
SIGMA_JOINT = 0.10
SIGMA_HEAT = 0.05
MIX_OCC = 0.9
MIX_POSE = 0.8
SAMPLER_MESH_RESOLUTION = 48


# ---------------------------------------------------------------------------
# Samplers


def _surface_mesh(char, pose, surface, resolution):
    if surface is not None:
        return surface
    return character_mesh(char, pose, resolution=resolution)


def sample_occupancy_points(char, pose, n: int, mix: float = MIX_OCC,
                            sigma_surf: float = SIGMA_SURF, seed=0,
                            surface=None, bounds=None,
                            surface_resolution: int = SAMPLER_MESH_RESOLUTION):
    """ceil(mix*n) points sampled on the posed surface and jittered by an
    isotropic Gaussian; the rest uniform in the bounding cube.  Targets are
    analytic inside/outside labels.  Returns (points, targets)."""
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n_surf = min(n, math.ceil(mix * n))
    parts = []
    if n_surf:
        mesh = _surface_mesh(char, pose, surface, surface_resolution)
        pts, _, _ = sample_surface(mesh, n_surf, seed=rng)
        parts.append(pts + rng.normal(0.0, sigma_surf, (n_surf, 3)))
    if n - n_surf:
        center, side = bounds if bounds is not None \
            else character_bounds(char, pose)
        lo = np.asarray(center, dtype=np.float64) - 0.5 * side
        parts.append(lo + rng.random((n - n_surf, 3)) * side)
    points = np.concatenate(parts) if parts else np.zeros((0, 3))
    return points, analytic_occupancy(char, points, pose)


def heatmap_targets(points, joints, sigma_heat: float = SIGMA_HEAT):
    """Unnormalized Gaussian of distance per joint, peak 1 at the joint."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    j = np.asarray(joints, dtype=np.float64).reshape(-1, 3)
    d2 = ((pts[:, None, :] - j[None, :, :]) ** 2).sum(axis=2)
    return np.exp(-d2 / (2.0 * sigma_heat ** 2))


def sample_pose_points(joints, n: int, mix: float = MIX_POSE,
                       sigma_joint: float = SIGMA_JOINT, seed=0,
                       sigma_heat: float = SIGMA_HEAT, bounds=None):
    """ceil(mix*n) points drawn round-robin from per-joint Gaussians, the
    rest uniform over the joint bounding cube.  Returns (points, targets)."""
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix must lie in [0, 1]")
    j = np.asarray(joints, dtype=np.float64).reshape(-1, 3)
    rng = np.random.default_rng(seed)
    n_biased = min(n, math.ceil(mix * n))
    parts = []
    if n_biased:
        centers = j[np.arange(n_biased) % len(j)]
        parts.append(centers + rng.normal(0.0, sigma_joint, (n_biased, 3)))
    if n - n_biased:
        if bounds is not None:
            center, side = bounds
        else:
            lo, hi = j.min(axis=0), j.max(axis=0)
            center, side = 0.5 * (lo + hi), float((hi - lo).max()) + 0.5
        lo = np.asarray(center, dtype=np.float64) - 0.5 * side
        parts.append(lo + rng.random((n - n_biased, 3)) * side)
    points = np.concatenate(parts) if parts else np.zeros((0, 3))
    return points, heatmap_targets(points, j, sigma_heat)


def sample_skinning_points(char, n: int, sigma_surf: float = SIGMA_SURF,
                           seed=0, surface=None,
                           surface_resolution: int = SAMPLER_MESH_RESOLUTION):
    """Jittered rest-pose surface points with analytic skinning targets."""
    rng = np.random.default_rng(seed)
    if n == 0:
        return np.zeros((0, 3)), np.zeros((0, len(char.skeleton.parents)))
    mesh = _surface_mesh(char, None, surface, surface_resolution)
    pts, _, _ = sample_surface(mesh, n, seed=rng)
    pts = pts + rng.normal(0.0, sigma_surf, (n, 3))
    return pts, analytic_skinning(char, pts)


# ---------------------------------------------------------------------------
# Batches, weights, losses


@dataclass
class LossWeights:
    occ: float = 1.0
    pose: float = 1.0
    skin: float = 1.0

    def __post_init__(self):
        if min(self.occ, self.pose, self.skin) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class TrainBatch:
    occ_points: np.ndarray
    occ_targets: np.ndarray
    pose_points: np.ndarray
    pose_targets: np.ndarray
    skin_points: np.ndarray
    skin_targets: np.ndarray

    def __post_init__(self):
        self.occ_points = np.asarray(self.occ_points, dtype=np.float64).reshape(-1, 3)
        self.occ_targets = np.asarray(self.occ_targets, dtype=np.float64).reshape(-1)
        self.pose_points = np.asarray(self.pose_points, dtype=np.float64).reshape(-1, 3)
        self.pose_targets = np.asarray(self.pose_targets, dtype=np.float64)
        self.skin_points = np.asarray(self.skin_points, dtype=np.float64).reshape(-1, 3)
        self.skin_targets = np.asarray(self.skin_targets, dtype=np.float64)
        if len(self.occ_points) != len(self.occ_targets):
            raise ValueError("occupancy targets must match point count")
        if self.occ_targets.size and (self.occ_targets.min() < 0
                                      or self.occ_targets.max() > 1):
            raise ValueError("occupancy targets must lie in [0, 1]")
        if self.pose_targets.ndim != 2 \
                or len(self.pose_targets) != len(self.pose_points):
            raise ValueError("heatmap targets must be one row per point")
        if self.pose_targets.size and (self.pose_targets.min() < 0
                                       or self.pose_targets.max() > 1):
            raise ValueError("heatmap targets must lie in [0, 1]")
        if self.skin_targets.ndim != 2 \
                or len(self.skin_targets) != len(self.skin_points):
            raise ValueError("skinning targets must be one row per point")
        if self.skin_targets.size and \
                np.abs(self.skin_targets.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("skinning targets must sum to 1")

    @property
    def n_occ(self) -> int:
        return len(self.occ_points)

    @property
    def n_pose(self) -> int:
        return len(self.pose_points)

    @property
    def n_skin(self) -> int:
        return len(self.skin_points)


def make_train_batch(char, pose, cfg: "TrainConfig", seed,
                     posed_surface=None, rest_surface=None,
                     bounds=None) -> TrainBatch:
    """Draw one step's query points for a scene (sub-seeded per head)."""
    base = list(np.atleast_1d(np.asarray(seed, dtype=np.uint64)))
    joints = analytic_joints(char, pose)
    occ_p, occ_t = sample_occupancy_points(
        char, pose, cfg.n_occ, cfg.mix_occ, cfg.sigma_surf, base + [0],
        posed_surface, bounds, cfg.surface_resolution)
    pose_p, pose_t = sample_pose_points(
        joints, cfg.n_pose, cfg.mix_pose, cfg.sigma_joint, base + [1],
        cfg.sigma_heat, bounds)
    skin_p, skin_t = sample_skinning_points(
        char, cfg.n_skin, cfg.sigma_surf, base + [2], rest_surface,
        cfg.surface_resolution)
    return TrainBatch(occ_p, occ_t, pose_p, pose_t, skin_p, skin_t)


def _features(params: FieldParams, sample):
    vox_vals, vox_cache = _encode_volumetric(sample.voxels.values,
                                             params.vox_enc)
    feat_vox = VoxelGrid(sample.voxels.origin, sample.voxels.cell_size,
                         vox_vals)
    if sample.image is not None:
        im_vals, im_cache = _encode_image(sample.image.values, params.im_enc)
        feat_im = FeatureMap2D(im_vals, sample.image.pixel_scale * 4.0)
    else:
        im_vals, im_cache, feat_im = None, None, None
    return feat_vox, feat_im, vox_cache, im_cache


def _head_loss(params, sample, feat_vox, feat_im, head, points, targets):
    phi, pcache = point_encoding(points, sample, feat_vox, feat_im,
                                 im_channels=params.im_enc.channels,
                                 **branch_flags(params))
    mlp = getattr(params, head)
    logits, mcache = _mlp_forward(phi, mlp)
    pred = _softmax(logits) if head == "skin" else _sigmoid(logits)
    t = targets[:, None] if head == "occ" else targets
    resid = pred - t
    loss = float((resid ** 2).sum(axis=1).mean())
    return loss, resid, pred, pcache, mcache


def loss_occ(batch: TrainBatch, params: FieldParams, sample) -> float:
    """(1/N) sum of squared occupancy errors."""
    if not batch.n_occ:
        raise ValueError("empty occupancy batch")
    feat_vox, feat_im, _, _ = _features(params, sample)
    return _head_loss(params, sample, feat_vox, feat_im, "occ",
                      batch.occ_points, batch.occ_targets)[0]


def loss_pose(batch: TrainBatch, params: FieldParams, sample) -> float:
    """(1/N) sum of squared heatmap errors (summed over joints per point)."""
    if not batch.n_pose:
        raise ValueError("empty heatmap batch")
    feat_vox, feat_im, _, _ = _features(params, sample)
    return _head_loss(params, sample, feat_vox, feat_im, "pose",
                      batch.pose_points, batch.pose_targets)[0]


def loss_skin(batch: TrainBatch, params: FieldParams, sample) -> float:
    """(1/N) sum of squared skinning errors (summed over bones per point)."""
    if not batch.n_skin:
        raise ValueError("empty skinning batch")
    feat_vox, feat_im, _, _ = _features(params, sample)
    return _head_loss(params, sample, feat_vox, feat_im, "skin",
                      batch.skin_points, batch.skin_targets)[0]


def loss_total(batch: TrainBatch, params: FieldParams, sample,
               weights: LossWeights = None) -> float:
    """Weighted sum of the three head losses."""
    lw = weights if weights is not None else LossWeights()
    _, losses = _forward_backward(batch, params, sample, lw, need_grads=False)
    return lw.occ * losses["occ"] + lw.pose * losses["pose"] \
        + lw.skin * losses["skin"]


# ---------------------------------------------------------------------------
# Reverse mode


def _forward_backward(batch: TrainBatch, params: FieldParams, sample,
                      lw: LossWeights, need_grads: bool = True):
    feat_vox, feat_im, vox_cache, im_cache = _features(params, sample)
    n_vox_cells = int(np.prod(feat_vox.resolution))
    n_im_cells = 0 if feat_im is None else feat_im.height * feat_im.width
    grads = {name: np.zeros(arr.shape) for name, arr in iter_params(params)} \
        if need_grads else {}
    d_vox = np.zeros((n_vox_cells, params.vox_enc.channels))
    d_im = np.zeros((n_im_cells, params.im_enc.channels))
    losses = {"occ": 0.0, "pose": 0.0, "skin": 0.0}
    heads = (("occ", batch.occ_points, batch.occ_targets, lw.occ),
             ("pose", batch.pose_points, batch.pose_targets, lw.pose),
             ("skin", batch.skin_points, batch.skin_targets, lw.skin))
    for head, points, targets, lam in heads:
        n = len(points)
        if not n:
            if lam > 0:
                raise ValueError(f"empty {head} batch with nonzero weight")
            continue
        loss, resid, pred, pcache, mcache = _head_loss(
            params, sample, feat_vox, feat_im, head, points, targets)
        losses[head] = loss
        if not need_grads or lam == 0.0:
            continue
        d_pred = (2.0 * lam / n) * resid
        if head == "skin":
            d_logits = pred * (d_pred
                               - (d_pred * pred).sum(axis=1, keepdims=True))
        else:
            d_logits = d_pred * pred * (1.0 - pred)
        mlp = getattr(params, head)
        d_phi, head_grads = _mlp_backward(d_logits, mcache, mlp, head)
        for key, val in head_grads.items():
            grads[key] += val
        dv, di = point_encoding_backward(d_phi, pcache, n_vox_cells,
                                         n_im_cells)
        d_vox += dv
        if feat_im is not None:
            d_im += di
    if need_grads:
        for key, val in _encode_volumetric_backward(
                d_vox, vox_cache, params.vox_enc).items():
            grads["vox_enc." + key] += val
        if feat_im is not None:
            for key, val in _encode_image_backward(
                    d_im, im_cache, params.im_enc).items():
                grads["im_enc." + key] += val
    return grads, losses


def backward(batch: TrainBatch, params: FieldParams, sample,
             weights: LossWeights = None):
    """Exact gradients of loss_total for every parameter, keyed and ordered
    like the checkpoint layout."""
    lw = weights if weights is not None else LossWeights()
    grads, _ = _forward_backward(batch, params, sample, lw)
    return grads


@dataclass
class GradientCheckResult:
    checked: int
    failures: list
    max_error: float
    worst: str

    @property
    def passed(self) -> bool:
        return not self.failures


def gradient_check(params: FieldParams, batch: TrainBatch, sample,
                   weights: LossWeights = None, h: float = 1e-4,
                   rel_tol: float = 1e-4,
                   abs_floor: float = 1e-8) -> GradientCheckResult:
    """Central finite differences over every parameter entry, run on a
    float64 copy of the parameters so h stays well above rounding.

    Check at parameters in general position: a pre-activation within h of
    zero puts the difference stencil across the leaky-ReLU corner, where no
    subgradient can match it.  Freshly initialized parameters are NOT in
    general position (zero biases meet the zero cells of a count grid
    exactly at the corner)."""
    lw = weights if weights is not None else LossWeights()
    p64 = params_astype(params, np.float64)
    analytic = backward(batch, p64, sample, lw)
    checked, failures = 0, []
    max_err, worst = 0.0, ""
    for name, arr in iter_params(p64):
        grad = analytic[name]
        for i in range(arr.size):
            theta = arr.flat[i]
            arr.flat[i] = theta + h
            f_plus = loss_total(batch, p64, sample, lw)
            arr.flat[i] = theta - h
            f_minus = loss_total(batch, p64, sample, lw)
            arr.flat[i] = theta
            fd = (f_plus - f_minus) / (2.0 * h)
            a = grad.flat[i]
            err = abs(a - fd)
            tol = max(rel_tol * max(abs(a), abs(fd)), abs_floor)
            checked += 1
            if err > max_err:
                max_err, worst = err, f"{name}[{i}]"
            if err > tol:
                failures.append((name, i, a, fd))
    return GradientCheckResult(checked, failures, max_err, worst)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptimState:
    v: dict
    rho: float = 0.99
    eps: float = 1e-8
    lr: float = 1e-3
    step: int = 0
    decay_steps: tuple = ()
    decay_factor: float = 0.1


def init_optim_state(params: FieldParams, lr: float = 1e-3, rho: float = 0.99,
                     eps: float = 1e-8, decay_steps=()) -> OptimState:
    v = {name: np.zeros(arr.shape) for name, arr in iter_params(params)}
    return OptimState(v, rho, eps, lr, 0, tuple(int(s) for s in decay_steps))


def rmsprop_step(params: FieldParams, grads: dict, state: OptimState):
    """v <- rho v + (1 - rho) g^2; theta <- theta - lr g / (sqrt(v) + eps).

    The learning rate drops by decay_factor when the incoming step index
    sits on a schedule boundary.  Parameters update in place (float64 math,
    stored back at storage precision)."""
    if state.step in state.decay_steps:
        state.lr *= state.decay_factor
    for name, arr in iter_params(params):
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != arr.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        v = state.v[name]
        v *= state.rho
        v += (1.0 - state.rho) * g * g
        theta = arr.astype(np.float64) - state.lr * g / (np.sqrt(v) + state.eps)
        arr[...] = theta.astype(arr.dtype)
    state.step += 1
    return params, state


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 1000
    n_occ: int = 512
    n_pose: int = 512
    n_skin: int = 512
    mix_occ: float = MIX_OCC
    sigma_surf: float = SIGMA_SURF
    mix_pose: float = MIX_POSE
    sigma_joint: float = SIGMA_JOINT
    sigma_heat: float = SIGMA_HEAT
    learning_rate: float = 1e-3
    rho: float = 0.99
    epsilon: float = 1e-8
    decay_steps: tuple = ()
    weights: LossWeights = field(default_factory=LossWeights)
    vox_channels: int = 16
    im_channels: int = 16
    hidden: int = 128
    n_joints: int = 15
    n_bones: int = 15
    surface_resolution: int = SAMPLER_MESH_RESOLUTION
    branches: tuple = BRANCHES

    def validate(self) -> None:
        if set(self.branches) - set(BRANCHES) or not self.branches:
            raise ValueError("branches must be a nonempty subset of "
                             + "/".join(BRANCHES))
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if min(self.n_occ, self.n_pose, self.n_skin) < 0:
            raise ValueError("point counts must be nonnegative")
        for name in ("mix_occ", "mix_pose"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("sigma_surf", "sigma_joint", "sigma_heat"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0 or not 0.0 <= self.rho < 1.0 \
                or self.epsilon <= 0:
            raise ValueError("invalid optimizer settings")
        if min(self.vox_channels, self.im_channels, self.hidden,
               self.n_joints, self.n_bones) < 1:
            raise ValueError("model dimensions must be positive")
        for head, count in (("occ", self.n_occ), ("pose", self.n_pose),
                            ("skin", self.n_skin)):
            if getattr(self.weights, head) > 0 and count == 0:
                raise ValueError(f"{head} head is weighted but gets no points")


def train(dataset, cfg: TrainConfig):
    """Optimize fresh fields on a scene list; returns (params, history).

    One scene per step, visited in a seed-shuffled order per epoch; query
    points are redrawn each step from (cfg.seed, step) so runs are fully
    deterministic.  History rows are (step, loss_occ, loss_pose, loss_skin,
    loss_total)."""
    cfg.validate()
    if not dataset:
        raise ValueError("dataset must contain at least one scene")
    first_sample = dataset[0][2]
    im_in = 0 if first_sample.image is None else first_sample.image.channels
    for _, _, sample in dataset:
        have = 0 if sample.image is None else sample.image.channels
        if have != im_in:
            raise ValueError("scenes disagree on image channel count")
    params = init_field_params(
        cfg.seed, vox_channels=cfg.vox_channels, im_channels=cfg.im_channels,
        hidden=cfg.hidden, n_joints=cfg.n_joints, n_bones=cfg.n_bones,
        vox_in=dataset[0][2].voxels.channels, im_in=max(im_in, 2),
        view_origin="cloud_center" if first_sample.has_lidar
        else "canonical_origin", branches=cfg.branches)
    state = init_optim_state(params, cfg.learning_rate, cfg.rho, cfg.epsilon,
                             cfg.decay_steps)

    caches = []
    for char, pose, sample in dataset:
        posed = character_mesh(char, pose,
                               resolution=cfg.surface_resolution) \
            if cfg.n_occ and cfg.mix_occ > 0 else None
        rest = character_mesh(char, None, resolution=cfg.surface_resolution) \
            if cfg.n_skin else None
        caches.append((posed, rest, character_bounds(char, pose)))

    order_rng = np.random.default_rng([cfg.seed, len(dataset)])
    order = np.arange(len(dataset))
    history = []
    for step in range(cfg.steps):
        if step % len(dataset) == 0:
            order = order_rng.permutation(len(dataset))
        idx = int(order[step % len(dataset)])
        char, pose, sample = dataset[idx]
        posed, rest, bounds = caches[idx]
        batch = make_train_batch(char, pose, cfg, [cfg.seed, step],
                                 posed_surface=posed, rest_surface=rest,
                                 bounds=bounds)
        grads, losses = _forward_backward(batch, params, sample, cfg.weights)
        total = cfg.weights.occ * losses["occ"] \
            + cfg.weights.pose * losses["pose"] \
            + cfg.weights.skin * losses["skin"]
        history.append((step, losses["occ"], losses["pose"], losses["skin"],
                        total))
        params, state = rmsprop_step(params, grads, state)
    return params, history


def write_loss_history(history, path) -> None:
    """CSV loss curves: step, the three head losses, and the weighted total."""
    with open(path, "w") as fh:
        fh.write("step,loss_occ,loss_pose,loss_skin,loss_total\n")
        for step, occ, pose, skin, total in history:
            fh.write(f"{step},{occ!r},{pose!r},{skin!r},{total!r}\n")


def read_loss_history(path):
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "step,loss_occ,loss_pose,loss_skin,loss_total":
            raise ValueError("unrecognized loss history header")
        for line in fh:
            step, occ, pose, skin, total = line.strip().split(",")
            rows.append((int(step), float(occ), float(pose), float(skin),
                         float(total)))
    return rows
