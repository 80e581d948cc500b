"""Implicit field heads over a shared point encoding.

A query point p gets the feature
    phi(p) = [ vox(p) | im(p) | view(p) ]
where vox(p) trilinearly samples an encoded voxel grid of the LiDAR cloud,
im(p) bilinearly samples an encoded depth/silhouette image at the point's
projection (quarter-resolution, hence the /scale), and view(p) = (p - c) . r
is the signed depth along the unit viewing ray r through the origin c.  Two
points on one camera ray share im(p); only view(p) separates them.

Three unshared 5-layer MLPs map phi to occupancy (sigmoid), per-joint
heatmaps (independent sigmoids), and skinning weights (softmax).

Parameters are stored float32 (and serialized float32 in checkpoints); all
arithmetic is promoted to float64 so gradients can be checked against
central finite differences.  Single-row matrix products are padded to two
rows: the BLAS one-row path rounds differently from the batched path, and
per-point evaluation is required to reproduce grid evaluation bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .geomcore import (FeatureMap2D, VoxelGrid, bilinear_weights,
                       project_points, trilinear_weights, unit)

LEAKY_SLOPE = 0.01
CHECKPOINT_MAGIC = b"S3F1"
N_MLP_LAYERS = 5


class CheckpointFormatError(ValueError):
    """Raised on malformed or internally inconsistent checkpoints."""


@dataclass
class AffineMap:
    """Per-cell learned affine: cells (n, c_in) -> (n, c_out)."""

    weight: np.ndarray
    bias: np.ndarray


@dataclass
class EncoderParams:
    """Lift / mid / out per-cell affines around the pool-upsample core."""

    lift: AffineMap
    mid: AffineMap
    out: AffineMap

    @property
    def in_channels(self) -> int:
        return self.lift.weight.shape[0]

    @property
    def channels(self) -> int:
        return self.lift.weight.shape[1]


@dataclass
class MlpParams:
    weights: list
    biases: list

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]


BRANCHES = ("vox", "im", "view")


@dataclass
class FieldParams:
    """Everything learned: two encoders and three field heads.

    branches lists the active parts of the point encoding; missing ones are
    zeroed at evaluation time (ablation variants train and reconstruct with
    the same reduced encoding)."""

    vox_enc: EncoderParams
    im_enc: EncoderParams
    occ: MlpParams
    pose: MlpParams
    skin: MlpParams
    view_origin: str = "cloud_center"
    branches: tuple = BRANCHES

    def __post_init__(self):
        bad = set(self.branches) - set(BRANCHES)
        if bad:
            raise ValueError(f"unknown encoding branches: {sorted(bad)}")
        self.branches = tuple(b for b in BRANCHES if b in self.branches)

    @property
    def n_joints(self) -> int:
        return self.pose.out_dim

    @property
    def n_bones(self) -> int:
        return self.skin.out_dim

    @property
    def encoding_dim(self) -> int:
        return self.vox_enc.channels + self.im_enc.channels + 1


def _he_affine(rng, c_in, c_out):
    w = (rng.standard_normal((c_in, c_out)) * np.sqrt(2.0 / c_in)).astype(np.float32)
    return AffineMap(w, np.zeros(c_out, dtype=np.float32))


def init_field_params(seed: int, vox_channels: int = 16, im_channels: int = 16,
                      hidden: int = 128, n_joints: int = 15, n_bones: int = 15,
                      vox_in: int = 1, im_in: int = 2,
                      view_origin: str = "cloud_center",
                      branches: tuple = BRANCHES) -> FieldParams:
    rng = np.random.default_rng(seed)
    vox = EncoderParams(_he_affine(rng, vox_in, vox_channels),
                        _he_affine(rng, vox_channels, vox_channels),
                        _he_affine(rng, vox_channels, vox_channels))
    im = EncoderParams(_he_affine(rng, im_in, im_channels),
                       _he_affine(rng, im_channels, im_channels),
                       _he_affine(rng, im_channels, im_channels))
    d = vox_channels + im_channels + 1

    def mlp(out_dim):
        dims = [d] + [hidden] * (N_MLP_LAYERS - 1) + [out_dim]
        ws, bs = [], []
        for i in range(N_MLP_LAYERS):
            a = _he_affine(rng, dims[i], dims[i + 1])
            ws.append(a.weight)
            bs.append(a.bias)
        return MlpParams(ws, bs)

    return FieldParams(vox, im, mlp(1), mlp(n_joints), mlp(n_bones),
                       view_origin, branches)


def iter_params(params: FieldParams):
    """Deterministic (name, array) walk; the checkpoint and optimizer order."""
    out = []
    for enc_name, enc in (("vox_enc", params.vox_enc), ("im_enc", params.im_enc)):
        for stage in ("lift", "mid", "out"):
            amap = getattr(enc, stage)
            out.append((f"{enc_name}.{stage}.weight", amap.weight))
            out.append((f"{enc_name}.{stage}.bias", amap.bias))
    for head_name in ("occ", "pose", "skin"):
        mlp = getattr(params, head_name)
        for i in range(len(mlp.weights)):
            out.append((f"{head_name}.w{i}", mlp.weights[i]))
            out.append((f"{head_name}.b{i}", mlp.biases[i]))
    return out


def set_param(params: FieldParams, name: str, array) -> None:
    """Replace one named parameter array (shape-checked)."""
    for n, cur in iter_params(params):
        if n == name:
            if cur.shape != np.shape(array):
                raise ValueError(f"shape mismatch for {name}")
            cur[...] = array
            return
    raise KeyError(name)


def params_astype(params: FieldParams, dtype) -> FieldParams:
    def amap(a):
        return AffineMap(a.weight.astype(dtype), a.bias.astype(dtype))

    def enc(e):
        return EncoderParams(amap(e.lift), amap(e.mid), amap(e.out))

    def mlp(m):
        return MlpParams([w.astype(dtype) for w in m.weights],
                         [b.astype(dtype) for b in m.biases])

    return FieldParams(enc(params.vox_enc), enc(params.im_enc),
                       mlp(params.occ), mlp(params.pose), mlp(params.skin),
                       params.view_origin, params.branches)


def branch_flags(params: FieldParams) -> dict:
    """zero_* switches for point_encoding matching the params' branch set."""
    return {"zero_vox": "vox" not in params.branches,
            "zero_im": "im" not in params.branches,
            "zero_view": "view" not in params.branches}


# ---------------------------------------------------------------------------
# Primitive ops (forward + cache)


def _mm(x, w):
    # Pad single rows: the one-row BLAS path rounds differently from the
    # batched path, and per-point eval must match grid eval bit-exactly.
    if x.shape[0] == 1:
        return np.matmul(np.concatenate([x, x], axis=0), w)[:1]
    return np.matmul(x, w)


def _lrelu(x):
    return np.where(x >= 0, x, LEAKY_SLOPE * x)


def _affine_lrelu(x, amap: AffineMap):
    x = np.asarray(x, dtype=np.float64)
    pre = _mm(x, amap.weight.astype(np.float64)) + amap.bias.astype(np.float64)
    mask = pre >= 0
    return _lrelu(pre), (x, mask)


def _affine_lrelu_backward(d_out, cache, amap: AffineMap):
    x, mask = cache
    d_pre = d_out * np.where(mask, 1.0, LEAKY_SLOPE)
    d_w = x.T @ d_pre
    d_b = d_pre.sum(axis=0)
    d_x = d_pre @ amap.weight.astype(np.float64).T
    return d_x, d_w, d_b


def _pool2_3d(x):
    nx, ny, nz, c = x.shape
    return x.reshape(nx // 2, 2, ny // 2, 2, nz // 2, 2, c).mean(axis=(1, 3, 5))


def _unpool2_3d(d):
    # Adjoint of _pool2_3d up to the 1/8 averaging factor.
    return np.repeat(np.repeat(np.repeat(d, 2, axis=0), 2, axis=1), 2, axis=2)


def _up2_3d(x):
    return np.repeat(np.repeat(np.repeat(x, 2, axis=0), 2, axis=1), 2, axis=2)


def _up2_3d_adjoint(d):
    nx, ny, nz, c = d.shape
    return d.reshape(nx // 2, 2, ny // 2, 2, nz // 2, 2, c).sum(axis=(1, 3, 5))


def _pool2_2d(x):
    h, w, c = x.shape
    return x.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))


def _unpool2_2d(d):
    return np.repeat(np.repeat(d, 2, axis=0), 2, axis=1)


# ---------------------------------------------------------------------------
# Encoders


def _encode_volumetric(values, enc: EncoderParams):
    nx, ny, nz, cin = values.shape
    if nx % 2 or ny % 2 or nz % 2:
        raise ValueError("volumetric encoder needs even grid dimensions")
    g = np.asarray(values, dtype=np.float64).reshape(-1, cin)
    a1, c1 = _affine_lrelu(g, enc.lift)
    a1g = a1.reshape(nx, ny, nz, -1)
    p = _pool2_3d(a1g)
    a2, c2 = _affine_lrelu(p.reshape(-1, p.shape[-1]), enc.mid)
    u = _up2_3d(a2.reshape(p.shape[:3] + (-1,)))
    s = (u.reshape(-1, u.shape[-1]) + a1)
    f, c3 = _affine_lrelu(s, enc.out)
    cache = {"dims": (nx, ny, nz), "lift": c1, "mid": c2, "out": c3}
    return f.reshape(nx, ny, nz, -1), cache


def _encode_volumetric_backward(d_f_flat, cache, enc: EncoderParams):
    nx, ny, nz = cache["dims"]
    c = enc.channels
    d_s, d_w3, d_b3 = _affine_lrelu_backward(d_f_flat, cache["out"], enc.out)
    d_u = d_s.reshape(nx, ny, nz, c)
    d_a2 = _up2_3d_adjoint(d_u).reshape(-1, c)
    d_p, d_w2, d_b2 = _affine_lrelu_backward(d_a2, cache["mid"], enc.mid)
    d_a1 = d_s + (_unpool2_3d(d_p.reshape(nx // 2, ny // 2, nz // 2, c)) / 8.0
                  ).reshape(-1, c)
    _, d_w1, d_b1 = _affine_lrelu_backward(d_a1, cache["lift"], enc.lift)
    return {"lift.weight": d_w1, "lift.bias": d_b1,
            "mid.weight": d_w2, "mid.bias": d_b2,
            "out.weight": d_w3, "out.bias": d_b3}


def encode_volumetric(grid: VoxelGrid, enc: EncoderParams) -> VoxelGrid:
    """Encode a voxel grid into per-cell features at the same resolution."""
    if grid.channels != enc.in_channels:
        raise ValueError("grid channel count does not match the encoder")
    f, _ = _encode_volumetric(grid.values, enc)
    return VoxelGrid(grid.origin, grid.cell_size, f)


def _encode_image(values, enc: EncoderParams):
    h, w, cin = values.shape
    if h % 4 or w % 4:
        raise ValueError("image encoder needs dimensions divisible by 4")
    x = np.asarray(values, dtype=np.float64).reshape(-1, cin)
    b1, c1 = _affine_lrelu(x, enc.lift)
    q1 = _pool2_2d(b1.reshape(h, w, -1))
    b2, c2 = _affine_lrelu(q1.reshape(-1, q1.shape[-1]), enc.mid)
    q2 = _pool2_2d(b2.reshape(h // 2, w // 2, -1))
    f, c3 = _affine_lrelu(q2.reshape(-1, q2.shape[-1]), enc.out)
    cache = {"dims": (h, w), "lift": c1, "mid": c2, "out": c3}
    return f.reshape(h // 4, w // 4, -1), cache


def _encode_image_backward(d_f_flat, cache, enc: EncoderParams):
    h, w = cache["dims"]
    c = enc.channels
    d_q2, d_w3, d_b3 = _affine_lrelu_backward(d_f_flat, cache["out"], enc.out)
    d_act2 = (_unpool2_2d(d_q2.reshape(h // 4, w // 4, c)) / 4.0).reshape(-1, c)
    d_q1, d_w2, d_b2 = _affine_lrelu_backward(d_act2, cache["mid"], enc.mid)
    d_act1 = (_unpool2_2d(d_q1.reshape(h // 2, w // 2, c)) / 4.0).reshape(-1, c)
    _, d_w1, d_b1 = _affine_lrelu_backward(d_act1, cache["lift"], enc.lift)
    return {"lift.weight": d_w1, "lift.bias": d_b1,
            "mid.weight": d_w2, "mid.bias": d_b2,
            "out.weight": d_w3, "out.bias": d_b3}


def encode_image(image: FeatureMap2D, enc: EncoderParams) -> FeatureMap2D:
    """Encode an image into quarter-resolution per-pixel features."""
    if image.channels != enc.in_channels:
        raise ValueError("image channel count does not match the encoder")
    f, _ = _encode_image(image.values, enc)
    return FeatureMap2D(f, pixel_scale=image.pixel_scale * 4.0)


# ---------------------------------------------------------------------------
# Point encoding


def viewpoint_feature(points, origin, ray):
    """Signed distance along the viewing ray: (p - c) . r / |r|."""
    r = np.asarray(ray, dtype=np.float64)
    n = np.linalg.norm(r)
    if n < 1e-12:
        raise ValueError("viewing ray must be nonzero")
    r = r / n
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    d = pts.reshape(-1, 3) - np.asarray(origin, dtype=np.float64)
    # Elementwise on purpose: a matvec would round differently between
    # single-row and batched calls.
    out = d[:, 0] * r[0] + d[:, 1] * r[1] + d[:, 2] * r[2]
    return float(out[0]) if single else out


def point_encoding(points, sample, feat_vox: VoxelGrid, feat_im,
                   *, zero_vox: bool = False, zero_im: bool = False,
                   zero_view: bool = False, im_channels: int = None):
    """Per-point features [vox | im | view]; returns (phi (n, d), cache).

    Points outside the voxel volume contribute zero vox features; points
    that project invalidly (or when no image exists) contribute zero image
    features.  The zero_* switches are ablation hooks that blank a branch
    while keeping the layout fixed.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 1:
        # Duplicate the row so every batched op (camera projection included)
        # takes the same code path as larger chunks, then slice back.
        phi2, cache2 = point_encoding(
            np.concatenate([pts, pts], axis=0), sample, feat_vox, feat_im,
            zero_vox=zero_vox, zero_im=zero_im, zero_view=zero_view,
            im_channels=im_channels)
        cache = {k: (v[:1] if isinstance(v, np.ndarray) else v)
                 for k, v in cache2.items()}
        return phi2[:1], cache
    vox_idx, vox_w = trilinear_weights(feat_vox, pts)
    if zero_vox:
        vox_w = np.zeros_like(vox_w)
    flat_vox = feat_vox.values.reshape(-1, feat_vox.channels).astype(np.float64)
    phi_vox = np.einsum("nk,nkc->nc", vox_w, flat_vox[vox_idx])

    if feat_im is not None and sample.camera is not None:
        c_im = feat_im.channels
        uv, _, valid = project_points(pts, sample.camera)
        im_idx, im_w = bilinear_weights(feat_im, uv / feat_im.pixel_scale)
        im_w = im_w * valid[:, None]
        if zero_im:
            im_w = np.zeros_like(im_w)
        flat_im = feat_im.values.reshape(-1, c_im).astype(np.float64)
        phi_im = np.einsum("nk,nkc->nc", im_w, flat_im[im_idx])
    else:
        if im_channels is None:
            raise ValueError("im_channels required when the sample has no image")
        c_im = im_channels
        im_idx = np.zeros((n, 4), dtype=np.int64)
        im_w = np.zeros((n, 4))
        phi_im = np.zeros((n, c_im))

    view = viewpoint_feature(pts, sample.canonical_origin, sample.view_ray)
    if zero_view:
        view = np.zeros_like(view)
    phi = np.concatenate([phi_vox, phi_im, view[:, None]], axis=1)
    cache = {"vox_idx": vox_idx, "vox_w": vox_w, "im_idx": im_idx, "im_w": im_w,
             "c_vox": feat_vox.channels, "c_im": c_im}
    return phi, cache


def point_encoding_backward(d_phi, cache, n_vox_cells: int, n_im_cells: int):
    """Scatter feature gradients back onto the encoded grids.

    Returns (d_flat_vox (n_vox_cells, c_vox), d_flat_im (n_im_cells, c_im));
    the view column has no upstream parameters and is dropped.
    """
    c_vox, c_im = cache["c_vox"], cache["c_im"]
    d_vox = d_phi[:, :c_vox]
    d_im = d_phi[:, c_vox:c_vox + c_im]
    d_flat_vox = np.zeros((n_vox_cells, c_vox))
    np.add.at(d_flat_vox, cache["vox_idx"],
              cache["vox_w"][:, :, None] * d_vox[:, None, :])
    d_flat_im = np.zeros((n_im_cells, c_im))
    if n_im_cells:
        np.add.at(d_flat_im, cache["im_idx"],
                  cache["im_w"][:, :, None] * d_im[:, None, :])
    return d_flat_vox, d_flat_im


# ---------------------------------------------------------------------------
# Heads


def _mlp_forward(phi, mlp: MlpParams):
    h = np.asarray(phi, dtype=np.float64)
    caches = []
    for i in range(len(mlp.weights) - 1):
        h, c = _affine_lrelu(h, AffineMap(mlp.weights[i], mlp.biases[i]))
        caches.append(c)
    last_in = h
    logits = (_mm(h, mlp.weights[-1].astype(np.float64))
              + mlp.biases[-1].astype(np.float64))
    return logits, {"hidden": caches, "last_in": last_in}


def _mlp_backward(d_logits, cache, mlp: MlpParams, prefix: str):
    grads = {}
    last = len(mlp.weights) - 1
    grads[f"{prefix}.w{last}"] = cache["last_in"].T @ d_logits
    grads[f"{prefix}.b{last}"] = d_logits.sum(axis=0)
    d = d_logits @ mlp.weights[-1].astype(np.float64).T
    for i in range(last - 1, -1, -1):
        d, d_w, d_b = _affine_lrelu_backward(
            d, cache["hidden"][i], AffineMap(mlp.weights[i], mlp.biases[i]))
        grads[f"{prefix}.w{i}"] = d_w
        grads[f"{prefix}.b{i}"] = d_b
    return d, grads


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _promote(phi):
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim == 1:
        return phi[None, :], True
    return phi, False


def eval_occupancy(params: FieldParams, phi):
    """Occupancy probability in [0, 1] per encoded point."""
    p, single = _promote(phi)
    logits, _ = _mlp_forward(p, params.occ)
    out = _sigmoid(logits)[:, 0]
    return float(out[0]) if single else out


def eval_pose(params: FieldParams, phi):
    """Per-joint heatmap activations, each an independent sigmoid."""
    p, single = _promote(phi)
    logits, _ = _mlp_forward(p, params.pose)
    out = _sigmoid(logits)
    return out[0] if single else out


def eval_skinning(params: FieldParams, phi):
    """Skinning weight rows on the simplex (softmax over bones)."""
    p, single = _promote(phi)
    logits, _ = _mlp_forward(p, params.skin)
    out = _softmax(logits)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Checkpoints


def write_checkpoint(params: FieldParams, path) -> None:
    """Magic 'S3F1', u32 LE header length, JSON header, f32 LE arrays in
    header-declared order."""
    named = iter_params(params)
    header = {
        "vox_in": params.vox_enc.in_channels,
        "vox_channels": params.vox_enc.channels,
        "im_in": params.im_enc.in_channels,
        "im_channels": params.im_enc.channels,
        "layers": len(params.occ.weights),
        "hidden": params.occ.weights[0].shape[1],
        "n_joints": params.n_joints,
        "n_bones": params.n_bones,
        "view_origin": params.view_origin,
        "branches": list(params.branches),
        "arrays": [[name, list(arr.shape)] for name, arr in named],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in named:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path) -> FieldParams:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointFormatError("bad checkpoint magic")
        raw = fh.read(4)
        if len(raw) != 4:
            raise CheckpointFormatError("truncated checkpoint header")
        (hlen,) = struct.unpack("<I", raw)
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"unreadable header: {exc}")
        payload = fh.read()
    try:
        params = init_field_params(
            0, vox_channels=header["vox_channels"],
            im_channels=header["im_channels"], hidden=header["hidden"],
            n_joints=header["n_joints"], n_bones=header["n_bones"],
            vox_in=header["vox_in"], im_in=header["im_in"],
            view_origin=header["view_origin"],
            branches=tuple(header["branches"]))
        declared_names = [n for n, _ in header["arrays"]]
    except (KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"incomplete header: {exc}")
    named = iter_params(params)
    declared = header["arrays"]
    if [n for n, _ in named] != declared_names:
        raise CheckpointFormatError("checkpoint arrays do not chain into a model")
    offset = 0
    for (name, arr), (_, shape) in zip(named, declared):
        if list(arr.shape) != shape:
            raise CheckpointFormatError(f"dimension mismatch for {name}")
        nbytes = int(np.prod(shape)) * 4
        chunk = payload[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointFormatError("truncated checkpoint payload")
        arr[...] = np.frombuffer(chunk, dtype="<f4").reshape(shape)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointFormatError("trailing bytes after checkpoint payload")
    return params
