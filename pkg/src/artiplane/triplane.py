"""Tri-plane feature and probability storage, bilinear sampling, per-part
blending under the cube shape prior, and deformation-field warping.

Geometry: the three planes are axis-aligned in canonical space.  Plane 0
(xy) is indexed by the (x, y) components of a canonical point, plane 1 (xz)
by (x, z), plane 2 (yz) by (y, z); each component is divided by the field
extent to land in [-1, 1], and -1/+1 map to the first/last texel row
(border-clamped outside).  Per-part occupancy is the product of the three
per-plane logistic probabilities, hard-zeroed outside an axis-aligned cube
of half-width `cube_half` around the part's canonical center.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError
from .kinematics import CanonicalPose, PoseConfig, canonical_maps

PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # (xy, xz, yz) component picks
FEATURE_CHANNELS = 32
DEFAULT_CUBE_HALF = 1.0 / 3.0  # meters; weak shape prior half-width


@dataclass
class TriPlaneField:
    """Explicit canonical-space storage: per plane, 32 feature channels plus
    K probability-logit channels, so (32 + K) * 3 channels in total."""

    features: np.ndarray   # (3, R, R, 32)
    prob_logits: np.ndarray  # (3, R, R, K)
    extent: float = 1.0
    cube_half: float = DEFAULT_CUBE_HALF

    def __post_init__(self):
        f = np.asarray(self.features)
        p = np.asarray(self.prob_logits)
        if f.ndim != 4 or f.shape[0] != 3 or f.shape[1] != f.shape[2]:
            raise ValidationError(f"features must be (3, R, R, C], got {f.shape}")
        if p.shape[:3] != f.shape[:3]:
            raise ValidationError("probability planes must match feature plane resolution")
        if f.shape[1] < 2:
            raise ValidationError("plane resolution must be at least 2")
        if not (np.isfinite(f).all() and np.isfinite(p).all()):
            raise ValidationError("tri-plane values must be finite")
        if self.extent <= 0.0:
            raise ValidationError("extent must be positive")
        self.features = f
        self.prob_logits = p

    @property
    def resolution(self) -> int:
        return self.features.shape[1]

    @property
    def k(self) -> int:
        return self.prob_logits.shape[3]

    @property
    def feature_channels(self) -> int:
        return self.features.shape[3]

    @staticmethod
    def zeros(resolution: int, k: int, extent: float = 1.0,
              cube_half: float = DEFAULT_CUBE_HALF, dtype=np.float64) -> "TriPlaneField":
        return TriPlaneField(
            features=np.zeros((3, resolution, resolution, FEATURE_CHANNELS), dtype=dtype),
            prob_logits=np.zeros((3, resolution, resolution, k), dtype=dtype),
            extent=extent, cube_half=cube_half,
        )


@dataclass
class DeformationField:
    """Per-plane 2-D offsets (3, R, R, 2) in normalized plane units."""

    offsets: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.offsets)
        if o.ndim != 4 or o.shape[0] != 3 or o.shape[3] != 2:
            raise ValidationError(f"deformation field must be (3, R, R, 2), got {o.shape}")
        if not np.isfinite(o).all():
            raise ValidationError("deformation offsets must be finite")
        self.offsets = o

    @property
    def resolution(self) -> int:
        return self.offsets.shape[1]

    @staticmethod
    def zeros(resolution: int, dtype=np.float64) -> "DeformationField":
        return DeformationField(np.zeros((3, resolution, resolution, 2), dtype=dtype))


# ---------------------------------------------------------------- sampling

def uv_to_texel(uv: np.ndarray, resolution: int) -> np.ndarray:
    """[-1, 1] plane coordinates to continuous texel coordinates."""
    return (np.asarray(uv) + 1.0) * (0.5 * (resolution - 1))


def sample_plane(plane: np.ndarray, uv) -> np.ndarray:
    """Bilinear lookup on one (R, R, C) plane at uv in [-1, 1]^2.

    Exact at grid nodes; coordinates outside the square clamp to the border.
    uv may be a single pair or an (N, 2) batch; axis 0 of the plane is v
    (second coordinate), axis 1 is u.
    """
    plane = np.asarray(plane)
    if plane.ndim == 2:
        plane = plane[:, :, None]
    res = plane.shape[0]
    if plane.shape[1] != res or res < 2:
        raise ValidationError(f"plane must be square with resolution >= 2, got {plane.shape}")
    uv = np.asarray(uv, dtype=np.float64)
    single = uv.ndim == 1
    uv2 = np.atleast_2d(uv)
    tx = uv_to_texel(uv2[:, 0], res)
    ty = uv_to_texel(uv2[:, 1], res)
    flat = plane.reshape(res * res, plane.shape[2])
    out = ad.plane_gather(ad.Tensor(flat), tx, ty, res).data
    return out[0] if single else out


def selector_prob(field: TriPlaneField, x_c, part_index: int) -> float:
    """Product of the three per-plane logistic probabilities for one part.

    This is the raw tri-plane selector; the cube prior that can force an
    exact zero lives in `feature_at` / the batched field evaluation.
    """
    if not (0 <= part_index < field.k):
        raise IndexError(f"part index {part_index} out of range for K={field.k}")
    x = np.asarray(x_c, dtype=np.float64).reshape(3)
    if not np.isfinite(x).all():
        raise ValidationError("query point must be finite")
    p = 1.0
    for pl, (a, b) in enumerate(PLANE_AXES):
        uv = np.array([x[a], x[b]]) / field.extent
        logit = sample_plane(field.prob_logits[pl][:, :, part_index], uv)
        p *= 0.5 * (1.0 + np.tanh(0.5 * float(logit)))
    return float(p)


# ------------------------------------------------- batched field machinery

class PlaneTensors:
    """Tape-facing view of a field: one (R*R, C) tensor per plane."""

    def __init__(self, feature_planes, prob_planes, resolution: int, extent: float,
                 cube_half: float):
        self.features = feature_planes    # list of 3 Tensors (R*R, 32)
        self.probs = prob_planes          # list of 3 Tensors (R*R, K) or None
        self.resolution = resolution
        self.extent = extent
        self.cube_half = cube_half

    @staticmethod
    def from_field(field: TriPlaneField) -> "PlaneTensors":
        res = field.resolution
        feats = [Tensor(np.ascontiguousarray(field.features[i].reshape(res * res, -1)))
                 for i in range(3)]
        probs = [Tensor(np.ascontiguousarray(field.prob_logits[i].reshape(res * res, -1)))
                 for i in range(3)]
        return PlaneTensors(feats, probs, res, field.extent, field.cube_half)


def cube_inside_mask(xc: np.ndarray, center: np.ndarray, cube_half: float) -> np.ndarray:
    """Hard shape prior: True where max|xc - center| <= cube_half."""
    return np.abs(xc - center).max(axis=-1) <= cube_half


def part_plane_coords(xc: np.ndarray, resolution: int, extent: float):
    """Texel coordinates of canonical points on each of the three planes."""
    scale = 0.5 * (resolution - 1)
    out = []
    for a, b in PLANE_AXES:
        tx = (xc[:, a] / extent + 1.0) * scale
        ty = (xc[:, b] / extent + 1.0) * scale
        out.append((tx, ty))
    return out


def blend_parts(planes: PlaneTensors, pts: np.ndarray, pose: PoseConfig,
                canon: CanonicalPose, normalize_length: bool = False,
                selector: str = "triplane", selector_fn=None,
                use_cube_prior: bool = True, stats: dict | None = None):
    """Gather/accumulate per-part tri-plane features for points (N, 3).

    Returns (features Tensor (V, C), valid_index (V,)) where valid_index
    lists the points inside at least one part's cube; all other points
    contribute nothing (their probability is exactly zero, so they also
    receive no gradient).

    selector: "triplane" (plane-product probabilities), "uniform" (1/K), or
    "mlp" (selector_fn(points, part) supplies probabilities from the
    per-part MLP over encoded local coordinates).
    """
    n = pts.shape[0]
    k = pose.k
    mats, offs = canonical_maps(pose, canon, normalize_length)
    dtype = planes.features[0].data.dtype
    res = planes.resolution

    inside_list = []
    for j in range(k):
        if use_cube_prior:
            inside = _kernels.affine_cube_mask(pts, mats[j], offs[j],
                                               canon.centers[j], planes.cube_half)
        else:
            inside = np.ones(n, dtype=bool)
        inside_list.append(inside)

    any_inside = np.logical_or.reduce(inside_list) if k else np.zeros(n, bool)
    valid_idx = np.nonzero(any_inside)[0]
    v = valid_idx.shape[0]
    if stats is not None:
        stats["points"] = stats.get("points", 0) + n
        stats["valid_points"] = stats.get("valid_points", 0) + int(v)
    if v == 0:
        return None, valid_idx

    slot = np.full(n, -1, dtype=np.int64)
    slot[valid_idx] = np.arange(v)

    total = None
    for j in range(k):
        idx_j = np.nonzero(inside_list[j])[0]
        if idx_j.shape[0] == 0:
            continue
        if stats is not None:
            stats["part_pairs"] = stats.get("part_pairs", 0) + int(idx_j.shape[0])
        xc = (pts[idx_j] @ mats[j].T + offs[j]).astype(dtype, copy=False)
        coords = part_plane_coords(xc, res, planes.extent)
        fj = None
        pj = None
        for pl in range(3):
            tx, ty = coords[pl]
            corners = ad._corner_setup(tx, ty, res, dtype)
            g = ad.plane_gather(planes.features[pl], tx, ty, res, corners=corners)
            fj = g if fj is None else fj + g
            if selector == "triplane":
                logit = ad.plane_gather(planes.probs[pl], tx, ty, res, col=j,
                                        corners=corners)
                pr = ad.sigmoid(logit)
                pj = pr if pj is None else pj * pr
        if selector == "uniform":
            pj = Tensor(np.full((idx_j.shape[0], 1), 1.0 / k, dtype=dtype))
        elif selector == "mlp":
            pj = selector_fn(pts[idx_j], j)
        elif selector != "triplane":
            raise ValidationError(f"unknown selector {selector!r}")
        contrib = ad.index_add(v, slot[idx_j], fj * pj)
        total = contrib if total is None else total + contrib
    return total, valid_idx


def feature_at(field: TriPlaneField, x, pose: PoseConfig, canon: CanonicalPose,
               normalize_length: bool = False, selector: str = "triplane") -> np.ndarray:
    """Blended canonical feature at one global point."""
    pts = np.asarray(x, dtype=np.float64).reshape(1, 3)
    planes = PlaneTensors.from_field(field)
    with ad.no_grad():
        f, valid_idx = blend_parts(planes, pts, pose, canon,
                                   normalize_length=normalize_length,
                                   selector=selector)
    out = np.zeros(field.feature_channels)
    if f is not None and valid_idx.shape[0]:
        out[:] = f.data[0]
    return out


# ----------------------------------------------------------------- warping

def warp_plane_tensor(feature_plane: Tensor, offs_x, offs_y, resolution: int) -> Tensor:
    """Resample one (R*R, C) plane at base grid + offsets (texel units)."""
    base = np.arange(resolution, dtype=np.float64)
    gx = np.tile(base, resolution)           # column index fast
    gy = np.repeat(base, resolution)
    px = offs_x + gx if isinstance(offs_x, Tensor) else gx + offs_x
    py = offs_y + gy if isinstance(offs_y, Tensor) else gy + offs_y
    return ad.plane_gather(feature_plane, px, py, resolution)


def warp_planes(field: TriPlaneField, deform: DeformationField) -> TriPlaneField:
    """Warped copy: each feature texel resamples the source at uv + offset.

    Probability planes are copied unchanged: part occupancy stays constant
    over time while only features deform.
    """
    if deform.resolution != field.resolution:
        raise ValidationError("deformation field resolution must match the tri-plane")
    res = field.resolution
    scale = 0.5 * (res - 1)  # uv units -> texel units
    out = np.empty_like(field.features)
    for pl in range(3):
        flat = Tensor(field.features[pl].reshape(res * res, -1))
        ox = deform.offsets[pl][:, :, 0].reshape(-1) * scale
        oy = deform.offsets[pl][:, :, 1].reshape(-1) * scale
        with ad.no_grad():
            warped = warp_plane_tensor(flat, ox, oy, res)
        out[pl] = warped.data.reshape(res, res, -1)
    return TriPlaneField(features=out, prob_logits=field.prob_logits.copy(),
                         extent=field.extent, cube_half=field.cube_half)


def triplane_l2(field: TriPlaneField) -> float:
    """Mean squared feature value; probability planes are excluded."""
    return float(np.mean(field.features.astype(np.float64) ** 2))


def triplane_l2_tensor(feature_planes) -> Tensor:
    """Tape version of the L2 regularizer over the plane tensors."""
    total = None
    count = 0
    for t in feature_planes:
        s = ad.sum(t * t)
        total = s if total is None else total + s
        count += t.data.size
    return total * (1.0 / count)
