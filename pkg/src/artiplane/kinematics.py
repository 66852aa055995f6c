"""Rigid-part poses, coordinate transforms, forward kinematics, pose sampling,
and skeleton rasterization.

Conventions (also documented in the scene file schema):

* world up is +z; rotations compose as intrinsic XYZ Euler angles,
  ``R = Rx(ax) @ Ry(ay) @ Rz(az)``;
* a part's bone occupies the segment from its origin along local +x, scaled
  by its length;
* the chain rule for joints is ``R_k = R_parent @ R(angles_k)`` and
  ``t_k = t_parent + R_parent @ (l_k, 0, 0)``;
* cameras are pinhole, x right / y down / z forward, pixel (i, j) has its
  center at continuous coordinates (j + 0.5, i + 0.5).

All operations are pure functions over immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


# ------------------------------------------------------------------- types

@dataclass(frozen=True)
class RigidTransform:
    """Orthonormal rotation plus translation, applied as x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValidationError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValidationError("rotation must have det +1")

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.rotation.T + self.translation

    def inverse_apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.translation) @ self.rotation

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class PosePart:
    length: float
    transform: RigidTransform

    def __post_init__(self):
        if not self.length > 0.0:
            raise ValidationError("part length must be positive")


@dataclass(frozen=True)
class PoseConfig:
    """Articulated pose: per-part bone length plus rigid transform."""

    parts: tuple

    def __post_init__(self):
        parts = tuple(self.parts)
        object.__setattr__(self, "parts", parts)
        if len(parts) < 1:
            raise ValidationError("pose needs at least one part")

    @property
    def k(self) -> int:
        return len(self.parts)

    def rotations(self) -> np.ndarray:
        return np.stack([p.transform.rotation for p in self.parts])

    def translations(self) -> np.ndarray:
        return np.stack([p.transform.translation for p in self.parts])

    def lengths(self) -> np.ndarray:
        return np.array([p.length for p in self.parts])


@dataclass(frozen=True)
class CanonicalPose:
    """Reference pose whose frame the tri-planes live in.

    Same shape as PoseConfig plus the per-part centers (bone midpoints) used
    by the cube shape prior.
    """

    parts: tuple
    centers: np.ndarray = field(default=None)

    def __post_init__(self):
        parts = tuple(self.parts)
        object.__setattr__(self, "parts", parts)
        if len(parts) < 1:
            raise ValidationError("canonical pose needs at least one part")
        if self.centers is None:
            ctr = np.stack([
                p.transform.translation
                + p.transform.rotation @ np.array([0.5 * p.length, 0.0, 0.0])
                for p in parts
            ])
            object.__setattr__(self, "centers", ctr)
        else:
            object.__setattr__(self, "centers", np.asarray(self.centers, dtype=np.float64).reshape(len(parts), 3))

    @property
    def k(self) -> int:
        return len(self.parts)

    def as_pose(self) -> PoseConfig:
        return PoseConfig(self.parts)

    @staticmethod
    def from_pose(pose: PoseConfig) -> "CanonicalPose":
        return CanonicalPose(pose.parts)


@dataclass(frozen=True)
class Skeleton:
    """Tree of parts: parent index per part (-1 for the single root)."""

    parent: tuple

    def __post_init__(self):
        parent = tuple(int(p) for p in self.parent)
        object.__setattr__(self, "parent", parent)
        roots = [i for i, p in enumerate(parent) if p == -1]
        if len(roots) != 1:
            raise ValidationError("skeleton needs exactly one root (parent -1)")
        for i, p in enumerate(parent):
            if p != -1 and not (0 <= p < len(parent)):
                raise ValidationError(f"parent index {p} out of range")
            # walk to the root; a cycle never reaches it
            seen = set()
            j = i
            while j != -1:
                if j in seen:
                    raise ValidationError("cyclic parent graph")
                seen.add(j)
                j = parent[j]

    @property
    def k(self) -> int:
        return len(self.parent)

    def topological_order(self) -> list:
        order, placed = [], set()
        pending = list(range(self.k))
        while pending:
            nxt = [i for i in pending if self.parent[i] == -1 or self.parent[i] in placed]
            for i in nxt:
                order.append(i)
                placed.add(i)
            pending = [i for i in pending if i not in placed]
        return order


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; extrinsic maps world to camera coordinates."""

    extrinsic: RigidTransform
    focal: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        if not (0.0 < self.near < self.far):
            raise ValidationError("camera needs 0 < near < far")
        if not self.focal > 0.0:
            raise ValidationError("camera focal length must be positive")
        if self.width < 1 or self.height < 1:
            raise ValidationError("camera image must be at least 1x1")

    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        e = self.extrinsic
        return -(e.rotation.T @ e.translation)


# -------------------------------------------------------------- transforms

def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def euler_xyz(angles) -> np.ndarray:
    """Intrinsic XYZ Euler angles to a rotation matrix."""
    ax, ay, az = np.asarray(angles, dtype=np.float64)
    return rot_x(ax) @ rot_y(ay) @ rot_z(az)


def to_local(x, part: RigidTransform) -> np.ndarray:
    """Global point into the part's local frame: R^T (x - t)."""
    return part.inverse_apply(x)


def to_canonical(x, part_index: int, pose: PoseConfig, canon: CanonicalPose,
                 normalize_length: bool = False) -> np.ndarray:
    """Map a global point into canonical space through part `part_index`.

    The normalized variant rescales the local point by the canonical/posed
    bone length ratio before re-posing.
    """
    if not (0 <= part_index < pose.k):
        raise IndexError(f"part index {part_index} out of range for K={pose.k}")
    pp = pose.parts[part_index]
    cp = canon.parts[part_index]
    xl = to_local(x, pp.transform)
    if normalize_length:
        xl = (cp.length / pp.length) * xl
    return cp.transform.apply(xl)


def canonical_maps(pose: PoseConfig, canon: CanonicalPose,
                   normalize_length: bool = False):
    """Per-part affine maps (M_k, o_k) with x_c = x @ M_k^T + o_k.

    Precomputed composition of to_local and the canonical re-posing, used by
    the batched render path; must agree with `to_canonical` exactly.
    """
    mats = np.empty((pose.k, 3, 3))
    offs = np.empty((pose.k, 3))
    for k in range(pose.k):
        pp, cp = pose.parts[k], canon.parts[k]
        s = (cp.length / pp.length) if normalize_length else 1.0
        m = (s * cp.transform.rotation) @ pp.transform.rotation.T
        mats[k] = m
        offs[k] = cp.transform.translation - m @ pp.transform.translation
    return mats, offs


def forward_kinematics(skeleton: Skeleton, joint_angles, lengths,
                       root: RigidTransform | None = None) -> PoseConfig:
    """Compose per-joint Euler rotations down the parent chains."""
    angles = np.asarray(joint_angles, dtype=np.float64).reshape(skeleton.k, 3)
    lens = np.asarray(lengths, dtype=np.float64).reshape(skeleton.k)
    if np.any(lens <= 0.0):
        raise ValidationError("bone lengths must be positive")
    if root is None:
        root = RigidTransform.identity()

    rots = [None] * skeleton.k
    trans = [None] * skeleton.k
    for k in skeleton.topological_order():
        p = skeleton.parent[k]
        if p == -1:
            # the root part takes the root transform; its angle row is unused
            rots[k] = root.rotation
            trans[k] = root.translation
        else:
            rots[k] = rots[p] @ euler_xyz(angles[k])
            trans[k] = trans[p] + rots[p] @ np.array([lens[k], 0.0, 0.0])
    parts = tuple(
        PosePart(length=float(lens[k]), transform=RigidTransform(rots[k], trans[k]))
        for k in range(skeleton.k)
    )
    return PoseConfig(parts)


# ------------------------------------------------------------- pose priors

@dataclass(frozen=True)
class GaussianPosePrior:
    """Independent multivariate normal over each joint's Euler angles."""

    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.means, dtype=np.float64)
        c = np.asarray(self.covariances, dtype=np.float64)
        object.__setattr__(self, "means", m.reshape(-1, 3))
        object.__setattr__(self, "covariances", c.reshape(-1, 3, 3))
        if self.covariances.shape[0] != self.means.shape[0]:
            raise ValidationError("prior means/covariances disagree in joint count")
        for k, cov in enumerate(self.covariances):
            if not np.allclose(cov, cov.T, atol=1e-12):
                raise ValidationError(f"joint {k} covariance is not symmetric")
            eig = np.linalg.eigvalsh(cov)
            if eig.min() < -1e-12:
                raise ValidationError(f"joint {k} covariance is not positive semi-definite")

    @property
    def k(self) -> int:
        return self.means.shape[0]


def sample_joint_angles(prior: GaussianPosePrior, rng: np.random.Generator) -> np.ndarray:
    """One draw of per-joint Euler angles from the prior."""
    out = np.empty_like(prior.means)
    for k in range(prior.k):
        cov = prior.covariances[k]
        # eigh handles PSD-but-singular covariances that cholesky rejects
        w, v = np.linalg.eigh(cov)
        scale = v @ np.diag(np.sqrt(np.maximum(w, 0.0)))
        out[k] = prior.means[k] + scale @ rng.standard_normal(3)
    return out


def sample_pose_gaussian(prior: GaussianPosePrior, skeleton: Skeleton, lengths,
                         rng: np.random.Generator,
                         root: RigidTransform | None = None) -> PoseConfig:
    """Sample joint angles, apply a uniform random yaw about world +z, run FK."""
    if prior.k != skeleton.k:
        raise ValidationError("prior and skeleton disagree in joint count")
    angles = sample_joint_angles(prior, rng)
    yaw = rng.uniform(0.0, 2.0 * np.pi)
    base = root if root is not None else RigidTransform.identity()
    spun = RigidTransform(rot_z(yaw) @ base.rotation, rot_z(yaw) @ base.translation)
    return forward_kinematics(skeleton, angles, lengths, root=spun)


# ------------------------------------------------------------ projection

def project_points(camera: Camera, pts: np.ndarray):
    """World points to (u, v) pixel coordinates plus camera-frame depth."""
    pc = camera.extrinsic.apply(np.atleast_2d(pts))
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.focal * pc[:, 0] / z + camera.cx
        v = camera.focal * pc[:, 1] / z + camera.cy
    return u, v, z


def _clip_to_rect(a: np.ndarray, b: np.ndarray, w: int, h: int):
    """Liang-Barsky clip of segment a-b to the image rectangle (with margin)."""
    d = b - a
    t0, t1 = 0.0, 1.0
    for p, q in ((-d[0], a[0] + 1.0), (d[0], w - a[0]),
                 (-d[1], a[1] + 1.0), (d[1], h - a[1])):
        if p == 0.0:
            if q < 0.0:
                return None
            continue
        r = q / p
        if p < 0.0:
            if r > t1:
                return None
            t0 = max(t0, r)
        else:
            if r < t0:
                return None
            t1 = min(t1, r)
    return a + t0 * d, a + t1 * d


def _stamp_line(img: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Integer midpoint line, endpoint inclusive, clipped to the image."""
    h, w = img.shape
    clipped = _clip_to_rect(a.astype(np.float64), b.astype(np.float64), w, h)
    if clipped is None:
        return
    ca, cb = clipped
    x0, y0 = int(np.floor(ca[0])), int(np.floor(ca[1]))
    x1, y1 = int(np.floor(cb[0])), int(np.floor(cb[1]))
    dx = abs(x1 - x0)
    dy = abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx - dy
    x, y = x0, y0
    while True:
        if 0 <= x < w and 0 <= y < h:
            img[y, x] = 1
        if x == x1 and y == y1:
            break
        e2 = 2 * err
        if e2 > -dy:
            err -= dy
            x += sx
        if e2 < dx:
            err += dx
            y += sy


def rasterize_bones(pose: PoseConfig, skeleton: Skeleton, camera: Camera) -> np.ndarray:
    """Binary skeleton image: 1-pixel-wide segments joint -> parent joint.

    Segments are clipped at the camera near plane; fully-behind segments are
    skipped.  Pure function: identical inputs give identical bitmaps.
    """
    if pose.k != skeleton.k:
        raise ValidationError("pose and skeleton disagree in part count")
    img = np.zeros((camera.height, camera.width), dtype=np.uint8)
    joints_w = pose.translations()
    cams = camera.extrinsic.apply(joints_w)
    for k in range(skeleton.k):
        p = skeleton.parent[k]
        if p == -1:
            continue
        a, b = cams[k].copy(), cams[p].copy()
        if a[2] < camera.near and b[2] < camera.near:
            continue
        # clip the behind-plane endpoint to z = near
        if a[2] < camera.near:
            s = (camera.near - a[2]) / (b[2] - a[2])
            a = a + s * (b - a)
        elif b[2] < camera.near:
            s = (camera.near - b[2]) / (a[2] - b[2])
            b = b + s * (a - b)
        ua = camera.focal * a[0] / a[2] + camera.cx
        va = camera.focal * a[1] / a[2] + camera.cy
        ub = camera.focal * b[0] / b[2] + camera.cx
        vb = camera.focal * b[1] / b[2] + camera.cy
        _stamp_line(img, np.array([ua, va]), np.array([ub, vb]))
    return img


def look_at_camera(eye, target, width: int, height: int, focal: float,
                   near: float, far: float, up=(0.0, 0.0, 1.0)) -> Camera:
    """Camera at `eye` looking toward `target` (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    r_wc = np.stack([right, down, fwd])  # rows: camera axes in world coords
    t = -r_wc @ eye
    return Camera(extrinsic=RigidTransform(r_wc, t), focal=focal,
                  cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height, near=near, far=far)
