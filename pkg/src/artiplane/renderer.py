"""Ray generation, two-stage sampling, volumetric compositing, and image
assembly.

The quadrature lives in :func:`composite` and nowhere else; the analytic
ground-truth renderer in :mod:`artiplane.harness` calls the same function, so
feeding both the same (t, color, density) lists gives bit-identical pixels.

Randomness is counter-based per pixel (see :mod:`artiplane.rng`): a pixel's
stratified jitter and importance draws depend only on (seed, pixel id, slot),
never on chunking or thread count, which is what makes parallel renders
bit-identical to serial ones.

Field interface: ``field_fn(points (N, 3), view_dirs (N, 3) | None, stats)``
returning ``(density Tensor (N,), color Tensor (N, 3))``.  Points outside
every part's shape prior must come back with exactly zero density so that
culled rays and brute-force rays agree.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autodiff as ad
from . import rng
from .autodiff import Tensor
from .errors import ValidationError
from .kinematics import Camera


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValidationError("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise ValidationError("ray needs t_near < t_far")


@dataclass
class RayBundle:
    """One ray per pixel, flattened row-major; pixel i*W+j maps to (i, j)."""

    origins: np.ndarray     # (N, 3)
    directions: np.ndarray  # (N, 3), unit
    t_near: np.ndarray      # (N,)
    t_far: np.ndarray       # (N,)

    def __len__(self):
        return self.origins.shape[0]

    def pick(self, idx: np.ndarray) -> "RayBundle":
        return RayBundle(self.origins[idx], self.directions[idx],
                         self.t_near[idx], self.t_far[idx])


@dataclass
class RenderOutput:
    rgb: np.ndarray        # (H, W, 3) in [0, 1]
    mask: np.ndarray       # (H, W) in [0, 1]
    inv_depth: np.ndarray  # (H, W), 1/meters


@dataclass(frozen=True)
class SamplingConfig:
    coarse: int = 48
    fine: int = 64

    @property
    def total(self) -> int:
        return self.coarse + self.fine


def generate_rays(camera: Camera) -> RayBundle:
    """One ray through each pixel center, directions normalized."""
    h, w = camera.height, camera.width
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    u = jj.ravel() + 0.5
    v = ii.ravel() + 0.5
    dirs_cam = np.stack([(u - camera.cx) / camera.focal,
                         (v - camera.cy) / camera.focal,
                         np.ones(h * w)], axis=1)
    dirs_world = dirs_cam @ camera.extrinsic.rotation  # R^T applied row-wise
    dirs_world /= np.linalg.norm(dirs_world, axis=1, keepdims=True)
    origin = camera.center()
    return RayBundle(
        origins=np.broadcast_to(origin, (h * w, 3)).copy(),
        directions=dirs_world,
        t_near=np.full(h * w, camera.near),
        t_far=np.full(h * w, camera.far),
    )


def rays_hit_aabbs(bundle: RayBundle, aabbs: np.ndarray) -> np.ndarray:
    """Slab test: True where the ray meets any (lo, hi) box within its span."""
    if aabbs.size == 0:
        return np.zeros(len(bundle), dtype=bool)
    hit = np.zeros(len(bundle), dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / bundle.directions
    for lo, hi in aabbs:
        t1 = (lo - bundle.origins) * inv
        t2 = (hi - bundle.origins) * inv
        # where the direction component is 0, inv is +-inf; handle via nan-safe min/max
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit |= (tmax >= np.maximum(tmin, bundle.t_near)) & (tmin <= bundle.t_far) & (tmax >= tmin)
    return hit


# ---------------------------------------------------------------- sampling

def stratified_t(bundle: RayBundle, pixel_ids: np.ndarray, seed: int,
                 n: int) -> np.ndarray:
    """Stratified samples over [t_near, t_far], jitter from the pixel stream."""
    u = rng.uniform(seed, rng.TAG_STRATIFIED, pixel_ids[:, None], np.arange(n)[None, :])
    span = (bundle.t_far - bundle.t_near)[:, None]
    return bundle.t_near[:, None] + span * (np.arange(n)[None, :] + u) / n


def sample_importance(t_coarse: np.ndarray, weights: np.ndarray,
                      t_far: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of new sample positions from coarse bin weights.

    Bins are [t_i, t_{i+1}) with the last edge at t_far.  A uniform epsilon
    keeps the CDF valid when every weight is zero, in which case the draw
    degrades to (nearly) uniform over the full span.
    """
    eps = 1e-5
    w = weights + eps
    cdf = np.cumsum(w, axis=1)
    cdf = cdf / cdf[:, -1:]
    edges = np.concatenate([t_coarse, t_far[:, None]], axis=1)
    return _kernels.sample_pdf(np.ascontiguousarray(cdf),
                               np.ascontiguousarray(edges),
                               np.ascontiguousarray(u))


def composite(t: np.ndarray, density, color, t_far: np.ndarray):
    """Alpha-composite ordered samples along each ray.

    t (N, S) must be non-decreasing per ray (equal values contribute empty
    intervals); density/color may be Tensors.  Interval i spans to the next
    sample, the last one to t_far.  Transmittance uses the exponential of
    the accumulated optical depth, which equals the alpha product form
    exactly in real arithmetic and differentiates cleanly.

    Returns (rgb (N, 3), mask (N,), inv_depth (N,)) as Tensors.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 2:
        raise ValidationError("composite expects (N, S) sample positions")
    if np.any(np.diff(t, axis=1) < 0.0):
        raise ValidationError("sample positions must be non-decreasing along each ray")
    density = ad.ensure(density)
    color = ad.ensure(color)
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = np.asarray(t_far) - t[:, -1]
    delta = np.maximum(delta, 0.0)
    if density.data.dtype == np.float32:
        delta = delta.astype(np.float32)
        t = t.astype(np.float32)

    optical = density * Tensor(delta)              # (N, S)
    inclusive = ad.cumsum(optical, axis=1)
    exclusive = inclusive - optical
    trans = ad.exp(exclusive * -1.0)
    alpha = 1.0 - ad.exp(optical * -1.0)
    wts = trans * alpha                            # (N, S)
    rgb = ad.sum(ad.reshape(wts, (*wts.shape, 1)) * color, axis=1)
    mask = ad.sum(wts, axis=1)
    inv_depth = ad.sum(wts * Tensor(1.0 / t), axis=1)
    return rgb, mask, inv_depth


def composite_background(fg: RenderOutput, bg_rgb: np.ndarray) -> np.ndarray:
    """C = C_f + C_b * (1 - M_f), per pixel and channel."""
    bg = np.asarray(bg_rgb, dtype=np.float64)
    if bg.shape != fg.rgb.shape:
        raise ValidationError(f"background shape {bg.shape} != foreground {fg.rgb.shape}")
    return fg.rgb + bg * (1.0 - fg.mask)[:, :, None]


# ----------------------------------------------------------- ray rendering

def _eval_field(field_fn, bundle: RayBundle, t: np.ndarray, with_tape: bool,
                view_dirs: bool, stats):
    pts = bundle.origins[:, None, :] + t[:, :, None] * bundle.directions[:, None, :]
    flat = pts.reshape(-1, 3)
    dirs = None
    if view_dirs:
        dirs = np.broadcast_to(bundle.directions[:, None, :], pts.shape).reshape(-1, 3)
    if with_tape:
        sigma, col = field_fn(flat, dirs, stats)
    else:
        with ad.no_grad():
            sigma, col = field_fn(flat, dirs, stats)
    return (ad.reshape(sigma, t.shape), ad.reshape(col, (*t.shape, 3)))


def sample_positions(field_fn, bundle: RayBundle, pixel_ids: np.ndarray, seed: int,
                     cfg: SamplingConfig = SamplingConfig(), stats: dict | None = None,
                     view_dirs: bool = False):
    """Two-stage sample placement; returns (t_coarse, t_fine) per ray.

    The stage-1 evaluation that shapes the importance distribution always
    runs gradient-free: sample positions are treated as given by the
    differentiable pass that follows.
    """
    if np.any(bundle.t_near >= bundle.t_far):
        raise ValidationError("degenerate ray: t_near >= t_far")
    t_c = stratified_t(bundle, pixel_ids, seed, cfg.coarse)
    sigma_c, color_c = _eval_field(field_fn, bundle, t_c, False, view_dirs, stats)
    delta = np.empty_like(t_c)
    delta[:, :-1] = t_c[:, 1:] - t_c[:, :-1]
    delta[:, -1] = bundle.t_far - t_c[:, -1]
    optical = sigma_c.data * delta
    excl = np.cumsum(optical, axis=1) - optical
    w_c = np.exp(-excl) * (1.0 - np.exp(-optical))
    u = rng.uniform(seed, rng.TAG_IMPORTANCE, pixel_ids[:, None],
                    np.arange(cfg.fine)[None, :])
    t_f = sample_importance(t_c, w_c, bundle.t_far, u)
    return t_c, t_f, (sigma_c, color_c)


def render_rays_at(field_fn, bundle: RayBundle, t_all: np.ndarray,
                   tape: bool = False, stats: dict | None = None,
                   view_dirs: bool = False):
    """Evaluate and composite at the given merged sample positions."""
    sigma, color = _eval_field(field_fn, bundle, t_all, tape, view_dirs, stats)
    return composite(t_all, sigma, color, bundle.t_far)


def render_ray_batch(field_fn, bundle: RayBundle, pixel_ids: np.ndarray,
                     seed: int, cfg: SamplingConfig = SamplingConfig(),
                     tape: bool = False, stats: dict | None = None,
                     view_dirs: bool = False):
    """Sample, evaluate, and composite a batch of rays.

    Inference (`tape=False`) reuses the coarse evaluations in the final
    quadrature; training (`tape=True`) re-evaluates all merged positions on
    the tape.
    """
    n = len(bundle)
    if stats is not None:
        stats["rays"] = stats.get("rays", 0) + n
    t_c, t_f, coarse_vals = sample_positions(field_fn, bundle, pixel_ids, seed,
                                             cfg, stats, view_dirs)
    if tape:
        t_all = np.sort(np.concatenate([t_c, t_f], axis=1), axis=1)
        return render_rays_at(field_fn, bundle, t_all, tape=True, stats=stats,
                              view_dirs=view_dirs)
    sigma_c, color_c = coarse_vals
    sigma_f, color_f = _eval_field(field_fn, bundle, t_f, False, view_dirs, stats)
    t_cat = np.concatenate([t_c, t_f], axis=1)
    order = np.argsort(t_cat, axis=1, kind="stable")
    t_all = np.take_along_axis(t_cat, order, axis=1)
    sig_cat = np.concatenate([sigma_c.data, sigma_f.data], axis=1)
    col_cat = np.concatenate([color_c.data, color_f.data], axis=1)
    sigma = Tensor(np.take_along_axis(sig_cat, order, axis=1))
    color = Tensor(np.take_along_axis(col_cat, order[:, :, None], axis=1))
    return composite(t_all, sigma, color, bundle.t_far)


def sample_along_ray(ray: Ray, field_fn, seed: int = 0,
                     cfg: SamplingConfig = SamplingConfig()):
    """Single-ray two-stage sampling; returns (t (S,), density (S,), color (S, 3)).

    Stage 1 draws `cfg.coarse` stratified positions, stage 2 adds `cfg.fine`
    importance-sampled ones from the stage-1 compositing weights; the merged
    t-sorted list is evaluated with the same field.
    """
    bundle = RayBundle(ray.origin[None], ray.direction[None],
                       np.array([ray.t_near]), np.array([ray.t_far]))
    if ray.t_near >= ray.t_far:
        raise ValidationError("degenerate ray: t_near >= t_far")
    pixel_ids = np.zeros(1, dtype=np.int64)
    t_c = stratified_t(bundle, pixel_ids, seed, cfg.coarse)
    with ad.no_grad():
        sigma_c, _ = field_fn((bundle.origins[:, None, :]
                               + t_c[:, :, None] * bundle.directions[:, None, :]).reshape(-1, 3),
                              None, None)
    sigma_c = sigma_c.data.reshape(t_c.shape)
    delta = np.empty_like(t_c)
    delta[:, :-1] = t_c[:, 1:] - t_c[:, :-1]
    delta[:, -1] = bundle.t_far - t_c[:, -1]
    optical = sigma_c * delta
    excl = np.cumsum(optical, axis=1) - optical
    w_c = np.exp(-excl) * (1.0 - np.exp(-optical))
    u = rng.uniform(seed, rng.TAG_IMPORTANCE, pixel_ids[:, None], np.arange(cfg.fine)[None, :])
    t_f = sample_importance(t_c, w_c, bundle.t_far, u)
    t_all = np.sort(np.concatenate([t_c, t_f], axis=1), axis=1)
    with ad.no_grad():
        sigma, color = field_fn((bundle.origins[:, None, :]
                                 + t_all[:, :, None] * bundle.directions[:, None, :]).reshape(-1, 3),
                                None, None)
    return t_all[0], sigma.data.reshape(-1).copy(), color.data.reshape(-1, 3).copy()


def render_image(field_fn, camera: Camera, seed: int = 0,
                 cfg: SamplingConfig = SamplingConfig(),
                 aabbs: np.ndarray | None = None,
                 threads: int = 1, chunk: int = 4096,
                 stats: dict | None = None,
                 view_dirs: bool = False) -> RenderOutput:
    """Full-frame render with conservative box culling.

    Pixels whose rays miss every part's world-space box short-circuit to
    zeros; survivors get the full two-stage treatment.  Chunk boundaries are
    fixed by `chunk` alone, so any `threads` count assembles bit-identical
    output.
    """
    h, w = camera.height, camera.width
    bundle = generate_rays(camera)
    n = len(bundle)
    if aabbs is None:
        live = np.ones(n, dtype=bool)
    else:
        live = rays_hit_aabbs(bundle, aabbs)
    live_idx = np.nonzero(live)[0]
    rgb = np.zeros((n, 3))
    mask = np.zeros(n)
    invd = np.zeros(n)
    if stats is not None:
        stats["rays_total"] = stats.get("rays_total", 0) + n
        stats["rays_live"] = stats.get("rays_live", 0) + int(live_idx.size)

    chunks = [live_idx[i:i + chunk] for i in range(0, live_idx.size, chunk)]

    def run(ids):
        local_stats = {} if stats is not None else None
        out = render_ray_batch(field_fn, bundle.pick(ids), ids, seed, cfg,
                               tape=False, stats=local_stats, view_dirs=view_dirs)
        return ids, out, local_stats

    if threads <= 1 or len(chunks) <= 1:
        results = [run(ids) for ids in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, chunks))
    for ids, (c_rgb, c_mask, c_invd), local_stats in results:
        rgb[ids] = c_rgb.data
        mask[ids] = c_mask.data
        invd[ids] = c_invd.data
        if stats is not None and local_stats:
            for key, val in local_stats.items():
                stats[key] = stats.get(key, 0) + val
    return RenderOutput(rgb=rgb.reshape(h, w, 3), mask=mask.reshape(h, w),
                        inv_depth=invd.reshape(h, w))
