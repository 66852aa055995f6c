"""Synthetic articulated scenes with analytic ground truth, the analytic
FLOP/memory accountant, and benchmark comparisons across model variants.

FLOP convention (documented so numbers are comparable across machines):
one multiply-add counts 2, transcendentals (sin, cos, exp) count 8, plain
add/sub/mul/compare count 1, logistic/softplus count 10.  Counts are
analytic per-operation formulas multiplied by sample counts measured on an
actual render of the same scene/camera/sampling configuration, so the cube
prior's culling enters through the measured rates rather than guesses.
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ValidationError
from .kinematics import (Camera, CanonicalPose, PoseConfig, RigidTransform, Skeleton,
                         forward_kinematics, look_at_camera)
from .objectives import Frame
from .renderer import RenderOutput, SamplingConfig, composite, generate_rays, rays_hit_aabbs, render_image
from .triplane import DEFAULT_CUBE_HALF
from .variants import Model, ModelConfig, VARIANTS


# ------------------------------------------------------------------ scenes

@dataclass
class SyntheticScene:
    """Capsule-limbed articulated object with a closed-form density field.

    Each part is a capsule of the part's length along its bone axis; density
    is a large constant inside any capsule and zero outside, so per-ray
    transmittance has a closed form through chord lengths.  `radius_wobble`
    scales every radius by (1 + wobble * sin(2 pi t)) to create time-varying
    non-rigid geometry.
    """

    name: str
    skeleton: Skeleton
    lengths: np.ndarray
    radii: np.ndarray
    albedos: np.ndarray
    base_angles: np.ndarray
    anim_amp: np.ndarray
    anim_freq: np.ndarray
    anim_phase: np.ndarray
    root: RigidTransform
    radius_wobble: float = 0.0
    density: float = 40.0
    cube_half: float = DEFAULT_CUBE_HALF

    def __post_init__(self):
        k = self.skeleton.k
        self.lengths = np.asarray(self.lengths, dtype=np.float64).reshape(k)
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(k)
        self.albedos = np.asarray(self.albedos, dtype=np.float64).reshape(k, 3)
        self.base_angles = np.asarray(self.base_angles, dtype=np.float64).reshape(k, 3)
        self.anim_amp = np.asarray(self.anim_amp, dtype=np.float64).reshape(k, 3)
        self.anim_freq = np.asarray(self.anim_freq, dtype=np.float64).reshape(k)
        self.anim_phase = np.asarray(self.anim_phase, dtype=np.float64).reshape(k, 3)
        if np.any(self.radii >= self.cube_half):
            raise ValidationError("capsule radii must stay below the cube prior half-width")
        if np.any(self.radii <= 0.0):
            raise ValidationError("capsule radii must be positive")

    @property
    def k(self) -> int:
        return self.skeleton.k

    def pose_at(self, t: float) -> PoseConfig:
        angles = (self.base_angles
                  + self.anim_amp * np.sin(2.0 * np.pi * self.anim_freq[:, None] * t
                                           + self.anim_phase))
        return forward_kinematics(self.skeleton, angles, self.lengths, root=self.root)

    def radii_at(self, t: float) -> np.ndarray:
        return self.radii * (1.0 + self.radius_wobble * np.sin(2.0 * np.pi * t))

    def canonical(self) -> CanonicalPose:
        rest = forward_kinematics(self.skeleton, self.base_angles, self.lengths,
                                  root=self.root)
        return CanonicalPose(rest.parts)


def make_synthetic_scene(spec: str | dict, seed: int = 0) -> SyntheticScene:
    """Deterministic scene from a preset name or a scene dict plus seed.

    Bundled presets: "capsule2" (two-part chain, distinct warm/cool albedos),
    "capsule3-chain", "humanoid9" (nine-part stick figure), and
    "capsuleN-chain" for any N (e.g. "capsule19-chain").
    """
    if isinstance(spec, dict):
        return _scene_from_dict(spec)
    g = np.random.Generator(np.random.Philox(seed))
    if spec == "capsule2":
        k = 2
        return SyntheticScene(
            name="capsule2",
            skeleton=Skeleton((-1, 0)),
            lengths=[0.4, 0.4],
            radii=[0.13, 0.13],
            albedos=[[0.85, 0.25, 0.2], [0.2, 0.4, 0.9]],
            base_angles=np.zeros((k, 3)),
            anim_amp=[[0, 0, 0], [0, 0, 0.6]],
            anim_freq=[0.0, 1.25],
            anim_phase=np.zeros((k, 3)),
            root=RigidTransform(np.eye(3), [-0.4, 0.0, 0.0]),
        )
    if spec == "capsule3-chain" or (spec.startswith("capsule") and spec.endswith("-chain")):
        k = int(spec[len("capsule"):-len("-chain")])
        if k < 2:
            raise ValidationError("chain preset needs at least 2 parts")
        length = min(0.4, 1.6 / k)
        amp = np.zeros((k, 3))
        amp[1:, 2] = 0.35
        phase = np.zeros((k, 3))
        phase[1:, 2] = np.linspace(0.0, np.pi, k - 1) if k > 1 else 0.0
        freq = np.full(k, 1.25)
        freq[0] = 0.0
        albedos = 0.25 + 0.65 * g.uniform(size=(k, 3))
        base = np.zeros((k, 3))
        base[1:, 2] = 0.25  # gentle arc so the chain is not a straight rod
        return SyntheticScene(
            name=spec,
            skeleton=Skeleton(tuple([-1] + list(range(k - 1)))),
            lengths=np.full(k, length),
            radii=np.full(k, min(0.11, length * 0.3)),
            albedos=albedos,
            base_angles=base,
            anim_amp=amp,
            anim_freq=freq,
            anim_phase=phase,
            root=RigidTransform(np.eye(3), [-0.5 * k * length, 0.0, 0.0]),
        )
    if spec == "humanoid9":
        # pelvis(0), torso(1), head(2), upper arms(3,4), forearms(5,6), legs(7,8)
        parent = (-1, 0, 1, 1, 1, 3, 4, 0, 0)
        lengths = [0.22, 0.34, 0.18, 0.24, 0.24, 0.22, 0.22, 0.38, 0.38]
        radii = [0.09, 0.09, 0.08, 0.055, 0.055, 0.05, 0.05, 0.065, 0.065]
        base = np.zeros((9, 3))
        base[1] = (0.0, 0.0, 0.0)
        base[2] = (0.0, 0.0, 0.0)
        base[3] = (0.0, 0.0, +1.9)   # arms out and down
        base[4] = (0.0, 0.0, -1.9)
        base[5] = (0.0, 0.0, +0.5)
        base[6] = (0.0, 0.0, -0.5)
        base[7] = (0.0, 0.0, +2.6)   # legs
        base[8] = (0.0, 0.0, -2.6)
        amp = np.zeros((9, 3))
        amp[3:7, 2] = 0.3
        amp[7:, 2] = 0.2
        freq = np.full(9, 1.25)
        freq[0] = 0.0
        albedos = 0.25 + 0.65 * g.uniform(size=(9, 3))
        return SyntheticScene(
            name="humanoid9",
            skeleton=Skeleton(parent),
            lengths=lengths,
            radii=radii,
            albedos=albedos,
            base_angles=base,
            anim_amp=amp,
            anim_freq=freq,
            anim_phase=np.zeros((9, 3)),
            # stand the figure up: rest chain grows along +z
            root=RigidTransform(
                np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]]).T,
                [0.0, 0.0, -0.45]),
        )
    raise ValidationError(f"unknown scene preset {spec!r}")


def scene_to_dict(scene: SyntheticScene) -> dict:
    return {
        "name": scene.name,
        "parent": list(scene.skeleton.parent),
        "lengths": scene.lengths.tolist(),
        "radii": scene.radii.tolist(),
        "albedos": scene.albedos.tolist(),
        "base_angles": scene.base_angles.tolist(),
        "anim_amp": scene.anim_amp.tolist(),
        "anim_freq": scene.anim_freq.tolist(),
        "anim_phase": scene.anim_phase.tolist(),
        "root_rotation": scene.root.rotation.reshape(9).tolist(),
        "root_translation": scene.root.translation.tolist(),
        "radius_wobble": scene.radius_wobble,
        "density": scene.density,
        "cube_half": scene.cube_half,
    }


def _scene_from_dict(d: dict) -> SyntheticScene:
    return SyntheticScene(
        name=d.get("name", "custom"),
        skeleton=Skeleton(tuple(d["parent"])),
        lengths=d["lengths"],
        radii=d["radii"],
        albedos=d["albedos"],
        base_angles=d["base_angles"],
        anim_amp=d["anim_amp"],
        anim_freq=d["anim_freq"],
        anim_phase=d["anim_phase"],
        root=RigidTransform(np.asarray(d["root_rotation"]).reshape(3, 3),
                            d["root_translation"]),
        radius_wobble=float(d.get("radius_wobble", 0.0)),
        density=float(d.get("density", 40.0)),
        cube_half=float(d.get("cube_half", DEFAULT_CUBE_HALF)),
    )


# ----------------------------------------------------------- oracle render

def capsule_field(scene: SyntheticScene, pose: PoseConfig, radii: np.ndarray):
    """Analytic density/color closure over world points."""
    p0 = pose.translations()
    axes = np.stack([p.transform.rotation[:, 0] for p in pose.parts])
    p1 = p0 + axes * scene.lengths[:, None]

    def fn(pts: np.ndarray, dirs, stats):
        n = pts.shape[0]
        best = np.full(n, np.inf)
        color = np.zeros((n, 3))
        inside = np.zeros(n, dtype=bool)
        for j in range(scene.k):
            d = p1[j] - p0[j]
            denom = max(float(d @ d), 1e-30)
            s = np.clip(((pts - p0[j]) @ d) / denom, 0.0, 1.0)
            closest = p0[j] + s[:, None] * d
            dist = np.linalg.norm(pts - closest, axis=1) - radii[j]
            hit = dist <= 0.0
            take = hit & (dist < best)
            best = np.where(take, dist, best)
            color[take] = scene.albedos[j]
            inside |= hit
        sigma = np.where(inside, scene.density, 0.0)
        return ad.Tensor(sigma), ad.Tensor(color)

    return fn


def capsule_aabbs(scene: SyntheticScene, pose: PoseConfig, radii: np.ndarray) -> np.ndarray:
    p0 = pose.translations()
    axes = np.stack([p.transform.rotation[:, 0] for p in pose.parts])
    p1 = p0 + axes * scene.lengths[:, None]
    lo = np.minimum(p0, p1) - radii[:, None]
    hi = np.maximum(p0, p1) + radii[:, None]
    return np.stack([lo, hi], axis=1)


def oracle_render(scene: SyntheticScene, pose: PoseConfig, camera: Camera,
                  samples_per_ray: int = 512, t: float | None = None,
                  chunk: int = 8192) -> RenderOutput:
    """Deterministic analytic render sharing the pipeline quadrature.

    Uniform midpoint sampling (no jitter) of the closed-form capsule density,
    composited by the same `composite` the learned renderer uses.  Serves as
    training data and as the rendering oracle.
    """
    radii = scene.radii_at(t) if t is not None else scene.radii
    fn = capsule_field(scene, pose, radii)
    bundle = generate_rays(camera)
    live = rays_hit_aabbs(bundle, capsule_aabbs(scene, pose, radii))
    n = len(bundle)
    rgb = np.zeros((n, 3))
    mask = np.zeros(n)
    invd = np.zeros(n)
    live_idx = np.nonzero(live)[0]
    for lo in range(0, live_idx.size, chunk):
        ids = live_idx[lo:lo + chunk]
        sub = bundle.pick(ids)
        frac = (np.arange(samples_per_ray) + 0.5) / samples_per_ray
        ts = sub.t_near[:, None] + (sub.t_far - sub.t_near)[:, None] * frac[None, :]
        pts = (sub.origins[:, None, :] + ts[:, :, None] * sub.directions[:, None, :])
        with ad.no_grad():
            sigma, color = fn(pts.reshape(-1, 3), None, None)
            c_rgb, c_mask, c_invd = composite(
                ts, ad.reshape(sigma, ts.shape), ad.reshape(color, (*ts.shape, 3)),
                sub.t_far)
        rgb[ids] = c_rgb.data
        mask[ids] = c_mask.data
        invd[ids] = c_invd.data
    h, w = camera.height, camera.width
    return RenderOutput(rgb.reshape(h, w, 3), mask.reshape(h, w), invd.reshape(h, w))


def make_camera_ring(n: int, target=(0.0, 0.0, 0.0), distance: float = 1.9,
                     height: float = 0.55, width: int = 64, height_px: int | None = None,
                     focal: float | None = None, near: float = 0.8, far: float = 3.4):
    """n cameras on a circle around the target, all looking at it."""
    hpx = height_px if height_px is not None else width
    f = focal if focal is not None else 1.4 * width
    cams = []
    for i in range(n):
        ang = 2.0 * np.pi * i / n
        eye = np.asarray(target) + np.array([distance * np.cos(ang),
                                             distance * np.sin(ang), height])
        cams.append(look_at_camera(eye, target, width, hpx, f, near, far))
    return cams


def build_frames(scene: SyntheticScene, cameras, times, samples_per_ray: int = 512) -> list:
    """Oracle-rendered supervision for every (camera, time) pair."""
    frames = []
    for t in times:
        pose = scene.pose_at(t)
        for cam in cameras:
            out = oracle_render(scene, pose, cam, samples_per_ray, t=t)
            frames.append(Frame(camera=cam, pose=pose, t=float(t),
                                rgb=out.rgb, mask=out.mask))
    return frames


def dataset_split(scene: SyntheticScene, n_views: int = 5, n_times: int = 10,
                  width: int = 64, samples_per_ray: int = 512,
                  train_views: int = 4, train_frac: float = 0.8):
    """Standard protocol: `train_views` cameras and the first `train_frac`
    of the timeline train; the held-out view and the tail times test."""
    cams = make_camera_ring(n_views, width=width)
    times = np.linspace(0.0, 1.0, n_times)
    n_train_t = int(np.ceil(train_frac * n_times))
    train = build_frames(scene, cams[:train_views], times[:n_train_t], samples_per_ray)
    test_view = build_frames(scene, cams[train_views:], times[:n_train_t], samples_per_ray)
    test_pose = build_frames(scene, cams[:train_views], times[n_train_t:], samples_per_ray)
    return train, test_view, test_pose


# ------------------------------------------------------------ FLOP counter

FLOPS_MAC = 2
FLOPS_TRANSCENDENTAL = 8
FLOPS_ACTIVATION = 10  # logistic / softplus: exp plus a couple of cheap ops


def _pe_cost(dims: int, freqs: int) -> int:
    return dims * freqs * (1 + 2 * FLOPS_TRANSCENDENTAL)


def _bilinear_cost(channels: int) -> int:
    return 12 + channels * 4 * FLOPS_MAC


def _decoder_cost(in_dim: int, hidden: int) -> dict:
    mac = (in_dim * hidden + hidden * 4) * FLOPS_MAC
    act = hidden + hidden + 4 + 3 * FLOPS_ACTIVATION + FLOPS_ACTIVATION
    return {"decoder_mac_flops": mac, "decoder_act_flops": act}


def _selector_mlp_cost(enc: int) -> int:
    return (enc * 10 + 10) * FLOPS_MAC + 11 + 10 + FLOPS_ACTIVATION


_TRANSFORM = 9 * FLOPS_MAC + 3
_CUBE_TEST = 9
_COMPOSITE_PER_SAMPLE = 28
_IMPORTANCE_PER_SAMPLE = 21
_RAY_SETUP = 25


def render_stats(model: Model, pose: PoseConfig, camera: Camera,
                 sampling: SamplingConfig = SamplingConfig(), seed: int = 0,
                 time_t: float = 0.0, chunk: int = 2048) -> dict:
    """One instrumented render; the measured counts drive the FLOP counter.

    Culling rates are geometric (shape-prior cubes against the actual sample
    distribution), so one measurement serves every variant at the same
    scene/camera/sampling configuration.
    """
    stats: dict = {}
    with ad.no_grad():
        fn = model.field_fn(pose, time_t)
        render_image(fn, camera, seed=seed, cfg=sampling,
                     aabbs=model.world_aabbs(pose), chunk=chunk, stats=stats)
    return stats


def count_flops(variant: str, stats: dict, config: ModelConfig,
                sampling: SamplingConfig = SamplingConfig()):
    """Analytic per-image FLOPs for a variant given measured render stats.

    Deterministic: same stats in, same count out.  The breakdown maps each
    pipeline stage to its share.
    """
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}")
    enc = config.posenc.out_dim(3)
    c = config.feature_channels
    k = config.k
    pts = stats["points"]            # field evaluations actually run
    pairs = stats["part_pairs"]      # (point, part) pairs inside the prior
    valid = stats["valid_points"]
    rays = stats["rays_live"]
    dec = _decoder_cost(config.decoder_in_dim(), config.hidden)
    decoder_per_pt = dec["decoder_mac_flops"] + dec["decoder_act_flops"]

    breakdown: dict = {"decoder_mac_per_point": dec["decoder_mac_flops"],
                       "decoder_act_per_point": dec["decoder_act_flops"]}
    if variant == "baseline-narf":
        per_pair = (_TRANSFORM + _CUBE_TEST + _TRANSFORM + _pe_cost(3, config.posenc.frequencies)
                    + _selector_mlp_cost(enc) + enc + enc * c * FLOPS_MAC)
        breakdown["feature_flops"] = pts * k * per_pair
        breakdown["decoder_flops"] = pts * decoder_per_pt
    elif variant in ("enarf", "d-enarf", "no-selector", "mlp-selector"):
        cube = pts * k * (_TRANSFORM + _CUBE_TEST)
        feat = pairs * (3 * _bilinear_cost(c) + c * FLOPS_MAC + c)
        if variant in ("enarf", "d-enarf"):
            sel = pairs * (3 * (_bilinear_cost(1) + FLOPS_ACTIVATION) + 2)
        elif variant == "no-selector":
            sel = pairs * 1
        else:
            sel = pairs * (_TRANSFORM + _pe_cost(3, config.posenc.frequencies)
                           + _selector_mlp_cost(enc))
        breakdown["cube_test_flops"] = cube
        breakdown["feature_flops"] = feat + sel
        breakdown["decoder_flops"] = valid * decoder_per_pt
        if variant == "d-enarf":
            res2 = config.resolution ** 2
            g2 = config.deform_grid ** 2
            d_in = (2 * config.posenc.frequencies + 1) + 9 * k
            warp = 3 * res2 * (_bilinear_cost(c) + 2)
            gen = ((d_in * config.deform_hidden + config.deform_hidden * 6 * g2) * FLOPS_MAC
                   + 3 * res2 * g2 * 2 * FLOPS_MAC)
            breakdown["deform_flops"] = warp + gen
    total_samples = rays * sampling.total
    breakdown["compositing_flops"] = (total_samples + rays * sampling.coarse) * _COMPOSITE_PER_SAMPLE
    breakdown["sampling_flops"] = rays * (sampling.fine * _IMPORTANCE_PER_SAMPLE + _RAY_SETUP)
    flops = sum(v for kk, v in breakdown.items() if kk.endswith("_flops"))
    return int(flops), breakdown


@dataclass
class CostReport:
    variant: str
    flops: int
    seconds: float
    peak_bytes: int
    param_bytes: int
    breakdown: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"variant": self.variant, "flops": self.flops,
                "seconds": self.seconds, "peak_bytes": self.peak_bytes,
                "param_bytes": self.param_bytes}


def benchmark_compare(variants, scene: SyntheticScene, camera: Camera,
                      repetitions: int = 3, sampling: SamplingConfig = SamplingConfig(),
                      seed: int = 0, threads: int = 1, pose_time: float = 0.0,
                      model_seed: int = 0, resolution: int = 64,
                      chunk: int = 1024) -> list:
    """Render-cost comparison at one matched configuration.

    Wall-clock is the median over `repetitions` after one warmup; FLOPs come
    from the analytic counter driven by one shared stats render; peak memory
    is the traced allocator high-water mark of a dedicated instrumented
    render (kept separate so tracing overhead never pollutes timings).
    """
    pose = scene.pose_at(pose_time)
    canon = scene.canonical()
    reports = []
    # culling statistics are geometric; measure once with the tri-plane model
    stats_model = Model(ModelConfig(variant="enarf", k=scene.k, resolution=resolution,
                                    cube_half=scene.cube_half), canon, seed=model_seed)
    shared_stats = render_stats(stats_model, pose, camera, sampling, seed=seed,
                                time_t=pose_time, chunk=chunk)
    for variant in variants:
        cfg = ModelConfig(variant=variant, k=scene.k, resolution=resolution,
                          cube_half=scene.cube_half)
        model = Model(cfg, canon, seed=model_seed)
        with ad.no_grad():
            fn = model.field_fn(pose, pose_time)
        aabbs = model.world_aabbs(pose)

        def one_render():
            return render_image(fn, camera, seed=seed, cfg=sampling,
                                aabbs=aabbs, threads=threads, chunk=chunk)

        one_render()  # warmup
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            one_render()
            times.append(time.perf_counter() - t0)
        flops, breakdown = count_flops(variant, shared_stats, cfg, sampling)
        tracemalloc.start()
        one_render()
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        reports.append(CostReport(
            variant=variant, flops=flops, seconds=float(np.median(times)),
            peak_bytes=int(peak), param_bytes=int(model.params.data.nbytes),
            breakdown=breakdown))
    return reports
