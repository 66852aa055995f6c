"""Training losses, image metrics, and the dynamic-scene-overfitting loop.

The reconstruction objective is the mean over a ray batch of squared RGB
error plus squared mask error.  Adversarial terms follow the non-saturating
convention; the gradient penalty on real inputs is computed with a
gradient-of-output pass on the tape (no second-order machinery).  Rays culled
by the shape-prior boxes predict exact zeros, and scene targets are zero
there by construction, so the batch loss sums only the live rays and divides
by the full batch size.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import Tensor
from .diffengine import AdamState, GradStore, ParamStore, adam_step, backward
from .errors import NumericalError, ValidationError
from .kinematics import Camera, PoseConfig
from .renderer import RenderOutput, SamplingConfig, generate_rays, rays_hit_aabbs, render_image, render_ray_batch
from .triplane import triplane_l2_tensor
from .variants import Model


# ------------------------------------------------------------------ losses

def dso_loss(pred_rgb, pred_mask, target_rgb, target_mask) -> Tensor:
    """Mean over rays of ||C - C_hat||^2 + (M - M_hat)^2."""
    pred_rgb = ad.ensure(pred_rgb)
    pred_mask = ad.ensure(pred_mask)
    tr = np.asarray(target_rgb)
    tm = np.asarray(target_mask)
    if pred_rgb.data.shape != tr.shape or pred_mask.data.shape != tm.shape:
        raise ValidationError("prediction/target shapes disagree")
    diff_c = pred_rgb - Tensor(tr.astype(pred_rgb.data.dtype, copy=False))
    diff_m = pred_mask - Tensor(tm.astype(pred_mask.data.dtype, copy=False))
    per_ray = ad.sum(diff_c * diff_c, axis=1) + diff_m * diff_m
    return ad.mean(per_ray)


def bone_loss(mask, bone_image) -> Tensor:
    """Skeleton-coverage penalty: sum (1 - M)^2 B / sum B (0 when B empty)."""
    mask = ad.ensure(mask)
    b = np.asarray(bone_image, dtype=np.float64)
    if mask.data.shape != b.shape:
        raise ValidationError("mask and bone image shapes disagree")
    total = b.sum()
    if total == 0.0:
        return Tensor(np.zeros((), dtype=mask.data.dtype))
    resid = 1.0 - mask
    return ad.sum(resid * resid * Tensor(b.astype(mask.data.dtype))) * (1.0 / total)


def adversarial_losses(d_real, d_fake, eps: float = 1e-7):
    """Non-saturating GAN objectives from post-logistic scores in (0, 1).

    Returns (L_G, L_D); scores are clamped to [eps, 1-eps] so a saturated
    discriminator cannot produce log(0).
    """
    d_real = ad.clip(ad.ensure(d_real), eps, 1.0 - eps)
    d_fake = ad.clip(ad.ensure(d_fake), eps, 1.0 - eps)
    loss_g = ad.mean(ad.log(d_fake)) * -1.0
    loss_d = (ad.mean(ad.log(d_real)) + ad.mean(ad.log(1.0 - d_fake))) * -1.0
    return loss_g, loss_d


def r1_penalty(disc_fn, real_images: np.ndarray) -> float:
    """Mean squared input-gradient norm of the discriminator on real data.

    `disc_fn` maps a (B, ...) Tensor of images to (B,) scores; the penalty is
    E[||d score_i / d image_i||^2], obtained from one gradient pass with the
    images as leaves (no second-order machinery).
    """
    x = Tensor(np.asarray(real_images, dtype=np.float64).copy(), requires_grad=True)
    scores = disc_fn(x)
    if scores.requires_grad:
        ad.backward(ad.sum(scores))
    if x.grad is None:  # discriminator ignores its input
        return 0.0
    g = x.grad.reshape(x.data.shape[0], -1)
    return float(np.mean(np.sum(g * g, axis=1)))


# ----------------------------------------------------------------- metrics

def psnr(pred: np.ndarray, target: np.ndarray, cap_db: float = 99.0) -> float:
    """-10 log10(MSE) for images in [0, 1]; identical images report cap_db."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValidationError("psnr inputs must share a shape")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return cap_db
    return min(-10.0 * np.log10(mse), cap_db)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(img, kernel.shape)
    return np.einsum("hwij,ij->hw", win, kernel)


def ssim(pred: np.ndarray, target: np.ndarray, c1: float = 0.01 ** 2,
         c2: float = 0.03 ** 2) -> float:
    """Single-scale structural similarity, 11x11 Gaussian window (sigma 1.5).

    Images are (H, W) or (H, W, C) in [0, 1]; channels are averaged.  The
    window runs in valid mode, so inputs must be at least 11 pixels wide.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValidationError("ssim inputs must share a shape")
    if pred.ndim == 2:
        pred = pred[:, :, None]
        target = target[:, :, None]
    if pred.shape[0] < 11 or pred.shape[1] < 11:
        raise ValidationError("ssim needs images at least 11x11")
    kern = _gaussian_kernel()
    vals = []
    for c in range(pred.shape[2]):
        a, b = pred[:, :, c], target[:, :, c]
        mu_a = _filter_valid(a, kern)
        mu_b = _filter_valid(b, kern)
        var_a = _filter_valid(a * a, kern) - mu_a ** 2
        var_b = _filter_valid(b * b, kern) - mu_b ** 2
        cov = _filter_valid(a * b, kern) - mu_a * mu_b
        num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


# ----------------------------------------------------------------- dataset

@dataclass
class Frame:
    """One supervised view: camera, pose, normalized time, and targets."""

    camera: Camera
    pose: PoseConfig
    t: float
    rgb: np.ndarray   # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) in [0, 1]

    def __post_init__(self):
        if self.rgb.shape[:2] != self.mask.shape:
            raise ValidationError("frame rgb and mask sizes disagree")
        if np.min(self.mask) < 0.0 or np.max(self.mask) > 1.0:
            raise ValidationError("mask values must lie in [0, 1]")


@dataclass
class TrainConfig:
    ray_batch: int = 4096
    iterations: int = 5000
    lambda_bone: float = 1.0
    lambda_r1: float = 10.0
    lambda_l2: float = 1e-4
    variant: str = "enarf"
    seed: int = 0
    lr: float = 1e-3
    lr_decay: float = 0.99995
    eval_every: int = 500
    threads: int = 1
    chunk: int = 4096
    sampling: SamplingConfig = field(default_factory=SamplingConfig)

    def __post_init__(self):
        if self.ray_batch < 1:
            raise ValidationError("ray batch must be at least 1")
        if min(self.lambda_bone, self.lambda_r1, self.lambda_l2) < 0.0:
            raise ValidationError("loss weights must be nonnegative")


def evaluate_frames(model: Model, frames, sampling: SamplingConfig = SamplingConfig(),
                    seed: int = 0, threads: int = 1, chunk: int = 4096):
    """Render each frame and score PSNR/SSIM against its targets."""
    rows = []
    for fr in frames:
        with ad.no_grad():
            fn = model.field_fn(fr.pose, fr.t)
            out = render_image(fn, fr.camera, seed=seed, cfg=sampling,
                               aabbs=model.world_aabbs(fr.pose),
                               threads=threads, chunk=chunk,
                               view_dirs=model.config.use_view_dir)
        rows.append({
            "psnr": psnr(out.rgb, fr.rgb),
            "ssim": ssim(out.rgb, fr.rgb),
            "mask_mae": float(np.mean(np.abs(out.mask - fr.mask))),
        })
    agg = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]} if rows else {}
    return agg, rows


def train_dso(model: Model, train_frames, config: TrainConfig, eval_frames=(),
              adam: AdamState | None = None, log_hook=None):
    """Overfit the model to one animated scene with pose/mask supervision.

    Per iteration: pick a frame and a batch of pixels from counter-based
    streams, render those rays on the tape (the deformable variant first
    regenerates and warps its planes for the frame's time), minimize the
    reconstruction loss plus the tri-plane L2 term, and take one Adam step.
    Every `eval_every` iterations the held-out frames are rendered and
    scored.  Returns (params, metric log).
    """
    if not train_frames:
        raise ValidationError("training needs at least one frame")
    params = model.params
    if adam is None:
        adam = AdamState.for_params(params, lr=config.lr, decay=config.lr_decay)
    cfg = model.config
    bundles = [generate_rays(fr.camera) for fr in train_frames]
    flat_rgb = [fr.rgb.reshape(-1, 3) for fr in train_frames]
    flat_mask = [fr.mask.reshape(-1) for fr in train_frames]
    aabbs = [model.world_aabbs(fr.pose) for fr in train_frames]
    has_planes = cfg.variant != "baseline-narf"
    log: list[dict] = []
    t_start = time.perf_counter()

    for it in range(adam.step, config.iterations):
        fi = int(rng.randint(config.seed, rng.TAG_FRAME_PICK, 0, it, len(train_frames))[()])
        frame = train_frames[fi]
        n_pix = frame.rgb.shape[0] * frame.rgb.shape[1]
        pix = rng.randint(config.seed, rng.TAG_PIXEL_PICK, it,
                          np.arange(config.ray_batch), n_pix)
        bundle = bundles[fi].pick(pix)
        live = rays_hit_aabbs(bundle, aabbs[fi])
        live_local = np.nonzero(live)[0]
        ray_seed = int(rng.hash_u64(config.seed, 0x7E, 0, it)[()])

        field_fn = model.field_fn(frame.pose, frame.t)
        if live_local.size:
            rgb, mask, _ = render_ray_batch(
                field_fn, bundle.pick(live_local), pix[live_local], ray_seed,
                config.sampling, tape=True, view_dirs=cfg.use_view_dir)
            tr = flat_rgb[fi][pix[live_local]]
            tm = flat_mask[fi][pix[live_local]]
            diff_c = rgb - Tensor(tr.astype(rgb.data.dtype))
            diff_m = mask - Tensor(tm.astype(mask.data.dtype))
            per_ray = ad.sum(diff_c * diff_c, axis=1) + diff_m * diff_m
            # culled rays predict exact zeros and their targets are zero, so
            # they add nothing to the sum; the mean still spans the batch
            recon = ad.sum(per_ray) * (1.0 / config.ray_batch)
        else:
            recon = Tensor(np.zeros((), dtype=params.dtype))
        loss = recon
        if has_planes and config.lambda_l2 > 0.0:
            planes = [params.tensor(f"planes.feat{pl}") for pl in range(3)]
            loss = loss + triplane_l2_tensor(planes) * config.lambda_l2

        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise NumericalError(f"non-finite loss {loss_val} at iteration {it}")
        if loss.requires_grad:
            grads = backward(loss, params)
        else:
            grads = GradStore.zeros_like(params)
        adam_step(params, grads, adam)

        if (it + 1) % config.eval_every == 0 or (it + 1) == config.iterations:
            row = {"iteration": it + 1, "loss": loss_val,
                   "seconds": time.perf_counter() - t_start}
            if eval_frames:
                agg, _ = evaluate_frames(model, eval_frames, config.sampling,
                                         seed=config.seed, threads=config.threads,
                                         chunk=config.chunk)
                row.update(agg)
            log.append(row)
            if log_hook is not None:
                log_hook(row)
    return params, log
