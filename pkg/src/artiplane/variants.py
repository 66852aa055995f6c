"""Model variants: tri-plane fields with three selector flavors, the
deformable extension, and the split-network dense baseline.

Each variant wires its parameter slices into a ParamStore and exposes
``field_fn(pose, time) -> callable`` for the renderer.  The tri-plane family
evaluates only points that pass the cube shape prior (gather/accumulate);
the dense baseline evaluates every sample on every live ray, part by part,
which is exactly the cost profile the benchmark is meant to expose.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import Tensor
from .decoder import MlpDecoder, PosEncConfig, decode_batch, positional_encode, _t
from .diffengine import ParamStore
from .errors import ValidationError
from .kinematics import CanonicalPose, PoseConfig, to_local
from .triplane import (DEFAULT_CUBE_HALF, FEATURE_CHANNELS, PlaneTensors,
                       TriPlaneField, blend_parts, warp_plane_tensor)

VARIANTS = ("enarf", "d-enarf", "baseline-narf", "no-selector", "mlp-selector")

_TRIPLANE_FAMILY = ("enarf", "d-enarf", "no-selector", "mlp-selector")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "enarf"
    k: int = 2
    resolution: int = 64
    extent: float = 1.0
    cube_half: float = DEFAULT_CUBE_HALF
    feature_channels: int = FEATURE_CHANNELS
    hidden: int = 64
    posenc: PosEncConfig = field(default_factory=PosEncConfig)
    use_view_dir: bool = False
    normalize_length: bool = False
    deform_grid: int = 8
    deform_hidden: int = 64
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.k < 1:
            raise ValidationError("need at least one part")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def decoder_in_dim(self) -> int:
        base = self.feature_channels
        if self.use_view_dir:
            base += self.posenc.out_dim(3)
        return base


def _bilinear_upsample_matrix(low: int, high: int) -> np.ndarray:
    """(high^2, low^2) matrix resampling a low-res grid onto the full grid."""
    if low == 1:
        return np.ones((high * high, 1))
    pos = np.arange(high) * (low - 1) / (high - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, low - 1)
    f = pos - i0
    rows = np.zeros((high, low))
    rows[np.arange(high), i0] += 1.0 - f
    rows[np.arange(high), i1] += f
    return np.einsum("yi,xj->yxij", rows, rows).reshape(high * high, low * low)


class Model:
    """A variant plus its parameters and canonical frame."""

    def __init__(self, config: ModelConfig, canon: CanonicalPose, seed: int = 0):
        if canon.k != config.k:
            raise ValidationError("canonical pose part count disagrees with config")
        self.config = config
        self.canon = canon
        self.params = ParamStore(dtype=config.np_dtype)
        self._build_slices(seed)
        self.params.freeze()

    # ------------------------------------------------------------ wiring

    def _build_slices(self, seed: int):
        cfg = self.config
        g = np.random.Generator(np.random.Philox(seed))
        res2 = cfg.resolution ** 2
        enc = cfg.posenc.out_dim(3)

        if cfg.variant in _TRIPLANE_FAMILY:
            for pl in range(3):
                self.params.register(f"planes.feat{pl}",
                                     g.uniform(-0.1, 0.1, (res2, cfg.feature_channels)))
            if cfg.variant in ("enarf", "d-enarf"):
                for pl in range(3):
                    self.params.register(f"planes.prob{pl}", np.zeros((res2, cfg.k)))
        if cfg.variant in ("mlp-selector", "baseline-narf"):
            lim1 = np.sqrt(6.0 / enc)
            lim2 = np.sqrt(6.0 / 10)
            for j in range(cfg.k):
                self.params.register(f"sel{j}.w1", g.uniform(-lim1, lim1, (10, enc)),
                                     eq_mult=1.0 / np.sqrt(enc))
                self.params.register(f"sel{j}.b1", np.zeros(10))
                self.params.register(f"sel{j}.w2", g.uniform(-lim2, lim2, (1, 10)),
                                     eq_mult=1.0 / np.sqrt(10))
                self.params.register(f"sel{j}.b2", np.zeros(1))
        if cfg.variant == "baseline-narf":
            lim = np.sqrt(6.0 / (cfg.k * enc))
            self.params.register("baseline.w",
                                 g.uniform(-lim, lim, (cfg.feature_channels, cfg.k * enc)),
                                 eq_mult=1.0 / np.sqrt(cfg.k * enc))
        if cfg.variant == "d-enarf":
            d_in = (2 * cfg.posenc.frequencies + 1) + 9 * cfg.k
            lim = np.sqrt(6.0 / d_in)
            self.params.register("deform.w1", g.uniform(-lim, lim, (cfg.deform_hidden, d_in)),
                                 eq_mult=1.0 / np.sqrt(d_in))
            self.params.register("deform.b1", np.zeros(cfg.deform_hidden))
            # zero-initialized head: the deformation starts exactly at zero
            self.params.register("deform.w2",
                                 np.zeros((3 * 2 * cfg.deform_grid ** 2, cfg.deform_hidden)),
                                 eq_mult=1.0 / np.sqrt(cfg.deform_hidden))
            self.params.register("deform.b2", np.zeros(3 * 2 * cfg.deform_grid ** 2))
            self._upsample = _bilinear_upsample_matrix(cfg.deform_grid, cfg.resolution
                                                       ).astype(cfg.np_dtype)

        in_dim = cfg.decoder_in_dim()
        lim1 = np.sqrt(6.0 / in_dim)
        lim2 = np.sqrt(6.0 / cfg.hidden)
        self.params.register("decoder.w1", g.uniform(-lim1, lim1, (cfg.hidden, in_dim)),
                             eq_mult=1.0 / np.sqrt(in_dim))
        self.params.register("decoder.b1", np.zeros(cfg.hidden))
        self.params.register("decoder.w2", g.uniform(-lim2, lim2, (4, cfg.hidden)),
                             eq_mult=1.0 / np.sqrt(cfg.hidden))
        self.params.register("decoder.b2", np.zeros(4))

    # ---------------------------------------------------------- components

    def decoder(self) -> MlpDecoder:
        p = self.params
        return MlpDecoder(w1=p.tensor("decoder.w1"), b1=p.tensor("decoder.b1"),
                          w2=p.tensor("decoder.w2"), b2=p.tensor("decoder.b2"))

    def plane_tensors(self) -> PlaneTensors:
        cfg = self.config
        feats = [self.params.tensor(f"planes.feat{pl}") for pl in range(3)]
        if cfg.variant in ("enarf", "d-enarf"):
            probs = [self.params.tensor(f"planes.prob{pl}") for pl in range(3)]
        else:
            probs = None
        return PlaneTensors(feats, probs, cfg.resolution, cfg.extent, cfg.cube_half)

    def as_triplane_field(self) -> TriPlaneField:
        """Copy of the current plane parameters in grid layout."""
        cfg = self.config
        if cfg.variant not in _TRIPLANE_FAMILY:
            raise ValidationError("baseline variant has no tri-plane field")
        res = cfg.resolution
        feats = np.stack([
            self.params.get(f"planes.feat{pl}").reshape(res, res, -1) for pl in range(3)
        ]).astype(np.float64)
        if cfg.variant in ("enarf", "d-enarf"):
            probs = np.stack([
                self.params.get(f"planes.prob{pl}").reshape(res, res, -1) for pl in range(3)
            ]).astype(np.float64)
        else:
            probs = np.zeros((3, res, res, cfg.k))
        return TriPlaneField(features=feats, prob_logits=probs, extent=cfg.extent,
                             cube_half=cfg.cube_half)

    def _mlp_selector_fn(self, pose: PoseConfig):
        cfg = self.config
        p = self.params

        def fn(pts: np.ndarray, j: int) -> Tensor:
            xl = to_local(pts, pose.parts[j].transform)
            enc = positional_encode(xl, cfg.posenc).astype(cfg.np_dtype)
            h = ad.linear(Tensor(enc), p.tensor(f"sel{j}.w1"), p.tensor(f"sel{j}.b1"),
                          relu_act=True)
            return ad.sigmoid(ad.linear(h, p.tensor(f"sel{j}.w2"), p.tensor(f"sel{j}.b2")))

        return fn

    def deformation_offsets(self, time_t: float, pose: PoseConfig):
        """Per-plane texel offsets (ox, oy Tensors) from (time, part rotations)."""
        cfg = self.config
        p = self.params
        enc_t = positional_encode(np.array([time_t]), replace(cfg.posenc, include_input=True))
        rots = pose.rotations().reshape(-1)
        inp = np.concatenate([enc_t.ravel(), rots]).astype(cfg.np_dtype)[None, :]
        h = ad.linear(Tensor(inp), p.tensor("deform.w1"), p.tensor("deform.b1"), relu_act=True)
        out = ad.linear(h, p.tensor("deform.w2"), p.tensor("deform.b2"))
        g2 = cfg.deform_grid ** 2
        low = ad.reshape(out, (3, g2, 2))
        scale = 0.5 * (cfg.resolution - 1)  # uv offsets -> texel offsets
        up = Tensor(self._upsample)
        planes = []
        for pl in range(3):
            hi = ad.matmul(up, low[pl])      # (res^2, 2)
            planes.append((hi[:, 0] * scale, hi[:, 1] * scale))
        return planes

    def warped_planes(self, time_t: float, pose: PoseConfig) -> PlaneTensors:
        base = self.plane_tensors()
        offs = self.deformation_offsets(time_t, pose)
        feats = []
        for pl in range(3):
            ox, oy = offs[pl]
            feats.append(warp_plane_tensor(base.features[pl], ox, oy, base.resolution))
        return PlaneTensors(feats, base.probs, base.resolution, base.extent, base.cube_half)

    # ------------------------------------------------------------- fields

    def field_fn(self, pose: PoseConfig, time_t: float = 0.0):
        """Build the per-frame point-evaluation closure for the renderer."""
        cfg = self.config
        if pose.k != cfg.k:
            raise ValidationError("pose part count disagrees with the model")
        if cfg.variant == "baseline-narf":
            return self._baseline_field(pose)
        if cfg.variant == "d-enarf":
            planes = self.warped_planes(time_t, pose)
        else:
            planes = self.plane_tensors()
        selector = {"enarf": "triplane", "d-enarf": "triplane",
                    "no-selector": "uniform", "mlp-selector": "mlp"}[cfg.variant]
        selector_fn = self._mlp_selector_fn(pose) if selector == "mlp" else None
        dec = self.decoder()

        def fn(pts: np.ndarray, dirs, stats):
            n = pts.shape[0]
            f, valid_idx = blend_parts(planes, pts, pose, self.canon,
                                       normalize_length=cfg.normalize_length,
                                       selector=selector, selector_fn=selector_fn,
                                       stats=stats)
            dtype = cfg.np_dtype
            if f is None:
                zero_sig = Tensor(np.zeros(n, dtype=dtype))
                zero_col = Tensor(np.zeros((n, 3), dtype=dtype))
                return zero_sig, zero_col
            if cfg.use_view_dir:
                enc = positional_encode(dirs[valid_idx], cfg.posenc).astype(dtype)
                f = ad.concatenate([f, Tensor(enc)], axis=1)
            color_v, sigma_v = decode_batch(f, dec)
            if stats is not None:
                stats["decoded_points"] = stats.get("decoded_points", 0) + int(valid_idx.size)
            sigma = ad.index_add(n, valid_idx, sigma_v)
            color = ad.index_add(n, valid_idx, color_v)
            return sigma, color

        return fn

    def _baseline_field(self, pose: PoseConfig):
        """Dense split-network path: every point, every part, full-width matmul."""
        cfg = self.config
        p = self.params
        dec = self.decoder()
        dtype = cfg.np_dtype
        from .kinematics import canonical_maps
        mats, offs = canonical_maps(pose, self.canon, cfg.normalize_length)

        def fn(pts: np.ndarray, dirs, stats):
            n = pts.shape[0]
            masked = []
            any_inside = np.zeros(n, dtype=bool)
            for j in range(cfg.k):
                xl = to_local(pts, pose.parts[j].transform)
                inside = _kernels.affine_cube_mask(pts, mats[j], offs[j],
                                                   self.canon.centers[j], cfg.cube_half)
                any_inside |= inside
                enc = positional_encode(xl, cfg.posenc).astype(dtype)
                h = ad.linear(Tensor(enc), p.tensor(f"sel{j}.w1"),
                              p.tensor(f"sel{j}.b1"), relu_act=True)
                logit = ad.linear(h, p.tensor(f"sel{j}.w2"), p.tensor(f"sel{j}.b2"))
                pj = ad.sigmoid(logit) * Tensor(inside[:, None].astype(dtype))
                masked.append(pj * Tensor(enc))
            if stats is not None:
                stats["points"] = stats.get("points", 0) + n
                stats["part_pairs"] = stats.get("part_pairs", 0) + n * cfg.k
                stats["valid_points"] = stats.get("valid_points", 0) + int(any_inside.sum())
                stats["decoded_points"] = stats.get("decoded_points", 0) + n
            f = ad.matmul(ad.concatenate(masked, axis=1), _t(p.tensor("baseline.w")))
            if cfg.use_view_dir:
                enc_d = positional_encode(dirs, cfg.posenc).astype(dtype)
                f = ad.concatenate([f, Tensor(enc_d)], axis=1)
            color, sigma = decode_batch(f, dec)
            gate = Tensor(any_inside.astype(dtype))
            return sigma * gate, color * ad.reshape(gate, (n, 1))

        return fn

    # ------------------------------------------------------------ culling

    def world_aabbs(self, pose: PoseConfig) -> np.ndarray:
        """Conservative world boxes of each part's canonical prior cube."""
        cfg = self.config
        boxes = np.empty((cfg.k, 2, 3))
        corners_c = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                             dtype=np.float64) * cfg.cube_half
        for j in range(cfg.k):
            cp = self.canon.parts[j]
            pp = pose.parts[j]
            pts_c = self.canon.centers[j] + corners_c
            xl = (pts_c - cp.transform.translation) @ cp.transform.rotation
            if cfg.normalize_length:
                xl = xl * (pp.length / cp.length)
            w = xl @ pp.transform.rotation.T + pp.transform.translation
            boxes[j, 0] = w.min(axis=0)
            boxes[j, 1] = w.max(axis=0)
        return boxes

    # -------------------------------------------------------- persistence

    def checkpoint_meta(self) -> dict:
        cfg = self.config
        from .io import canonical_to_dict
        return {
            "variant": cfg.variant,
            "k": cfg.k,
            "resolution": cfg.resolution,
            "extent": cfg.extent,
            "cube_half": cfg.cube_half,
            "feature_channels": cfg.feature_channels,
            "prob_channels": cfg.k,
            "hidden": cfg.hidden,
            "posenc_frequencies": cfg.posenc.frequencies,
            "use_view_dir": cfg.use_view_dir,
            "normalize_length": cfg.normalize_length,
            "deform_grid": cfg.deform_grid,
            "deform_hidden": cfg.deform_hidden,
            "dtype": cfg.dtype,
            "canonical": canonical_to_dict(self.canon),
        }

    def save(self, path, adam=None):
        """Write parameters (and optimizer state for exact resumption)."""
        from .io import save_checkpoint
        tensors = self.params.state_tensors()
        if adam is not None:
            tensors.update(adam.state_tensors())
        save_checkpoint(path, tensors, meta=self.checkpoint_meta())

    @staticmethod
    def load(path):
        """Rebuild a model (and optimizer state, if present) from disk."""
        from .io import canonical_from_dict, load_checkpoint
        tensors, meta = load_checkpoint(path)
        cfg = ModelConfig(
            variant=meta["variant"], k=meta["k"], resolution=meta["resolution"],
            extent=meta["extent"], cube_half=meta["cube_half"],
            feature_channels=meta["feature_channels"], hidden=meta["hidden"],
            posenc=PosEncConfig(frequencies=meta["posenc_frequencies"]),
            use_view_dir=meta["use_view_dir"], normalize_length=meta["normalize_length"],
            deform_grid=meta["deform_grid"], deform_hidden=meta["deform_hidden"],
            dtype=meta["dtype"],
        )
        model = Model(cfg, canonical_from_dict(meta["canonical"]))
        model.params.load_state_tensors(tensors)
        adam = None
        if "adam.m" in tensors:
            from .diffengine import AdamState
            adam = AdamState.for_params(model.params)
            adam.load_state_tensors(tensors)
        return model, adam
