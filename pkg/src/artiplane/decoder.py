"""Positional encoding, the lightweight color/density decoder, and the
split-network baseline feature generator used as the benchmark reference.

The decoder is two fully-connected layers (hidden width 64, output 4):
color is the logistic of the first three outputs, density the softplus of
the fourth.  The baseline produces per-point features either as one linear
map over the concatenation of probability-masked per-part encodings or as
the per-part decomposition sum; both paths are exposed because their
agreement is a correctness contract.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kinematics import CanonicalPose, PoseConfig, to_local


@dataclass(frozen=True)
class PosEncConfig:
    """sin/cos frequency encoding: x -> [x?, sin(2^i pi x), cos(2^i pi x)]."""

    frequencies: int = 10
    include_input: bool = True

    def __post_init__(self):
        if self.frequencies < 1:
            raise ValueError("positional encoding needs at least one frequency")

    def out_dim(self, in_dim: int = 3) -> int:
        return in_dim * (2 * self.frequencies + (1 if self.include_input else 0))


def positional_encode(x, cfg: PosEncConfig = PosEncConfig()) -> np.ndarray:
    """Encode points (..., D) into (..., D*(2L + include_input)).

    Layout per input dimension group: the raw input block first (when
    included), then for each frequency i the sin block followed by the cos
    block.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    pts = np.atleast_2d(x)
    blocks = [pts] if cfg.include_input else []
    for i in range(cfg.frequencies):
        arg = (2.0 ** i) * np.pi * pts
        blocks.append(np.sin(arg))
        blocks.append(np.cos(arg))
    out = np.concatenate(blocks, axis=-1)
    return out[0] if squeeze else out


# ----------------------------------------------------------------- decoder

@dataclass
class MlpDecoder:
    """Two rectified FC layers mapping features to (r, g, b, density-logit)."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def in_dim(self) -> int:
        return self.w1.data.shape[1]

    @staticmethod
    def init(in_dim: int = 32, hidden: int = 64, seed: int = 0,
             dtype=np.float64) -> "MlpDecoder":
        """He-style uniform fan-in init, seedable."""
        g = np.random.Generator(np.random.Philox(seed))
        lim1 = np.sqrt(6.0 / in_dim)
        lim2 = np.sqrt(6.0 / hidden)
        return MlpDecoder(
            w1=Tensor(g.uniform(-lim1, lim1, (hidden, in_dim)).astype(dtype), requires_grad=True, name="decoder.w1"),
            b1=Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True, name="decoder.b1"),
            w2=Tensor(g.uniform(-lim2, lim2, (4, hidden)).astype(dtype), requires_grad=True, name="decoder.w2"),
            b2=Tensor(np.zeros(4, dtype=dtype), requires_grad=True, name="decoder.b2"),
        )


def decode_batch(f, dec: MlpDecoder):
    """Features (N, F_in) to color (N, 3) in (0,1) and density (N,) >= 0."""
    f = ad.ensure(f)
    if f.data.ndim != 2 or f.data.shape[1] != dec.in_dim:
        raise ValueError(f"decoder expects (N, {dec.in_dim}) features, got {f.data.shape}")
    h = ad.linear(f, dec.w1, dec.b1, relu_act=True)
    out = ad.linear(h, dec.w2, dec.b2)
    color = ad.sigmoid(ad.getcols(out, 0, 3))
    density = ad.softplus(out[:, 3])
    return color, density


def _t(w: Tensor) -> Tensor:
    """Transpose view of a weight tensor that shares its gradient."""
    out = w.data.T
    if not (ad.grad_enabled() and w.requires_grad):
        return Tensor(out)

    def bwd(g):
        w.accumulate_grad(g.T)

    return Tensor(out, requires_grad=True, parents=(w,), backward=bwd)


@dataclass(frozen=True)
class RadianceSample:
    """Decoded color and density at one 3-D point."""

    color: np.ndarray
    density: float


def decode(f, dec: MlpDecoder, view_dir=None,
           view_cfg: PosEncConfig = PosEncConfig()) -> RadianceSample:
    """Single-point decoder contract; the batched path does the work.

    When `view_dir` is given its positional encoding is appended to the
    feature vector (the decoder must have been sized for the wider input).
    """
    f = np.asarray(f, dtype=np.float64).reshape(1, -1)
    if view_dir is not None:
        enc = positional_encode(np.asarray(view_dir, dtype=np.float64), view_cfg)
        f = np.concatenate([f, enc.reshape(1, -1)], axis=1)
    with ad.no_grad():
        color, density = decode_batch(f, dec)
    return RadianceSample(color=color.data[0].copy(), density=float(density.data[0]))


# ---------------------------------------------------------------- baseline

@dataclass
class NarfBaseline:
    """Split-network reference: bias-free linear feature map over masked
    per-part encodings plus per-part 2-layer MLP selectors (hidden 10)."""

    w: Tensor                      # (32, K * enc_dim), bias-free
    sel_w1: list = field(default_factory=list)  # per part (10, enc_dim)
    sel_b1: list = field(default_factory=list)
    sel_w2: list = field(default_factory=list)  # per part (1, 10)
    sel_b2: list = field(default_factory=list)
    posenc: PosEncConfig = field(default_factory=PosEncConfig)

    @property
    def k(self) -> int:
        return len(self.sel_w1)

    @property
    def enc_dim(self) -> int:
        return self.posenc.out_dim(3)

    @staticmethod
    def init(k: int, feature_dim: int = 32, seed: int = 0,
             posenc: PosEncConfig = PosEncConfig(), dtype=np.float64) -> "NarfBaseline":
        g = np.random.Generator(np.random.Philox(seed))
        enc = posenc.out_dim(3)
        lim = np.sqrt(6.0 / (k * enc))
        base = NarfBaseline(
            w=Tensor(g.uniform(-lim, lim, (feature_dim, k * enc)).astype(dtype),
                     requires_grad=True, name="baseline.w"),
            posenc=posenc,
        )
        lim1 = np.sqrt(6.0 / enc)
        lim2 = np.sqrt(6.0 / 10)
        for j in range(k):
            base.sel_w1.append(Tensor(g.uniform(-lim1, lim1, (10, enc)).astype(dtype),
                                      requires_grad=True, name=f"baseline.sel{j}.w1"))
            base.sel_b1.append(Tensor(np.zeros(10, dtype=dtype), requires_grad=True,
                                      name=f"baseline.sel{j}.b1"))
            base.sel_w2.append(Tensor(g.uniform(-lim2, lim2, (1, 10)).astype(dtype),
                                      requires_grad=True, name=f"baseline.sel{j}.w2"))
            base.sel_b2.append(Tensor(np.zeros(1, dtype=dtype), requires_grad=True,
                                      name=f"baseline.sel{j}.b2"))
        return base

    def selector(self, enc, j: int) -> Tensor:
        """Per-part occupancy probability from the encoded local position."""
        h = ad.linear(ad.ensure(enc), self.sel_w1[j], self.sel_b1[j], relu_act=True)
        return ad.sigmoid(ad.linear(h, self.sel_w2[j], self.sel_b2[j]))

    def w_block(self, j: int) -> Tensor:
        """The j-th per-part column block of the concatenated linear map."""
        enc = self.enc_dim
        return self.w[:, j * enc:(j + 1) * enc]


def baseline_feature_batch(pts: np.ndarray, pose: PoseConfig, canon: CanonicalPose,
                           baseline: NarfBaseline, mode: str = "concat",
                           probs=None, cube_mask=None):
    """Batched baseline features for points (N, 3).

    mode "concat": f = W(Cat({enc_k * p_k})); mode "per-part":
    f = sum_k p_k * W_k(enc_k).  `probs` overrides the MLP selectors (used by
    the two-path agreement tests); `cube_mask` (N, K) zeroes parts outside
    the shape prior.
    """
    if mode not in ("concat", "per-part"):
        raise ValueError(f"unknown baseline mode {mode!r}")
    k = baseline.k
    encs = []
    ps = []
    for j in range(k):
        xl = to_local(pts, pose.parts[j].transform)
        enc = positional_encode(xl, baseline.posenc)
        if baseline.w.data.dtype == np.float32:
            enc = enc.astype(np.float32)
        encs.append(enc)
        if probs is not None:
            pj = ad.ensure(np.asarray(probs)[:, j:j + 1])
        else:
            pj = baseline.selector(enc, j)
        if cube_mask is not None:
            pj = pj * ad.Tensor(cube_mask[:, j:j + 1].astype(enc.dtype))
        ps.append(pj)
    if mode == "concat":
        masked = [ps[j] * ad.Tensor(encs[j]) for j in range(k)]
        cat = ad.concatenate(masked, axis=1)
        return ad.matmul(cat, _t(baseline.w))
    total = None
    for j in range(k):
        fj = ad.matmul(ad.Tensor(encs[j]), _t(baseline.w_block(j))) * ps[j]
        total = fj if total is None else total + fj
    return total


def narf_baseline_feature(x, pose: PoseConfig, canon: CanonicalPose,
                          baseline: NarfBaseline, mode: str = "concat",
                          probs=None) -> np.ndarray:
    """Single-point feature contract over the batched path."""
    pts = np.asarray(x, dtype=np.float64).reshape(1, 3)
    pr = None if probs is None else np.asarray(probs, dtype=np.float64).reshape(1, -1)
    with ad.no_grad():
        f = baseline_feature_batch(pts, pose, canon, baseline, mode=mode, probs=pr)
    return f.data[0].copy()
