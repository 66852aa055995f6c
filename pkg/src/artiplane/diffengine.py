"""Parameter registry, gradient extraction, finite-difference verification,
and Adam with equalized learning-rate multipliers.

All trainable state lives in one flat array with named, disjoint slices.
The tape in :mod:`artiplane.autodiff` computes gradients; this module owns
the contract that they are correct (``finite_diff_check``) and the update
rule that consumes them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericalError, ValidationError


class ParamStore:
    """Flat parameter vector with named slices exposed as leaf tensors.

    Slices are registered once, in a fixed order; each `tensor(name)` call
    returns the same leaf view, so gradient accumulation lands in one place.
    The equalization multiplier per slice scales that slice's learning rate
    (1/sqrt(fan_in) for network weight matrices, 1.0 for everything else).
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.data = np.zeros(0, dtype=self.dtype)
        self.slices: dict[str, tuple[int, int, tuple]] = {}
        self.eq_mult: dict[str, float] = {}
        self._tensors: dict[str, Tensor] = {}
        self._frozen = False

    def register(self, name: str, init: np.ndarray, eq_mult: float = 1.0):
        if self._frozen:
            raise ValidationError("parameter layout is frozen")
        if name in self.slices:
            raise ValidationError(f"duplicate parameter slice {name!r}")
        init = np.asarray(init, dtype=self.dtype)
        start = self.data.size
        self.data = np.concatenate([self.data, init.ravel()])
        self.slices[name] = (start, start + init.size, init.shape)
        self.eq_mult[name] = float(eq_mult)

    def freeze(self):
        """Fix the layout and materialize the leaf tensors (views)."""
        self._frozen = True
        for name, (lo, hi, shape) in self.slices.items():
            view = self.data[lo:hi].reshape(shape)
            self._tensors[name] = Tensor(view, requires_grad=True, name=name)

    @property
    def size(self) -> int:
        return self.data.size

    def names(self):
        return list(self.slices.keys())

    def tensor(self, name: str) -> Tensor:
        return self._tensors[name]

    def get(self, name: str) -> np.ndarray:
        lo, hi, shape = self.slices[name]
        return self.data[lo:hi].reshape(shape)

    def set(self, name: str, value: np.ndarray):
        lo, hi, shape = self.slices[name]
        self.data[lo:hi] = np.asarray(value, dtype=self.dtype).reshape(-1)

    def slice_of(self, flat_index: int) -> str:
        for name, (lo, hi, _) in self.slices.items():
            if lo <= flat_index < hi:
                return name
        raise IndexError(flat_index)

    def zero_grads(self):
        for t in self._tensors.values():
            t.grad = None

    def clone(self) -> "ParamStore":
        other = ParamStore(dtype=self.dtype)
        other.data = self.data.copy()
        other.slices = dict(self.slices)
        other.eq_mult = dict(self.eq_mult)
        other.freeze()
        return other

    def state_tensors(self) -> dict:
        return {f"param.{name}": self.get(name).copy() for name in self.slices}

    def load_state_tensors(self, tensors: dict):
        for name in self.slices:
            key = f"param.{name}"
            if key not in tensors:
                raise ValidationError(f"checkpoint is missing parameter slice {name!r}")
            self.set(name, tensors[key])


@dataclass
class GradStore:
    """Gradient vector mirroring a ParamStore's layout."""

    data: np.ndarray
    slices: dict

    def get(self, name: str) -> np.ndarray:
        lo, hi, shape = self.slices[name]
        return self.data[lo:hi].reshape(shape)

    @staticmethod
    def zeros_like(params: ParamStore) -> "GradStore":
        return GradStore(np.zeros(params.size, dtype=params.dtype), dict(params.slices))


def backward(loss: Tensor, params: ParamStore) -> GradStore:
    """Run the tape backward and collect per-slice gradients.

    Slices that never entered the forward graph come back exactly zero.
    """
    grads = GradStore.zeros_like(params)
    ad.backward(loss)
    for name in params.slices:
        t = params.tensor(name)
        if t.grad is not None:
            lo, hi, _ = params.slices[name]
            grads.data[lo:hi] = t.grad.ravel()
    params.zero_grads()
    return grads


def finite_diff_check(loss_fn, params: ParamStore, n_coords: int = 200,
                      step: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    `loss_fn(params)` must be deterministic and return a scalar Tensor.
    Coordinates are chosen uniformly over the flat parameter vector.
    """
    loss = loss_fn(params)
    grads = backward(loss, params)
    g = np.random.Generator(np.random.Philox(seed))
    coords = g.choice(params.size, size=min(n_coords, params.size), replace=False)
    worst = 0.0
    for c in coords:
        keep = params.data[c]
        params.data[c] = keep + step
        with ad.no_grad():
            hi = float(loss_fn(params).data)
        params.data[c] = keep - step
        with ad.no_grad():
            lo = float(loss_fn(params).data)
        params.data[c] = keep
        fd = (hi - lo) / (2.0 * step)
        adv = grads.data[c]
        err = abs(adv - fd) / max(abs(adv), abs(fd), 1e-8)
        worst = max(worst, err)
    return worst


@dataclass
class AdamState:
    """Adam moments plus the equalized/decayed learning-rate schedule."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    decay: float = 0.99995
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_params(params: ParamStore, lr: float = 1e-3,
                   decay: float = 0.99995) -> "AdamState":
        return AdamState(m=np.zeros(params.size, dtype=np.float64),
                         v=np.zeros(params.size, dtype=np.float64),
                         lr=lr, decay=decay)

    def state_tensors(self) -> dict:
        return {"adam.m": self.m.copy(), "adam.v": self.v.copy(),
                "adam.step": np.array([self.step], dtype=np.int64)}

    def load_state_tensors(self, tensors: dict):
        self.m = np.asarray(tensors["adam.m"], dtype=np.float64).copy()
        self.v = np.asarray(tensors["adam.v"], dtype=np.float64).copy()
        self.step = int(np.asarray(tensors["adam.step"]).ravel()[0])


def adam_step(params: ParamStore, grads: GradStore, state: AdamState):
    """One Adam update with bias correction.

    Effective learning rate per slice is lr * decay^step * eq_mult.  NaN
    gradients abort with the offending slice named; a silent NaN here would
    poison the whole parameter vector.
    """
    if grads.data.shape != (params.size,):
        raise ValidationError("gradient/parameter length mismatch")
    bad = np.nonzero(np.isnan(grads.data))[0]
    if bad.size:
        name = params.slice_of(int(bad[0]))
        raise NumericalError(f"NaN gradient in slice {name!r} at step {state.step}")
    g = grads.data.astype(np.float64)
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    t = state.step + 1
    mhat = state.m / (1.0 - state.beta1 ** t)
    vhat = state.v / (1.0 - state.beta2 ** t)
    base = state.lr * (state.decay ** state.step)
    update = mhat / (np.sqrt(vhat) + state.eps)
    for name, (lo, hi, _) in params.slices.items():
        eff = base * params.eq_mult[name]
        params.data[lo:hi] -= (eff * update[lo:hi]).astype(params.dtype)
    state.step = t
