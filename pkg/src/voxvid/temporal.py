"""Decoding per-voxel coefficient vectors into time-varying quantities.

Every voxel carries a payload (w_sigma, w_gamma, w_hh): density weights and
hyper-angle weights against two shared basis matrices A, B of shape (T, C),
plus HH color weights of shape (K, 3). Decodes:

    density track   sigma_t = relu((A @ w_sigma)_t)           >= 0
    hyper angle     gamma_t = pi * sigmoid((B @ w_gamma)_t)   in (0, pi)
    color           c(theta, phi, t) = sigmoid(sum_k w_hh[k] * H_k(theta, phi, gamma_t))

The raw HH sum is passed through a sigmoid so colors stay bounded; the
trainer differentiates through it. slice_sh collapses the K HH weights at a
fixed gamma into (n_max+1)^2 ordinary SH coefficients per channel, which is
what the per-frame render cache stores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import hh

__all__ = [
    "TemporalBases",
    "CoefficientVector",
    "EditChannels",
    "sigmoid",
    "decode_density",
    "decode_hyper_angle",
    "decode_color",
    "slice_sh",
    "make_bump_bases",
    "n_max_for_count",
    "payload_length",
    "track_value",
]


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


@dataclass
class TemporalBases:
    """Shared learnable basis matrices A (density) and B (hyper angle).

    Both are (T, C). C may exceed T: the dictionary is then overcomplete,
    which the fit tolerates (weights are regularized only by the data).
    """

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = np.ascontiguousarray(self.a, dtype=np.float32)
        self.b = np.ascontiguousarray(self.b, dtype=np.float32)
        if self.a.ndim != 2 or self.a.shape != self.b.shape:
            raise ValueError(f"A and B must share a (T, C) shape, got {self.a.shape} vs {self.b.shape}")

    @property
    def frames(self) -> int:
        return self.a.shape[0]

    @property
    def count(self) -> int:
        return self.a.shape[1]

    def copy(self) -> "TemporalBases":
        return TemporalBases(self.a.copy(), self.b.copy())


@dataclass
class EditChannels:
    """Appearance-edit payload appended to a painted voxel.

    target_density None means the decoded density is kept; time_range is an
    inclusive frame interval, empty (lo > hi) when the edit is inactive.
    """

    target_rgb: tuple[float, float, float]
    time_range: tuple[int, int]
    target_density: float | None = None

    def __post_init__(self):
        if any(not (0.0 <= c <= 1.0) for c in self.target_rgb):
            raise ValueError(f"edit rgb out of [0,1]: {self.target_rgb}")
        if self.target_density is not None and self.target_density < 0:
            raise ValueError(f"edit density must be non-negative: {self.target_density}")

    @property
    def active(self) -> bool:
        return self.time_range[0] <= self.time_range[1]


@dataclass
class CoefficientVector:
    """One voxel's payload. Lengths must agree with the owning tree."""

    w_sigma: np.ndarray
    w_gamma: np.ndarray
    w_hh: np.ndarray  # (K, 3)
    edit: EditChannels | None = None

    def __post_init__(self):
        self.w_sigma = np.asarray(self.w_sigma, dtype=np.float64)
        self.w_gamma = np.asarray(self.w_gamma, dtype=np.float64)
        self.w_hh = np.asarray(self.w_hh, dtype=np.float64)
        if self.w_sigma.shape != self.w_gamma.shape or self.w_sigma.ndim != 1:
            raise ValueError("w_sigma and w_gamma must be equal-length vectors")
        if self.w_hh.ndim != 2 or self.w_hh.shape[1] != 3:
            raise ValueError(f"w_hh must be (K, 3), got {self.w_hh.shape}")

    @property
    def payload_length(self) -> int:
        return payload_length(len(self.w_sigma), self.w_hh.shape[0], self.edit is not None)


def payload_length(c: int, k: int, with_edit: bool = False) -> int:
    return 2 * c + 3 * k + (5 if with_edit else 0)


@lru_cache(maxsize=None)
def n_max_for_count(k: int) -> int:
    """Invert K = sum (n+1)^2."""
    n, total = 0, 1
    while total < k:
        n += 1
        total += (n + 1) ** 2
    if total != k:
        raise ValueError(f"{k} is not a valid truncated basis count")
    return n


def _check_weights(bases: TemporalBases, w: np.ndarray, name: str) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (bases.count,):
        raise ValueError(f"{name} has shape {w.shape}, bases expect ({bases.count},)")
    return w


def decode_density(bases: TemporalBases, w_sigma) -> np.ndarray:
    """Per-frame density track relu(A @ w_sigma); non-negative everywhere."""
    w = _check_weights(bases, w_sigma, "w_sigma")
    return np.maximum(0.0, bases.a.astype(np.float64) @ w)


def decode_hyper_angle(bases: TemporalBases, w_gamma) -> np.ndarray:
    """Per-frame hyper angle pi * sigmoid(B @ w_gamma), strictly in (0, pi)."""
    w = _check_weights(bases, w_gamma, "w_gamma")
    return math.pi * sigmoid(bases.b.astype(np.float64) @ w)


def decode_density_jacobian(bases: TemporalBases, w_sigma) -> np.ndarray:
    """d(density)/d(w_sigma), shape (T, C); relu subgradient 0 at the kink."""
    w = _check_weights(bases, w_sigma, "w_sigma")
    a = bases.a.astype(np.float64)
    return a * (a @ w > 0.0)[:, None]


def decode_hyper_angle_jacobian(bases: TemporalBases, w_gamma) -> np.ndarray:
    """d(gamma)/d(w_gamma), shape (T, C)."""
    w = _check_weights(bases, w_gamma, "w_gamma")
    b = bases.b.astype(np.float64)
    s = sigmoid(b @ w)
    return b * (math.pi * s * (1.0 - s))[:, None]


def decode_color(w_hh, gamma_t: float, theta: float, phi: float, apply_sigmoid: bool = True):
    """Color at one (view, time) query: per-channel dot with the HH stack."""
    w_hh = np.asarray(w_hh, dtype=np.float64)
    if not (0.0 <= gamma_t <= math.pi):
        raise ValueError(f"gamma out of [0, pi]: {gamma_t}")
    n_max = n_max_for_count(w_hh.shape[0])
    basis = hh.eval_basis_angles(n_max, gamma_t, theta, phi)
    raw = basis @ w_hh
    return sigmoid(raw) if apply_sigmoid else raw


def slice_sh(w_hh, gamma_t: float) -> np.ndarray:
    """Collapse HH weights at fixed gamma to SH coefficients, shape (S, 3).

    q[(l, m)] = sum_n radial_profile(n, l, gamma) * w_hh[(n, l, m)], so
    sh_eval(slice_sh(w, g), theta, phi) reproduces the raw (pre-sigmoid)
    decode_color exactly; this identity is the per-frame render fast path.
    """
    w_hh = np.asarray(w_hh, dtype=np.float64)
    if not (0.0 <= gamma_t <= math.pi):
        raise ValueError(f"gamma out of [0, pi]: {gamma_t}")
    n_max = n_max_for_count(w_hh.shape[0])
    sh_index = {pair: j for j, pair in enumerate(hh.sh_pair_list(n_max))}
    out = np.zeros(((n_max + 1) ** 2, 3))
    for k, idx in enumerate(hh.index_list(n_max)):
        out[sh_index[(idx.l, idx.m)]] += hh.radial_profile(idx.n, idx.l, gamma_t) * w_hh[k]
    return out


def make_bump_bases(frames: int, count: int) -> TemporalBases:
    """Initial dictionary: a constant column plus shifted raised cosines.

    The bumps give the optimizer local-in-time handles so occupancy
    profiles that rise, hold, and fall are reachable from the start; both
    matrices remain trainable.
    """
    if frames < 1 or count < 1:
        raise ValueError("need frames >= 1 and count >= 1")
    a = np.zeros((frames, count), dtype=np.float64)
    a[:, 0] = 1.0
    t = np.arange(frames, dtype=np.float64)
    n_bumps = count - 1
    if n_bumps > 0:
        centers = np.linspace(0.0, frames - 1.0, n_bumps) if n_bumps > 1 else [0.5 * (frames - 1)]
        width = max(1.0, 1.4 * (frames - 1) / max(1, n_bumps - 1))
        for j, c in enumerate(centers):
            d = np.abs(t - c)
            a[:, j + 1] = np.where(d < width, 0.5 * (1.0 + np.cos(math.pi * d / width)), 0.0)
    return TemporalBases(a, a.copy())


def track_value(track: np.ndarray, t: float, mode: str = "nearest") -> float:
    """Continuous-time lookup into a per-frame track (nearest or linear)."""
    track = np.asarray(track, dtype=np.float64)
    t = float(np.clip(t, 0.0, len(track) - 1.0))
    if mode == "nearest":
        return float(track[int(round(t))])
    if mode == "linear":
        i0 = int(math.floor(t))
        i1 = min(i0 + 1, len(track) - 1)
        f = t - i0
        return float((1.0 - f) * track[i0] + f * track[i1])
    raise ValueError(f"unknown interpolation mode: {mode}")
