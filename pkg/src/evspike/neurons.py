"""Per-neuron dynamics as pure step functions.

Every ``*_step`` takes ``(state, z, params)`` and returns ``(y, new_state)``
without mutating its arguments.  States and inputs may be scalars or numpy
arrays of any shape (element-wise dynamics), except S4D where the trailing
axis of the parameters is the state dimension.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


def heaviside(x):
    """Step function with H(0) = 1."""
    return (np.asarray(x) >= 0).astype(np.float64)


def relu_step(z):
    return np.maximum(z, 0.0)


# --------------------------------------------------------------------------
# SigmaDelta

@dataclass(frozen=True)
class SigmaDeltaParams:
    theta: float = 0.0

    def __post_init__(self):
        if not self.theta >= 0:
            raise ConfigError(f"SigmaDelta threshold must be >= 0, got {self.theta}")


@dataclass(frozen=True)
class SigmaDeltaState:
    r: np.ndarray | float = 0.0
    a_prev: np.ndarray | float = 0.0
    sigma_acc: np.ndarray | float = 0.0

    @classmethod
    def zeros(cls, shape=()):
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape))


def sigma_delta_step(state: SigmaDeltaState, z, p: SigmaDeltaParams):
    """ReLU followed by a thresholded delta encoder with residual carry."""
    a = np.maximum(z, 0.0)
    delta = a - state.a_prev + state.r
    y = np.where(delta >= p.theta, delta, 0.0)
    return y, SigmaDeltaState(delta - y, a, state.sigma_acc)


def sigma_decode_step(state: SigmaDeltaState, y):
    """Receiver-side accumulator; returns ``(a_hat, new_state)``."""
    acc = state.sigma_acc + y
    return acc, SigmaDeltaState(state.r, state.a_prev, acc)


# --------------------------------------------------------------------------
# current-based LIF

@dataclass(frozen=True)
class LifParams:
    alpha: float = 0.5
    beta: float = 0.5
    theta: float = 1.0
    spike_mode: str = "graded"

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ConfigError("LIF decays must lie in [0, 1]")
        if self.spike_mode not in ("graded", "binary"):
            raise ConfigError(f"unknown spike mode {self.spike_mode!r}")

    def checked(self):
        """Deployment configs require theta >= 1 (see reset semantics)."""
        if self.theta < 1.0:
            raise ConfigError(f"LIF threshold must be >= 1, got {self.theta}")
        return self


@dataclass(frozen=True)
class LifState:
    i: np.ndarray | float = 0.0
    u: np.ndarray | float = 0.0
    y_prev: np.ndarray | float = 0.0

    @classmethod
    def zeros(cls, shape=()):
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape))


def lif_step(state: LifState, z, p: LifParams):
    i = p.alpha * state.i + z
    keep = 1.0 - heaviside(state.y_prev - 1.0)
    u = p.beta * state.u * keep + i
    fired = u >= p.theta
    if p.spike_mode == "graded":
        y = np.where(fired, u, 0.0)
    else:
        y = fired.astype(np.float64)
    return y, LifState(i, u, y)


# --------------------------------------------------------------------------
# diagonal state-space (S4D) neuron

@dataclass(frozen=True, eq=False)
class S4dParams:
    """Diagonal recurrence parameters, trailing axis = state dimension."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        a, b, c = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in (self.a, self.b, self.c))
        a, b, c = np.broadcast_arrays(a, b, c)
        object.__setattr__(self, "a", a.copy())
        object.__setattr__(self, "b", b.copy())
        object.__setattr__(self, "c", c.copy())
        if np.any(np.abs(a) >= 1.0):
            warnings.warn("S4D parameters with |a| >= 1 are unstable", RuntimeWarning, stacklevel=3)

    @property
    def d_state(self):
        return self.a.shape[-1]

    @property
    def n_neurons(self):
        return int(np.prod(self.a.shape[:-1], dtype=np.int64))


@dataclass(frozen=True)
class S4dState:
    s: np.ndarray = field(default_factory=lambda: np.zeros(1))

    @classmethod
    def zeros(cls, p: S4dParams):
        return cls(np.zeros(p.a.shape))


def s4d_step(state: S4dState, z, p: S4dParams):
    s = p.a * state.s + p.b * np.asarray(z, dtype=np.float64)[..., None]
    return np.sum(p.c * s, axis=-1), S4dState(s)


def s4d_kernel(p: S4dParams, length: int):
    """Convolution kernel ``k[..., n] = sum_d c a^n b`` for ``n < length``."""
    if length < 1:
        raise ConfigError("kernel length must be >= 1")
    n = np.arange(length)
    powers = p.a[..., None, :] ** n[:, None]  # (..., L, d)
    return np.sum(p.c[..., None, :] * p.b[..., None, :] * powers, axis=-1)


def s4d_convolve(z, kernel):
    """Causal convolution along the first axis: ``y[t] = sum_n k[n] z[t-n]``.

    ``z`` has shape ``(T, ...)`` and ``kernel`` shape ``(..., L)`` with L >= T.
    """
    z = np.asarray(z, dtype=np.float64)
    t_len = z.shape[0]
    y = np.zeros_like(z)
    for n in range(t_len):
        y[n:] += kernel[..., n] * z[: t_len - n]
    return y


# --------------------------------------------------------------------------
# fixed-point helpers (24-bit signed state)

STATE_BITS = 24


def quantize_state(x, frac_bits, bits=STATE_BITS):
    """Round to the ``2**-frac_bits`` grid and saturate to ``bits`` signed."""
    scale = float(2 ** frac_bits)
    lim = 2 ** (bits - 1)
    q = np.clip(np.round(np.asarray(x) * scale), -lim, lim - 1)
    return q / scale


def s4d_step_fixed(state: S4dState, z, p: S4dParams, frac_bits=12):
    y, new = s4d_step(state, z, p)
    s = quantize_state(new.s, frac_bits)
    return np.sum(p.c * s, axis=-1), S4dState(s)


def lif_step_fixed(state: LifState, z, p: LifParams, frac_bits=12):
    i = quantize_state(p.alpha * state.i + z, frac_bits)
    keep = 1.0 - heaviside(state.y_prev - 1.0)
    u = quantize_state(p.beta * state.u * keep + i, frac_bits)
    fired = u >= p.theta
    y = np.where(fired, u, 0.0) if p.spike_mode == "graded" else fired.astype(np.float64)
    return y, LifState(i, u, y)
