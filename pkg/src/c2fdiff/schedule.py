"""Variance-preserving noise schedules and time-step sequences."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_positive_int, check_same_shape, check_time


def _frozen(arr) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Discrete schedule with ``betas[t - 1] = beta_t`` for ``t = 1..t_train``.

    ``alpha_bars`` has ``t_train + 1`` entries with ``alpha_bars[0] == 1``.
    """

    betas: np.ndarray
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = _frozen(self.betas)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-d sequence")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("every beta must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(
            self, "alpha_bars", _frozen(np.concatenate([[1.0], np.cumprod(1.0 - betas)]))
        )

    @property
    def t_train(self) -> int:
        return int(self.betas.size)

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.t_train:
            raise ValueError(f"beta index {t} outside 1..{self.t_train}")
        return float(self.betas[t - 1])

    def to_dict(self) -> dict:
        return {"betas": self.betas.tolist()}


def linear_beta_schedule(
    t_train: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02
) -> NoiseSchedule:
    t_train = check_positive_int(t_train, "t_train")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(
            f"need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
        )
    return NoiseSchedule(np.linspace(beta_min, beta_max, t_train))


class ContinuousSchedule:
    """Extends ``alpha_bar`` to real times by geometric interpolation.

    Between grid points ``k`` and ``k + 1``,
    ``alpha_bar(k + f) = alpha_bar_k * (alpha_bar_{k+1} / alpha_bar_k) ** f``.
    Grid points return the stored values exactly. With ``round_times=True``
    every time is rounded to the nearest integer first.
    """

    def __init__(self, base: NoiseSchedule, round_times: bool = False):
        self.base = base
        self.round_times = bool(round_times)
        self._log_ratio = np.log(base.alpha_bars[1:] / base.alpha_bars[:-1])

    @property
    def t_train(self) -> int:
        return self.base.t_train

    @classmethod
    def linear(cls, t_train=1000, beta_min=1e-4, beta_max=0.02, round_times=False):
        return cls(linear_beta_schedule(t_train, beta_min, beta_max), round_times)

    def alpha_bar(self, t) -> np.ndarray | float:
        scalar = np.ndim(t) == 0
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > self.t_train):
            raise ValueError(f"time outside [0, {self.t_train}]")
        if self.round_times:
            t = np.floor(t + 0.5)
        k = np.minimum(np.floor(t).astype(np.int64), self.t_train)
        frac = t - k
        ab = self.base.alpha_bars
        out = ab[k].copy()
        inner = frac > 0.0
        if np.any(inner):
            ki = k[inner]
            out[inner] = ab[ki] * np.exp(frac[inner] * self._log_ratio[ki])
        return float(out[0]) if scalar else out

    def half_log_snr(self, t) -> float:
        a = self.alpha_bar(t)
        return 0.5 * (np.log(a) - np.log1p(-a))

    def to_dict(self) -> dict:
        return {"t_train": self.t_train, "round_times": self.round_times}


def alpha_bar_at(sched: ContinuousSchedule, t: float) -> float:
    check_time(t, sched.t_train)
    return sched.alpha_bar(float(t))


def forward_diffuse(x0, t: float, noise, sched: ContinuousSchedule) -> np.ndarray:
    """Closed-form marginal ``sqrt(ab) * x0 + sqrt(1 - ab) * noise``."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    check_same_shape(x0, noise, ("x0", "noise"))
    a = alpha_bar_at(sched, t)
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * noise


@dataclass(frozen=True, eq=False)
class TimeStepSequence:
    """Sampling times in sampling order (largest first)."""

    times: np.ndarray
    t_max: float = np.inf

    def __post_init__(self):
        times = _frozen(np.atleast_1d(self.times))
        if times.ndim != 1 or times.size < 1:
            raise ValueError("a sequence needs at least one time")
        if np.any(~np.isfinite(times)):
            raise ValueError("times must be finite")
        if np.any(np.diff(times) >= 0.0):
            raise ValueError(f"times must be strictly decreasing, got {times.tolist()}")
        if times[-1] < 0.0 or times[0] > self.t_max:
            raise ValueError(f"times must lie in [0, {self.t_max}], got {times.tolist()}")
        object.__setattr__(self, "times", times)

    def __len__(self) -> int:
        return int(self.times.size)

    def __iter__(self):
        return iter(self.times.tolist())

    def __getitem__(self, i):
        return float(self.times[i])

    def __eq__(self, other):
        return isinstance(other, TimeStepSequence) and np.array_equal(self.times, other.times)

    def __hash__(self):
        return hash(self.times.tobytes())

    def __repr__(self):
        return f"TimeStepSequence({self.times.tolist()})"

    def replace(self, position: int, value: float) -> "TimeStepSequence":
        times = self.times.copy()
        times[position] = value
        return TimeStepSequence(times, self.t_max)

    def tolist(self) -> list[float]:
        return self.times.tolist()


def uniform_sequence(k: int, t_hi: float, t_lo: float = 0.0) -> TimeStepSequence:
    """``k`` evenly spaced times starting at ``t_hi``; the last transition lands on ``t_lo``."""
    k = check_positive_int(k, "k")
    t_hi, t_lo = float(t_hi), float(t_lo)
    if not t_hi > t_lo >= 0.0:
        raise ValueError(f"need t_hi > t_lo >= 0, got t_hi={t_hi}, t_lo={t_lo}")
    step = (t_hi - t_lo) / k
    return TimeStepSequence(t_hi - step * np.arange(k))
