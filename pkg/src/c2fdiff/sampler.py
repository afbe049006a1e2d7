"""Reverse-process steppers and the sampling loop."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_batch
from .schedule import ContinuousSchedule, TimeStepSequence


class SamplerKind(str, enum.Enum):
    ANCESTRAL = "ancestral"
    DDIM = "ddim"
    DPM_SOLVER_PP_2M = "dpm_solver_pp_2m"

    @property
    def deterministic(self) -> bool:
        return self is not SamplerKind.ANCESTRAL


@dataclass
class Trajectory:
    """Output of :func:`run_sampler`; snapshot lists are empty unless recorded."""

    final: np.ndarray
    times: list[float] = field(default_factory=list)
    x_t_snapshots: list[np.ndarray] = field(default_factory=list)
    x0_pred_snapshots: list[np.ndarray] = field(default_factory=list)

    @property
    def recorded(self) -> bool:
        return bool(self.times)


def ancestral_step(denoiser, x_t, t: int, sched: ContinuousSchedule, rng, resolution=None):
    """One DDPM step ``t -> t - 1`` on the training grid."""
    if float(t) != int(t) or not 1 <= int(t) <= sched.t_train:
        raise ValueError(f"ancestral steps need an integer time in 1..{sched.t_train}, got {t}")
    t = int(t)
    beta = sched.base.beta(t)
    ab = sched.base.alpha_bars
    eps = denoiser.predict_eps(x_t, float(t), resolution)
    mean = (x_t - (beta / np.sqrt(1.0 - ab[t])) * eps) / np.sqrt(1.0 - beta)
    if t == 1:
        return mean
    var = (1.0 - ab[t - 1]) / (1.0 - ab[t]) * beta
    return mean + np.sqrt(var) * rng.standard_normal(np.shape(x_t))


def ddim_step(denoiser, x_t, t: float, t_prev: float, sched: ContinuousSchedule, resolution=None):
    """Deterministic DDIM update; returns ``(x_prev, x0_pred)``."""
    if not t > t_prev >= 0.0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    eps, x0 = denoiser.predict(x_t, t, resolution)
    a_prev = sched.alpha_bar(t_prev)
    return np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * eps, x0


def dpm_solver_pp_2m_step(
    denoiser,
    x_t,
    t: float,
    t_prev: float,
    prev_x0_pred=None,
    prev_half_logsnr=None,
    sched: ContinuousSchedule | None = None,
    resolution=None,
):
    """Second-order multistep data-prediction update.

    ``prev_x0_pred`` and ``prev_half_logsnr`` come from the previous call
    (both ``None`` on the first step, which is then first order). Returns
    ``(x_next, x0_pred, half_logsnr_t)`` where the last two feed the next
    call. A step that lands on ``t_prev == 0`` returns ``x0_pred``: the
    half-logSNR is infinite there and the multistep correction is undefined.
    """
    if sched is None:
        sched = denoiser.schedule
    if not t > t_prev >= 0.0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if (prev_x0_pred is None) != (prev_half_logsnr is None):
        raise ValueError("history must supply both prev_x0_pred and prev_half_logsnr, or neither")
    _, x0 = denoiser.predict(x_t, t, resolution)
    a = sched.alpha_bar(t)
    lam = 0.5 * (np.log(a) - np.log1p(-a))
    a_prev = sched.alpha_bar(t_prev)
    if a_prev >= 1.0:
        return x0.copy(), x0, lam
    lam_prev = 0.5 * (np.log(a_prev) - np.log1p(-a_prev))
    h = lam_prev - lam
    if prev_x0_pred is None:
        d = x0
    else:
        h_last = lam - prev_half_logsnr
        if not h_last > 0.0:
            raise ValueError("history half-logSNR must be below the current one")
        c = 0.5 * h / h_last
        d = (1.0 + c) * x0 - c * prev_x0_pred
    sigma, sigma_prev = np.sqrt(1.0 - a), np.sqrt(1.0 - a_prev)
    x_next = (sigma_prev / sigma) * x_t - np.sqrt(a_prev) * np.expm1(-h) * d
    return x_next, x0, lam


def _check_ancestral_times(times):
    ints = [int(t) for t in times]
    if any(float(t) != i for t, i in zip(times, ints)) or ints[-1] != 1:
        raise ValueError("ancestral sampling needs consecutive integer times ending at 1")
    if any(a - b != 1 for a, b in zip(ints[:-1], ints[1:])):
        raise ValueError("ancestral sampling needs consecutive integer times ending at 1")


def run_sampler(
    denoiser,
    kind,
    seq: TimeStepSequence,
    x_init,
    sched: ContinuousSchedule,
    rng=None,
    record: bool = False,
    resolution=None,
) -> Trajectory:
    """Integrate from ``seq[0]`` through every listed time, finishing at 0.

    With ``record`` set, ``x_t`` and the clean-image prediction at every
    visited time are stored on the trajectory.
    """
    kind = SamplerKind(kind)
    x = check_batch(x_init, "x_init", ndim=None).copy()
    shape = getattr(denoiser, "shape", None)
    if shape is not None and tuple(x.shape[1:]) != tuple(shape):
        raise ValueError(f"x_init shape {x.shape[1:]} does not match denoiser shape {shape}")
    times = seq.tolist()
    if times[0] > sched.t_train:
        raise ValueError(f"sequence starts at {times[0]} beyond t_train={sched.t_train}")
    targets = times[1:] + [0.0]
    traj = Trajectory(final=x)
    if kind is SamplerKind.ANCESTRAL:
        if rng is None:
            raise ValueError("ancestral sampling needs an rng")
        _check_ancestral_times(times)

    hist_x0 = hist_lam = None
    for t, t_next in zip(times, targets):
        if record:
            traj.times.append(t)
            traj.x_t_snapshots.append(x.copy())
        if kind is SamplerKind.DDIM:
            x, x0 = ddim_step(denoiser, x, t, t_next, sched, resolution)
        elif kind is SamplerKind.DPM_SOLVER_PP_2M:
            x, x0, lam = dpm_solver_pp_2m_step(
                denoiser, x, t, t_next, hist_x0, hist_lam, sched, resolution
            )
            hist_x0, hist_lam = x0, lam
        else:
            if record:
                x0 = denoiser.predict_x0(x, t, resolution)
            x = ancestral_step(denoiser, x, int(t), sched, rng, resolution)
        if record:
            traj.x0_pred_snapshots.append(x0)
    traj.final = x
    return traj
