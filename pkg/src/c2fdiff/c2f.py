"""Coarse-to-fine sampling and switch-time selection."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from ._validation import check_batch, check_power_of_two
from .oracle import ResolutionFamily
from .rng import BatchRng
from .sampler import SamplerKind, Trajectory, run_sampler
from .schedule import ContinuousSchedule, TimeStepSequence, forward_diffuse, uniform_sequence

UPSAMPLE_KINDS = ("nearest", "bilinear")


@dataclass(frozen=True, eq=False)
class C2fPlan:
    """Low-resolution stage followed by a high-resolution stage.

    ``low_sequence`` may be ``None`` (no low-resolution stage), in which case
    the high-resolution stage starts from pure noise. Otherwise the upsampled
    low-resolution output is re-noised to ``high_sequence[0]``, which never
    exceeds ``switch_time``.
    """

    low_factor: int
    low_sequence: TimeStepSequence | None
    high_sequence: TimeStepSequence
    switch_time: float
    upsample_kind: str = "nearest"

    def __post_init__(self):
        check_power_of_two(self.low_factor, "low_factor", minimum=2)
        if self.upsample_kind not in UPSAMPLE_KINDS:
            raise ValueError(f"upsample_kind must be one of {UPSAMPLE_KINDS}")
        if not self.switch_time > 0.0:
            raise ValueError("switch_time must be positive")
        if self.high_sequence[0] > self.switch_time:
            raise ValueError(
                f"high_sequence starts at {self.high_sequence[0]} above switch_time {self.switch_time}"
            )

    @property
    def t_c_steps(self) -> int:
        return 0 if self.low_sequence is None else len(self.low_sequence)

    @property
    def t_f_steps(self) -> int:
        return len(self.high_sequence)

    @classmethod
    def uniform(cls, low_factor, t_c_steps, t_f_steps, switch_time, t_max, upsample_kind="nearest"):
        low = uniform_sequence(t_c_steps, t_max, 0.0) if t_c_steps > 0 else None
        high = uniform_sequence(t_f_steps, switch_time, 0.0)
        return cls(low_factor, low, high, float(switch_time), upsample_kind)

    def with_sequences(self, low_sequence, high_sequence) -> "C2fPlan":
        return C2fPlan(
            self.low_factor, low_sequence, high_sequence, self.switch_time, self.upsample_kind
        )

    def check_schedule(self, sched: ContinuousSchedule) -> None:
        if self.switch_time > sched.t_train:
            raise ValueError(f"switch_time {self.switch_time} beyond t_train {sched.t_train}")

    def to_dict(self) -> dict:
        return {
            "low_factor": self.low_factor,
            "t_c_steps": self.t_c_steps,
            "t_f_steps": self.t_f_steps,
            "switch_time": self.switch_time,
            "upsample_kind": self.upsample_kind,
            "low_sequence": None if self.low_sequence is None else self.low_sequence.tolist(),
            "high_sequence": self.high_sequence.tolist(),
        }


@dataclass(frozen=True)
class RankCurve:
    times: tuple
    cut_indices: tuple

    def __post_init__(self):
        if len(self.times) != len(self.cut_indices):
            raise ValueError("times and cut_indices must have equal length")
        if any(int(k) < 1 for k in self.cut_indices):
            raise ValueError("cut indices must be >= 1")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["time", "cut_index"])
        for t, k in zip(self.times, self.cut_indices):
            writer.writerow([repr(float(t)), int(k)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RankCurve":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls(
            tuple(float(r["time"]) for r in rows), tuple(int(r["cut_index"]) for r in rows)
        )


def upsample(batch, factor: int, kind: str = "nearest") -> np.ndarray:
    """Resize the last two axes by ``factor``."""
    factor = check_power_of_two(factor, minimum=2)
    x = np.asarray(batch, dtype=np.float64)
    if kind == "nearest":
        return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)
    if kind == "bilinear":
        return _linear_resize(_linear_resize(x, factor, axis=-2), factor, axis=-1)
    raise ValueError(f"unknown upsample kind {kind!r}")


def _linear_resize(x: np.ndarray, factor: int, axis: int) -> np.ndarray:
    n = x.shape[axis]
    # half-pixel alignment: output centre j maps to input coordinate (j + 0.5) / f - 0.5
    pos = np.clip((np.arange(n * factor) + 0.5) / factor - 0.5, 0.0, n - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    shape = [1] * x.ndim
    shape[axis] = -1
    frac = frac.reshape(shape)
    return np.take(x, lo, axis=axis) * (1.0 - frac) + np.take(x, hi, axis=axis) * frac


def renoise(x0_up, t_star: float, sched: ContinuousSchedule, rng) -> np.ndarray:
    """Forward-diffuse an upsampled image to ``t_star`` with fresh noise."""
    if not 0.0 < t_star <= sched.t_train:
        raise ValueError(f"t_star={t_star} outside (0, {sched.t_train}]")
    x0_up = np.asarray(x0_up, dtype=np.float64)
    return forward_diffuse(x0_up, t_star, rng.standard_normal(x0_up.shape), sched)


def c2f_noises(seed: int, n: int, family: ResolutionFamily, plan: C2fPlan, start: int = 0):
    """Initial low-resolution noise and re-noising draws for samples ``start..start+n``."""
    c, h, w = family.base.shape
    if plan.low_sequence is None:
        return BatchRng(seed, n, "init", start).standard_normal((n, c, h, w)), None
    f = plan.low_factor
    low = BatchRng(seed, n, "init", start).standard_normal((n, c, h // f, w // f))
    eps = BatchRng(seed, n, "renoise", start).standard_normal((n, c, h, w))
    return low, eps


class _Fixed:
    """Replays a pre-drawn noise array through the ``standard_normal`` interface."""

    def __init__(self, noise):
        self.noise = noise

    def standard_normal(self, size):
        if tuple(size) != self.noise.shape:
            raise ValueError(f"cached noise has shape {self.noise.shape}, asked for {size}")
        return self.noise


def c2f_sample(
    family: ResolutionFamily,
    plan: C2fPlan,
    kind,
    n: int,
    sched: ContinuousSchedule,
    seed: int = 0,
    start: int = 0,
    record: bool = False,
    noises=None,
) -> tuple[Trajectory, Trajectory | None]:
    """Run both stages; returns ``(high_trajectory, low_trajectory)``.

    ``noises`` optionally supplies the ``(low_init, renoise_eps)`` pair from
    :func:`c2f_noises`, letting repeated runs share identical draws.
    """
    kind = SamplerKind(kind)
    plan.check_schedule(sched)
    init, eps = noises if noises is not None else c2f_noises(seed, n, family, plan, start)
    anc = lambda tag: BatchRng(seed, n, tag, start) if kind is SamplerKind.ANCESTRAL else None  # noqa: E731
    high = family.denoiser(1, sched)
    if plan.low_sequence is None:
        traj = run_sampler(high, kind, plan.high_sequence, init, sched, anc("ancestral/high"), record, 1)
        return traj, None
    low = family.denoiser(plan.low_factor, sched)
    low_traj = run_sampler(
        low, kind, plan.low_sequence, init, sched, anc("ancestral/low"), record, plan.low_factor
    )
    x_up = upsample(low_traj.final, plan.low_factor, plan.upsample_kind)
    x_start = renoise(x_up, plan.high_sequence[0], sched, _Fixed(eps))
    high_traj = run_sampler(
        high, kind, plan.high_sequence, x_start, sched, anc("ancestral/high"), record, 1
    )
    return high_traj, low_traj


def pca_cut_index(batch, variance_threshold: float = 0.99) -> int:
    """Number of principal components needed to reach ``variance_threshold``.

    Rows are samples. A batch whose centred matrix vanishes (to rounding)
    has cut index 1.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim < 2 or x.shape[0] < 2:
        raise ValueError("pca_cut_index needs at least two samples")
    if not 0.0 < variance_threshold < 1.0:
        raise ValueError("variance_threshold must lie in (0, 1)")
    x = x.reshape(x.shape[0], -1)
    centred = x - x.mean(axis=0)
    scale = max(np.linalg.norm(x), 1.0)
    if np.linalg.norm(centred) <= 1e-12 * scale:
        return 1
    energy = np.linalg.svd(centred, compute_uv=False) ** 2
    ratio = np.cumsum(energy) / energy.sum()
    return int(np.searchsorted(ratio, variance_threshold, side="left") + 1)


def rank_curve(trajectory: Trajectory, threshold: float = 0.99) -> RankCurve:
    if not trajectory.recorded or not trajectory.x0_pred_snapshots:
        raise ValueError("rank_curve needs a trajectory with recorded predictions")
    indices = tuple(pca_cut_index(x0, threshold) for x0 in trajectory.x0_pred_snapshots)
    return RankCurve(tuple(float(t) for t in trajectory.times), indices)


def find_switch_time(curve: RankCurve) -> float:
    """Time of the minimal cut index; ties go to the smallest time."""
    if not curve.times:
        raise ValueError("empty rank curve")
    best = min(zip(curve.cut_indices, curve.times))
    return float(best[1])


def select_switch_time(
    family: ResolutionFamily,
    low_factor: int,
    kind,
    n: int,
    sched: ContinuousSchedule,
    seed: int = 0,
    grid: int = 100,
    threshold: float = 0.99,
    x_init=None,
) -> tuple[float, RankCurve]:
    """Record a low-resolution run on a dense uniform grid and pick the switch time."""
    c, h, w = family.base.shape
    f = check_power_of_two(low_factor, minimum=2)
    if x_init is None:
        x_init = BatchRng(seed, n, "init").standard_normal((n, c, h // f, w // f))
    x = x_init
    seq = uniform_sequence(grid, sched.t_train, 0.0)
    kind = SamplerKind(kind)
    rng = BatchRng(seed, n, "ancestral/low") if kind is SamplerKind.ANCESTRAL else None
    traj = run_sampler(family.denoiser(f, sched), kind, seq, check_batch(x), sched, rng, True, f)
    curve = rank_curve(traj, threshold)
    return find_switch_time(curve), curve
