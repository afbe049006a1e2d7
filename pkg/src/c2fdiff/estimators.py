"""Scikit-learn style wrappers around the coarse-to-fine and TRD pipelines."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_batch, check_positive_int, check_power_of_two
from .c2f import C2fPlan, c2f_noises, c2f_sample, select_switch_time
from .oracle import ResolutionFamily
from .rng import BatchRng
from .sampler import SamplerKind, run_sampler
from .schedule import ContinuousSchedule, uniform_sequence
from .trd import (
    C2fReference,
    CalibrationSet,
    PlainReference,
    TrdConfig,
    combined_init,
    trd_search,
    trd_search_c2f,
)


def _schedule(schedule):
    return schedule if schedule is not None else ContinuousSchedule.linear()


class C2FSampler(TransformerMixin, BaseEstimator):
    """Coarse-to-fine sampler.

    ``fit`` resolves the switch time (from the PCA rank curve of a
    low-resolution run when ``switch_time`` is None). ``transform`` maps
    low-resolution initial noise of shape ``(n, C, H/f, W/f)`` to
    full-resolution samples.

    Attributes set by ``fit``: ``switch_time_``, ``plan_``, ``rank_curve_``.
    """

    def __init__(self, family=None, schedule=None, low_factor=4, t_c_steps=10, t_f_steps=5,
                 switch_time=None, sampler="ddim", upsample="nearest", variance_threshold=0.99,
                 rank_grid=100, rank_samples=64, random_state=0):
        self.family = family
        self.schedule = schedule
        self.low_factor = low_factor
        self.t_c_steps = t_c_steps
        self.t_f_steps = t_f_steps
        self.switch_time = switch_time
        self.sampler = sampler
        self.upsample = upsample
        self.variance_threshold = variance_threshold
        self.rank_grid = rank_grid
        self.rank_samples = rank_samples
        self.random_state = random_state

    def _family(self) -> ResolutionFamily:
        if not isinstance(self.family, ResolutionFamily):
            raise TypeError("family must be a ResolutionFamily")
        return self.family

    def fit(self, X=None, y=None):
        """``X`` optionally supplies the low-resolution noise used for the rank curve."""
        del y
        family = self._family()
        sched = _schedule(self.schedule)
        check_power_of_two(self.low_factor, "low_factor", minimum=2)
        check_positive_int(self.t_f_steps, "t_f_steps")
        check_positive_int(self.t_c_steps, "t_c_steps", minimum=0)
        self.rank_curve_ = None
        if self.switch_time is None:
            x = None if X is None else check_batch(X, "X")
            n = self.rank_samples if x is None else x.shape[0]
            self.switch_time_, self.rank_curve_ = select_switch_time(
                family, self.low_factor, self.sampler, n, sched, self.random_state,
                self.rank_grid, self.variance_threshold, x)
        else:
            self.switch_time_ = float(self.switch_time)
        self.plan_ = C2fPlan.uniform(self.low_factor, self.t_c_steps, self.t_f_steps,
                                     self.switch_time_, sched.t_train, self.upsample)
        return self

    def sample(self, n: int, start: int = 0) -> np.ndarray:
        check_is_fitted(self, "plan_")
        out, _ = c2f_sample(self._family(), self.plan_, self.sampler, n, _schedule(self.schedule),
                            seed=self.random_state, start=start)
        return out.final

    def transform(self, X):
        check_is_fitted(self, "plan_")
        family, plan = self._family(), self.plan_
        x = check_batch(X, "X")
        _, eps = c2f_noises(self.random_state, x.shape[0], family, plan)
        out, _ = c2f_sample(family, plan, self.sampler, x.shape[0], _schedule(self.schedule),
                            seed=self.random_state, noises=(x, eps))
        return out.final


class TRDSearch(BaseEstimator):
    """Time-step redistribution search.

    With ``c2f`` unset, searches a single-resolution sequence of ``n_steps``
    for ``denoiser`` against a ``reference_steps`` reference. With ``c2f``
    set to a fitted :class:`C2FSampler`, searches both stages of its plan
    against a coarse-to-fine reference at the same switch time.

    ``fit(X)`` accepts the calibration initial noise; otherwise
    ``calib_size`` draws are derived from ``random_state``.
    """

    def __init__(self, denoiser=None, schedule=None, n_steps=5, sampler="ddim", n_candidates=5,
                 calib_size=16, max_iterations=10, reference_steps=100, extended=False, c2f=None,
                 random_state=0, n_jobs=1):
        self.denoiser = denoiser
        self.schedule = schedule
        self.n_steps = n_steps
        self.sampler = sampler
        self.n_candidates = n_candidates
        self.calib_size = calib_size
        self.max_iterations = max_iterations
        self.reference_steps = reference_steps
        self.extended = extended
        self.c2f = c2f
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        del y
        sched = _schedule(self.schedule)
        if not SamplerKind(self.sampler).deterministic:
            raise ValueError("TRD needs a deterministic sampler")
        if self.c2f is not None:
            return self._fit_c2f(sched)
        ref = PlainReference(self.sampler, self.reference_steps)
        config = TrdConfig(self.n_candidates, self.calib_size, self.max_iterations, ref,
                           self.extended)
        if X is None:
            calib = CalibrationSet.for_plain(self.denoiser, ref, self.calib_size,
                                             self.random_state, sched)
        else:
            x = check_batch(X, "X")
            seq = uniform_sequence(ref.steps, sched.t_train, 0.0)
            out = run_sampler(self.denoiser, ref.kind, seq, x, sched).final
            calib = CalibrationSet(self.random_state, x, out, reference=ref)
        init = uniform_sequence(self.n_steps, sched.t_train, 0.0)
        self.sequence_, self.trace_ = trd_search(init, config, self.denoiser, calib, sched,
                                                 self.sampler, self.n_jobs)
        self.calibration_ = calib
        self.initial_loss_ = self.trace_.loss_history[0]
        self.loss_ = self.trace_.loss_history[-1]
        return self

    def _fit_c2f(self, sched):
        c2f = self.c2f
        check_is_fitted(c2f, "plan_")
        plan = c2f.plan_
        ref = C2fReference.uniform(plan.low_factor, plan.switch_time, sched.t_train,
                                   self.reference_steps, self.reference_steps, self.sampler,
                                   plan.upsample_kind)
        config = TrdConfig(self.n_candidates, self.calib_size, self.max_iterations, ref,
                           self.extended)
        calib = CalibrationSet.for_c2f(c2f.family, ref, self.calib_size, self.random_state, sched)
        low, high = combined_init(plan.t_c_steps, plan.t_f_steps, sched.t_train, plan.switch_time)
        low, high, trace = trd_search_c2f(low, high, config, c2f.family, calib, sched,
                                          self.sampler, self.n_jobs)
        self.low_sequence_, self.high_sequence_, self.trace_ = low, high, trace
        self.sequence_ = high
        self.plan_ = plan.with_sequences(low, high)
        self.calibration_ = calib
        self.initial_loss_ = trace.loss_history[0]
        self.loss_ = trace.loss_history[-1]
        return self

    def transform(self, X):
        """Sample from initial noise ``X`` with the searched sequence(s)."""
        check_is_fitted(self, "sequence_")
        sched = _schedule(self.schedule)
        x = check_batch(X, "X")
        if self.c2f is not None:
            family = self.c2f.family
            _, eps = c2f_noises(self.random_state, x.shape[0], family, self.plan_)
            out, _ = c2f_sample(family, self.plan_, self.sampler, x.shape[0], sched,
                                seed=self.random_state, noises=(x, eps))
            return out.final
        return run_sampler(self.denoiser, self.sampler, self.sequence_, x, sched).final

    def sample(self, n: int, start: int = 0) -> np.ndarray:
        check_is_fitted(self, "sequence_")
        if self.c2f is not None:
            out, _ = c2f_sample(self.c2f.family, self.plan_, self.sampler, n,
                                _schedule(self.schedule), seed=self.random_state, start=start)
            return out.final
        x = BatchRng(self.random_state, n, "init", start).standard_normal(
            (n,) + tuple(self.denoiser.shape))
        return self.transform(x)
