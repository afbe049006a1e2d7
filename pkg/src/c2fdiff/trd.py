"""Time-step sequence redistribution by local substitution search."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .c2f import C2fPlan, c2f_noises, c2f_sample
from .metrics import l2_batch
from .oracle import Denoiser, ResolutionFamily
from .rng import BatchRng
from .sampler import SamplerKind, run_sampler
from .schedule import ContinuousSchedule, TimeStepSequence, uniform_sequence


@dataclass(frozen=True)
class PlainReference:
    kind: str = "ddim"
    steps: int = 100

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("reference steps must be >= 1")
        if not SamplerKind(self.kind).deterministic:
            raise ValueError("the reference sampler must be deterministic")

    def to_dict(self):
        return {"type": "plain", "kind": SamplerKind(self.kind).value, "steps": self.steps}


@dataclass(frozen=True)
class C2fReference:
    plan: C2fPlan
    kind: str = "ddim"

    def __post_init__(self):
        if self.plan.t_f_steps < 1:
            raise ValueError("reference steps must be >= 1")
        if not SamplerKind(self.kind).deterministic:
            raise ValueError("the reference sampler must be deterministic")

    @classmethod
    def uniform(cls, low_factor, switch_time, t_max, low_steps=100, high_steps=100, kind="ddim",
                upsample_kind="nearest"):
        plan = C2fPlan.uniform(low_factor, low_steps, high_steps, switch_time, t_max, upsample_kind)
        return cls(plan, kind)

    def to_dict(self):
        return {"type": "c2f", "kind": SamplerKind(self.kind).value, "plan": self.plan.to_dict()}


@dataclass(frozen=True)
class TrdConfig:
    n_candidates: int = 5
    calib_size: int = 16
    max_iterations: int = 10
    reference: PlainReference | C2fReference = field(default_factory=PlainReference)
    extended: bool = False

    def __post_init__(self):
        if self.n_candidates < 1 or self.calib_size < 1:
            raise ValueError("n_candidates and calib_size must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for arr in arrays:
        if arr is not None:
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


class CalibrationSet:
    """Fixed initial noises plus the reference outputs they produce.

    Candidate evaluations replay exactly these noises, so every candidate is
    compared with the reference on identical inputs.
    """

    def __init__(self, seed, init_noise, reference_outputs, renoise_noise=None, reference=None):
        self.seed = int(seed)
        self.init_noise = np.asarray(init_noise, dtype=np.float64)
        self.renoise_noise = None if renoise_noise is None else np.asarray(renoise_noise, np.float64)
        self.reference_outputs = np.asarray(reference_outputs, dtype=np.float64)
        self.reference = reference
        for arr in (self.init_noise, self.renoise_noise, self.reference_outputs):
            if arr is not None:
                arr.setflags(write=False)
        self.noise_digest = _digest(self.init_noise, self.renoise_noise)

    @property
    def size(self) -> int:
        return self.init_noise.shape[0]

    @property
    def is_c2f(self) -> bool:
        return isinstance(self.reference, C2fReference)

    @classmethod
    def for_plain(cls, denoiser: Denoiser, reference: PlainReference, calib_size: int,
                  seed: int, sched: ContinuousSchedule) -> "CalibrationSet":
        shape = tuple(denoiser.shape)
        x = BatchRng(seed, calib_size, "init").standard_normal((calib_size,) + shape)
        seq = uniform_sequence(reference.steps, sched.t_train, 0.0)
        out = run_sampler(denoiser, reference.kind, seq, x, sched).final
        return cls(seed, x, out, reference=reference)

    @classmethod
    def for_c2f(cls, family: ResolutionFamily, reference: C2fReference, calib_size: int,
                seed: int, sched: ContinuousSchedule) -> "CalibrationSet":
        init, eps = c2f_noises(seed, calib_size, family, reference.plan)
        out, _ = c2f_sample(family, reference.plan, reference.kind, calib_size, sched,
                            seed=seed, noises=(init, eps))
        return cls(seed, init, out.final, eps, reference)

    def save(self, path) -> None:
        arrays = {"init_noise": self.init_noise, "reference_outputs": self.reference_outputs,
                  "seed": np.array(self.seed)}
        if self.renoise_noise is not None:
            arrays["renoise_noise"] = self.renoise_noise
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path, reference=None) -> "CalibrationSet":
        with np.load(path) as data:
            return cls(int(data["seed"]), data["init_noise"], data["reference_outputs"],
                       data["renoise_noise"] if "renoise_noise" in data else None, reference)


def cache_key(**parts) -> str:
    """Content hash of JSON-serialisable parts (reference, schedule, mixture, seed...)."""
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:32]


def cached_calibration(cache_dir, key: str, build, reference=None) -> tuple[CalibrationSet, bool]:
    """Load ``<cache_dir>/<key>.npz`` if present, otherwise ``build()`` and store it.

    Returns the set and whether it came from the cache.
    """
    path = Path(cache_dir) / f"{key}.npz"
    if path.exists():
        return CalibrationSet.load(path, reference), True
    calib = build()
    path.parent.mkdir(parents=True, exist_ok=True)
    calib.save(path)
    return calib, False


def candidates(seq: TimeStepSequence, position: int, n: int, t_max: float | None = None,
               extended: bool = False, t_min: float = 0.0) -> list[float]:
    """Evenly divided candidate times around ``seq[position]``.

    Interior positions use both neighbours as bounds. The first (largest)
    and last (smallest) positions use the interval between themselves and
    their sole neighbour; with ``extended`` the outer bound becomes
    ``t_max`` or ``t_min`` instead.
    """
    times = seq.tolist()
    k = len(times)
    if not 0 <= position < k:
        raise IndexError(f"position {position} outside sequence of length {k}")
    if n < 1:
        raise ValueError("n must be >= 1")
    if extended and (position == 0) and t_max is None:
        raise ValueError("extended mode needs t_max")
    if 0 < position < k - 1:
        lo, hi = times[position + 1], times[position - 1]
    elif k == 1:
        if not extended:
            return []
        lo, hi = t_min, t_max
    elif position == 0:
        lo, hi = times[1], (t_max if extended else times[0])
    else:
        lo, hi = (t_min if extended else times[-1]), times[-2]
    if not hi > lo:
        return []
    existing = set(times)
    out = []
    for j in range(1, n + 1):
        c = lo + j * (hi - lo) / (n + 1)
        if lo < c < hi and c not in existing:
            out.append(c)
    return out


def _run_plain(seq, denoiser, kind, calib, sched):
    return run_sampler(denoiser, kind, seq, calib.init_noise, sched).final


def evaluate_sequence(seq, model, kind, calib: CalibrationSet, sched: ContinuousSchedule) -> float:
    """Calibration L2 loss of a candidate sequence against the cached reference.

    ``seq`` is a :class:`TimeStepSequence` with a single denoiser, or a
    ``(low_seq, high_seq)`` pair with a :class:`ResolutionFamily`.
    """
    kind = SamplerKind(kind)
    if not kind.deterministic:
        raise ValueError("calibration needs a deterministic sampler")
    if calib is None or calib.reference_outputs is None:
        raise ValueError("calibration set has no reference outputs")
    if isinstance(seq, tuple):
        if not calib.is_c2f:
            raise ValueError("a (low, high) pair needs a coarse-to-fine calibration set")
        plan = calib.reference.plan.with_sequences(*seq)
        out, _ = c2f_sample(model, plan, kind, calib.size, sched, seed=calib.seed,
                            noises=(calib.init_noise, calib.renoise_noise))
        out = out.final
    else:
        if calib.is_c2f:
            raise ValueError("a coarse-to-fine calibration set needs a (low, high) pair")
        out = _run_plain(seq, model, kind, calib, sched)
    if out.shape != calib.reference_outputs.shape:
        raise ValueError(f"output shape {out.shape} does not match reference "
                         f"{calib.reference_outputs.shape}")
    return l2_batch(out, calib.reference_outputs)


@dataclass
class SearchTrace:
    """Every position visit of a search, plus the running best loss.

    ``loss_history[0]`` is the initial loss; entry ``i + 1`` is the best loss
    after the ``i``-th record.
    """

    records: list = field(default_factory=list)
    loss_history: list = field(default_factory=list)
    iterations: int = 0
    order: str = "low-first"

    @property
    def substitutions(self) -> list:
        return [r for r in self.records if r["accepted"] is not None]

    def to_json(self) -> str:
        body = {"iterations": self.iterations, "traversal": self.order,
                "loss_history": self.loss_history, "records": self.records}
        return json.dumps(body, indent=2)

    def loss_history_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["event", "loss"])
        for i, loss in enumerate(self.loss_history):
            writer.writerow([i, repr(float(loss))])
        return buf.getvalue()


def _search(blocks, caps, config: TrdConfig, loss_fn, names, threads=1):
    blocks = list(blocks)
    memo = {}

    def loss_of(seqs):
        key = tuple(tuple(s.tolist()) for s in seqs)
        if key not in memo:
            memo[key] = float(loss_fn(tuple(seqs)))
        return memo[key]

    best = loss_of(blocks)
    trace = SearchTrace(loss_history=[best])
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for it in range(config.max_iterations):
            trace.iterations = it + 1
            changed = False
            for b in range(len(blocks)):
                for pos in range(len(blocks[b])):
                    seq = blocks[b]
                    cands = candidates(seq, pos, config.n_candidates, caps[b], config.extended)
                    trials = []
                    for c in cands:
                        try:
                            trials.append((c, blocks[:b] + [seq.replace(pos, c)] + blocks[b + 1:]))
                        except ValueError:
                            continue  # would break monotonicity
                    seqsets = [t[1] for t in trials]
                    if pool is not None:
                        losses = list(pool.map(loss_of, seqsets))
                    else:
                        losses = [loss_of(s) for s in seqsets]
                    accepted = None
                    incumbent_loss = best
                    if losses:
                        i = int(np.argmin(losses))
                        if losses[i] < best:
                            accepted = trials[i][0]
                            blocks = seqsets[i]
                            best = losses[i]
                            changed = True
                    trace.records.append({
                        "iteration": it, "stage": names[b], "position": pos,
                        "incumbent": seq[pos], "incumbent_loss": incumbent_loss,
                        "candidates": [t[0] for t in trials], "losses": losses,
                        "accepted": accepted, "loss": best,
                    })
                    trace.loss_history.append(best)
            if not changed:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return blocks, trace


def trd_search(init_seq: TimeStepSequence, config: TrdConfig, denoiser: Denoiser,
               calib: CalibrationSet, sched: ContinuousSchedule, kind="ddim", threads: int = 1):
    """Refine a single-resolution sequence; returns ``(sequence, trace)``."""
    loss_fn = lambda seqs: evaluate_sequence(seqs[0], denoiser, kind, calib, sched)  # noqa: E731
    blocks, trace = _search([init_seq], [float(sched.t_train)], config, loss_fn, ["high"], threads)
    trace.order = "single"
    return blocks[0], trace


def combined_init(t_c_steps: int, t_f_steps: int, t_max: float, t_star: float):
    """Uniform low-resolution steps over ``[t_max, 0]`` and high-resolution over ``[t_star, 0]``."""
    if not 0.0 < t_star <= t_max:
        raise ValueError(f"t_star={t_star} outside (0, {t_max}]")
    return uniform_sequence(t_c_steps, t_max, 0.0), uniform_sequence(t_f_steps, t_star, 0.0)


def trd_search_c2f(low_seq: TimeStepSequence, high_seq: TimeStepSequence, config: TrdConfig,
                   family: ResolutionFamily, calib: CalibrationSet, sched: ContinuousSchedule,
                   kind="ddim", threads: int = 1):
    """Refine both stages of a coarse-to-fine plan, low-resolution positions first.

    High-resolution times are capped at the reference plan's switch time.
    Returns ``(low_seq, high_seq, trace)``.
    """
    if not calib.is_c2f:
        raise ValueError("trd_search_c2f needs a coarse-to-fine calibration set")
    t_star = calib.reference.plan.switch_time
    loss_fn = lambda seqs: evaluate_sequence(seqs, family, kind, calib, sched)  # noqa: E731
    caps = [float(sched.t_train), float(t_star)]
    blocks, trace = _search([low_seq, high_seq], caps, config, loss_fn, ["low", "high"], threads)
    return blocks[0], blocks[1], trace
