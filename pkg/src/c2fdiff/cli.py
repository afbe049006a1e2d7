"""Experiment runner: ``c2fdiff run <config.json>`` and ``c2fdiff report <dir>...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .c2f import C2fPlan, c2f_sample, select_switch_time
from .io import export_images, load_mixture, rows_to_csv
from .metrics import CostModel, SamplingPlan, frechet_to_target, relative_macs
from .oracle import ResolutionFamily, blob_mixture
from .rng import BatchRng
from .sampler import SamplerKind, run_sampler
from .schedule import ContinuousSchedule, uniform_sequence
from .trd import (
    C2fReference,
    CalibrationSet,
    PlainReference,
    TrdConfig,
    cache_key,
    cached_calibration,
    combined_init,
    trd_search,
    trd_search_c2f,
)

log = logging.getLogger("c2fdiff")

MODES = ("plain", "c2f", "trd", "c2f+trd", "pca-switch", "report")

METRIC_COLUMNS = [
    "name", "mode", "sampler", "seed", "steps", "low_factor", "t_c_steps", "t_f_steps",
    "switch_time", "relative_macs", "reduction_percent", "frechet", "initial_loss",
    "final_loss", "sequence", "low_sequence",
]

REPORT_COLUMNS = [
    "name", "mode", "sampler", "seed", "steps", "low_factor", "t_c_steps", "t_f_steps",
    "switch_time", "relative_macs", "reduction_percent", "frechet", "initial_loss",
    "final_loss", "total_seconds",
]


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


class PhaseError(RuntimeError):
    def __init__(self, phase: str, cause: Exception):
        super().__init__(f"phase {phase!r} failed: {cause}")
        self.phase = phase


@dataclass
class RunConfig:
    name: str
    mode: str
    seed: int = 0
    output_dir: str = "runs"
    mixture: dict = field(default_factory=lambda: {"recipe": {}})
    schedule: dict = field(default_factory=dict)
    sampler: str = "ddim"
    n_samples: int = 256
    steps: int = 100
    reference_steps: int = 100
    c2f: dict = field(default_factory=dict)
    trd: dict = field(default_factory=dict)
    images: dict | None = None
    manifests: list = field(default_factory=list)
    base_dir: str = "."

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "RunConfig":
        known = set(cls.__dataclass_fields__) - {"base_dir"}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown key")
        for key in ("name", "mode"):
            if key not in data:
                raise ConfigError(key, "required")
        cfg = cls(**data, base_dir=str(base_dir))
        cfg.validate()
        return cfg

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be exactly one of {MODES}")
        try:
            SamplerKind(self.sampler)
        except ValueError:
            raise ConfigError("sampler", f"unknown sampler {self.sampler!r}") from None
        for key in ("n_samples", "steps", "reference_steps"):
            if not isinstance(getattr(self, key), int) or getattr(self, key) < 1:
                raise ConfigError(key, "must be a positive integer")
        if self.mode == "report":
            if not self.manifests:
                raise ConfigError("manifests", "report mode needs at least one run directory")
            return
        mix = self.mixture
        if not isinstance(mix, dict) or len(set(mix) & {"file", "files", "recipe"}) != 1:
            raise ConfigError("mixture", "give exactly one of 'file', 'files' or 'recipe'")
        files = [mix["file"]] if "file" in mix else list(mix.get("files", {}).values())
        for f in files:
            if not self.resolve(f).exists():
                raise ConfigError("mixture", f"file {f} does not exist")
        if "files" in mix and "1" not in {str(k) for k in mix["files"]}:
            raise ConfigError("mixture.files", "needs the full-resolution model under key '1'")
        if self.mode in ("trd", "c2f+trd") and not SamplerKind(self.sampler).deterministic:
            raise ConfigError("sampler", "TRD modes need ddim or dpm_solver_pp_2m")
        if self.images is not None and self.images.get("format", "pgm") not in ("pgm", "ppm", "raw"):
            raise ConfigError("images.format", "must be pgm, ppm or raw")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "base_dir"}


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from None
    return RunConfig.from_dict(data, base_dir=path.parent)


def build_schedule(cfg: RunConfig) -> ContinuousSchedule:
    s = {"t_train": 1000, "beta_min": 1e-4, "beta_max": 0.02, "round_times": False}
    unknown = set(cfg.schedule) - set(s)
    if unknown:
        raise ConfigError(f"schedule.{sorted(unknown)[0]}", "unknown key")
    s.update(cfg.schedule)
    try:
        return ContinuousSchedule.linear(s["t_train"], s["beta_min"], s["beta_max"], s["round_times"])
    except (ValueError, TypeError) as exc:
        raise ConfigError("schedule", str(exc)) from None


def build_family(cfg: RunConfig) -> ResolutionFamily:
    mix = cfg.mixture
    try:
        if "recipe" in mix:
            return ResolutionFamily(blob_mixture(**mix["recipe"]))
        if "file" in mix:
            return ResolutionFamily(load_mixture(cfg.resolve(mix["file"])))
        models = {int(k): load_mixture(cfg.resolve(v)) for k, v in mix["files"].items()}
        base = models.pop(1)
        return ResolutionFamily(base, models)
    except (TypeError, ValueError) as exc:
        raise ConfigError("mixture", str(exc)) from None


def _c2f_params(cfg: RunConfig) -> dict:
    p = {"low_factor": 4, "t_c_steps": 10, "t_f_steps": 5, "switch_time": None,
         "upsample": "nearest", "rank_grid": 100, "rank_samples": 64,
         "variance_threshold": 0.99, "reference_low_steps": 100, "reference_high_steps": 100}
    unknown = set(cfg.c2f) - set(p)
    if unknown:
        raise ConfigError(f"c2f.{sorted(unknown)[0]}", "unknown key")
    p.update(cfg.c2f)
    return p


def _trd_params(cfg: RunConfig) -> dict:
    p = {"n_candidates": 5, "calib_size": 16, "max_iterations": 10, "steps": 5,
         "reference_steps": 100, "extended": False}
    unknown = set(cfg.trd) - set(p)
    if unknown:
        raise ConfigError(f"trd.{sorted(unknown)[0]}", "unknown key")
    p.update(cfg.trd)
    return p


def _seq_str(seq) -> str:
    return "" if seq is None else " ".join(repr(float(t)) for t in seq)


class Runner:
    def __init__(self, cfg: RunConfig, out_dir: Path, threads: int = 1):
        self.cfg = cfg
        self.out = out_dir
        self.threads = threads
        self.timings: dict[str, float] = {}
        self.manifest: dict = {
            "tool": "c2fdiff", "version": __version__, "config": cfg.to_dict(),
            "seed": cfg.seed, "status": "running", "outputs": [],
        }
        self.row: dict = {"name": cfg.name, "mode": cfg.mode, "sampler": cfg.sampler,
                          "seed": cfg.seed}

    def phase(self, name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except ConfigError:
            raise
        except Exception as exc:
            raise PhaseError(name, exc) from exc
        finally:
            self.timings[name] = time.perf_counter() - t0

    def write(self, name: str, text: str):
        path = self.out / name
        path.write_text(text)
        self.manifest["outputs"].append(name)

    def execute(self) -> None:
        cfg = self.cfg
        if cfg.mode == "report":
            table = self.phase("report", emit_report, [cfg.resolve(m) for m in cfg.manifests])
            self.write("report.csv", table)
            return
        self.sched = self.phase("setup", build_schedule, cfg)
        self.family = self.phase("setup", build_family, cfg)
        self.kind = SamplerKind(cfg.sampler)
        base = self.family.base.shape[1:]
        self.cost_model = CostModel(base)
        getattr(self, "_mode_" + cfg.mode.replace("+", "_").replace("-", "_"))()
        self.write("metrics.csv", rows_to_csv([self.row], METRIC_COLUMNS))

    def _finish_samples(self, samples, plan: SamplingPlan | None):
        self.row["frechet"] = self.phase("metrics", frechet_to_target, samples, self.family.base)
        if plan is not None:
            report = relative_macs(plan, self.cfg.reference_steps, self.cost_model)
            self.row["relative_macs"] = report.relative_to_reference
            self.row["reduction_percent"] = report.reduction_percent
            self.manifest["cost"] = {"plan": [list(s) for s in plan.stages], **report.as_row()}
        images = self.cfg.images
        if images:
            count = min(int(images.get("count", 8)), samples.shape[0])
            files = self.phase("images", export_images, samples[:count], self.out / "images",
                               images.get("format", "pgm"))
            self.manifest["images"] = [str(f.relative_to(self.out)) for f in files]

    def _plain_samples(self, seq):
        n = self.cfg.n_samples
        x = BatchRng(self.cfg.seed, n, "init").standard_normal((n,) + self.family.base.shape)
        rng = BatchRng(self.cfg.seed, n, "ancestral/high") if not self.kind.deterministic else None
        return run_sampler(self.family.denoiser(1, self.sched), self.kind, seq, x, self.sched,
                           rng).final

    def _mode_plain(self):
        steps = self.cfg.steps
        seq = uniform_sequence(steps, self.sched.t_train, 0.0)
        samples = self.phase("sample", self._plain_samples, seq)
        self.row.update(steps=steps, sequence=_seq_str(seq))
        self.manifest["sequence"] = seq.tolist()
        self._finish_samples(samples, SamplingPlan(((steps, self.family.base.shape[1:]),)))

    def _switch_time(self, p) -> float:
        if p["switch_time"] is not None:
            return float(p["switch_time"])
        t_star, curve = self.phase(
            "pca", select_switch_time, self.family, p["low_factor"], self.kind,
            p["rank_samples"], self.sched, self.cfg.seed, p["rank_grid"], p["variance_threshold"])
        self.write("rank_curve.csv", curve.to_csv())
        return t_star

    def _c2f_row(self, p, plan: C2fPlan):
        self.row.update(low_factor=p["low_factor"], t_c_steps=plan.t_c_steps,
                        t_f_steps=plan.t_f_steps, switch_time=plan.switch_time,
                        sequence=_seq_str(plan.high_sequence),
                        low_sequence=_seq_str(plan.low_sequence))
        self.manifest["switch_time"] = plan.switch_time
        self.manifest["plan"] = plan.to_dict()

    def _mode_pca_switch(self):
        p = _c2f_params(self.cfg)
        p["switch_time"] = None
        t_star = self._switch_time(p)
        self.manifest["switch_time"] = t_star
        self.row.update(low_factor=p["low_factor"], switch_time=t_star)

    def _mode_c2f(self):
        p = _c2f_params(self.cfg)
        t_star = self._switch_time(p)
        plan = C2fPlan.uniform(p["low_factor"], p["t_c_steps"], p["t_f_steps"], t_star,
                               self.sched.t_train, p["upsample"])
        out, _ = self.phase("sample", c2f_sample, self.family, plan, self.kind, self.cfg.n_samples,
                            self.sched, self.cfg.seed)
        self._c2f_row(p, plan)
        self._finish_samples(out.final, self._c2f_cost(plan))

    def _c2f_cost(self, plan: C2fPlan) -> SamplingPlan:
        return SamplingPlan.c2f(self.family.base.shape[1:], plan.low_factor, plan.t_c_steps,
                                plan.t_f_steps)

    def _calibration(self, reference, build):
        key = cache_key(reference=reference.to_dict(), schedule=self.sched.base.to_dict(),
                        round_times=self.sched.round_times, mixture=self.family.base.to_dict(),
                        seed=self.cfg.seed, calib_size=_trd_params(self.cfg)["calib_size"])
        calib, hit = self.phase("reference", cached_calibration, self.out / "cache", key, build,
                                reference)
        self.manifest["reference_cache"] = {"key": key, "hit": hit}
        return calib

    def _trd_config(self, reference) -> TrdConfig:
        t = _trd_params(self.cfg)
        try:
            return TrdConfig(t["n_candidates"], t["calib_size"], t["max_iterations"], reference,
                             t["extended"])
        except (TypeError, ValueError) as exc:
            raise ConfigError("trd", str(exc)) from None

    def _write_trace(self, trace):
        self.write("search_trace.json", trace.to_json())
        self.write("loss_history.csv", trace.loss_history_csv())
        self.row["initial_loss"] = trace.loss_history[0]
        self.row["final_loss"] = trace.loss_history[-1]
        self.manifest["search"] = {"iterations": trace.iterations,
                                   "substitutions": len(trace.substitutions),
                                   "initial_loss": trace.loss_history[0],
                                   "final_loss": trace.loss_history[-1]}

    def _mode_trd(self):
        t = _trd_params(self.cfg)
        ref = PlainReference(self.kind.value, t["reference_steps"])
        config = self._trd_config(ref)
        den = self.family.denoiser(1, self.sched)
        calib = self._calibration(ref, lambda: CalibrationSet.for_plain(
            den, ref, config.calib_size, self.cfg.seed, self.sched))
        init = uniform_sequence(t["steps"], self.sched.t_train, 0.0)
        seq, trace = self.phase("search", trd_search, init, config, den, calib, self.sched,
                                self.kind, self.threads)
        self._write_trace(trace)
        self.row.update(steps=len(seq), sequence=_seq_str(seq))
        self.manifest["sequence"] = seq.tolist()
        samples = self.phase("sample", self._plain_samples, seq)
        self._finish_samples(samples, SamplingPlan(((len(seq), self.family.base.shape[1:]),)))

    def _mode_c2f_trd(self):
        p = _c2f_params(self.cfg)
        t_star = self._switch_time(p)
        ref = C2fReference.uniform(p["low_factor"], t_star, self.sched.t_train,
                                   p["reference_low_steps"], p["reference_high_steps"],
                                   self.kind.value, p["upsample"])
        config = self._trd_config(ref)
        calib = self._calibration(ref, lambda: CalibrationSet.for_c2f(
            self.family, ref, config.calib_size, self.cfg.seed, self.sched))
        low, high = combined_init(p["t_c_steps"], p["t_f_steps"], self.sched.t_train, t_star)
        low, high, trace = self.phase("search", trd_search_c2f, low, high, config, self.family,
                                      calib, self.sched, self.kind, self.threads)
        self._write_trace(trace)
        plan = ref.plan.with_sequences(low, high)
        out, _ = self.phase("sample", c2f_sample, self.family, plan, self.kind,
                            self.cfg.n_samples, self.sched, self.cfg.seed)
        self._c2f_row(p, plan)
        self._finish_samples(out.final, self._c2f_cost(plan))


def run(config_path, seed=None, out=None, threads=None) -> int:
    """Execute one run; returns the process exit status."""
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg.seed = int(seed)
        if out is not None:
            cfg.output_dir = str(out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(out) if out is not None else cfg.resolve(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runner = Runner(cfg, out_dir, threads or os.cpu_count() or 1)
    t0 = time.perf_counter()
    status = 0
    try:
        runner.execute()
        runner.manifest["status"] = "complete"
    except ConfigError as exc:
        runner.manifest.update(status="partial", error=str(exc), failed_key=exc.key)
        print(f"error: {exc}", file=sys.stderr)
        status = 2
    except PhaseError as exc:
        runner.manifest.update(status="partial", error=str(exc), failed_phase=exc.phase)
        print(f"error: {exc}", file=sys.stderr)
        status = 1
    runner.timings["total"] = time.perf_counter() - t0
    runner.manifest["timings"] = runner.timings
    runner.manifest["metrics"] = {k: v for k, v in runner.row.items()}
    (out_dir / "manifest.json").write_text(json.dumps(runner.manifest, indent=2, default=str))
    return status


def emit_report(run_dirs) -> str:
    """One CSV row per run directory (or manifest path), columns ``REPORT_COLUMNS``."""
    rows = []
    if not run_dirs:
        raise ValueError("report needs at least one manifest")
    for d in run_dirs:
        path = Path(d)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            manifest = json.loads(path.read_text())
            row = dict(manifest["metrics"])
            row["total_seconds"] = manifest["timings"]["total"]
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"malformed manifest {path}: {exc}") from None
        rows.append(row)
    return rows_to_csv(rows, REPORT_COLUMNS)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="c2fdiff", description=__doc__)
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap worker threads (default: available cores)")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute a run configuration")
    p_run.add_argument("config")
    p_rep = sub.add_parser("report", help="tabulate run manifests as CSV")
    p_rep.add_argument("dirs", nargs="+")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    if args.command == "run":
        return run(args.config, args.seed, args.out, args.threads)
    try:
        table = emit_report(args.dirs)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.out:
        Path(args.out).write_text(table)
    else:
        sys.stdout.write(table)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
