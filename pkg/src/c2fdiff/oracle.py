"""Noise-prediction interface and the exact Gaussian-mixture denoiser."""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ._validation import check_batch, check_power_of_two, check_time
from .schedule import ContinuousSchedule


@dataclass(frozen=True, eq=False)
class GaussianMixtureModel:
    """Diagonal-covariance mixture over images of shape ``(C, H, W)``.

    ``means`` and ``variances`` are ``(n_components, C*H*W)`` arrays.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    shape: tuple[int, int, int]

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        mu = np.array(self.means, dtype=np.float64)
        var = np.array(self.variances, dtype=np.float64)
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 3 or min(shape) < 1:
            raise ValueError(f"shape must be (C, H, W), got {shape}")
        d = int(np.prod(shape))
        if mu.ndim == 1:
            mu = mu[None, :]
        if var.ndim == 1:
            var = var[None, :]
        mu = mu.reshape(mu.shape[0], -1)
        var = var.reshape(var.shape[0], -1)
        if not (w.size == mu.shape[0] == var.shape[0]):
            raise ValueError("weights, means and variances disagree on the component count")
        if mu.shape[1] != d or var.shape[1] != d:
            raise ValueError(f"components must have dimension {d}")
        if np.any(w <= 0.0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(var <= 0.0) or not np.all(np.isfinite(var)) or not np.all(np.isfinite(mu)):
            raise ValueError("variances must be finite and strictly positive")
        for name, arr in (("weights", w), ("means", mu), ("variances", var)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "shape", shape)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Exact per-pixel mean and variance of the mixture."""
        mean = self.weights @ self.means
        second = self.weights @ (self.variances + self.means**2)
        return mean, second - mean**2

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianMixtureModel":
        try:
            return cls(data["weights"], data["means"], data["variances"], tuple(data["shape"]))
        except KeyError as exc:
            raise ValueError(f"mixture specification missing key {exc.args[0]!r}") from None


def point_mass(mean, shape, variance: float = 1e-30) -> GaussianMixtureModel:
    """Single-component model whose spread is far below double resolution."""
    mean = np.asarray(mean, dtype=np.float64).reshape(1, -1)
    return GaussianMixtureModel([1.0], mean, np.full_like(mean, variance), shape)


def _flatten(gmm: GaussianMixtureModel, x_t) -> tuple[np.ndarray, tuple]:
    x = check_batch(x_t, "x_t", ndim=None)
    if x.ndim < 2 or int(np.prod(x.shape[1:])) != gmm.dim:
        raise ValueError(f"x_t of shape {x.shape} does not match mixture dimension {gmm.dim}")
    return x.reshape(x.shape[0], gmm.dim), x.shape


def _marginal_terms(gmm, x, a):
    s = a * gmm.variances + (1.0 - a)  # (K, d)
    resid = x[:, None, :] - np.sqrt(a) * gmm.means[None, :, :]  # (n, K, d)
    log_dens = -0.5 * np.sum(np.log(2.0 * np.pi * s)[None] + resid**2 / s[None], axis=2)
    log_w = np.log(gmm.weights)[None, :] + log_dens
    log_w -= logsumexp(log_w, axis=1, keepdims=True)
    return s, resid, np.exp(log_w)


def responsibilities(gmm: GaussianMixtureModel, x_t, t: float, sched: ContinuousSchedule):
    """Posterior component probabilities given ``x_t``, shape ``(n, K)``."""
    x, _ = _flatten(gmm, x_t)
    a = sched.alpha_bar(check_time(t, sched.t_train))
    return _marginal_terms(gmm, x, a)[2]


def posterior_x0_mean(gmm: GaussianMixtureModel, x_t, t: float, sched: ContinuousSchedule):
    """``E[x0 | x_t]`` under the variance-preserving forward process."""
    x, shape = _flatten(gmm, x_t)
    a = sched.alpha_bar(check_time(t, sched.t_train))
    if a == 1.0:
        return x.reshape(shape).copy()
    if gmm.n_components == 1:
        # responsibilities are identically one
        s = a * gmm.variances[0] + (1.0 - a)
        resid = x - np.sqrt(a) * gmm.means[0]
        return (gmm.means[0] + (np.sqrt(a) * gmm.variances[0] / s) * resid).reshape(shape)
    s, resid, w = _marginal_terms(gmm, x, a)
    m = gmm.means[None] + (np.sqrt(a) * gmm.variances / s)[None] * resid
    return np.einsum("nk,nkd->nd", w, m).reshape(shape)


def predict_eps_analytic(gmm: GaussianMixtureModel, x_t, t: float, sched: ContinuousSchedule):
    a = sched.alpha_bar(check_time(t, sched.t_train))
    if a >= 1.0:
        raise ValueError("noise prediction is undefined at t = 0")
    x0 = posterior_x0_mean(gmm, x_t, t, sched)
    return (np.asarray(x_t, dtype=np.float64) - np.sqrt(a) * x0) / np.sqrt(1.0 - a)


def block_average(batch: np.ndarray, factor: int) -> np.ndarray:
    """Mean over non-overlapping ``factor x factor`` blocks of the last two axes."""
    factor = check_power_of_two(factor)
    *lead, h, w = batch.shape
    if h % factor or w % factor:
        raise ValueError(f"spatial size {h}x{w} not divisible by {factor}")
    blocks = batch.reshape(*lead, h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(-3, -1))


def downsample_mixture(gmm: GaussianMixtureModel, factor: int) -> GaussianMixtureModel:
    """Exact law of block-averaged samples."""
    factor = check_power_of_two(factor)
    if factor == 1:
        return gmm
    c, h, w = gmm.shape
    k = gmm.n_components
    means = block_average(gmm.means.reshape(k, c, h, w), factor)
    variances = block_average(gmm.variances.reshape(k, c, h, w), factor) / factor**2
    return GaussianMixtureModel(
        gmm.weights, means.reshape(k, -1), variances.reshape(k, -1), (c, h // factor, w // factor)
    )


def sample_x0(gmm: GaussianMixtureModel, n: int, rng) -> np.ndarray:
    """Draw ``n`` images. ``rng`` needs ``random`` and ``standard_normal``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    u = np.asarray(rng.random((n,))).reshape(n)
    cdf = np.cumsum(gmm.weights)
    comp = np.minimum(np.searchsorted(cdf, u, side="right"), gmm.n_components - 1)
    z = np.asarray(rng.standard_normal((n, gmm.dim))).reshape(n, gmm.dim)
    x = gmm.means[comp] + np.sqrt(gmm.variances[comp]) * z
    return x.reshape((n,) + gmm.shape)


def blob_mixture(
    n_components: int = 2,
    shape=(1, 8, 8),
    seed: int = 0,
    radius: float = 0.25,
    amplitude: float = 1.0,
    variance: float = 0.05,
) -> GaussianMixtureModel:
    """Procedural mixture whose components are Gaussian blobs on a -1 background.

    Blob centres, per-channel contrast and weights come from the seeded
    counter-based streams, so the model is reproducible from its recipe.
    """
    from .rng import RngStream

    c, h, w = (int(s) for s in shape)
    stream = RngStream(seed, 0, "blob_mixture")
    yy, xx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    means = []
    for _ in range(n_components):
        cy, cx = stream.random(2) * 0.6 + 0.2
        contrast = 0.5 + 0.5 * stream.random(c)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius**2))
        img = -1.0 + 2.0 * amplitude * contrast[:, None, None] * blob[None]
        means.append(np.clip(img, -1.0, 1.0).reshape(-1))
    raw = 1.0 + stream.random(n_components)
    weights = raw / raw.sum()
    weights[-1] = 1.0 - weights[:-1].sum()
    means = np.array(means)
    return GaussianMixtureModel(weights, means, np.full_like(means, variance), (c, h, w))


class Denoiser(ABC):
    """Noise estimator at a fixed resolution.

    Subclasses implement :meth:`predict_eps`; the clean-image prediction
    follows from ``x0 = (x_t - sqrt(1 - ab) * eps) / sqrt(ab)``.
    """

    resolution = None

    def __init__(self, schedule: ContinuousSchedule):
        self.schedule = schedule

    @abstractmethod
    def predict_eps(self, x_t, t: float, resolution=None) -> np.ndarray: ...

    def predict_x0(self, x_t, t: float, resolution=None) -> np.ndarray:
        a = self.schedule.alpha_bar(t)
        eps = self.predict_eps(x_t, t, resolution)
        return (np.asarray(x_t) - np.sqrt(1.0 - a) * eps) / np.sqrt(a)

    def predict(self, x_t, t: float, resolution=None) -> tuple[np.ndarray, np.ndarray]:
        """``(eps, x0)`` pair at time ``t``."""
        return self.predict_eps(x_t, t, resolution), self.predict_x0(x_t, t, resolution)

    def _check_resolution(self, resolution):
        if resolution is not None and self.resolution is not None and resolution != self.resolution:
            raise ValueError(f"denoiser serves resolution {self.resolution}, asked for {resolution}")


class AnalyticDenoiser(Denoiser):
    """Exact posterior-mean denoiser for a :class:`GaussianMixtureModel`.

    ``x0`` is computed directly and ``eps`` is derived from it, so
    ``x_t == sqrt(ab) * x0 + sqrt(1 - ab) * eps`` holds up to rounding.
    """

    def __init__(self, gmm: GaussianMixtureModel, schedule: ContinuousSchedule, resolution=None):
        super().__init__(schedule)
        self.gmm = gmm
        self.resolution = resolution

    @property
    def shape(self):
        return self.gmm.shape

    def predict_x0(self, x_t, t, resolution=None):
        self._check_resolution(resolution)
        return posterior_x0_mean(self.gmm, x_t, t, self.schedule)

    def predict_eps(self, x_t, t, resolution=None):
        self._check_resolution(resolution)
        return predict_eps_analytic(self.gmm, x_t, t, self.schedule)

    def predict(self, x_t, t, resolution=None):
        self._check_resolution(resolution)
        a = self.schedule.alpha_bar(check_time(t, self.schedule.t_train))
        if a >= 1.0:
            raise ValueError("noise prediction is undefined at t = 0")
        x0 = posterior_x0_mean(self.gmm, x_t, t, self.schedule)
        eps = (np.asarray(x_t, dtype=np.float64) - np.sqrt(a) * x0) / np.sqrt(1.0 - a)
        return eps, x0


class ResolutionFamily:
    """Analytic models of one data law at power-of-two downsampling factors."""

    def __init__(self, base: GaussianMixtureModel, models: dict | None = None):
        self.base = base
        self._models = {1: base}
        for factor, gmm in (models or {}).items():
            factor = check_power_of_two(int(factor))
            c, h, w = base.shape
            if gmm.shape != (c, h // factor, w // factor):
                raise ValueError(f"model for factor {factor} has shape {gmm.shape}")
            self._models[factor] = gmm

    def model(self, factor: int) -> GaussianMixtureModel:
        factor = check_power_of_two(factor)
        if factor not in self._models:
            self._models[factor] = downsample_mixture(self.base, factor)
        return self._models[factor]

    def denoiser(self, factor: int, schedule: ContinuousSchedule) -> AnalyticDenoiser:
        return AnalyticDenoiser(self.model(factor), schedule, resolution=factor)

    def factors(self) -> list[int]:
        return sorted(self._models)
