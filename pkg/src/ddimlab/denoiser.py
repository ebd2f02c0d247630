"""Noise predictors ε(x_t, ᾱ_t): a closed-form Gaussian-mixture oracle and a small MLP.

Both are conditioned on the noise level ᾱ_t rather than on the integer step,
so a trained model can be reused under a different schedule.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import RngStream
from .schedule import NoiseSchedule
from .tensorio import load_tensor_set, save_tensor_set

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# Gaussian mixture oracle
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Isotropic Gaussian mixture: component k is N(means[k], variances[k]·I)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.asarray(self.variances, dtype=np.float64).reshape(-1)
        if not (len(w) == len(mu) == len(var)):
            raise ValueError("weights, means and variances disagree on component count")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be positive and sum to 1 (sum={w.sum()!r})")
        if np.any(var <= 0):
            raise ValueError("component variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        m = self.mean()
        cov = np.zeros((self.dim, self.dim))
        for w, mu, v in zip(self.weights, self.means, self.variances):
            cov += w * (v * np.eye(self.dim) + np.outer(mu, mu))
        return cov - np.outer(m, m)

    def sample(self, n: int, rng: RngStream) -> np.ndarray:
        k = rng.choice(len(self.weights), n, p=self.weights)
        z = rng.normal((n, self.dim))
        return self.means[k] + np.sqrt(self.variances[k])[:, None] * z

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GaussianMixture":
        return cls(np.asarray(doc["weights"]), np.asarray(doc["means"]), np.asarray(doc["variances"]))


def eight_gaussians(radius: float = 2.0, variance: float = 0.02) -> GaussianMixture:
    angles = np.arange(8) * (2 * math.pi / 8)
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return GaussianMixture(np.full(8, 1 / 8), means, np.full(8, variance))


def _noisy_components(mix: GaussianMixture, xt: np.ndarray, alpha_bar: float):
    """Per-component offsets x - √ᾱ μ_k, marginal variances and log responsibilities."""
    x = np.asarray(xt, dtype=np.float64)
    if x.shape[-1] != mix.dim:
        raise ValueError(f"sample dimension {x.shape[-1]} != mixture dimension {mix.dim}")
    flat = x.reshape(-1, mix.dim)
    sa = math.sqrt(alpha_bar)
    s = alpha_bar * mix.variances + (1.0 - alpha_bar)  # (K,)
    diff = flat[:, None, :] - sa * mix.means[None, :, :]  # (N, K, d)
    sq = np.einsum("nkd,nkd->nk", diff, diff)
    logp = np.log(mix.weights) - 0.5 * mix.dim * np.log(2 * math.pi * s) - sq / (2 * s)
    logp -= logp.max(axis=1, keepdims=True)
    log_r = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    return flat, diff, s, log_r


def responsibilities(mix: GaussianMixture, xt, alpha_bar: float) -> np.ndarray:
    """Posterior component probabilities p(k | x_t), shape (N, K)."""
    return np.exp(_noisy_components(mix, xt, alpha_bar)[3])


def posterior_x0_mean(mix: GaussianMixture, xt, alpha_bar: float) -> np.ndarray:
    """E[x_0 | x_t] under the mixture prior."""
    x = np.asarray(xt, dtype=np.float64)
    flat, diff, s, log_r = _noisy_components(mix, x, alpha_bar)
    gain = math.sqrt(alpha_bar) * mix.variances / s  # (K,)
    comp = mix.means[None] + gain[None, :, None] * diff
    return np.einsum("nk,nkd->nd", np.exp(log_r), comp).reshape(x.shape)


def eps_from_alpha_bar(mix: GaussianMixture, xt, alpha_bar: float) -> np.ndarray:
    """Optimal noise prediction at noise level ᾱ.

    Algebraically equal to (x_t - √ᾱ E[x0|x_t]) / √(1-ᾱ), written as
    √(1-ᾱ) Σ_k r_k (x_t - √ᾱ μ_k) / s_k so it stays finite as ᾱ -> 1.
    """
    if not 0.0 <= alpha_bar <= 1.0:
        raise ValueError(f"alpha_bar {alpha_bar} outside [0, 1]")
    x = np.asarray(xt, dtype=np.float64)
    _, diff, s, log_r = _noisy_components(mix, x, alpha_bar)
    eps = math.sqrt(1.0 - alpha_bar) * np.einsum("nk,nkd->nd", np.exp(log_r) / s[None], diff)
    return eps.reshape(x.shape)


def eps_analytic(mix: GaussianMixture, xt, sched: NoiseSchedule, t: int) -> np.ndarray:
    return eps_from_alpha_bar(mix, xt, sched.abar(sched.check_t(t)))


class AnalyticDenoiser:
    """Callable oracle ``model(x_t, ᾱ_t) -> ε``."""

    def __init__(self, mixture: GaussianMixture):
        self.mixture = mixture

    @property
    def dim(self) -> int:
        return self.mixture.dim

    def __call__(self, xt, alpha_bar: float) -> np.ndarray:
        return eps_from_alpha_bar(self.mixture, xt, alpha_bar)


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------

_LAYERS = ("W1", "b1", "W2", "b2", "W3", "b3")


def time_features(alpha_bar, k: int) -> np.ndarray:
    """k sinusoidal features of ᾱ (k/2 sines, k/2 cosines), frequencies 1..1e4 geometric."""
    ab = np.atleast_1d(np.asarray(alpha_bar, dtype=np.float64))
    if k == 0:
        return np.zeros((len(ab), 0))
    if k % 2:
        raise ValueError("number of time features must be even")
    half = k // 2
    freqs = np.geomspace(1.0, 1e4, half) if half > 1 else np.ones(1)
    angles = 2 * math.pi * ab[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _silu(x):
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, sig


@dataclass(eq=False)
class MlpParams:
    """Three dense layers: (d_in + k) -> h -> h -> d_out, SiLU between them."""

    d_in: int
    d_out: int
    k: int
    h: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, d_in: int, d_out: int | None = None, h: int = 128, k: int = 16,
             rng: RngStream | None = None, zero: bool = False) -> "MlpParams":
        d_out = d_in if d_out is None else d_out
        sizes = [(d_in + k, h), (h, h), (h, d_out)]
        tensors = {}
        for i, (fan_in, fan_out) in enumerate(sizes, start=1):
            if zero or rng is None:
                W = np.zeros((fan_in, fan_out))
            else:
                W = rng.normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)
            tensors[f"W{i}"] = W
            tensors[f"b{i}"] = np.zeros(fan_out)
        return cls(d_in, d_out, k, h, tensors)

    def copy(self) -> "MlpParams":
        return MlpParams(self.d_in, self.d_out, self.k, self.h, {n: a.copy() for n, a in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[n].ravel() for n in _LAYERS])

    def validate(self) -> None:
        expect = {"W1": (self.d_in + self.k, self.h), "b1": (self.h,), "W2": (self.h, self.h),
                  "b2": (self.h,), "W3": (self.h, self.d_out), "b3": (self.d_out,)}
        for name, shape in expect.items():
            arr = self.tensors.get(name)
            if arr is None or arr.shape != shape:
                raise ValueError(f"MLP tensor {name}: expected {shape}, got {None if arr is None else arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"MLP tensor {name} has non-finite entries")

    def save(self, directory, extra: dict | None = None) -> None:
        meta = {"d_in": self.d_in, "d_out": self.d_out, "k": self.k, "h": self.h}
        if extra:
            meta.update(extra)
        save_tensor_set(directory, {n: self.tensors[n] for n in _LAYERS}, {"mlp": meta})

    @classmethod
    def load(cls, directory) -> "MlpParams":
        tensors, doc = load_tensor_set(Path(directory))
        meta = doc["mlp"]
        params = cls(meta["d_in"], meta["d_out"], meta["k"], meta["h"], tensors)
        params.validate()
        return params


def mlp_forward(params: MlpParams, inp: np.ndarray):
    """Returns (output, cache). ``inp`` is (B, d_in + k)."""
    p = params.tensors
    z1 = inp @ p["W1"] + p["b1"]
    a1, s1 = _silu(z1)
    z2 = a1 @ p["W2"] + p["b2"]
    a2, s2 = _silu(z2)
    out = a2 @ p["W3"] + p["b3"]
    return out, (inp, z1, s1, a1, z2, s2, a2)


def mlp_backward(params: MlpParams, cache, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    p = params.tensors
    inp, z1, s1, a1, z2, s2, a2 = cache
    grads = {"W3": a2.T @ grad_out, "b3": grad_out.sum(axis=0)}
    g = grad_out @ p["W3"].T
    g = g * s2 * (1.0 + z2 * (1.0 - s2))
    grads["W2"] = a1.T @ g
    grads["b2"] = g.sum(axis=0)
    g = g @ p["W2"].T
    g = g * s1 * (1.0 + z1 * (1.0 - s1))
    grads["W1"] = inp.T @ g
    grads["b1"] = g.sum(axis=0)
    return grads


def denoiser_input(params: MlpParams, xt: np.ndarray, alpha_bar) -> np.ndarray:
    x = np.asarray(xt, dtype=np.float64).reshape(-1, params.d_in)
    ab = np.broadcast_to(np.asarray(alpha_bar, dtype=np.float64), (len(x),))
    return np.concatenate([x, time_features(ab, params.k)], axis=1)


def squared_error_loss(params: MlpParams, inp: np.ndarray, target: np.ndarray):
    """Batch mean of ||target - mlp(inp)||² and its gradient."""
    out, cache = mlp_forward(params, inp)
    resid = out - target
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    grads = mlp_backward(params, cache, 2.0 * resid / len(inp))
    return loss, grads


def eps_mlp(params: MlpParams, xt, sched: NoiseSchedule, t: int) -> np.ndarray:
    return MlpDenoiser(params)(xt, sched.abar(sched.check_t(t)))


class MlpDenoiser:
    def __init__(self, params: MlpParams):
        if params.d_in != params.d_out:
            raise ValueError("denoiser MLP must map d -> d")
        self.params = params

    @property
    def dim(self) -> int:
        return self.params.d_in

    def __call__(self, xt, alpha_bar: float) -> np.ndarray:
        x = np.asarray(xt, dtype=np.float64)
        if x.shape[-1] != self.params.d_in:
            raise ValueError(f"input dimension {x.shape[-1]} != model dimension {self.params.d_in}")
        out, _ = mlp_forward(self.params, denoiser_input(self.params, x, alpha_bar))
        return out.reshape(x.shape)


# --------------------------------------------------------------------------
# Training (noise regression with plain SGD)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    n_steps: int = 20_000
    learning_rate: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.n_steps < 1:
            raise ValueError("batch_size and n_steps must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")


@dataclass
class TrainResult:
    params: MlpParams
    losses: np.ndarray

    def loss_csv(self) -> str:
        rows = ["step,loss"] + [f"{i},{v:.17g}" for i, v in enumerate(self.losses, start=1)]
        return "\n".join(rows) + "\n"


def sgd_step(params: MlpParams, grads: dict[str, np.ndarray], lr: float) -> None:
    if lr == 0:
        return
    for name, g in grads.items():
        params.tensors[name] -= lr * g


def train_denoiser(
    data_sampler: Callable[[int, RngStream], np.ndarray],
    sched: NoiseSchedule,
    cfg: TrainConfig,
    params: MlpParams | None = None,
    hidden: int = 128,
    n_time_features: int = 16,
    log_every: int = 0,
) -> TrainResult:
    """Fit an MLP ε-predictor with the unweighted noise-regression loss.

    Each step draws a batch x0, per-sample t ~ U{1..T}, ε ~ N(0, I), forms
    x_t by the direct flow and takes one SGD step on ||ε - ε_θ(x_t, ᾱ_t)||².
    """
    rng = RngStream(cfg.seed)
    if params is None:
        probe = np.asarray(data_sampler(1, rng.spawn(0)))
        params = MlpParams.init(probe.shape[-1], h=hidden, k=n_time_features, rng=rng.spawn(1))
    else:
        params = params.copy()
    d = params.d_in
    alpha_bar = np.asarray(sched.alpha_bar)
    losses = np.empty(cfg.n_steps)
    for step in range(cfg.n_steps):
        x0 = np.asarray(data_sampler(cfg.batch_size, rng), dtype=np.float64).reshape(cfg.batch_size, d)
        t = rng.integers(1, sched.T + 1, cfg.batch_size)
        eps = rng.normal((cfg.batch_size, d))
        ab = alpha_bar[t]
        xt = np.sqrt(ab)[:, None] * x0 + np.sqrt(1.0 - ab)[:, None] * eps
        loss, grads = squared_error_loss(params, denoiser_input(params, xt, ab), eps)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {step + 1} (lr={cfg.learning_rate})")
        losses[step] = loss
        sgd_step(params, grads, cfg.learning_rate)
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.5f", step + 1, float(losses[step + 1 - log_every: step + 1].mean()))
    return TrainResult(params, losses)
