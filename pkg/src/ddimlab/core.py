"""Forward diffusion, the tractable posterior, and DDPM / DDIM samplers.

Samples are plain float64 numpy arrays. Batched inputs put the batch on the
leading axis; every formula here is elementwise so shapes pass straight through.
"""

from __future__ import annotations

import math
from typing import Callable, Protocol

import numpy as np

from .schedule import NoiseSchedule, ScheduleError, sigma_t


class RngStream:
    """Seeded normal-variate source (PCG64) with a running draw counter."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape) -> np.ndarray:
        z = self._gen.standard_normal(shape)
        self.counter += z.size
        return z

    def uniform(self, shape=None) -> np.ndarray:
        u = self._gen.random(shape)
        self.counter += np.size(u)
        return u

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        k = self._gen.integers(low, high, size=shape)
        self.counter += np.size(k)
        return k

    def choice(self, n: int, size: int, p=None) -> np.ndarray:
        k = self._gen.choice(n, size=size, p=p)
        self.counter += size
        return k

    def spawn(self, offset: int) -> "RngStream":
        """Independent stream derived deterministically from this one's seed."""
        return RngStream((self.seed * 1_000_003 + offset) % (1 << 63))


class EpsModel(Protocol):
    def __call__(self, xt: np.ndarray, alpha_bar: float) -> np.ndarray: ...


def _same_shape(a, b, what: str):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def forward_diffuse(x0, sched: NoiseSchedule, t: int, eps) -> np.ndarray:
    """x_t = √ᾱ_t·x0 + √(1-ᾱ_t)·eps. ``t = 0`` is the identity."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _same_shape(x0, eps, "forward_diffuse")
    ab = sched.abar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def forward_step(x_prev, sched: NoiseSchedule, t: int, z) -> np.ndarray:
    """One Markov transition q(x_t | x_{t-1}) using standard normal ``z``."""
    a = sched.alpha_at(t)
    return math.sqrt(a) * np.asarray(x_prev, dtype=np.float64) + math.sqrt(1.0 - a) * np.asarray(z)


def posterior_coefficients(sched: NoiseSchedule, t: int) -> tuple[float, float]:
    """(coefficient on x_t, coefficient on x_0) of the posterior mean μ̃_t."""
    ab, ab_prev = sched.abar(t), sched.abar(t - 1)
    a, b = sched.alpha_at(t), sched.beta_at(t)
    return math.sqrt(a) * (1.0 - ab_prev) / (1.0 - ab), math.sqrt(ab_prev) * b / (1.0 - ab)


def posterior_mean(x0, xt, sched: NoiseSchedule, t: int) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    _same_shape(x0, xt, "posterior_mean")
    c_t, c_0 = posterior_coefficients(sched, t)
    return c_t * xt + c_0 * x0


def mean_from_eps(xt, eps_pred, sched: NoiseSchedule, t: int) -> np.ndarray:
    """ε-parameterised reverse mean (1/√α_t)(x_t - (1-α_t)/√(1-ᾱ_t)·ε)."""
    xt = np.asarray(xt, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    _same_shape(xt, eps_pred, "mean_from_eps")
    a = sched.alpha_at(t)
    ab = sched.abar(t)
    return (xt - (1.0 - a) / math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(a)


def predict_x0(xt, eps_pred, sched: NoiseSchedule, t: int) -> np.ndarray:
    ab = sched.abar(t)
    return (np.asarray(xt) - math.sqrt(1.0 - ab) * np.asarray(eps_pred)) / math.sqrt(ab)


def _evaluate(model: EpsModel, xt: np.ndarray, sched: NoiseSchedule, t: int) -> np.ndarray:
    eps = np.asarray(model(xt, sched.abar(t)), dtype=np.float64)
    if eps.shape != xt.shape:
        raise ValueError(f"model returned shape {eps.shape} for input {xt.shape}")
    return eps


def ddpm_sample(
    model: EpsModel,
    sched: NoiseSchedule,
    shape,
    rng: RngStream,
    variance: str = "beta_tilde",
    xT: np.ndarray | None = None,
) -> np.ndarray:
    """Ancestral sampling: x_T ~ N(0, I), then T reverse steps with z = 0 at t = 1.

    ``variance`` selects the fixed model variance, ``"beta_tilde"`` (default)
    or ``"beta"``.
    """
    if variance not in ("beta_tilde", "beta"):
        raise ValueError(f"unknown variance choice {variance!r}")
    x = rng.normal(shape) if xT is None else np.array(xT, dtype=np.float64)
    for t in range(sched.T, 0, -1):
        eps = _evaluate(model, x, sched, t)
        mean = mean_from_eps(x, eps, sched, t)
        if t > 1:
            var = sched.beta_tilde_at(t) if variance == "beta_tilde" else sched.beta_at(t)
            x = mean + math.sqrt(var) * rng.normal(x.shape)
        else:
            x = mean
    return x


def ddim_step(xt, eps_pred, sched: NoiseSchedule, t: int, eta: float, rng: RngStream | None = None):
    """One generalised DDIM update. Returns ``(x_prev, x0_pred)``.

    At ``eta == 0`` the step is deterministic and ``rng`` is not touched.
    """
    xt = np.asarray(xt, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    _same_shape(xt, eps_pred, "ddim_step")
    sigma = sigma_t(sched, t, eta)
    ab_prev = sched.abar(t - 1)
    dir_var = 1.0 - ab_prev - sigma * sigma
    if dir_var < 0:
        raise ScheduleError(
            f"eta={eta} gives sigma_{t}^2={sigma * sigma:.6g} > 1 - alpha_bar_{t - 1}"
            f"={1.0 - ab_prev:.6g} for {sched.spec.describe()}"
        )
    x0_pred = predict_x0(xt, eps_pred, sched, t)
    x_prev = math.sqrt(ab_prev) * x0_pred + math.sqrt(dir_var) * eps_pred
    if sigma > 0:
        if rng is None:
            raise ValueError("eta > 0 requires an RngStream")
        x_prev = x_prev + sigma * rng.normal(xt.shape)
    return x_prev, x0_pred


def max_valid_eta(sched: NoiseSchedule) -> float:
    """Largest eta for which every DDIM step has a nonnegative direction variance."""
    limits = [
        (1.0 - sched.abar(t - 1)) / sched.beta_tilde_at(t)
        for t in range(2, sched.T + 1)
        if sched.beta_tilde_at(t) > 0
    ]
    return min(limits) if limits else math.inf


def ddim_sample(
    model: EpsModel,
    sched: NoiseSchedule,
    xT,
    eta: float = 0.0,
    rng: RngStream | None = None,
    callback: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
) -> np.ndarray:
    """Run ``ddim_step`` from t = T down to 1 starting at ``xT``.

    ``callback(t, x_prev, x0_pred)`` is invoked after every step.
    """
    if eta < 0:
        raise ScheduleError(f"eta must be >= 0, got {eta}")
    if eta > max_valid_eta(sched):
        raise ScheduleError(
            f"eta={eta} exceeds the largest valid value {max_valid_eta(sched):.6g} "
            f"for {sched.spec.describe()}"
        )
    x = np.array(xT, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("ddim_sample: non-finite latent")
    for t in range(sched.T, 0, -1):
        eps = _evaluate(model, x, sched, t)
        x, x0_pred = ddim_step(x, eps, sched, t, eta, rng)
        if callback is not None:
            callback(t, x, x0_pred)
    return x


def gaussian_kl(mean_q, var_q: float, mean_p, var_p: float) -> float:
    """KL(N(mean_q, var_q·I) || N(mean_p, var_p·I)) in nats, summed over coordinates."""
    if var_q <= 0 or var_p <= 0:
        raise ValueError("variances must be positive")
    diff = np.asarray(mean_q, dtype=np.float64) - np.asarray(mean_p, dtype=np.float64)
    d = diff.size
    kl = 0.5 * (d * (math.log(var_p / var_q) + var_q / var_p - 1.0) + float(np.sum(diff * diff)) / var_p)
    return max(kl, 0.0)


def vlb_term_kl(x0, xt, model_mean, model_var: float, sched: NoiseSchedule, t: int) -> float:
    """KL between the forward posterior at step t and a fixed-variance model Gaussian."""
    if t < 2:
        raise ScheduleError("vlb_term_kl needs t >= 2 (posterior variance vanishes at t = 1)")
    if model_var <= 0:
        raise ValueError(f"model variance must be positive, got {model_var}")
    mu = posterior_mean(x0, xt, sched, t)
    _same_shape(mu, model_mean, "vlb_term_kl")
    return gaussian_kl(mu, sched.beta_tilde_at(t), model_mean, model_var)
