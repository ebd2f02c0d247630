"""Mapping data points back to DDIM latents.

Two routes: integrate the deterministic sampler backwards (``invert_ode``),
or train a network on (x_0, x_T) pairs produced by the generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import EpsModel, RngStream, ddim_sample
from .denoiser import MlpParams, TrainConfig, TrainingDiverged, mlp_forward, sgd_step, squared_error_loss
from .schedule import NoiseSchedule


@dataclass
class EmbeddingReport:
    per_sample_mse: np.ndarray
    mean_mse: float
    n_steps: int


def invert_ode(model: EpsModel, sched: NoiseSchedule, x0) -> np.ndarray:
    """Run the eta = 0 DDIM update forwards from t = 1 to T.

    The noise estimate for step t is taken at the previous point,
    ε(x_{t-1}, ᾱ_{t-1}); this first-order lag is the only approximation.
    """
    x = np.array(x0, dtype=np.float64)
    for t in range(1, sched.T + 1):
        ab_prev, ab = sched.abar(t - 1), sched.abar(t)
        eps = np.asarray(model(x, ab_prev), dtype=np.float64)
        x0_hat = (x - math.sqrt(1.0 - ab_prev) * eps) / math.sqrt(ab_prev)
        x = math.sqrt(ab) * x0_hat + math.sqrt(1.0 - ab) * eps
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"invert_ode: non-finite latent at step {t}")
    return x


def generate(model: EpsModel, sched: NoiseSchedule, latents) -> np.ndarray:
    return ddim_sample(model, sched, latents, eta=0.0)


def roundtrip_report(model: EpsModel, sched: NoiseSchedule, embed_fn: Callable, probes: Sequence) -> EmbeddingReport:
    """Per-probe MSE between each probe and generate(embed_fn(probe))."""
    probes = np.asarray(probes, dtype=np.float64)
    if probes.ndim == 0 or len(probes) == 0:
        raise ValueError("roundtrip_report needs at least one probe")
    latents = np.asarray(embed_fn(probes), dtype=np.float64)
    recon = generate(model, sched, latents)
    err = (recon - probes).reshape(len(probes), -1)
    per = np.mean(err * err, axis=1)
    return EmbeddingReport(per, float(np.mean(per)), sched.T)


class Embedder:
    """Single-pass latent predictor Emb(x_0) backed by an un-conditioned MLP."""

    def __init__(self, params: MlpParams):
        if params.k != 0:
            raise ValueError("embedder MLP takes no time features")
        self.params = params

    def __call__(self, x0) -> np.ndarray:
        x = np.asarray(x0, dtype=np.float64)
        out, _ = mlp_forward(self.params, x.reshape(-1, self.params.d_in))
        return out.reshape(x.shape)


def make_pairs(model: EpsModel, sched: NoiseSchedule, dim: int, n_pairs: int, rng: RngStream):
    xT = rng.normal((n_pairs, dim))
    return generate(model, sched, xT), xT


def train_embedder(
    model: EpsModel,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    dim: int,
    n_pairs: int = 10_000,
    hidden: int = 128,
    pairs: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Supervised embedder training on generated pairs.

    Draws x_T ~ N(0, I), generates x_0 deterministically, then runs SGD on
    ||x_T - Emb(x_0)||² over minibatches. Returns ``(params, losses)``.
    """
    rng = RngStream(cfg.seed)
    if pairs is None:
        x0, xT = make_pairs(model, sched, dim, n_pairs, rng.spawn(0))
    else:
        x0, xT = (np.asarray(a, dtype=np.float64) for a in pairs)
    params = MlpParams.init(dim, h=hidden, k=0, rng=rng.spawn(1))
    losses = np.empty(cfg.n_steps)
    for step in range(cfg.n_steps):
        idx = rng.integers(0, len(x0), cfg.batch_size)
        loss, grads = squared_error_loss(params, x0[idx], xT[idx])
        if not math.isfinite(loss):
            raise TrainingDiverged(f"embedder loss became {loss} at step {step + 1}")
        losses[step] = loss
        sgd_step(params, grads, cfg.learning_rate)
    return params, losses
