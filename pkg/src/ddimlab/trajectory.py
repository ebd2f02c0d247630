"""Linear yaw trajectories in latent space.

Clusters of same-attribute samples are embedded at a ladder of yaw angles,
a line is fitted through the cluster centroids by least squares, and a
source latent is then moved along that line with closed-loop yaw checks.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset import DatasetRecord, FilterQuery, FilterResult, Light, filter_cluster, mirror_vector
from .tensorio import load_tensor_set, save_tensor_set

log = logging.getLogger(__name__)

EmbedFn = Callable[[np.ndarray], np.ndarray]


class TrajectoryError(ValueError):
    pass


class DegenerateFit(TrajectoryError):
    pass


@dataclass(frozen=True)
class AngleLadder:
    thetas: tuple[float, ...]

    def __post_init__(self):
        th = tuple(float(t) for t in self.thetas)
        if len(th) < 2:
            raise TrajectoryError("an angle ladder needs at least two rungs")
        steps = np.diff(th)
        if not (np.all(steps > 0) or np.all(steps < 0)):
            raise TrajectoryError(f"ladder must be strictly monotone: {th}")
        object.__setattr__(self, "thetas", th)

    @classmethod
    def between(cls, start: float, stop: float, step: float = 10.0) -> "AngleLadder":
        n = int(round(abs(stop - start) / step))
        return cls(tuple(np.linspace(start, stop, n + 1)))

    def reference(self) -> float:
        """The rung closest to yaw 0 (smaller |Θ| then smaller Θ on ties)."""
        return min(self.thetas, key=lambda t: (abs(t), t))

    def __len__(self):
        return len(self.thetas)


@dataclass(eq=False)
class TrajectoryFit:
    base: np.ndarray
    direction: np.ndarray
    speed: float
    thetas: AngleLadder
    centroids: np.ndarray
    residual_rms: float
    meta: dict = field(default_factory=dict)

    @property
    def slope(self) -> np.ndarray:
        """Latent displacement per degree of yaw."""
        return self.speed * self.direction

    @property
    def reference_theta(self) -> float:
        return self.thetas.reference()

    def at(self, theta: float) -> np.ndarray:
        return self.base + (theta - self.reference_theta) * self.slope

    def covers(self, yaw: float) -> bool:
        lo, hi = min(self.thetas.thetas), max(self.thetas.thetas)
        return lo <= yaw <= hi

    def save(self, directory, extra: dict | None = None) -> None:
        doc = {
            "fit": {
                "thetas": list(self.thetas.thetas),
                "residual_rms": self.residual_rms,
                "speed": self.speed,
                "reference_theta": self.reference_theta,
                **self.meta,
            }
        }
        if extra:
            doc["fit"].update(extra)
        save_tensor_set(directory, {"base": self.base, "direction": self.direction, "centroids": self.centroids}, doc)

    @classmethod
    def load(cls, directory) -> "TrajectoryFit":
        tensors, doc = load_tensor_set(Path(directory))
        f = dict(doc["fit"])
        thetas = AngleLadder(tuple(f.pop("thetas")))
        residual, speed = f.pop("residual_rms"), f.pop("speed")
        f.pop("reference_theta", None)
        return cls(tensors["base"], tensors["direction"], speed, thetas, tensors["centroids"], residual, f)


# --------------------------------------------------------------------------
# clusters -> centroids -> line
# --------------------------------------------------------------------------


def _embed_stack(samples: np.ndarray, embed_fn: EmbedFn) -> np.ndarray:
    latents = np.asarray(embed_fn(samples), dtype=np.float64)
    return latents.reshape(len(samples), -1)


def embed_clusters(records_by_theta: Mapping[float, Sequence[DatasetRecord]], embed_fn: EmbedFn) -> dict[float, np.ndarray]:
    """Mean latent of each cluster, keyed by Θ."""
    out = {}
    dim = None
    for theta in sorted(records_by_theta):
        cluster = records_by_theta[theta]
        if not cluster:
            raise TrajectoryError(f"empty cluster at yaw {theta}")
        latents = _embed_stack(np.stack([r.sample for r in cluster]), embed_fn)
        if dim is not None and latents.shape[1] != dim:
            raise TrajectoryError("clusters embed to different latent dimensions")
        dim = latents.shape[1]
        out[float(theta)] = latents.mean(axis=0)
    return out


def fit_line(centroids: Mapping[float, np.ndarray]) -> TrajectoryFit:
    """Per-coordinate ordinary least squares of centroid against yaw (degrees)."""
    if len(centroids) < 2:
        raise TrajectoryError("fit_line needs centroids at two or more distinct angles")
    thetas = np.array(sorted(centroids), dtype=np.float64)
    C = np.stack([np.asarray(centroids[t], dtype=np.float64).reshape(-1) for t in thetas])
    tc = thetas - thetas.mean()
    cbar = C.mean(axis=0)
    slope = tc @ (C - cbar) / (tc @ tc)
    intercept = cbar - slope * thetas.mean()
    speed = float(np.linalg.norm(slope))
    scale = max(1.0, float(np.max(np.abs(C))))
    if not math.isfinite(speed) or speed <= 1e-14 * scale:
        raise DegenerateFit("centroids do not change with yaw; no direction to fit")
    ladder = AngleLadder(tuple(thetas))
    fitted = intercept[None, :] + thetas[:, None] * slope[None, :]
    resid = fitted - C
    rms = float(np.sqrt(np.mean(resid * resid)))
    base = intercept + ladder.reference() * slope
    return TrajectoryFit(base, slope / speed, speed, ladder, C, rms)


def flip_fit(fit: TrajectoryFit, shape: Sequence[int]) -> TrajectoryFit:
    """The same line seen in a mirrored dataset: latents mirrored, yaw negated."""
    thetas = AngleLadder(tuple(-t for t in reversed(fit.thetas.thetas)))
    centroids = np.stack([mirror_vector(c, shape) for c in fit.centroids[::-1]])
    base = mirror_vector(fit.base, shape)
    direction = -mirror_vector(fit.direction, shape)
    return TrajectoryFit(base, direction, fit.speed, thetas, centroids, fit.residual_rms, dict(fit.meta))


@dataclass(frozen=True)
class LadderSpec:
    """Rungs every ``step`` degrees over [0, ±span] plus the cluster query template."""

    span: float = 40.0
    step: float = 10.0
    delta0: float = 2.0
    min_count: int = 1000
    max_widenings: int = 4
    attrs: Mapping[str, int] = field(default_factory=dict)
    light: Light | None = None
    use_flips: bool = True

    def query(self, theta: float) -> FilterQuery:
        return FilterQuery(theta, self.delta0, dict(self.attrs), self.light, self.min_count,
                           self.max_widenings, self.use_flips)


def fit_ladder(records: Sequence[DatasetRecord], embed_fn: EmbedFn, ladder: AngleLadder, spec: LadderSpec):
    """Retrieve, embed and fit one ladder. Returns ``(fit, {Θ: FilterResult})``."""
    clusters: dict[float, FilterResult] = {}
    for theta in ladder.thetas:
        res = filter_cluster(records, spec.query(theta))
        if res.shortfall:
            log.warning("cluster at yaw %g has %d < %d records (delta=%g)", theta, len(res), spec.min_count, res.delta)
        if not res.records:
            raise TrajectoryError(f"no records for yaw {theta} with {dict(spec.attrs)} light={spec.light}")
        clusters[theta] = res
    fit = fit_line(embed_clusters({t: r.records for t, r in clusters.items()}, embed_fn))
    fit.meta.update({
        "cluster_sizes": [len(clusters[t]) for t in sorted(clusters)],
        "shortfall": any(r.shortfall for r in clusters.values()),
        "query": {"attrs": dict(spec.attrs), "light": None if spec.light is None else spec.light.value,
                  "delta0": spec.delta0, "min_count": spec.min_count, "use_flips": spec.use_flips},
    })
    return fit, clusters


def split_directions(records: Sequence[DatasetRecord], embed_fn: EmbedFn, spec: LadderSpec = LadderSpec()):
    """Independent fits for the two rotation senses.

    Returns ``(left_fit, right_fit)``: left covers yaw in [0, +span], right
    covers [-span, 0].
    """
    left, _ = fit_ladder(records, embed_fn, AngleLadder.between(0.0, spec.span, spec.step), spec)
    right, _ = fit_ladder(records, embed_fn, AngleLadder.between(0.0, -spec.span, spec.step), spec)
    return left, right


def window_fits(records: Sequence[DatasetRecord], embed_fn: EmbedFn, windows: Sequence[tuple[float, float]],
                spec: LadderSpec = LadderSpec()) -> list[TrajectoryFit]:
    return [fit_ladder(records, embed_fn, AngleLadder.between(lo, hi, spec.step), spec)[0] for lo, hi in windows]


# --------------------------------------------------------------------------
# traversal
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TraversalConfig:
    target_yaw: float = 0.0
    n_steps: int = 4
    max_extra_steps: int = 0
    yaw_tolerance: float = 2.0
    frontalize_threshold: float = 20.0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.max_extra_steps < 0:
            raise ValueError("max_extra_steps must be >= 0")
        if not self.yaw_tolerance > 0:
            raise ValueError("yaw_tolerance must be positive")


@dataclass
class TrailStep:
    latent: np.ndarray
    output: np.ndarray
    expected_yaw: float
    measured_yaw: float | None
    extra: bool = False
    phase: str = "rotate"


@dataclass
class Trail:
    steps: list[TrailStep]
    verified: bool
    complete: bool | None  # None when no yaw probe was available

    @property
    def final(self) -> TrailStep:
        return self.steps[-1]

    @property
    def n_extra(self) -> int:
        return sum(s.extra for s in self.steps)

    def __len__(self):
        return len(self.steps)


def traverse(
    fit: TrajectoryFit,
    source_latent,
    source_yaw: float,
    cfg: TraversalConfig,
    generate_fn: Callable[[np.ndarray], np.ndarray],
    yaw_probe_fn: Callable[[np.ndarray], float] | None = None,
    phase: str = "rotate",
) -> Trail:
    """Walk from ``source_latent`` toward ``cfg.target_yaw`` in ``n_steps`` equal steps.

    Each step moves (target - source) / n_steps degrees along the fitted
    slope. With a probe, up to ``max_extra_steps`` further steps are taken
    while the measured yaw misses the target by more than the tolerance.
    Without a probe the walk is open loop and the trail is marked unverified.
    """
    x0 = np.asarray(source_latent, dtype=np.float64)
    step_deg = (cfg.target_yaw - source_yaw) / cfg.n_steps
    delta = (step_deg * fit.slope).reshape(x0.shape)
    steps: list[TrailStep] = []

    def take(k: int, extra: bool) -> TrailStep:
        latent = x0 + k * delta
        if not np.all(np.isfinite(latent)):
            raise FloatingPointError(f"non-finite latent at step {k}")
        out = np.asarray(generate_fn(latent))
        measured = None
        if yaw_probe_fn is not None:
            measured = float(yaw_probe_fn(out))
            if not math.isfinite(measured):
                raise TrajectoryError(f"yaw probe returned {measured} at step {k}")
        st = TrailStep(latent, out, source_yaw + k * step_deg, measured, extra, phase)
        steps.append(st)
        return st

    for k in range(1, cfg.n_steps + 1):
        last = take(k, False)
    if yaw_probe_fn is None:
        return Trail(steps, verified=False, complete=None)

    def on_target(st: TrailStep) -> bool:
        return abs(st.measured_yaw - cfg.target_yaw) <= cfg.yaw_tolerance

    k = cfg.n_steps
    while not on_target(last) and k < cfg.n_steps + cfg.max_extra_steps:
        k += 1
        last = take(k, True)
    complete = on_target(last)
    if not complete:
        log.info("traverse: measured yaw %.3g still off target %.3g after %d extra steps",
                 last.measured_yaw, cfg.target_yaw, k - cfg.n_steps)
    return Trail(steps, verified=True, complete=complete)


def choose_fit(left_fit: TrajectoryFit, right_fit: TrajectoryFit, source_yaw: float, target_yaw: float) -> TrajectoryFit:
    """Pick the fit whose window contains the target (the source side breaks a tie at 0)."""
    if target_yaw > 0:
        return left_fit
    if target_yaw < 0:
        return right_fit
    if source_yaw < 0:
        return right_fit
    return left_fit


@dataclass
class Frontalized:
    latent: np.ndarray
    yaw: float
    trail: Trail | None

    @property
    def applied(self) -> bool:
        return self.trail is not None


def frontalize(
    fits: tuple[TrajectoryFit, TrajectoryFit],
    source_latent,
    source_yaw: float,
    cfg: TraversalConfig,
    generate_fn: Callable[[np.ndarray], np.ndarray],
    yaw_probe_fn: Callable[[np.ndarray], float] | None = None,
) -> Frontalized:
    """Bring a high-yaw source to yaw 0 first; a no-op below the threshold."""
    if abs(source_yaw) <= cfg.frontalize_threshold:
        return Frontalized(np.asarray(source_latent, dtype=np.float64), source_yaw, None)
    fit = choose_fit(fits[0], fits[1], source_yaw, 0.0)
    trail = traverse(fit, source_latent, source_yaw, replace(cfg, target_yaw=0.0), generate_fn, yaw_probe_fn,
                     phase="frontalize")
    end = trail.final
    yaw = end.measured_yaw if end.measured_yaw is not None else end.expected_yaw
    return Frontalized(end.latent, yaw, trail)


def rotate(
    fits: tuple[TrajectoryFit, TrajectoryFit],
    source_latent,
    source_yaw: float,
    cfg: TraversalConfig,
    generate_fn: Callable[[np.ndarray], np.ndarray],
    yaw_probe_fn: Callable[[np.ndarray], float] | None = None,
) -> tuple[Trail | None, Trail]:
    """Optional frontalization, then a traversal toward ``cfg.target_yaw``."""
    front = frontalize(fits, source_latent, source_yaw, cfg, generate_fn, yaw_probe_fn)
    fit = choose_fit(fits[0], fits[1], front.yaw, cfg.target_yaw)
    if front.yaw == cfg.target_yaw:
        cfg = replace(cfg, n_steps=1)  # nothing to rotate: a single frame
    main = traverse(fit, front.latent, front.yaw, cfg, generate_fn, yaw_probe_fn)
    return front.trail, main


# --------------------------------------------------------------------------
# slope comparison
# --------------------------------------------------------------------------


def slope_cosine_matrix(fits: Sequence[TrajectoryFit]) -> np.ndarray:
    """Pairwise cosine similarity of fitted directions (symmetric, unit diagonal)."""
    if not fits:
        raise TrajectoryError("need at least one fit")
    D = np.stack([np.asarray(f.direction, dtype=np.float64).reshape(-1) for f in fits])
    norms = np.linalg.norm(D, axis=1)
    if np.any(norms == 0):
        raise DegenerateFit("zero direction vector")
    U = D / norms[:, None]
    M = U @ U.T
    M = 0.5 * (M + M.T)
    np.fill_diagonal(M, 1.0)
    return np.clip(M, -1.0, 1.0)


def cosine_csv(matrix: np.ndarray, labels: Sequence[str]) -> str:
    buf = io.StringIO()
    buf.write("label," + ",".join(labels) + "\n")
    for lab, row in zip(labels, matrix):
        buf.write(lab + "," + ",".join(f"{v:.17g}" for v in row) + "\n")
    return buf.getvalue()


def heatmap_pixels(matrix: np.ndarray, cell: int = 16) -> np.ndarray:
    """8-bit grayscale heatmap, [-1, 1] mapped linearly to [0, 255]."""
    levels = np.floor((np.clip(matrix, -1, 1) + 1.0) / 2.0 * 255.0 + 0.5).astype(np.uint8)
    return np.kron(levels, np.ones((cell, cell), dtype=np.uint8))
