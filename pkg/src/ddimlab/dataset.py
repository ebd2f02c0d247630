"""Attribute-labelled sample store.

Covers annotation ingestion (binary attributes, head pose, light direction),
mirror augmentation, yaw-window cluster retrieval, per-class statistics and a
synthetic generator whose latent structure is known exactly.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import RngStream
from .tensorio import atomic_write_text, load_tensor

log = logging.getLogger(__name__)

_IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".ppm", ".dtl")


class DatasetError(ValueError):
    pass


class Light(str, enum.Enum):
    LEFT = "LEFT"
    CENTER = "CENTER"
    RIGHT = "RIGHT"

    def mirrored(self) -> "Light":
        return {Light.LEFT: Light.RIGHT, Light.RIGHT: Light.LEFT}.get(self, self)


@dataclass(frozen=True, eq=False)
class DatasetRecord:
    id: str
    sample: np.ndarray | None
    yaw: float
    pitch: float = 0.0
    roll: float = 0.0
    light: Light = Light.CENTER
    attrs: Mapping[str, int] = field(default_factory=dict)
    flipped: bool = False

    def __post_init__(self):
        if not -180.0 <= self.yaw <= 180.0:
            raise DatasetError(f"record {self.id}: yaw {self.yaw} outside [-180, 180]")
        bad = {k: v for k, v in self.attrs.items() if v not in (-1, 1)}
        if bad:
            raise DatasetError(f"record {self.id}: attribute values must be -1 or +1, got {bad}")

    def __eq__(self, other):
        if not isinstance(other, DatasetRecord):
            return NotImplemented
        same_sample = (self.sample is None and other.sample is None) or (
            self.sample is not None and other.sample is not None and np.array_equal(self.sample, other.sample)
        )
        return (
            same_sample
            and (self.id, self.yaw, self.pitch, self.roll, self.light, dict(self.attrs), self.flipped)
            == (other.id, other.yaw, other.pitch, other.roll, other.light, dict(other.attrs), other.flipped)
        )

    __hash__ = None


def mirror_image(sample: np.ndarray) -> np.ndarray:
    """Horizontal mirror of an (H, W) or (H, W, C) array."""
    if sample.ndim not in (2, 3):
        raise DatasetError(f"cannot mirror sample of shape {sample.shape}; need (H, W) or (H, W, C)")
    return sample[:, ::-1].copy()


def mirror_vector(vec: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Mirror a flattened image-shaped vector."""
    return mirror_image(np.asarray(vec).reshape(shape)).reshape(np.shape(vec))


def flip_record(r: DatasetRecord) -> DatasetRecord:
    """Mirror the sample and the orientation-dependent labels (yaw, roll, light)."""
    sample = None if r.sample is None else mirror_image(r.sample)
    return replace(r, sample=sample, yaw=-r.yaw, roll=-r.roll, light=r.light.mirrored(), flipped=not r.flipped)


# --------------------------------------------------------------------------
# annotation files
# --------------------------------------------------------------------------


def _normalize_id(raw: str) -> str:
    raw = raw.strip()
    for suffix in _IMAGE_SUFFIXES:
        if raw.lower().endswith(suffix):
            return raw[: -len(suffix)]
    return raw


def _rows(path) -> Iterable[tuple[int, list[str]]]:
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if row and any(cell.strip() for cell in row):
                yield lineno, [cell.strip() for cell in row]


def _is_header(row: list[str]) -> bool:
    return row[0].lower() in ("id", "image_id", "image")


def read_attributes(path) -> dict[str, dict[str, int]]:
    rows = _rows(path)
    try:
        _, header = next(rows)
    except StopIteration:
        return {}
    if not _is_header(header):
        raise DatasetError(f"{path}:1: attribute file needs a header row 'id,attr1,...'")
    names = header[1:]
    out = {}
    for lineno, row in rows:
        if len(row) != len(header):
            raise DatasetError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
        values = {}
        for name, cell in zip(names, row[1:]):
            try:
                v = int(cell)
            except ValueError:
                v = None
            if v not in (-1, 1):
                raise DatasetError(f"{path}:{lineno}: attribute {name} must be -1 or 1, got {cell!r}")
            values[name] = v
        out[_normalize_id(row[0])] = values
    return out


def read_pose(path) -> dict[str, tuple[float, float, float]]:
    out = {}
    for lineno, row in _rows(path):
        if lineno == 1 and _is_header(row):
            continue
        if len(row) != 4:
            raise DatasetError(f"{path}:{lineno}: expected 'id,yaw,pitch,roll', got {len(row)} columns")
        try:
            yaw, pitch, roll = (float(c) for c in row[1:])
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
        if not (math.isfinite(yaw) and -180.0 <= yaw <= 180.0):
            raise DatasetError(f"{path}:{lineno}: yaw {row[1]} outside [-180, 180]")
        out[_normalize_id(row[0])] = (yaw, pitch, roll)
    return out


def read_light(path) -> dict[str, Light]:
    out = {}
    for lineno, row in _rows(path):
        if lineno == 1 and _is_header(row):
            continue
        if len(row) != 2:
            raise DatasetError(f"{path}:{lineno}: expected 'id,LIGHT', got {len(row)} columns")
        try:
            out[_normalize_id(row[0])] = Light(row[1].upper())
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: light must be LEFT, CENTER or RIGHT, got {row[1]!r}") from None
    return out


def read_denylist(path) -> set[str]:
    ids = set()
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            ids.add(_normalize_id(line))
    return ids


def load_annotations(attr_file, pose_file, light_file, denylist: Iterable[str] = ()) -> list[DatasetRecord]:
    """Join the three annotation CSVs on id (attribute-file order).

    Ids missing from any source, or denylisted, are dropped and counted in a warning.
    """
    attrs = read_attributes(attr_file)
    pose = read_pose(pose_file)
    light = read_light(light_file)
    deny = {_normalize_id(i) for i in denylist}
    records = []
    all_ids = set(attrs) | set(pose) | set(light)
    for rid, values in attrs.items():
        if rid in deny or rid not in pose or rid not in light:
            continue
        yaw, pitch, roll = pose[rid]
        records.append(DatasetRecord(rid, None, yaw, pitch, roll, light[rid], values))
    dropped = len(all_ids) - len(records)
    if dropped:
        log.warning("load_annotations: dropped %d ids missing from a source or denylisted", dropped)
    if not records:
        log.warning("load_annotations: no id is present in all three annotation files")
    return records


def write_annotations(records: Sequence[DatasetRecord], attr_file, pose_file, light_file) -> None:
    names = sorted({k for r in records for k in r.attrs})
    a, p, lt = io.StringIO(), io.StringIO(), io.StringIO()
    aw, pw, lw = csv.writer(a, lineterminator="\n"), csv.writer(p, lineterminator="\n"), csv.writer(lt, lineterminator="\n")
    aw.writerow(["id", *names])
    pw.writerow(["id", "yaw", "pitch", "roll"])
    lw.writerow(["id", "light"])
    for r in records:
        aw.writerow([r.id, *(r.attrs[n] for n in names)])
        pw.writerow([r.id, repr(float(r.yaw)), repr(float(r.pitch)), repr(float(r.roll))])
        lw.writerow([r.id, r.light.value])
    atomic_write_text(attr_file, a.getvalue())
    atomic_write_text(pose_file, p.getvalue())
    atomic_write_text(light_file, lt.getvalue())


def attach_samples(records: Sequence[DatasetRecord], samples_dir) -> list[DatasetRecord]:
    """Load ``<id>.dtl`` for every record; records without a file are dropped."""
    samples_dir = Path(samples_dir)
    out = []
    for r in records:
        path = samples_dir / f"{r.id}.dtl"
        if path.exists():
            out.append(replace(r, sample=load_tensor(path)))
    if len(out) < len(records):
        log.warning("attach_samples: %d records have no sample file", len(records) - len(out))
    return out


# --------------------------------------------------------------------------
# cluster retrieval
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterQuery:
    theta: float
    delta0: float = 2.0
    attrs: Mapping[str, int] = field(default_factory=dict)
    light: Light | None = None
    min_count: int = 1000
    max_widenings: int = 4
    use_flips: bool = True

    def __post_init__(self):
        if not self.delta0 > 0:
            raise ValueError("delta0 must be positive")
        if self.min_count < 1:
            raise ValueError("min_count must be >= 1")
        if self.max_widenings < 0:
            raise ValueError("max_widenings must be >= 0")

    def matches_labels(self, r: DatasetRecord) -> bool:
        if self.light is not None and r.light is not self.light:
            return False
        return all(r.attrs.get(k) == v for k, v in self.attrs.items())


@dataclass
class FilterResult:
    records: list[DatasetRecord]
    delta: float
    widenings: int
    shortfall: bool

    def __len__(self):
        return len(self.records)


def _candidates(records: Sequence[DatasetRecord], q: FilterQuery) -> list[DatasetRecord]:
    """Label-matching records plus flipped copies of mirror-matching ones."""
    pool = [r for r in records if q.matches_labels(r)]
    if q.use_flips:
        for r in records:
            if q.matches_labels(replace(r, light=r.light.mirrored(), sample=None)):
                pool.append(flip_record(r))
    return pool


def filter_cluster(records: Sequence[DatasetRecord], q: FilterQuery) -> FilterResult:
    """Records with yaw in [Θ-Δ, Θ+Δ] matching the query labels.

    Δ starts at ``delta0`` and doubles (at most ``max_widenings`` times) until
    ``min_count`` records are found. Over-full windows keep the ``min_count``
    records nearest Θ, ties broken by (id, flipped).
    """
    pool = _candidates(records, q)
    dist = np.array([abs(r.yaw - q.theta) for r in pool])
    delta, widenings = q.delta0, 0
    while True:
        inside = np.flatnonzero(dist <= delta)
        if len(inside) >= q.min_count or widenings >= q.max_widenings:
            break
        delta *= 2.0
        widenings += 1
        log.debug("filter_cluster theta=%g: widened delta to %g (%d found)", q.theta, delta, len(inside))
    chosen = sorted(inside, key=lambda i: (dist[i], pool[i].id, pool[i].flipped))[: q.min_count]
    return FilterResult([pool[i] for i in chosen], delta, widenings, len(chosen) < q.min_count)


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------


@dataclass
class ClassStats:
    centroid: np.ndarray
    variance: float
    count: int


def class_stats(cluster: Sequence[DatasetRecord]) -> ClassStats:
    """Elementwise centroid and the mean over pixels of the population variance."""
    if not cluster:
        raise DatasetError("class_stats of an empty cluster")
    shapes = {r.sample.shape for r in cluster if r.sample is not None}
    if len(shapes) != 1 or any(r.sample is None for r in cluster):
        raise DatasetError(f"class_stats needs samples of one shape, got {sorted(shapes)}")
    stack = np.stack([r.sample for r in cluster])
    return ClassStats(stack.mean(axis=0), float(stack.var(axis=0).mean()), len(cluster))


def centroid_mse(a: ClassStats, b: ClassStats) -> float:
    diff = a.centroid - b.centroid
    return float(np.mean(diff * diff))


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    def to_csv(self) -> str:
        lines = ["bin_lo,bin_hi,count,fraction"]
        for lo, hi, c, f in zip(self.edges[:-1], self.edges[1:], self.counts, self.fractions):
            lines.append(f"{lo:g},{hi:g},{int(c)},{f:.17g}")
        return "\n".join(lines) + "\n"


def _yaws(records) -> np.ndarray:
    return np.array([r.yaw if isinstance(r, DatasetRecord) else float(r) for r in records], dtype=np.float64)


def yaw_histogram(records, bin_width: float) -> Histogram:
    """Counts over bins [k·w, (k+1)·w) covering all yaws."""
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    yaws = _yaws(records)
    if len(yaws) == 0:
        raise DatasetError("yaw_histogram of an empty record list")
    lo = math.floor(yaws.min() / bin_width)
    idx = np.floor(yaws / bin_width).astype(np.int64) - lo
    counts = np.bincount(idx).astype(np.float64)
    edges = (lo + np.arange(len(counts) + 1)) * bin_width
    return Histogram(edges, counts)


def fraction_within(records, lo: float, hi: float) -> float:
    yaws = _yaws(records)
    return float(np.mean((yaws >= lo) & (yaws <= hi)))


# --------------------------------------------------------------------------
# synthetic data with known structure
# --------------------------------------------------------------------------


@dataclass(eq=False)
class PlantedModel:
    """sample = base + light + Σ a·shift_a + yaw·(u_side + Σ a·bend_a) + noise.

    ``u_pos`` applies to yaw >= 0 and ``u_neg`` to yaw < 0, both per degree.
    Attribute values a are ±1.
    """

    shape: tuple[int, ...]
    base: np.ndarray
    u_pos: np.ndarray
    u_neg: np.ndarray
    light_shift: dict[Light, np.ndarray] = field(default_factory=dict)
    attr_shift: dict[str, np.ndarray] = field(default_factory=dict)
    attr_direction: dict[str, np.ndarray] = field(default_factory=dict)
    noise: float = 0.01

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))

    @classmethod
    def random(
        cls,
        shape: Sequence[int],
        rng: RngStream,
        noise: float = 0.01,
        speed: float = 0.01,
        attr_names: Sequence[str] = (),
        shift_scale: float = 0.05,
        bend_scales: Mapping[str, float] | None = None,
        symmetric: bool = False,
    ) -> "PlantedModel":
        """Random planted model with per-degree displacement norm ``speed``.

        ``bend_scales[a]`` sets how strongly attribute ``a`` tilts the yaw
        direction (relative to ``speed``). With ``symmetric`` the model is
        mirror-consistent: flipping a record gives a valid record.
        """
        shape = tuple(int(s) for s in shape)
        dim = int(np.prod(shape))
        bend_scales = dict(bend_scales or {})

        def unit():
            v = rng.normal(dim)
            return v / np.linalg.norm(v)

        def sym(v):
            return 0.5 * (v + mirror_vector(v, shape)) if symmetric and len(shape) >= 2 else v

        base = sym(0.5 + 0.05 * rng.normal(dim))
        u_pos = speed * unit()
        u_neg = -mirror_vector(u_pos, shape) if symmetric else speed * unit()
        right = shift_scale * unit()
        lights = {
            Light.RIGHT: right,
            Light.LEFT: mirror_vector(right, shape) if symmetric else shift_scale * unit(),
            Light.CENTER: sym(shift_scale * unit()),
        }
        attr_shift = {a: sym(shift_scale * unit()) for a in attr_names}
        attr_dir = {a: sym(speed * bend_scales.get(a, 0.0) * unit()) for a in attr_names}
        return cls(shape, base, u_pos, u_neg, lights, attr_shift, attr_dir, noise)

    def offset(self, light: Light, attrs: Mapping[str, int]) -> np.ndarray:
        off = self.base + self.light_shift.get(light, 0.0)
        for a, v in attrs.items():
            if a in self.attr_shift:
                off = off + v * self.attr_shift[a]
        return off

    def velocity(self, side_positive: bool, attrs: Mapping[str, int]) -> np.ndarray:
        u = self.u_pos if side_positive else self.u_neg
        for a, v in attrs.items():
            if a in self.attr_direction:
                u = u + v * self.attr_direction[a]
        return u

    def mean(self, yaw: float, light: Light = Light.CENTER, attrs: Mapping[str, int] | None = None) -> np.ndarray:
        attrs = attrs or {}
        return self.offset(light, attrs) + yaw * self.velocity(yaw >= 0, attrs)

    def probe_yaw(self, x, light: Light = Light.CENTER, attrs: Mapping[str, int] | None = None) -> float:
        """Least-squares yaw of ``x`` under this model (labels known)."""
        attrs = attrs or {}
        r = np.asarray(x, dtype=np.float64).reshape(-1) - self.offset(light, attrs)
        best, best_err = 0.0, float(np.dot(r, r))
        for positive in (True, False):
            u = self.velocity(positive, attrs)
            uu = float(np.dot(u, u))
            if uu == 0.0:
                continue  # this side does not move with yaw
            y = float(np.dot(r, u) / uu)
            y = max(y, 0.0) if positive else min(y, 0.0)
            e = r - y * u
            err = float(np.dot(e, e))
            if err < best_err:
                best, best_err = y, err
        return best

    def make_record(self, rid: str, yaw: float, light: Light, attrs: Mapping[str, int], rng: RngStream,
                    pitch: float = 0.0, roll: float = 0.0) -> DatasetRecord:
        x = self.mean(yaw, light, attrs)
        if self.noise > 0:
            x = x + self.noise * rng.normal(self.dim)
        return DatasetRecord(rid, x.reshape(self.shape), yaw, pitch, roll, light, dict(attrs))

    def sample_records(
        self,
        n: int,
        rng: RngStream,
        yaw_range: tuple[float, float] = (-50.0, 50.0),
        attr_names: Sequence[str] | None = None,
        light_probs: Sequence[float] = (0.25, 0.5, 0.25),
        id_offset: int = 0,
    ) -> list[DatasetRecord]:
        """``n`` records with uniform yaw, uniform ±1 attributes and random light."""
        names = list(self.attr_shift) if attr_names is None else list(attr_names)
        lights = [Light.LEFT, Light.CENTER, Light.RIGHT]
        out = []
        for i in range(n):
            yaw = float(yaw_range[0] + (yaw_range[1] - yaw_range[0]) * rng.uniform())
            light = lights[int(rng.choice(3, 1, p=np.asarray(light_probs))[0])]
            attrs = {a: int(2 * rng.integers(0, 2) - 1) for a in names}
            out.append(self.make_record(f"{id_offset + i:06d}", yaw, light, attrs, rng))
        return out

    def ladder_clusters(
        self,
        thetas: Sequence[float],
        per_cluster: int,
        rng: RngStream,
        light: Light = Light.CENTER,
        attrs: Mapping[str, int] | None = None,
    ) -> dict[float, list[DatasetRecord]]:
        """Clusters whose members sit exactly at each ladder yaw."""
        attrs = dict(attrs or {})
        out = {}
        for j, theta in enumerate(thetas):
            out[float(theta)] = [
                self.make_record(f"{j:03d}{i:06d}", float(theta), light, attrs, rng) for i in range(per_cluster)
            ]
        return out

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "base": self.base.tolist(),
            "u_pos": self.u_pos.tolist(),
            "u_neg": self.u_neg.tolist(),
            "light_shift": {k.value: v.tolist() for k, v in self.light_shift.items()},
            "attr_shift": {k: v.tolist() for k, v in self.attr_shift.items()},
            "attr_direction": {k: v.tolist() for k, v in self.attr_direction.items()},
            "noise": self.noise,
        }
