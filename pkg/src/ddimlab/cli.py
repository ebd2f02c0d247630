"""``ddimlab`` command line: reproducible experiments driven by one JSON config.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .core import RngStream, ddim_sample, max_valid_eta
from .dataset import (
    DatasetError,
    DatasetRecord,
    Light,
    PlantedModel,
    attach_samples,
    class_stats,
    centroid_mse,
    fraction_within,
    load_annotations,
    read_denylist,
    yaw_histogram,
)
from .denoiser import (
    AnalyticDenoiser,
    GaussianMixture,
    MlpDenoiser,
    MlpParams,
    TrainConfig,
    TrainingDiverged,
    eight_gaussians,
    train_denoiser,
)
from .embedding import Embedder, generate, invert_ode, train_embedder
from .imageops import ImageError, color_correct, out_of_gamut, rgb_to_lab, transfer_lab_stats
from .pnm import ImageFormatError, encode_pnm, read_image, read_mask
from .schedule import ScheduleError, ScheduleSpec, build_schedule, scaled_linear_spec
from .tensorio import TensorFormatError, atomic_write_bytes, atomic_write_text, dump_json, encode_tensor, load_tensor, sha256_file
from .trajectory import (
    DegenerateFit,
    LadderSpec,
    TrajectoryError,
    TraversalConfig,
    cosine_csv,
    fit_ladder,
    AngleLadder,
    heatmap_pixels,
    rotate,
    slope_cosine_matrix,
    split_directions,
)

log = logging.getLogger("ddimlab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

# allowed keys per section; None marks a free-form value
SCHEMA: dict[str, Any] = {
    "seed": None,
    "schedule": {"kind": None, "T": None, "beta_start": None, "beta_end": None, "cosine_offset": None, "scaled": None},
    "model": {"kind": None, "mixture": None, "params": None, "embedder": None, "hidden": None, "time_features": None},
    "train": {"batch_size": None, "n_steps": None, "learning_rate": None, "data": None, "mixture": None,
              "n_pairs": None, "log_every": None},
    "dataset": {
        "attributes": None, "pose": None, "light": None, "denylist": None, "samples": None,
        "planted": {"shape": None, "n": None, "noise": None, "speed": None, "attr_names": None, "shift_scale": None,
                    "bend_scales": None, "symmetric": None, "yaw_range": None, "seed": None},
    },
    "trajectory": {"span": None, "step": None, "delta0": None, "min_count": None, "max_widenings": None,
                   "attrs": None, "match_attrs": None, "match_light": None, "use_flips": None, "n_steps": None,
                   "max_extra_steps": None, "yaw_tolerance": None, "frontalize_threshold": None, "windows": None},
}

PATH_KEYS = [("model", "params"), ("model", "embedder"), ("train", "data"), ("dataset", "attributes"),
             ("dataset", "pose"), ("dataset", "light"), ("dataset", "denylist"), ("dataset", "samples")]


def _check_keys(doc: dict, schema: dict, where: str) -> None:
    for key, value in doc.items():
        if key not in schema:
            raise ConfigError(f"unknown config key '{where}{key}'")
        sub = schema[key]
        if isinstance(sub, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{where}{key}' must be an object")
            _check_keys(value, sub, f"{where}{key}.")


def load_config(path: str | None, base_dir: Path | None = None) -> dict:
    """Parse and validate a JSON config; relative paths resolve against its directory."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be an object")
    _check_keys(doc, SCHEMA, "")
    root = base_dir or p.parent
    for section, key in PATH_KEYS:
        value = doc.get(section, {}).get(key)
        if value is None or (section, key, value) == ("train", "data", "eight_gaussians"):
            continue
        full = Path(value) if Path(value).is_absolute() else root / value
        if not full.exists():
            raise ConfigError(f"{section}.{key}: path does not exist: {full}")
        doc[section][key] = str(full)
    return doc


def resolve_seed(cfg: dict, flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("DTL_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"DTL_SEED must be an integer, got {env!r}") from None
    return int(cfg.get("seed", 0))


def _section(cfg: dict, name: str) -> dict:
    return dict(cfg.get(name, {}))


def make_schedule(cfg: dict):
    s = _section(cfg, "schedule")
    try:
        if s.pop("scaled", False):
            spec = scaled_linear_spec(int(s.get("T", 1000)), s.get("beta_start", 1e-4), s.get("beta_end", 0.02))
        else:
            spec = ScheduleSpec(**s)
        return build_schedule(spec)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"schedule: {e}") from None


def make_model(cfg: dict):
    m = _section(cfg, "model")
    kind = m.get("kind", "analytic")
    if kind == "analytic":
        mix = GaussianMixture.from_dict(m["mixture"]) if "mixture" in m else eight_gaussians()
        return AnalyticDenoiser(mix), mix.dim
    if kind == "mlp":
        if "params" not in m:
            raise ConfigError("model.params is required for an mlp model")
        params = MlpParams.load(m["params"])
        return MlpDenoiser(params), params.d_in
    raise ConfigError(f"model.kind must be 'analytic' or 'mlp', got {kind!r}")


def traversal_config(cfg: dict, target_yaw: float) -> TraversalConfig:
    t = _section(cfg, "trajectory")
    try:
        return TraversalConfig(
            target_yaw=float(target_yaw),
            n_steps=int(t.get("n_steps", 4)),
            max_extra_steps=int(t.get("max_extra_steps", 0)),
            yaw_tolerance=float(t.get("yaw_tolerance", 2.0)),
            frontalize_threshold=float(t.get("frontalize_threshold", 20.0)),
        )
    except ValueError as e:
        raise ConfigError(f"trajectory: {e}") from None


def ladder_spec(cfg: dict, attrs: dict | None = None, light: Light | None = None) -> LadderSpec:
    t = _section(cfg, "trajectory")
    merged = {**t.get("attrs", {}), **(attrs or {})}
    if not all(v in (-1, 1) for v in merged.values()):
        raise ConfigError(f"trajectory.attrs values must be -1 or 1: {merged}")
    return LadderSpec(
        span=float(t.get("span", 40.0)),
        step=float(t.get("step", 10.0)),
        delta0=float(t.get("delta0", 2.0)),
        min_count=int(t.get("min_count", 1000)),
        max_widenings=int(t.get("max_widenings", 4)),
        attrs=merged,
        light=light,
        use_flips=bool(t.get("use_flips", True)),
    )


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


class LoadedDataset:
    def __init__(self, records: list[DatasetRecord], planted: PlantedModel | None, inputs: list[str]):
        self.records = records
        self.planted = planted
        self.inputs = inputs

    def get(self, rid: str) -> DatasetRecord:
        for r in self.records:
            if r.id == rid:
                return r
        raise DataError(f"no record with id {rid!r}")


def load_dataset(cfg: dict, seed: int, need_samples: bool = True) -> LoadedDataset:
    d = _section(cfg, "dataset")
    if "planted" in d:
        p = dict(d["planted"])
        rng = RngStream(int(p.get("seed", seed)))
        model = PlantedModel.random(
            tuple(p.get("shape", [16])), rng.spawn(0), noise=float(p.get("noise", 0.01)),
            speed=float(p.get("speed", 0.01)), attr_names=tuple(p.get("attr_names", ())),
            shift_scale=float(p.get("shift_scale", 0.05)), bend_scales=p.get("bend_scales"),
            symmetric=bool(p.get("symmetric", False)),
        )
        records = model.sample_records(int(p.get("n", 5000)), rng.spawn(1), tuple(p.get("yaw_range", (-50.0, 50.0))))
        return LoadedDataset(records, model, [])
    missing = [k for k in ("attributes", "pose", "light") if k not in d]
    if missing:
        raise ConfigError(f"dataset needs 'planted' or the annotation files; missing {missing}")
    deny = read_denylist(d["denylist"]) if "denylist" in d else set()
    records = load_annotations(d["attributes"], d["pose"], d["light"], deny)
    inputs = [d[k] for k in ("attributes", "pose", "light", "denylist") if k in d]
    if need_samples:
        if "samples" not in d:
            raise ConfigError("dataset.samples directory is required for this command")
        records = attach_samples(records, d["samples"])
    if not records:
        raise DataError("dataset is empty after joining annotations")
    return LoadedDataset(records, None, inputs)


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------


class Outputs:
    """Collects files written atomically into one directory, then a manifest."""

    def __init__(self, directory: str, command: str, cfg: dict, seed: int):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.cfg = cfg
        self.seed = seed
        self.inputs: dict[str, str] = {}

    def path(self, name: str) -> Path:
        return self.dir / name

    def bytes(self, name: str, data: bytes) -> None:
        atomic_write_bytes(self.path(name), data)

    def text(self, name: str, text: str) -> None:
        atomic_write_text(self.path(name), text)

    def add_input(self, path) -> None:
        p = Path(path)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            self.inputs[str(f)] = sha256_file(f)

    def finish(self) -> None:
        canon = json.dumps({"config": self.cfg, "seed": self.seed}, sort_keys=True, separators=(",", ":"))
        outputs = {
            str(q.relative_to(self.dir)): sha256_file(q)
            for q in sorted(self.dir.rglob("*"))
            if q.is_file() and q.name != "manifest.json"
        }
        manifest = {
            "tool": "ddimlab",
            "version": __version__,
            "command": self.command,
            "seed": self.seed,
            "config_sha256": hashlib.sha256(canon.encode()).hexdigest(),
            "config": self.cfg,
            "inputs": self.inputs,
            "outputs": outputs,
        }
        self.text("manifest.json", dump_json(manifest))


def _yaw_str(v: float | None) -> str:
    return "" if v is None else f"{v:.17g}"


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_train(args, cfg: dict, seed: int) -> int:
    sched = make_schedule(cfg)
    t = _section(cfg, "train")
    m = _section(cfg, "model")
    try:
        tc = TrainConfig(int(t.get("batch_size", 128)), int(t.get("n_steps", 20000)),
                         float(t.get("learning_rate", TrainConfig.learning_rate)), seed)
    except ValueError as e:
        raise ConfigError(f"train: {e}") from None
    if args.n_steps is not None:
        tc = replace(tc, n_steps=args.n_steps)
    out = Outputs(args.out, "train", cfg, seed)
    hidden = int(m.get("hidden", 128))
    if args.target == "embedder":
        model, dim = make_model(cfg)
        params, losses = train_embedder(model, sched, tc, dim, int(t.get("n_pairs", 10000)), hidden)
        params.save(out.path("embedder"), {"schedule": sched.spec.describe(), "seed": seed})
        rows = ["step,loss"] + [f"{i},{v:.17g}" for i, v in enumerate(losses, start=1)]
        out.text("loss.csv", "\n".join(rows) + "\n")
        print(f"trained embedder: final loss {losses[-1]:.6g}")
        out.finish()
        return EXIT_OK

    data = t.get("data", "eight_gaussians")
    if data == "eight_gaussians":
        mix = GaussianMixture.from_dict(t["mixture"]) if "mixture" in t else eight_gaussians()
        sampler: Callable = mix.sample
    else:
        table = load_tensor(data)
        if table.ndim != 2:
            raise DataError(f"{data}: training data must be a 2-D (n, d) tensor, got shape {table.shape}")
        out.add_input(data)

        def sampler(n: int, rng: RngStream) -> np.ndarray:
            return table[rng.integers(0, len(table), n)]

    result = train_denoiser(sampler, sched, tc, hidden=hidden, n_time_features=int(m.get("time_features", 16)),
                            log_every=int(t.get("log_every", 0)))
    result.params.save(out.path("model"), {"schedule": sched.spec.describe(), "seed": seed})
    out.text("loss.csv", result.loss_csv())
    k = min(1000, tc.n_steps)
    print(f"trained {tc.n_steps} steps: first-{k} mean loss {result.losses[:k].mean():.6g}, "
          f"last-{k} mean loss {result.losses[-k:].mean():.6g}")
    out.finish()
    return EXIT_OK


def cmd_sample(args, cfg: dict, seed: int) -> int:
    sched = make_schedule(cfg)
    model, dim = make_model(cfg)
    if args.eta < 0 or args.eta > max_valid_eta(sched):
        raise ConfigError(f"eta={args.eta} is outside [0, {max_valid_eta(sched):.6g}] for {sched.spec.describe()}")
    rng = RngStream(seed)
    xT = rng.normal((args.n, dim))
    x0 = ddim_sample(model, sched, xT, eta=args.eta, rng=rng.spawn(1))
    out = Outputs(args.out, "sample", cfg, seed)
    if "params" in cfg.get("model", {}):
        out.add_input(cfg["model"]["params"])
    out.bytes("samples.dtl", encode_tensor(x0))
    print("mean " + " ".join(f"{v:.6g}" for v in x0.mean(axis=0)))
    print("var  " + " ".join(f"{v:.6g}" for v in x0.var(axis=0)))
    out.finish()
    return EXIT_OK


def _embed_fn(mode: str, cfg: dict, sched, model):
    if mode == "ode":
        return lambda x: invert_ode(model, sched, x)
    path = cfg.get("model", {}).get("embedder")
    if path is None:
        raise ConfigError("--mode net needs a trained embedder (model.embedder or --embedder)")
    return Embedder(MlpParams.load(path))


def cmd_embed(args, cfg: dict, seed: int) -> int:
    sched = make_schedule(cfg)
    model, dim = make_model(cfg)
    if args.embedder is not None:
        if not Path(args.embedder).exists():
            raise ConfigError(f"embedder path does not exist: {args.embedder}")
        cfg.setdefault("model", {})["embedder"] = args.embedder
    embed = _embed_fn(args.mode, cfg, sched, model)
    probes = load_tensor(args.input)
    if probes.ndim != 2 or probes.shape[1] != dim:
        raise DataError(f"{args.input}: expected an (n, {dim}) tensor, got shape {probes.shape}")
    out = Outputs(args.out, "embed", cfg, seed)
    out.add_input(args.input)
    latents = np.asarray(embed(probes), dtype=np.float64)
    recon = generate(model, sched, latents)
    mse = float(np.mean((recon - probes) ** 2))
    out.bytes("latents.dtl", encode_tensor(latents))
    out.text("latents.json", dump_json({"n_probes": len(probes), "T": sched.T, "eta": 0.0, "mode": args.mode,
                                        "schedule": sched.spec.describe(), "roundtrip_mse": mse}))
    print(f"roundtrip_mse {mse:.6g}")
    out.finish()
    return EXIT_OK


def _rotation_backend(cfg: dict, data: LoadedDataset, src: DatasetRecord):
    """(embed_fn, generate_fn, probe_fn) for the dataset at hand."""
    if data.planted is not None:
        planted = data.planted
        shape = planted.shape

        def ident(x):
            return np.asarray(x, dtype=np.float64)

        def gen(latent):
            return np.asarray(latent, dtype=np.float64).reshape(shape)

        def probe(x):
            return planted.probe_yaw(x, src.light, src.attrs)

        return ident, gen, probe
    sched = make_schedule(cfg)
    model, dim = make_model(cfg)
    shape = np.shape(src.sample)
    mode = "net" if cfg.get("model", {}).get("embedder") else "ode"
    embed = _embed_fn(mode, cfg, sched, model)

    def embed_batch(x):
        return np.asarray(embed(np.asarray(x).reshape(len(x), dim)))

    def gen(latent):
        return generate(model, sched, np.asarray(latent).reshape(1, dim)).reshape(shape)

    return embed_batch, gen, None


def cmd_rotate(args, cfg: dict, seed: int) -> int:
    data = load_dataset(cfg, seed)
    src = data.get(args.source_id)
    tcfg = _section(cfg, "trajectory")
    match = {a: src.attrs[a] for a in tcfg.get("match_attrs", []) if a in src.attrs}
    light = src.light if tcfg.get("match_light", False) else None
    spec = ladder_spec(cfg, match, light)
    embed_fn, gen_fn, probe_fn = _rotation_backend(cfg, data, src)
    left, right = split_directions(data.records, embed_fn, spec)
    source_latent = embed_fn(src.sample[None])[0]
    front, main = rotate((left, right), source_latent, src.yaw, traversal_config(cfg, args.target_yaw), gen_fn,
                         probe_fn)
    steps = (front.steps if front else []) + main.steps
    out = Outputs(args.out, "rotate", cfg, seed)
    for p in data.inputs:
        out.add_input(p)
    rows = ["step,phase,extra,expected_yaw,measured_yaw"]
    for i, st in enumerate(steps, start=1):
        rows.append(f"{i},{st.phase},{int(st.extra)},{_yaw_str(st.expected_yaw)},{_yaw_str(st.measured_yaw)}")
    out.text("trail.csv", "\n".join(rows) + "\n")
    frames = np.stack([st.output for st in steps])
    out.bytes("trail.dtl", encode_tensor(frames))
    out.bytes("trail_latents.dtl", encode_tensor(np.stack([st.latent for st in steps])))
    if frames.ndim == 4 and frames.shape[-1] == 3:
        for i, fr in enumerate(frames, start=1):
            out.bytes(f"trail_{i:03d}.ppm", encode_pnm(fr))
    left.save(out.path("fit_left"))
    right.save(out.path("fit_right"))
    summary = {
        "source_id": src.id, "source_yaw": src.yaw, "target_yaw": float(args.target_yaw),
        "frontalized": front is not None, "verified": main.verified, "complete": main.complete,
        "n_steps": len(steps), "n_extra": main.n_extra + (front.n_extra if front else 0),
        "final_measured_yaw": main.final.measured_yaw,
    }
    out.text("rotate.json", dump_json(summary))
    final = main.final.measured_yaw
    status = "unverified" if not main.verified else ("complete" if main.complete else "INCOMPLETE")
    print(f"{len(steps)} frames, final yaw {_yaw_str(final) or 'n/a'} ({status})")
    out.finish()
    return EXIT_OK


def _window_label(group: dict, window) -> str:
    g = "/".join(f"{k}={v:+d}" for k, v in group.items()) or "all"
    return f"{g}@{window[0]:g}:{window[1]:g}"


def cmd_analyze_slopes(args, cfg: dict, seed: int) -> int:
    data = load_dataset(cfg, seed)
    windows = _section(cfg, "trajectory").get("windows", [[0, 40]])
    embed_fn = (lambda x: np.asarray(x, dtype=np.float64)) if data.planted is not None \
        else _rotation_backend(cfg, data, data.records[0])[0]
    fits, labels = [], []
    for values in itertools.product((1, -1), repeat=len(args.group_by)):
        group = dict(zip(args.group_by, values))
        spec = ladder_spec(cfg, group)
        for lo, hi in windows:
            fit, _ = fit_ladder(data.records, embed_fn, AngleLadder.between(lo, hi, spec.step), spec)
            fits.append(fit)
            labels.append(_window_label(group, (lo, hi)))
    M = slope_cosine_matrix(fits)
    out = Outputs(args.out, "analyze-slopes", cfg, seed)
    for p in data.inputs:
        out.add_input(p)
    out.text("cosine.csv", cosine_csv(M, labels))
    out.bytes("heatmap.pgm", encode_pnm(heatmap_pixels(M, args.cell)))
    print(f"{len(fits)} fits; min off-diagonal "
          f"{(M[~np.eye(len(M), dtype=bool)].min() if len(M) > 1 else 1.0):.6g}")
    out.finish()
    return EXIT_OK


def cmd_colorfix(args, cfg: dict, seed: int) -> int:
    target, source = read_image(args.target), read_image(args.source)
    if target.ndim != 3 or source.ndim != 3:
        raise DataError("colorfix needs PPM (P6) colour images")
    tmask = read_mask(args.mask) if args.mask else None
    smask = read_mask(args.source_mask) if args.source_mask else None
    lab = transfer_lab_stats(rgb_to_lab(target), rgb_to_lab(source), tmask, smask)
    n_clip = out_of_gamut(lab)
    corrected = color_correct(target, source, tmask, smask)
    out = Outputs(args.out, "colorfix", cfg, seed)
    for p in (args.target, args.source, args.mask, args.source_mask):
        if p:
            out.add_input(p)
    out.bytes("corrected.ppm", encode_pnm(corrected))
    print(f"clipped {n_clip} of {target.shape[0] * target.shape[1]} pixels")
    out.finish()
    return EXIT_OK


def cmd_stats(args, cfg: dict, seed: int) -> int:
    data = load_dataset(cfg, seed, need_samples=False)
    recs = data.records
    out = Outputs(args.out, "stats", cfg, seed)
    for p in data.inputs:
        out.add_input(p)
    out.text("yaw_histogram.csv", yaw_histogram(recs, args.bin_width).to_csv())
    outside = 1.0 - fraction_within(recs, -40.0, 40.0)
    rows = ["attribute,n_pos,n_neg,centroid_mse"]
    with_samples = [r for r in recs if r.sample is not None]
    names = sorted({k for r in recs for k in r.attrs})
    for a in names:
        pos = [r for r in with_samples if r.attrs.get(a) == 1]
        neg = [r for r in with_samples if r.attrs.get(a) == -1]
        mse = centroid_mse(class_stats(pos), class_stats(neg)) if pos and neg else float("nan")
        n_pos = sum(r.attrs.get(a) == 1 for r in recs)
        n_neg = sum(r.attrs.get(a) == -1 for r in recs)
        rows.append(f"{a},{n_pos},{n_neg},{mse:.17g}")
    out.text("class_stats.csv", "\n".join(rows) + "\n")
    print(f"{len(recs)} records; fraction with |yaw| > 40: {outside:.4%}")
    out.finish()
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ddimlab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"ddimlab {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="overrides DTL_SEED and the config seed")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train an MLP denoiser (or an embedder)")
    common(p)
    p.add_argument("--target", choices=["denoiser", "embedder"], default="denoiser")
    p.add_argument("--n-steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="DDIM sampling")
    common(p)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--n", type=int, default=1)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("embed", help="map data to latents")
    common(p)
    p.add_argument("--input", required=True, help="DTL1 tensor of shape (n, d)")
    p.add_argument("--mode", choices=["ode", "net"], default="ode")
    p.add_argument("--embedder", help="trained embedder directory (overrides model.embedder)")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("rotate", help="move a record along the fitted yaw trajectory")
    common(p)
    p.add_argument("--source-id", required=True)
    p.add_argument("--target-yaw", type=float, required=True)
    p.set_defaults(func=cmd_rotate)

    p = sub.add_parser("analyze-slopes", help="cosine similarity between fitted directions")
    common(p)
    p.add_argument("--group-by", nargs="*", default=[])
    p.add_argument("--cell", type=int, default=16, help="heatmap pixels per matrix cell")
    p.set_defaults(func=cmd_analyze_slopes)

    p = sub.add_parser("colorfix", help="Lab colour statistics transfer")
    common(p, config_required=False)
    p.add_argument("--target", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--mask", help="PGM foreground mask for the target statistics")
    p.add_argument("--source-mask", help="PGM foreground mask for the source statistics")
    p.set_defaults(func=cmd_colorfix)

    p = sub.add_parser("stats", help="yaw histogram and per-attribute class statistics")
    common(p)
    p.add_argument("--bin-width", type=float, default=10.0)
    p.set_defaults(func=cmd_stats)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        seed = resolve_seed(cfg, args.seed)
        return args.func(args, cfg, seed)
    except (ConfigError, ScheduleError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetError, TensorFormatError, ImageFormatError, ImageError, TrajectoryError,
            FileNotFoundError, KeyError) as e:
        if isinstance(e, DegenerateFit):
            print(f"numerical failure: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, TrainingDiverged, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
