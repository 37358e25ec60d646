"""Experiment orchestration: simulate -> features -> train -> eval -> track-plot."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import io
from .baseline import baseline_localize
from .config import KINDS, ExperimentConfig, derive_seed, transit_plans
from .features import feature_maps, frame_starts
from .model import (DivergenceError, FrameSet, LocalizationNet, fit_input_norm, train,
                    wrap_bearing)
from .propagation import TransitPlan, simulate_transit

log = logging.getLogger(__name__)

WORKERS_ENV = "SHALLOWLOC_WORKERS"
METHOD_TAGS = {"combined": "cnn_combined", "gcc_only": "cnn_gcc",
               "cepstral_only": "cnn_cepstral"}


class HarnessError(RuntimeError):
    pass


class HashMismatchError(HarnessError):
    pass


def worker_count(default: int = 1) -> int:
    value = os.environ.get(WORKERS_ENV)
    return max(1, int(value)) if value else default


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise HarnessError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise HarnessError(f"output directory {path} is not writable")
    return path


def recording_name(kind: str, index: int) -> str:
    return f"{kind}_{index:02d}"


# simulate ---------------------------------------------------------------------

def _simulate_one(args) -> str:
    cfg_dict, plan, out_dir = args
    cfg = ExperimentConfig.model_validate(cfg_dict)
    vessel = cfg.generalization_vessel if plan["kind"] == "generalization" else cfg.train_vessel
    track = TransitPlan.straight(plan["cpa_offset"], plan["heading"], plan["speed"],
                                 plan["max_range"], plan["depth"])
    rec = simulate_transit(track, vessel.build(), cfg.environment.build(), cfg.array.build(),
                           cfg.fs, plan["snr_db"], plan["seed"])
    rec.metadata.update({k: plan[k] for k in ("kind", "index", "heading", "cpa_offset",
                                              "speed", "snr_db", "max_range")})
    rec.metadata["config_hash"] = cfg.hash()
    path = Path(out_dir) / f"{recording_name(plan['kind'], plan['index'])}.lwr"
    io.write_recording(path, rec, config=cfg.as_dict(), seed=plan["seed"])
    return path.name


def cmd_simulate(cfg: ExperimentConfig, out_dir, workers: Optional[int] = None) -> list[Path]:
    out = _ensure_dir(out_dir)
    plans = [p for kind in KINDS for p in transit_plans(cfg, kind)]
    cfg_dict = cfg.as_dict()
    names = _map(_simulate_one, [(cfg_dict, p, str(out)) for p in plans],
                 workers or worker_count())
    manifest = {"config_hash": cfg.hash(), "seed": cfg.seed, "transits": plans,
                "files": names}
    (out / "simulate.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    log.info("simulated %d transits into %s", len(names), out)
    return [out / n for n in names]


# features ---------------------------------------------------------------------

def recording_frames(rec, cfg: ExperimentConfig) -> FrameSet:
    maps = feature_maps(rec, cfg.framing.build(cfg.fs), cfg.feature_windows(),
                        max_range=cfg.transits.max_range)
    cep_shape, gcc_shape = cfg.feature_windows().shapes(cfg.fs)
    n = len(maps)
    return FrameSet(
        cepstral=np.array([m.cepstral.values for m in maps]).reshape((n,) + cep_shape),
        gcc=np.array([m.gcc.values for m in maps]).reshape((n,) + gcc_shape),
        range=np.array([m.label[0] for m in maps]),
        bearing=np.array([m.label[1] for m in maps]),
        timestamp=np.array([m.timestamp for m in maps]),
        transit=np.zeros(n, dtype=int))


def _features_one(args) -> str:
    cfg_dict, src, out_dir = args
    cfg = ExperimentConfig.model_validate(cfg_dict)
    rec, header = io.read_recording(src)
    if header["config"].get("fs") != cfg.fs:
        raise HarnessError(f"{src}: recording fs {header['config'].get('fs')} != config fs {cfg.fs}")
    frames = recording_frames(rec, cfg)
    w = cfg.feature_windows()
    out_path = Path(out_dir) / (Path(src).stem + ".fmap")
    io.write_features(out_path, frames, {
        "fs": cfg.fs, "config_hash": cfg.hash(), "recording": Path(src).name,
        "recording_config_hash": header["metadata"].get("config_hash"),
        "windows": {"q_min": w.q_min, "q_max": w.q_max, "gcc_half_width": w.lag_half_width(cfg.fs),
                    "gcc_factor": w.gcc_factor, "weighting": w.weighting},
        "framing": {"frame_length": cfg.framing.build(cfg.fs).frame_length,
                    "hop": cfg.framing.build(cfg.fs).hop},
    })
    return out_path.name


def stratified_indices(ranges: np.ndarray, n_bins: int, r_max: float, per_bin: int,
                       rng: np.random.Generator) -> tuple[np.ndarray, list[int]]:
    """Equal-count sample from each non-empty range bin (without replacement)."""
    edges = np.linspace(0, r_max, n_bins + 1)
    which = np.clip(np.digitize(ranges, edges) - 1, 0, n_bins - 1)
    members = [np.flatnonzero(which == b) for b in range(n_bins)]
    nonempty = [m for m in members if len(m)]
    if not nonempty:
        return np.zeros(0, dtype=int), [0] * n_bins
    take = min(per_bin, min(len(m) for m in nonempty))
    chosen = [np.sort(rng.choice(m, size=take, replace=False)) if len(m) else m for m in members]
    return np.concatenate(chosen), [len(c) for c in chosen]


def cmd_features(cfg: ExperimentConfig, data_dir, out_dir,
                 workers: Optional[int] = None) -> dict:
    data = Path(data_dir)
    if not data.is_dir():
        raise HarnessError(f"dataset directory {data} does not exist")
    out = _ensure_dir(out_dir)
    sources = sorted(data.glob("*.lwr"))
    if not sources:
        raise HarnessError(f"no .lwr recordings in {data}")
    cfg_dict = cfg.as_dict()
    names = _map(_features_one, [(cfg_dict, str(s), str(out)) for s in sources],
                 workers or worker_count())

    # range-stratified training/validation subsets, split by whole transit
    n_train = cfg.transits.n_train
    train_files = [f"{recording_name('train', i)}.fmap" for i in range(n_train - 1)]
    val_files = [f"{recording_name('train', n_train - 1)}.fmap"]
    missing = [f for f in train_files + val_files if f not in names]
    if missing:
        raise HarnessError(f"missing training recordings: {missing}")
    rng = np.random.default_rng(derive_seed(cfg.seed, "stratify"))
    st = cfg.stratify
    r_max = cfg.transits.max_range

    def pool(files):
        ranges, refs = [], []
        for f in files:
            frames, _ = io.read_features(out / f)
            ranges.append(frames.range)
            refs.extend((f, i) for i in range(len(frames)))
        return np.concatenate(ranges), refs

    tr_ranges, tr_refs = pool(train_files)
    tr_idx, tr_hist = stratified_indices(tr_ranges, st.range_bins, r_max, st.per_bin, rng)
    n_val = int(round(len(tr_idx) * st.val_fraction / (1 - st.val_fraction)))
    va_ranges, va_refs = pool(val_files)
    va_idx, va_hist = stratified_indices(va_ranges, st.range_bins, r_max,
                                         max(1, n_val // st.range_bins), rng)
    manifest = {
        "config_hash": cfg.hash(),
        "data_dir": str(data.resolve()),
        "files": names,
        "train": [list(tr_refs[i]) for i in tr_idx],
        "val": [list(va_refs[i]) for i in va_idx],
        "train_histogram": tr_hist,
        "val_histogram": va_hist,
        "test": sorted(n for n in names if n.startswith("test_")),
        "generalization": sorted(n for n in names if n.startswith("generalization_")),
        "shapes": [list(s) for s in cfg.feature_windows().shapes(cfg.fs)],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))
    log.info("features: %d files, %d train / %d val frames", len(names), len(tr_idx), len(va_idx))
    return manifest


def _load_manifest(features_dir) -> dict:
    path = Path(features_dir) / "manifest.json"
    if not path.exists():
        raise HarnessError(f"no manifest in {features_dir}; run `features` first")
    return json.loads(path.read_text())


def load_referenced(features_dir, refs: list) -> FrameSet:
    """Gather (file, index) frame references into one FrameSet, keeping ``refs`` order.

    Transit ids follow sorted file order.
    """
    features_dir = Path(features_dir)
    files = sorted({f for f, _ in refs})
    loaded = [io.read_features(features_dir / f, transit=t)[0] for t, f in enumerate(files)]
    offsets = np.cumsum([0] + [len(fr) for fr in loaded])
    pos = {f: offsets[t] for t, f in enumerate(files)}
    everything = FrameSet.concat(loaded)
    return everything.subset(np.array([pos[f] + i for f, i in refs], dtype=int))


def _check_hash(cfg: ExperimentConfig, found: str, what: str, force: bool):
    if found != cfg.hash() and not force:
        raise HashMismatchError(f"{what} has config hash {found}, expected {cfg.hash()}")


# train ------------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, features_dir, out_dir,
              variants: Optional[Sequence[str]] = None, force: bool = False,
              progress=None) -> dict[str, Path]:
    manifest = _load_manifest(features_dir)
    _check_hash(cfg, manifest["config_hash"], "feature manifest", force)
    out = _ensure_dir(out_dir)
    train_set = load_referenced(features_dir, manifest["train"])
    val_set = load_referenced(features_dir, manifest["val"])
    val_set.transit = val_set.transit + train_set.transit.max() + 1
    written = {}
    for variant in variants or cfg.variants:
        net = LocalizationNet(cfg.net_config(variant))
        fit_input_norm(net, train_set)
        hist_path = out / f"{variant}_history.csv"
        try:
            net, history = train(net, train_set, val_set, cfg.train_config(), cfg.loss_params(),
                                 progress=progress)
        except DivergenceError as exc:
            _write_history(hist_path, exc.history, cfg)
            raise HarnessError(f"training {variant} diverged: {exc}") from exc
        _write_history(hist_path, history, cfg)
        ckpt = out / f"{variant}.ckpt"
        io.write_checkpoint(ckpt, net, {"config_hash": cfg.hash(), "seed": cfg.seed,
                                        "variant": variant, "best_epoch": history.best_epoch,
                                        "training": cfg.train.model_dump(),
                                        "range_scale": cfg.range_scale()})
        written[variant] = ckpt
        log.info("trained %s: best epoch %d", variant, history.best_epoch)
    return written


def _write_history(path, history, cfg):
    rows = [dict(r, best=r["epoch"] == history.best_epoch) for r in history.epochs]
    io.write_csv(path, "history", rows, cfg.hash())


# eval -------------------------------------------------------------------------

@dataclass
class MethodResult:
    timestamp: np.ndarray
    transit: np.ndarray
    est_range: np.ndarray
    est_bearing: np.ndarray
    valid: np.ndarray
    true_range: np.ndarray
    true_bearing: np.ndarray

    def range_errors(self, valid_only: bool = True) -> np.ndarray:
        err = np.abs(self.est_range - self.true_range)
        return err[self.valid] if valid_only else err

    def bearing_errors(self, valid_only: bool = True) -> np.ndarray:
        err = np.abs(wrap_bearing(self.est_bearing) - self.true_bearing)
        return err[self.valid] if valid_only else err

    def mask(self, m: np.ndarray) -> "MethodResult":
        return MethodResult(*(getattr(self, f)[m] for f in (
            "timestamp", "transit", "est_range", "est_bearing", "valid",
            "true_range", "true_bearing")))


@dataclass
class EvalReport:
    results: dict[tuple[str, str], MethodResult] = field(default_factory=dict)
    config_hash: str = ""
    files: list[Path] = field(default_factory=list)

    def get(self, dataset: str, method: str) -> MethodResult:
        return self.results[(dataset, method)]


def _baseline_for(cfg: ExperimentConfig, rec, timestamps: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    framing = cfg.framing.build(cfg.fs)
    n = framing.frame_length
    starts = frame_starts(rec.samples.shape[1], framing)
    centers = rec.label_times[0] + (starts + n / 2) / rec.fs
    # align with the stored (float32) feature timestamps
    pick = np.array([int(np.argmin(np.abs(centers - t))) for t in timestamps], dtype=int)
    if len(pick) and np.max(np.abs(centers[pick] - timestamps)) > 1e-3:
        raise HarnessError("baseline frames do not align with feature frames")
    frames = (rec.samples[:, s:s + n] for s in starts[pick])
    fixes = baseline_localize(frames, cfg.fs, cfg.array.spacing, cfg.environment.sound_speed,
                              framing, cfg.feature_windows())
    return (np.array([f.range for f in fixes]), np.array([f.bearing for f in fixes]),
            np.array([f.valid for f in fixes], dtype=bool))


def _bin_rows(dataset, method, res: MethodResult, edges, key: str, kind: str) -> list[dict]:
    rows = []
    values = res.true_range if key == "range" else res.true_bearing
    which = np.clip(np.digitize(values, edges) - 1, 0, len(edges) - 2)
    err_all = res.range_errors(False) if kind == "range" else res.bearing_errors(False)
    for b in range(len(edges) - 1):
        in_bin = which == b
        ok = in_bin & res.valid
        e = err_all[ok]
        count = int(in_bin.sum())
        row = {"dataset": dataset, "method": method, "count": count, "n_valid": int(ok.sum()),
               "invalid_fraction": float(1 - ok.sum() / count) if count else math.nan}
        q = (lambda p: float(np.percentile(e, p)) if len(e) else math.nan)
        if kind == "range":
            row.update(bin_lo_m=float(edges[b]), bin_hi_m=float(edges[b + 1]),
                       median_abs_err_m=q(50), p25_abs_err_m=q(25), p75_abs_err_m=q(75),
                       p90_abs_err_m=q(90))
        else:
            row.update(bin_lo_rad=float(edges[b]), bin_hi_rad=float(edges[b + 1]),
                       median_abs_err_rad=q(50), p90_abs_err_rad=q(90))
        rows.append(row)
    return rows


def endfire_mask(true_bearing: np.ndarray, endfire_deg: float) -> np.ndarray:
    lim = math.radians(endfire_deg)
    return (true_bearing < lim) | (true_bearing > math.pi - lim)


def cmd_eval(cfg: ExperimentConfig, checkpoint_dir, features_dir, out_dir, data_dir=None,
             methods: Optional[Sequence[str]] = None, force: bool = False) -> EvalReport:
    manifest = _load_manifest(features_dir)
    _check_hash(cfg, manifest["config_hash"], "feature manifest", force)
    out = _ensure_dir(out_dir)
    data = Path(data_dir or manifest["data_dir"])
    variants = [m for m in (methods or ["baseline", *cfg.variants]) if m != "baseline"]
    run_baseline = methods is None or "baseline" in methods
    nets: dict[str, LocalizationNet] = {}
    for v in variants:
        path = Path(checkpoint_dir) / f"{v}.ckpt"
        if not path.exists():
            raise HarnessError(f"missing checkpoint for method {v}: {path}")
        net, header = io.read_checkpoint(path)
        _check_hash(cfg, header.get("config_hash", ""), str(path), force)
        nets[v] = net
    range_scale = cfg.range_scale()
    report = EvalReport(config_hash=cfg.hash())
    range_rows, bearing_rows, summary_rows = [], [], []
    r_edges = np.linspace(0, cfg.transits.max_range, cfg.eval.range_bins + 1)
    b_edges = np.linspace(0, math.pi, cfg.eval.bearing_bins + 1)
    for dataset in ("test", "generalization"):
        per_method: dict[str, list[MethodResult]] = {}
        for t, fname in enumerate(manifest[dataset]):
            frames, header = io.read_features(Path(features_dir) / fname, transit=t)
            _check_hash(cfg, header.get("config_hash", ""), fname, force)
            truth = dict(timestamp=frames.timestamp, transit=frames.transit,
                         true_range=frames.range, true_bearing=frames.bearing)
            for v, net in nets.items():
                pred = net.predict(frames.cepstral, frames.gcc)
                per_method.setdefault(METHOD_TAGS[v], []).append(MethodResult(
                    est_range=pred[:, 0] * range_scale, est_bearing=wrap_bearing(pred[:, 1]),
                    valid=np.ones(len(frames), dtype=bool), **truth))
            if run_baseline:
                rec, rheader = io.read_recording(data / header["recording"])
                if rheader["metadata"].get("config_hash") != cfg.hash() and not force:
                    raise HashMismatchError(f"{header['recording']} has a different config hash")
                rng_, brg, valid = _baseline_for(cfg, rec, frames.timestamp)
                per_method.setdefault("baseline", []).append(MethodResult(
                    est_range=rng_, est_bearing=brg, valid=valid, **truth))
        fix_rows = []
        for method, parts in per_method.items():
            res = MethodResult(*(np.concatenate([getattr(p, f) for p in parts]) for f in (
                "timestamp", "transit", "est_range", "est_bearing", "valid",
                "true_range", "true_bearing")))
            report.results[(dataset, method)] = res
            for i in range(len(res.timestamp)):
                fix_rows.append({"timestamp": float(res.timestamp[i]), "transit": int(res.transit[i]),
                                 "method": method, "range_m": float(res.est_range[i]),
                                 "bearing_rad": float(res.est_bearing[i]),
                                 "valid": bool(res.valid[i]),
                                 "true_range_m": float(res.true_range[i]),
                                 "true_bearing_rad": float(res.true_bearing[i])})
            range_rows += _bin_rows(dataset, method, res, r_edges, "range", "range")
            bearing_rows += _bin_rows(dataset, method, res, b_edges, "bearing", "bearing")
            ef = endfire_mask(res.true_bearing, cfg.eval.endfire_deg) & res.valid
            re, be = res.range_errors(), res.bearing_errors()
            n = len(res.timestamp)
            summary_rows.append({
                "dataset": dataset, "method": method, "count": n, "n_valid": int(res.valid.sum()),
                "invalid_fraction": float(1 - res.valid.sum() / n) if n else math.nan,
                "median_range_err_m": float(np.median(re)) if len(re) else math.nan,
                "median_bearing_err_rad": float(np.median(be)) if len(be) else math.nan,
                "median_endfire_bearing_err_rad": float(np.median(res.bearing_errors(False)[ef]))
                if ef.any() else math.nan,
            })
        path = out / f"fixes_{dataset}.csv"
        io.write_csv(path, "fixes", fix_rows, cfg.hash())
        report.files.append(path)
    for name, schema, rows in (("report_range.csv", "range_report", range_rows),
                               ("report_bearing.csv", "bearing_report", bearing_rows),
                               ("summary.csv", "summary", summary_rows)):
        io.write_csv(out / name, schema, rows, cfg.hash())
        report.files.append(out / name)
    return report


def bootstrap_median_diff(a, b, n_boot: int = 2000, seed: int = 0,
                          level: float = 0.95) -> tuple[float, float, float]:
    """median(a) - median(b) with a percentile bootstrap interval (independent resampling)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    rng = np.random.default_rng(seed)
    ia = rng.integers(0, len(a), size=(n_boot, len(a)))
    ib = rng.integers(0, len(b), size=(n_boot, len(b)))
    diffs = np.median(a[ia], axis=1) - np.median(b[ib], axis=1)
    tail = (1 - level) / 2 * 100
    lo, hi = np.percentile(diffs, [tail, 100 - tail])
    return float(np.median(a) - np.median(b)), float(lo), float(hi)


# track plot -------------------------------------------------------------------

def cmd_track_plot(csv_path, out_dir) -> Path:
    try:
        rows, meta = io.read_csv(csv_path, "fixes")
    except (KeyError, ValueError) as exc:
        raise HarnessError(f"malformed fixes CSV {csv_path}: {exc}") from exc
    out = _ensure_dir(out_dir)
    try:
        parsed = [{
            "transit": int(r["transit"]), "method": r["method"], "timestamp": float(r["timestamp"]),
            "range_m": float(r["range_m"]), "true_range_m": float(r["true_range_m"]),
            "bearing_deg": math.degrees(float(r["bearing_rad"])),
            "true_bearing_deg": math.degrees(float(r["true_bearing_rad"])),
            "valid": r["valid"] == "1",
        } for r in rows]
    except (KeyError, ValueError) as exc:
        raise HarnessError(f"malformed fixes CSV {csv_path}: {exc}") from exc
    parsed.sort(key=lambda r: (r["transit"], r["method"], r["timestamp"]))
    path = out / f"track_{Path(csv_path).stem}.csv"
    io.write_csv(path, "track", parsed, meta.get("config_hash", ""))
    return path
