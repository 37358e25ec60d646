"""On-disk formats.

All binary formats share one layout: a magic line, one line of JSON header,
then little-endian payload.

* ``.lwr``  labeled waveform recording, float32 samples, channel-interleaved
* ``.fmap`` feature records (timestamp, range, bearing, cepstral, gcc), float32
* ``.ckpt`` model checkpoint, float64 parameter arrays in header order

CSV outputs start with a ``# schema: <name>/<version>`` comment line.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .model import FrameSet, LocalizationNet, NetConfig, net_config_dict
from .propagation import LabeledRecording

LWR_MAGIC = b"LWR 1\n"
FMAP_MAGIC = b"FMAP 1\n"
CKPT_MAGIC = b"CKPT 1\n"

CSV_SCHEMAS = {
    "fixes": (1, ["timestamp", "transit", "method", "range_m", "bearing_rad", "valid",
                  "true_range_m", "true_bearing_rad"]),
    "history": (1, ["epoch", "train_E", "val_E", "lr", "best"]),
    "range_report": (1, ["dataset", "method", "bin_lo_m", "bin_hi_m", "count", "n_valid",
                         "invalid_fraction", "median_abs_err_m", "p25_abs_err_m",
                         "p75_abs_err_m", "p90_abs_err_m"]),
    "bearing_report": (1, ["dataset", "method", "bin_lo_rad", "bin_hi_rad", "count", "n_valid",
                           "invalid_fraction", "median_abs_err_rad", "p90_abs_err_rad"]),
    "summary": (1, ["dataset", "method", "count", "n_valid", "invalid_fraction",
                    "median_range_err_m", "median_bearing_err_rad",
                    "median_endfire_bearing_err_rad"]),
    "track": (1, ["transit", "method", "timestamp", "range_m", "true_range_m", "bearing_deg",
                  "true_bearing_deg", "valid"]),
}


class FormatError(ValueError):
    pass


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write(path, magic: bytes, header: dict, payload: bytes):
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def _read(path, magic: bytes) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        got = fh.readline()
        if got != magic:
            raise FormatError(f"{path}: bad magic {got!r}")
        header = json.loads(fh.readline())
        return header, fh.read()


def _json_float(v: float):
    return v if math.isfinite(v) else str(v)


def write_recording(path, rec: LabeledRecording, config: Optional[dict] = None,
                    seed: Optional[int] = None):
    header = {
        "fs": rec.fs,
        "channels": int(rec.samples.shape[0]),
        "samples": int(rec.samples.shape[1]),
        "labels": {
            "time": rec.label_times.tolist(),
            "range": rec.label_range.tolist(),
            "bearing": rec.label_bearing.tolist(),
        },
        "config": config or {},
        "seed": seed,
        "metadata": {k: _json_float(v) if isinstance(v, float) else v
                     for k, v in rec.metadata.items()},
    }
    payload = np.ascontiguousarray(rec.samples.T, dtype="<f4").tobytes()
    _write(path, LWR_MAGIC, header, payload)


def read_recording(path) -> tuple[LabeledRecording, dict]:
    header, payload = _read(path, LWR_MAGIC)
    data = np.frombuffer(payload, dtype="<f4")
    expected = header["channels"] * header["samples"]
    if data.size != expected:
        raise FormatError(f"{path}: expected {expected} samples, found {data.size}")
    samples = data.reshape(header["samples"], header["channels"]).T.astype(float)
    labels = header["labels"]
    rec = LabeledRecording(samples=samples, fs=header["fs"],
                           label_times=np.array(labels["time"]),
                           label_range=np.array(labels["range"]),
                           label_bearing=np.array(labels["bearing"]),
                           metadata=header.get("metadata", {}))
    return rec, header


def _fmap_dtype(cep_shape, gcc_shape) -> np.dtype:
    return np.dtype([("timestamp", "<f4"), ("range", "<f4"), ("bearing", "<f4"),
                     ("cepstral", "<f4", tuple(cep_shape)), ("gcc", "<f4", tuple(gcc_shape))])


def write_features(path, frames: FrameSet, header: dict):
    cep_shape = frames.cepstral.shape[1:]
    gcc_shape = frames.gcc.shape[1:]
    dt = _fmap_dtype(cep_shape, gcc_shape)
    rec = np.zeros(len(frames), dtype=dt)
    rec["timestamp"] = frames.timestamp
    rec["range"] = frames.range
    rec["bearing"] = frames.bearing
    rec["cepstral"] = frames.cepstral
    rec["gcc"] = frames.gcc
    header = dict(header, cepstral_shape=list(cep_shape), gcc_shape=list(gcc_shape),
                  records=len(frames))
    _write(path, FMAP_MAGIC, header, rec.tobytes())


def read_features(path, transit: int = 0) -> tuple[FrameSet, dict]:
    header, payload = _read(path, FMAP_MAGIC)
    dt = _fmap_dtype(header["cepstral_shape"], header["gcc_shape"])
    rec = np.frombuffer(payload, dtype=dt)
    if len(rec) != header["records"]:
        raise FormatError(f"{path}: header says {header['records']} records, found {len(rec)}")
    frames = FrameSet(cepstral=rec["cepstral"].astype(float), gcc=rec["gcc"].astype(float),
                      range=rec["range"].astype(float), bearing=rec["bearing"].astype(float),
                      timestamp=rec["timestamp"].astype(float),
                      transit=np.full(len(rec), transit, dtype=int))
    return frames, header


def write_checkpoint(path, net: LocalizationNet, extra: Optional[dict] = None):
    state = net.state()
    names = sorted(state)
    header = {
        "architecture": net_config_dict(net.config),
        "arrays": [{"name": n, "shape": list(state[n].shape)} for n in names],
        "input_norm": {k: list(v) for k, v in net.input_norm.items()},
        **(extra or {}),
    }
    payload = b"".join(np.ascontiguousarray(state[n], dtype="<f8").tobytes() for n in names)
    _write(path, CKPT_MAGIC, header, payload)


def read_checkpoint(path) -> tuple[LocalizationNet, dict]:
    header, payload = _read(path, CKPT_MAGIC)
    arch = dict(header["architecture"])
    arch["cep_shape"] = tuple(arch["cep_shape"])
    arch["gcc_shape"] = tuple(arch["gcc_shape"])
    net = LocalizationNet(NetConfig(**arch))
    buf = np.frombuffer(payload, dtype="<f8")
    state = {}
    offset = 0
    for entry in header["arrays"]:
        size = int(np.prod(entry["shape"]))
        state[entry["name"]] = buf[offset:offset + size].reshape(entry["shape"]).copy()
        offset += size
    if offset != buf.size:
        raise FormatError(f"{path}: {buf.size - offset} trailing values")
    net.load_state(state)
    net.input_norm = {k: tuple(v) for k, v in header["input_norm"].items()}
    return net, header


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, schema: str, rows: Iterable[dict], config_hash_: str = ""):
    version, columns = CSV_SCHEMAS[schema]
    buf = _io.StringIO()
    buf.write(f"# schema: {schema}/{version} config_hash={config_hash_}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    Path(path).write_text(buf.getvalue())


def read_csv(path, schema: Optional[str] = None) -> tuple[list[dict], dict]:
    """Rows as string dicts plus ``{"schema", "version", "config_hash"}``."""
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# schema: "):
            raise FormatError(f"{path}: missing schema line")
        fields = first[len("# schema: "):].split()
        name, _, version = fields[0].partition("/")
        meta = {"schema": name, "version": int(version) if version.isdigit() else -1,
                "config_hash": ""}
        for extra in fields[1:]:
            k, _, v = extra.partition("=")
            meta[k] = v
        if name not in CSV_SCHEMAS or CSV_SCHEMAS[name][0] != meta["version"]:
            raise FormatError(f"{path}: unsupported schema {fields[0]}")
        if schema is not None and name != schema:
            raise FormatError(f"{path}: expected schema {schema}, found {name}")
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_SCHEMAS[name][1]:
            raise FormatError(f"{path}: columns {reader.fieldnames} do not match {name}/{version}")
        return list(reader), meta
