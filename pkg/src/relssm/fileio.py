"""Bit-exact on-disk formats for datasets and checkpoints.

Arrays are flat binary: a little-endian u64 rank, u64 extents, then
row-major data (f32 for dataset arrays, f64 for parameters). Manifests are
JSON with a mandatory schema version; every binary file's SHA-256 is
recorded so round-trips are verifiable byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .experiments import ToyConfig, ToyDataset, ToySplit
from .graph import AttributedGraph

__all__ = [
    "write_array",
    "read_array",
    "write_dataset",
    "read_dataset",
    "write_checkpoint",
    "read_checkpoint",
]

SCHEMA_VERSION = 1


def write_array(path: Path, arr: np.ndarray, dtype: str = "<f4") -> str:
    path = Path(path)
    with open(path, "wb") as fh:
        shape = np.array([arr.ndim] + list(arr.shape), dtype="<u8")
        fh.write(shape.tobytes())
        fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return sha256_file(path)


def read_array(path: Path, dtype: str = "<f4") -> np.ndarray:
    with open(path, "rb") as fh:
        ndim = int(np.frombuffer(fh.read(8), dtype="<u8")[0])
        shape = np.frombuffer(fh.read(8 * ndim), dtype="<u8").astype(int)
        data = np.frombuffer(fh.read(), dtype=dtype)
    return data.reshape(shape).astype(np.float64)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_dataset(dataset: ToyDataset, out_dir: Path) -> Path:
    """Directory layout: manifest.json + per-split binaries + edge lists."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = dataset.config
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": "toy-dataset",
        "seed": dataset.seed,
        "config": asdict(cfg),
        "dims": {
            "n_steps": cfg.n_steps, "n_vertices": cfg.n_vertices,
            "d_x": 1, "d_u": 0, "d_v": cfg.d_v,
        },
        "splits": {},
    }
    for name, split in dataset.splits.items():
        sdir = out / name
        sdir.mkdir(exist_ok=True)
        checks = {}
        checks["x.bin"] = write_array(sdir / "x.bin", split.X)
        checks["u.bin"] = write_array(sdir / "u.bin", np.zeros(split.X.shape[:3] + (0,)))
        checks["vattr.bin"] = write_array(sdir / "vattr.bin", split.covariates)
        edir = sdir / "edges"
        edir.mkdir(exist_ok=True)
        for e, g in enumerate(split.graphs):
            lines = "".join(f"{j} {i}\n" for j, i in g.edges)
            (edir / f"{e:05d}.txt").write_text(lines)
        manifest["splits"][name] = {
            "n_examples": split.n_examples,
            "files": sorted(checks),
            "checksums": checks,
        }
    _dump_json(out / "manifest.json", manifest)
    return out


def read_dataset(path: Path) -> ToyDataset:
    path = Path(path)
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported dataset schema {manifest.get('schema_version')}")
    cfg_d = dict(manifest["config"])
    cfg_d["eta"] = tuple(cfg_d["eta"])
    cfg = ToyConfig(**cfg_d)
    splits = {}
    for name, info in manifest["splits"].items():
        sdir = path / name
        for fname, want in info["checksums"].items():
            got = sha256_file(sdir / fname)
            if got != want:
                raise ValueError(f"checksum mismatch for {sdir / fname}")
        X = read_array(sdir / "x.bin")
        covs = read_array(sdir / "vattr.bin")
        graphs = []
        for e in range(info["n_examples"]):
            text = (sdir / "edges" / f"{e:05d}.txt").read_text()
            edges = [tuple(map(int, line.split())) for line in text.splitlines() if line]
            graphs.append(
                AttributedGraph(cfg.n_vertices, np.array(edges).reshape(-1, 2))
            )
        splits[name] = ToySplit(X, graphs, covs)
    return ToyDataset(cfg, manifest["seed"], splits)


def write_checkpoint(out_dir: Path, params: dict, step: int, rng_state: dict,
                     extra: dict | None = None, extra_meta: dict | None = None,
                     config: dict | None = None) -> Path:
    """Parameters as one f64 blob in manifest order, plus optimizer state."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    blob = np.concatenate([np.asarray(params[n], dtype="<f8").ravel() for n in names]) \
        if names else np.zeros(0)
    with open(out / "params.bin", "wb") as fh:
        fh.write(blob.tobytes())
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": "checkpoint",
        "step": step,
        "rng_state": _jsonable(rng_state),
        "params": [{"name": n, "shape": list(np.shape(params[n]))} for n in names],
        "checksums": {"params.bin": sha256_file(out / "params.bin")},
        "config": config or {},
        "extra_meta": extra_meta or {},
    }
    if extra:
        enames = sorted(extra)
        eblob = np.concatenate([np.asarray(extra[n], dtype="<f8").ravel() for n in enames])
        with open(out / "optim.bin", "wb") as fh:
            fh.write(eblob.tobytes())
        manifest["extra"] = [{"name": n, "shape": list(np.shape(extra[n]))} for n in enames]
        manifest["checksums"]["optim.bin"] = sha256_file(out / "optim.bin")
    _dump_json(out / "manifest.json", manifest)
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def read_checkpoint(path: Path):
    """Returns (params, step, rng_state, extra, manifest)."""
    path = Path(path)
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {manifest.get('schema_version')}")
    for fname, want in manifest["checksums"].items():
        if sha256_file(path / fname) != want:
            raise ValueError(f"checksum mismatch for {path / fname}")
    blob = np.frombuffer((path / "params.bin").read_bytes(), dtype="<f8")
    params = {}
    pos = 0
    for entry in manifest["params"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        params[entry["name"]] = blob[pos : pos + size].reshape(entry["shape"]).copy()
        pos += size
    extra = {}
    if "extra" in manifest:
        eblob = np.frombuffer((path / "optim.bin").read_bytes(), dtype="<f8")
        pos = 0
        for entry in manifest["extra"]:
            size = int(np.prod(entry["shape"])) if entry["shape"] else 1
            extra[entry["name"]] = eblob[pos : pos + size].reshape(entry["shape"]).copy()
            pos += size
    return params, manifest["step"], manifest["rng_state"], extra, manifest
