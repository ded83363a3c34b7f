"""AJPA binary containers for datasets, checkpoints, latent tables and probes.

Layout: ``b"AJPA"``, one version byte, a little-endian ``uint32`` header
length, a UTF-8 JSON header listing ``{"name", "shape", "dtype"}`` per array
(dtype ``"f32"`` or ``"f64"``) plus free-form ``meta``, then each array's
little-endian row-major bytes in header order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError
from .geometry import PointCloud
from .model import AeroJEPANet, ModelConfig
from .probes import ProbeModel, ProbeSuite
from .synthgen import Case, Conditions, DesignParams, Manifest
from .training import Checkpoint, LatentTable, TrainConfig

MAGIC = b"AJPA"
VERSION = 1
_DTYPES = {"f64": "<f8", "f32": "<f4"}


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_ajpa(path, arrays: dict, meta: dict = None, dtype: str = "f64") -> None:
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
    entries, blobs = [], []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype=_DTYPES[dtype]))
        entries.append({"name": name, "shape": list(a.shape), "dtype": dtype})
        blobs.append(a.tobytes(order="C"))
    header = _dumps({"arrays": entries, "meta": meta or {}}).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read_ajpa(path) -> tuple:
    """Returns ``(arrays, meta)``; raises :class:`FormatError` on bad magic, version or length."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = path.read_bytes()
    if len(raw) < 9 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not an AJPA file (bad magic)")
    if raw[4] != VERSION:
        raise FormatError(f"{path}: unsupported AJPA version {raw[4]} (expected {VERSION})")
    (hlen,) = struct.unpack("<I", raw[5:9])
    if len(raw) < 9 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[9:9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    offset = 9 + hlen
    arrays = {}
    for entry in header["arrays"]:
        if entry["dtype"] not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype {entry['dtype']!r}")
        dt = np.dtype(_DTYPES[entry["dtype"]])
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated data for array '{entry['name']}'")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize,
                                              offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return arrays, header.get("meta", {})


# -- checkpoints -----------------------------------------------------------------------------------
def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    arrays.update({f"buffer/{k}": v for k, v in ckpt.buffers.items()})
    meta = {
        "kind": "checkpoint",
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict() if ckpt.train_config else None,
        "history": ckpt.history,
    }
    write_ajpa(path, arrays, meta)


def load_checkpoint(path, model_config: ModelConfig = None) -> Checkpoint:
    """Load and validate a checkpoint.

    With ``model_config`` given, every stored array must match the shape that
    config produces; the first mismatch is reported by name.
    """
    arrays, meta = read_ajpa(path)
    if meta.get("kind") != "checkpoint":
        raise FormatError(f"{path}: not a checkpoint")
    cfg = model_config or ModelConfig(**meta["model_config"])
    expected = AeroJEPANet(cfg, seed=0)
    shapes = {f"param/{k}": v.shape for k, v in expected.parameters().items()}
    shapes.update({f"buffer/{k}": v.shape for k, v in expected.buffers().items()})
    for name, shape in shapes.items():
        if name not in arrays:
            raise FormatError(f"{path}: missing array '{name}'")
        if arrays[name].shape != tuple(shape):
            raise DimensionError(f"{path}: array '{name}' has shape {arrays[name].shape}, "
                                 f"config expects {tuple(shape)}")
    extra = sorted(set(arrays) - set(shapes))
    if extra:
        raise FormatError(f"{path}: unexpected array '{extra[0]}'")
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    buffers = {k[len("buffer/"):]: v for k, v in arrays.items() if k.startswith("buffer/")}
    tc = meta.get("train_config")
    return Checkpoint(cfg, params, buffers, TrainConfig.from_dict(tc) if tc else None, meta.get("history", []))


# -- datasets --------------------------------------------------------------------------------------
def case_entry(case: Case, split: str) -> dict:
    return {
        "case_id": case.case_id, "design_id": case.design_id, "split": split,
        "thickness": case.design.thickness, "camber": case.design.camber,
        "alpha": case.conditions.alpha, "mach": case.conditions.mach,
        "cl": case.cl, "cd": case.cd, "file": f"cases/case_{case.case_id:05d}.ajpa",
    }


def save_dataset(directory, cases, manifest: Manifest, config: dict = None) -> None:
    directory = Path(directory)
    (directory / "cases").mkdir(parents=True, exist_ok=True)
    split_of = {cid: name for name, ids in manifest.splits.items() for cid in ids}
    entries = []
    for case in cases:
        entry = case_entry(case, split_of[case.case_id])
        write_ajpa(directory / entry["file"], {"contour": case.geometry.coords, "cp": case.field.features},
                   {"kind": "case", "case_id": case.case_id})
        entries.append(entry)
    doc = {"format": "AJPA-dataset", "version": VERSION, "seed": manifest.seed,
           "splits": {k: list(map(int, v)) for k, v in manifest.splits.items()},
           "cases": entries, "config": config or {}}
    (directory / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_dataset(directory) -> tuple:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(mpath)
    doc = json.loads(mpath.read_text())
    cases = []
    for e in doc["cases"]:
        arrays, _ = read_ajpa(directory / e["file"])
        xy = arrays["contour"]
        cases.append(Case(
            DesignParams(e["thickness"], e["camber"]), Conditions(e["alpha"], e["mach"]),
            PointCloud(xy), PointCloud(xy, arrays["cp"], ("cp",)), e["cl"], e["cd"],
            case_id=e["case_id"], design_id=e["design_id"],
        ))
    design_split = {e["design_id"]: e["split"] for e in doc["cases"]}
    manifest = Manifest({k: list(v) for k, v in doc["splits"].items()}, design_split, doc["seed"])
    return cases, manifest, doc


# -- latent tables and probes -------------------------------------------------------------------------
def save_latents(path, table: LatentTable) -> None:
    write_ajpa(path, table.arrays(), {"kind": "latents"})


def load_latents(path) -> LatentTable:
    arrays, meta = read_ajpa(path)
    if meta.get("kind") != "latents":
        raise FormatError(f"{path}: not a latent table")
    for k in ("case_id", "design_id", "split"):
        arrays[k] = arrays[k].astype(np.int64)
    return LatentTable(**arrays)


def save_probes(path, suites: dict) -> None:
    arrays, meta = {}, {"kind": "probes", "suites": {}}
    for fam, suite in suites.items():
        info = {"latent": suite.latent, "heldout_r2": suite.heldout_r2, "targets": list(suite.models), "models": {}}
        for tgt, m in suite.models.items():
            key = f"{fam}/{tgt}"
            arrays[f"{key}/mu"], arrays[f"{key}/sigma"], arrays[f"{key}/w"] = m.mu, m.sigma, m.w
            info["models"][tgt] = {"b": m.b, "lam": m.lam, "cv_r2": m.cv_r2}
        meta["suites"][fam] = info
    write_ajpa(path, arrays, meta)


def load_probes(path) -> dict:
    arrays, meta = read_ajpa(path)
    if meta.get("kind") != "probes":
        raise FormatError(f"{path}: not a probe bundle")
    suites = {}
    for fam, info in meta["suites"].items():
        models = {}
        for tgt in info.get("targets", sorted(info["models"])):
            m, key = info["models"][tgt], f"{fam}/{tgt}"
            models[tgt] = ProbeModel(arrays[f"{key}/mu"], arrays[f"{key}/sigma"], arrays[f"{key}/w"],
                                     m["b"], m["lam"], m["cv_r2"], tgt)
        suites[fam] = ProbeSuite(fam, info["latent"], models, info["heldout_r2"])
    return suites
