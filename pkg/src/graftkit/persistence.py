"""On-disk formats: a little-endian tensor container plus a JSON manifest sidecar.

Container layout::

    b"GRFT" | u32 version | u32 count
    count x ( u32 name_len | name (UTF-8) | u8 dtype {1: f32, 2: f64} | u8 rank | rank x u64 dim | payload )

The manifest ``<path>.manifest.json`` records the artifact kind, the config,
seeds, a creation timestamp and the SHA-256 of the container bytes.
"""

from __future__ import annotations

import datetime
import hashlib
import io
import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from graftkit.diffusion import BlobDataset
from graftkit.graft import ActivationDataset
from graftkit.model import DiT, Block, DiTConfig, ParallelPair
from graftkit.operators import OperatorConfig, build_operator

MAGIC = b"GRFT"
FORMAT_VERSION = 1
KINDS = ("checkpoint", "activations", "dataset", "report")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {torch.float32: 1, torch.float64: 2}


class FormatError(ValueError):
    """Base class for unreadable or inconsistent artifacts."""


class VersionError(FormatError):
    pass


class HashMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class KindError(FormatError):
    pass


def manifest_path(path: str | os.PathLike) -> Path:
    return Path(f"{path}.manifest.json")


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- container -------------------------------------------------------------------


def encode_tensors(tensors: Mapping[str, torch.Tensor]) -> bytes:
    """Serialize named tensors; integer and bool tensors are stored as exact f64."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
    for name, tensor in tensors.items():
        t = tensor.detach().cpu()
        if t.dtype not in _CODES:
            if t.is_floating_point():
                raise FormatError(f"{name}: unsupported dtype {t.dtype}")
            t = t.to(torch.float64)
        code = _CODES[t.dtype]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, t.dim()))
        buf.write(struct.pack(f"<{t.dim()}Q", *t.shape))
        buf.write(np.ascontiguousarray(t.numpy(), dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def decode_tensors(data: bytes) -> "OrderedDict[str, torch.Tensor]":
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedFileError(f"file ends inside {what} (needs {n} bytes at offset {pos}, size {len(view)})")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != MAGIC:
        raise FormatError("not a GRFT container (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise VersionError(f"container format version {version}, this build reads {FORMAT_VERSION}")
    out: OrderedDict[str, torch.Tensor] = OrderedDict()
    for i in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"record {i} name length"))
        name = bytes(take(name_len, f"record {i} name")).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2, f"{name} dtype/rank"))
        if code not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"{name} dims"))
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = take(nbytes, f"{name} payload")
        out[name] = torch.from_numpy(np.frombuffer(payload, dtype=dtype).reshape(dims).copy())
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after {count} records")
    return out


def _created() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, torch.Tensor], kind: str,
                 config: dict | None = None, seeds: dict | None = None) -> dict:
    """Write the container and its manifest; returns the manifest."""
    if kind not in KINDS:
        raise KindError(f"unknown artifact kind {kind!r}")
    path = Path(path)
    data = encode_tensors(tensors)
    manifest = {
        "kind": kind,
        "format_version": FORMAT_VERSION,
        "config": config or {},
        "seeds": seeds or {},
        "created": _created(),
        "sha256": hashlib.sha256(data).hexdigest(),
    }
    _atomic_write(path, data)
    _atomic_write(manifest_path(path), (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest


def read_manifest(path: str | os.PathLike) -> dict:
    mpath = manifest_path(path)
    if not mpath.exists():
        raise FileNotFoundError(f"missing manifest {mpath}")
    return json.loads(mpath.read_text())


def load_tensors(path: str | os.PathLike, kind: str | None = None) -> tuple["OrderedDict[str, torch.Tensor]", dict]:
    """Read and verify a container; checks kind, version, structure and hash, in that order."""
    manifest = read_manifest(path)
    if kind is not None and manifest.get("kind") != kind:
        raise KindError(f"{path} holds a {manifest.get('kind')!r} artifact, expected {kind!r}")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"manifest format version {manifest.get('format_version')}, expected {FORMAT_VERSION}")
    data = Path(path).read_bytes()
    tensors = decode_tensors(data)
    digest = hashlib.sha256(data).hexdigest()
    if digest != manifest.get("sha256"):
        raise HashMismatchError(f"{path}: content hash {digest[:12]}... does not match manifest")
    return tensors, manifest


# -- checkpoints -----------------------------------------------------------------


def model_from_architecture(config: DiTConfig, architecture: list[dict]) -> DiT:
    """Empty-weighted model with the given entry/operator layout (weights still need loading)."""
    model = DiT(config)

    def block(desc: dict) -> Block:
        return Block(config.dim, build_operator(OperatorConfig.from_dict(desc["mha"])),
                     build_operator(OperatorConfig.from_dict(desc["mlp"])))

    entries = []
    for desc in architecture:
        if desc["type"] == "pair":
            entries.append(ParallelPair(block(desc["a"]), block(desc["b"])))
        elif desc["type"] == "block":
            entries.append(block(desc))
        else:
            raise FormatError(f"unknown entry type {desc['type']!r}")
    model.entries = nn.ModuleList(entries)
    return model


def save_checkpoint(model: DiT, path: str | os.PathLike, seeds: dict | None = None, extra: dict | None = None) -> dict:
    config = {"model": model.config.to_dict(), "architecture": model.architecture(),
              "depth": len(model.blocks()), "effective_depth": model.effective_depth}
    if extra:
        config["extra"] = extra
    return save_tensors(path, model.state_dict(), "checkpoint", config, seeds or {"model": model.config.seed})


def load_checkpoint(path: str | os.PathLike) -> DiT:
    tensors, manifest = load_tensors(path, "checkpoint")
    cfg = manifest["config"]
    model = model_from_architecture(DiTConfig.from_dict(cfg["model"]), cfg["architecture"])
    dtypes = {t.dtype for t in tensors.values()}
    if dtypes == {torch.float64}:
        model = model.double()
    model.load_state_dict(tensors, strict=True)
    model.eval()
    return model


# -- activations, datasets, reports ------------------------------------------------


def save_activations(acts: ActivationDataset, path: str | os.PathLike) -> dict:
    if len(acts) == 0:
        raise ValueError("refusing to save an empty activation dataset")
    tensors = OrderedDict(inputs=acts.inputs, targets=acts.targets, t=acts.t, c=acts.c)
    if acts.gate is not None:
        tensors["gate"] = acts.gate
    if acts.cond is not None:
        tensors["cond"] = acts.cond
    return save_tensors(path, tensors, "activations", acts.metadata(), {"capture": acts.seed})


def load_activations(path: str | os.PathLike) -> ActivationDataset:
    tensors, manifest = load_tensors(path, "activations")
    meta = manifest["config"]
    acts = ActivationDataset(
        layer=meta["layer"], slot=meta["slot"], inputs=tensors["inputs"], targets=tensors["targets"],
        t=tensors["t"].long(), c=tensors["c"].long(), teacher_fingerprint=meta["teacher_fingerprint"],
        modulation_aware=meta["modulation_aware"], seed=meta["seed"],
        gate=tensors.get("gate"), cond=tensors.get("cond"),
    )
    if len(acts) != meta["count"]:
        raise FormatError(f"manifest says {meta['count']} records, container holds {len(acts)}")
    return acts


def save_dataset(data: BlobDataset, path: str | os.PathLike) -> dict:
    return save_tensors(path, OrderedDict(images=data.images, labels=data.labels), "dataset",
                        data.metadata(), {"generation": data.seed})


def load_dataset(path: str | os.PathLike) -> BlobDataset:
    tensors, manifest = load_tensors(path, "dataset")
    meta = manifest["config"]
    data = BlobDataset.__new__(BlobDataset)
    data.size, data.seed = meta["size"], meta["seed"]
    data.num_classes, data.image_size = meta["num_classes"], meta["image_size"]
    data.width, data.noise_std = meta["width"], meta["noise_std"]
    from graftkit.diffusion import blob_centers

    data.centers = blob_centers(data.num_classes, data.image_size)
    data.images, data.labels = tensors["images"], tensors["labels"].long()
    return data


def save_report(report: dict, path: str | os.PathLike, config: dict | None = None, seeds: dict | None = None) -> dict:
    """Write a JSON report with a manifest whose hash covers the report bytes."""
    path = Path(path)
    data = (json.dumps(report, indent=2, sort_keys=True) + "\n").encode()
    manifest = {"kind": "report", "format_version": FORMAT_VERSION, "config": config or {},
                "seeds": seeds or {}, "created": _created(), "sha256": hashlib.sha256(data).hexdigest()}
    _atomic_write(path, data)
    _atomic_write(manifest_path(path), (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest


def load_report(path: str | os.PathLike) -> dict:
    manifest = read_manifest(path)
    if manifest.get("kind") != "report":
        raise KindError(f"{path} holds a {manifest.get('kind')!r} artifact, expected 'report'")
    data = Path(path).read_bytes()
    if hashlib.sha256(data).hexdigest() != manifest.get("sha256"):
        raise HashMismatchError(f"{path}: content hash does not match manifest")
    return json.loads(data)
