"""Binary checkpoint container.

Layout::

    b"SGAN" | u32 format version | u64 header length | JSON header | payload

All integers are little-endian. The JSON header carries configs, progress
counters, the input normaliser, optimizer hyper-parameters and step counts,
a manifest of named arrays (shape, byte offset, byte length within the
payload) and the SHA-256 of the payload. The payload is the concatenation of
the arrays as little-endian float64, in manifest order.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .losses import LossWeights
from .networks import DiscriminatorConfig, GeneratorConfig, Module, config_dict
from .optim import AdamState
from .training import Normalizer, SGANModel, TrainConfig, config_from_dict

MAGIC = b"SGAN"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class CheckpointFormatError(CheckpointError):
    """Not a checkpoint file, or a corrupt header."""


class CheckpointVersionError(CheckpointError):
    """Written by an unsupported format version."""


class CheckpointIntegrityError(CheckpointError):
    """Truncated payload or checksum mismatch."""


class CheckpointShapeError(CheckpointError):
    """Stored arrays do not fit the network described by the header."""


def _net_arrays(prefix: str, net: Module) -> "OrderedDict[str, np.ndarray]":
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, p in net.named_parameters():
        out[f"{prefix}/param/{name}"] = p.data
    for name, st in net.named_buffers():
        if st.initialized:
            out[f"{prefix}/buffer/{name}.mean"] = st.mean
            out[f"{prefix}/buffer/{name}.var"] = st.var
    return out


def _collect(model: SGANModel) -> "OrderedDict[str, np.ndarray]":
    arrays = _net_arrays("G", model.G)
    arrays.update(_net_arrays("D", model.D))
    for tag, opt in (("opt_g", model.opt_g), ("opt_d", model.opt_d)):
        for i, st in enumerate(opt.states):
            arrays[f"{tag}/m/{i}"] = st.first_moment
            arrays[f"{tag}/v/{i}"] = st.second_moment
    sums = model.extra.get("epoch_sums") or []
    if sums:
        arrays["progress/epoch_records"] = np.asarray(sums, dtype=np.float64)
    return arrays


def encode(model: SGANModel) -> bytes:
    arrays = _collect(model)
    manifest, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)
    header = {
        "generator": config_dict(model.G.cfg),
        "discriminator": config_dict(model.D.cfg),
        "weights": config_dict(model.weights),
        "train": config_dict(model.train_cfg),
        "normalizer": model.normalizer.to_dict() if model.normalizer else None,
        "epoch": model.epoch,
        "step_in_epoch": model.step_in_epoch,
        "global_step": model.global_step,
        "optimizers": {
            tag: {
                "lr": opt.lr,
                "beta1": opt.beta1,
                "beta2": opt.beta2,
                "eps": opt.eps,
                "step_counts": [st.step_count for st in opt.states],
            }
            for tag, opt in (("opt_g", model.opt_g), ("opt_d", model.opt_d))
        },
        "tensors": manifest,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + payload


def checkpoint_save(model: SGANModel, path) -> Path:
    """Write atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(model)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _parse(raw: bytes) -> tuple[dict, bytes]:
    if len(raw) < _PREFIX.size:
        raise CheckpointIntegrityError("file is shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise CheckpointIntegrityError("truncated header")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from None
    payload = raw[start + hlen :]
    expected = sum(t["nbytes"] for t in header["tensors"])
    if len(payload) != expected:
        raise CheckpointIntegrityError(f"payload holds {len(payload)} bytes, manifest lists {expected}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointIntegrityError("payload checksum mismatch")
    return header, payload


def decode(raw: bytes) -> SGANModel:
    header, payload = _parse(raw)
    norm = header["normalizer"]
    model = SGANModel.create(
        config_from_dict(GeneratorConfig, header["generator"]),
        config_from_dict(DiscriminatorConfig, header["discriminator"]),
        config_from_dict(LossWeights, header["weights"]),
        config_from_dict(TrainConfig, header["train"]),
        Normalizer.from_dict(norm) if norm else None,
    )
    arrays = {}
    for t in header["tensors"]:
        blob = payload[t["offset"] : t["offset"] + t["nbytes"]]
        arrays[t["name"]] = np.frombuffer(blob, dtype="<f8").reshape(t["shape"]).astype(np.float64)
    _apply(model, header, arrays)
    return model


def _apply(model: SGANModel, header: dict, arrays: dict) -> None:
    # validate everything first so a failure leaves the model untouched
    targets: list[tuple[np.ndarray, np.ndarray]] = []
    buffers = []
    for prefix, net in (("G", model.G), ("D", model.D)):
        for name, p in net.named_parameters():
            key = f"{prefix}/param/{name}"
            if key not in arrays:
                raise CheckpointShapeError(f"missing array {key}")
            if arrays[key].shape != p.shape:
                raise CheckpointShapeError(f"{key}: stored {arrays[key].shape}, network expects {p.shape}")
            targets.append((p, arrays[key]))
        for name, st in net.named_buffers():
            mkey, vkey = f"{prefix}/buffer/{name}.mean", f"{prefix}/buffer/{name}.var"
            if mkey in arrays:
                if arrays[mkey].shape != (st.channels,) or arrays[vkey].shape != (st.channels,):
                    raise CheckpointShapeError(f"{mkey}: wrong channel count")
                buffers.append((st, arrays[mkey], arrays[vkey]))
    opt_states = []
    for tag, opt in (("opt_g", model.opt_g), ("opt_d", model.opt_d)):
        meta = header["optimizers"][tag]
        if len(meta["step_counts"]) != len(opt.params):
            raise CheckpointShapeError(f"{tag}: {len(meta['step_counts'])} states for {len(opt.params)} parameters")
        states = []
        for i, p in enumerate(opt.params):
            m, v = arrays.get(f"{tag}/m/{i}"), arrays.get(f"{tag}/v/{i}")
            if m is None or v is None or m.shape != p.shape or v.shape != p.shape:
                raise CheckpointShapeError(f"{tag} state {i} does not match parameter shape {p.shape}")
            states.append(AdamState(m, v, int(meta["step_counts"][i])))
        opt_states.append((opt, meta, states))

    for p, arr in targets:
        p.data = arr
    for st, mean, var in buffers:
        st.mean, st.var = mean, var
    for opt, meta, states in opt_states:
        opt.states = states
        opt.lr, opt.beta1, opt.beta2, opt.eps = meta["lr"], meta["beta1"], meta["beta2"], meta["eps"]
    model.epoch = header["epoch"]
    model.step_in_epoch = header["step_in_epoch"]
    model.global_step = header["global_step"]
    rec = arrays.get("progress/epoch_records")
    model.extra["epoch_sums"] = [tuple(r) for r in rec] if rec is not None else []


def checkpoint_load(path) -> SGANModel:
    return decode(Path(path).read_bytes())
