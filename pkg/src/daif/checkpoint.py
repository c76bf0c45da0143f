"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"DAIFCKPT"
    uint32    format version
    uint32    length n of the metadata block
    n bytes   UTF-8 JSON metadata
    ...       float64 arrays, row-major, in the order listed in metadata["arrays"]
    uint32    CRC-32 of every preceding byte

The metadata holds the architecture, the run configuration text, the kind of
checkpoint (``agent`` or ``all_on``) and, for each array, its name and shape.
Array names are ``<net>.<layer>.<W|b>`` for parameters and
``opt.<group>.<m|v>.<param>`` for Adam moments; Adam step counts and learning
rates live in the metadata.
"""
from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .agent import Agent
from .model import Actor, Architecture, GenerativeModel
from .nn import Adam

MAGIC = b"DAIFCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sII")


class CheckpointError(ValueError):
    pass


def _arch_meta(arch: Architecture) -> dict:
    d = dataclasses.asdict(arch)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _arch_from_meta(d: dict) -> Architecture:
    fields = {f.name for f in dataclasses.fields(Architecture)}
    return Architecture(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in fields})


def _encode(meta: dict, arrays: list[tuple[str, np.ndarray]]) -> bytes:
    meta = dict(meta, arrays=[{"name": n, "shape": list(a.shape)} for n, a in arrays])
    blob = json.dumps(meta, sort_keys=True).encode()
    body = _HEADER.pack(MAGIC, VERSION, len(blob)) + blob
    body += b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return body + struct.pack("<I", zlib.crc32(body))


def _decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _HEADER.size + 4:
        raise CheckpointError("file too short")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    magic, version, n = _HEADER.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError("bad magic")
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch")
    try:
        meta = json.loads(body[_HEADER.size : _HEADER.size + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable metadata: {e}") from None
    offset = _HEADER.size + n
    arrays = {}
    for spec in meta.get("arrays", []):
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(body):
            raise CheckpointError(f"truncated array {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(body[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(body):
        raise CheckpointError("trailing bytes after arrays")
    return meta, arrays


def save_agent(path: str | Path, agent: Agent, config_text: str = "", epoch: int = -1) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    for net in list(agent.model.nets.values()) + [agent.actor.net]:
        arrays += sorted(net.params.items())
    optim = {}
    for group in sorted(agent.optimizers):
        opt = agent.optimizers[group]
        optim[group] = {"lr": opt.lr, "step_count": opt.step_count, "clip_norm": opt.clip_norm}
        for kind, moments in (("m", opt.m), ("v", opt.v)):
            arrays += [(f"opt.{group}.{kind}.{k}", moments[k]) for k in sorted(moments)]
    meta = {"kind": "agent", "arch": _arch_meta(agent.arch), "config": config_text, "epoch": epoch, "optim": optim}
    Path(path).write_bytes(_encode(meta, arrays))


def save_all_on(path: str | Path, arch: Architecture, config_text: str = "") -> None:
    """Pseudo-checkpoint that evaluates as the ALL-ON baseline."""
    meta = {"kind": "all_on", "arch": _arch_meta(arch), "config": config_text, "epoch": -1}
    Path(path).write_bytes(_encode(meta, []))


def load(path: str | Path) -> tuple[Agent | str, dict]:
    """Returns ``(agent, metadata)``; the ALL-ON pseudo-checkpoint loads as the string ``"all_on"``."""
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {p}")
    meta, arrays = _decode(p.read_bytes())
    if meta.get("kind") == "all_on":
        return "all_on", meta
    if meta.get("kind") != "agent":
        raise CheckpointError(f"unknown checkpoint kind {meta.get('kind')!r}")
    try:
        arch = _arch_from_meta(meta["arch"])
        model = GenerativeModel(arch)
        actor = Actor(arch)
        for net in list(model.nets.values()) + [actor.net]:
            for k, v in net.params.items():
                if arrays[k].shape != v.shape:
                    raise CheckpointError(f"{k}: shape {arrays[k].shape}, architecture expects {v.shape}")
                net.params[k] = arrays[k]
        optimizers = {}
        for group, info in meta["optim"].items():
            opt = Adam(lr=info["lr"], clip_norm=info["clip_norm"], step_count=info["step_count"])
            for kind, target in (("m", opt.m), ("v", opt.v)):
                prefix = f"opt.{group}.{kind}."
                target.update({k[len(prefix):]: a for k, a in arrays.items() if k.startswith(prefix)})
            optimizers[group] = opt
    except KeyError as e:
        raise CheckpointError(f"missing entry {e}") from None
    return Agent(model, actor, optimizers), meta
