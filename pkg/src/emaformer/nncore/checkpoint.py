"""Checkpoint file: a UTF-8 text header followed by raw float32 arrays.

Header layout, one item per line::

    emaformer-checkpoint 1
    config <key>=<value>        (model config echo, repeated)
    meta <key>=<value>          (training metadata, repeated)
    param <name> <d0,d1,...> <byte offset>
    end

The payload holds each parameter as little-endian float32, in manifest
order, starting right after the ``end`` line. Offsets are relative to the
payload start.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = "emaformer-checkpoint"
VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray], config: dict[str, str],
                    meta: dict[str, str] | None = None) -> None:
    lines = [f"{MAGIC} {VERSION}"]
    for key, value in config.items():
        lines.append(f"config {key}={value}")
    for key, value in (meta or {}).items():
        lines.append(f"meta {key}={value}")
    offset = 0
    blobs = []
    for name, arr in params.items():
        if " " in name:
            raise CheckpointError(f"parameter name may not contain spaces: {name!r}")
        blob = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        shape = ",".join(str(s) for s in np.shape(arr)) or "scalar"
        lines.append(f"param {name} {shape} {offset}")
        offset += len(blob)
        blobs.append(blob)
    lines.append("end")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8") + b"".join(blobs))


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray], dict[str, str]]:
    """Return ``(config, params, meta)``; params come back as float32 arrays."""
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if cut < 0:
        raise CheckpointError(f"{path}: header terminator not found")
    header = raw[:cut].decode("utf-8").split("\n")
    payload = raw[cut + len(marker):]
    first = header[0].split()
    if len(first) != 2 or first[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if int(first[1]) != VERSION:
        raise CheckpointError(f"{path}: unsupported version {first[1]}")

    config: dict[str, str] = {}
    meta: dict[str, str] = {}
    manifest: list[tuple[str, tuple[int, ...], int]] = []
    for lineno, line in enumerate(header[1:], start=2):
        kind, _, rest = line.partition(" ")
        if kind in ("config", "meta"):
            key, sep, value = rest.partition("=")
            if not sep:
                raise CheckpointError(f"{path}:{lineno}: expected key=value")
            (config if kind == "config" else meta)[key] = value
        elif kind == "param":
            parts = rest.split(" ")
            if len(parts) != 3:
                raise CheckpointError(f"{path}:{lineno}: malformed param line")
            name, shape_s, off_s = parts
            shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split(","))
            manifest.append((name, shape, int(off_s)))
        else:
            raise CheckpointError(f"{path}:{lineno}: unknown header line {kind!r}")

    params: dict[str, np.ndarray] = {}
    expected = 0
    for name, shape, offset in manifest:
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if offset != expected or offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: bad offset for {name}")
        params[name] = np.frombuffer(payload, dtype=_LE_F32, count=nbytes // 4,
                                     offset=offset).reshape(shape).astype(np.float32)
        expected += nbytes
    if expected != len(payload):
        raise CheckpointError(f"{path}: payload size {len(payload)} != manifest total {expected}")
    return config, params, meta
