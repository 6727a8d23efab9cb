"""Binary checkpoints: a text manifest followed by a little-endian float32 payload.

Layout::

    moewaitk-checkpoint 1
    config = {...json...}
    config_digest = <hex>
    stage = ft
    meta = {...json...}
    param <name> <d0>x<d1>... <byte offset> <byte count>
    ...
    end
    <payload>
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import ModelConfig, Transformer

MAGIC = "moewaitk-checkpoint 1"


class CheckpointFormatError(ValueError):
    pass


class CheckpointConfigError(ValueError):
    pass


def save_checkpoint(model, path):
    lines = [MAGIC,
             "config = " + json.dumps(model.config.to_dict(), sort_keys=True),
             "config_digest = " + model.config.digest(),
             "stage = " + model.stage,
             "meta = " + json.dumps(model.meta, sort_keys=True)]
    chunks, offset = [], 0
    for name, p in model.params.items():
        blob = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        shape = "x".join(str(n) for n in p.data.shape) or "scalar"
        lines.append(f"param {name} {shape} {offset} {len(blob)}")
        chunks.append(blob)
        offset += len(blob)
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    Path(path).write_bytes(header + b"".join(chunks))


def read_manifest(raw):
    end = raw.find(b"\nend\n")
    if not raw.startswith(MAGIC.encode()) or end < 0:
        raise CheckpointFormatError("not a moewaitk checkpoint")
    header = raw[: end].decode("utf-8").split("\n")[1:]
    fields, params = {}, []
    for line in header:
        if line.startswith("param "):
            _, name, shape, off, nbytes = line.split(" ")
            dims = () if shape == "scalar" else tuple(int(n) for n in shape.split("x"))
            params.append((name, dims, int(off), int(nbytes)))
        else:
            key, _, value = line.partition(" = ")
            fields[key] = value
    return fields, params, end + len(b"\nend\n")


def load_checkpoint(path, expected_config=None):
    raw = Path(path).read_bytes()
    fields, params, start = read_manifest(raw)
    try:
        config = ModelConfig.from_dict(json.loads(fields["config"]))
        meta = json.loads(fields.get("meta", "{}"))
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointFormatError(f"bad manifest: {exc}") from exc
    if fields.get("config_digest") != config.digest():
        raise CheckpointConfigError(
            f"config digest mismatch: manifest says {fields.get('config_digest')}, "
            f"config hashes to {config.digest()}")
    if expected_config is not None and expected_config.digest() != config.digest():
        raise CheckpointConfigError(
            f"checkpoint config {config.digest()} does not match expected {expected_config.digest()}")
    payload = raw[start:]
    model = Transformer(config)
    state = {}
    for name, dims, off, nbytes in params:
        if off + nbytes > len(payload):
            raise CheckpointFormatError(
                f"truncated payload: {name} needs bytes {off}..{off + nbytes}, file has {len(payload)}")
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off)
        state[name] = arr.reshape(dims).astype(np.float32)
    missing = set(model.params) - set(state)
    if missing:
        raise CheckpointFormatError(f"checkpoint lacks parameters: {sorted(missing)}")
    model.load_state_dict(state)
    model.stage = fields.get("stage", "init")
    model.meta = meta
    return model
