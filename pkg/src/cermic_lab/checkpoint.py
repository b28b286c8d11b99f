"""Parameter checkpoints: raw little-endian float64 payload plus a JSON header."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "cermic-lab-params-v1"


def save_params(params: dict, path, meta: dict | None = None) -> tuple[Path, Path]:
    """Write ``<path>.bin`` and ``<path>.json``; keys are stored in sorted order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size
        chunks.append(arr.ravel())
    payload = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    bin_path, json_path = path.with_suffix(".bin"), path.with_suffix(".json")
    bin_path.write_bytes(payload.astype("<f8").tobytes())
    header = {"format": FORMAT, "dtype": "float64-le", "total": int(offset), "tensors": entries, "meta": meta or {}}
    json_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return bin_path, json_path


def load_params(path) -> tuple[dict, dict]:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    if header.get("format") != FORMAT:
        raise ValueError(f"unrecognized checkpoint format {header.get('format')!r}")
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    if flat.size != header["total"]:
        raise ValueError("checkpoint payload size does not match its header")
    params = {}
    for e in header["tensors"]:
        params[e["name"]] = flat[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"]).astype(float)
    return params, header.get("meta", {})


def check_shapes(expected: dict, loaded: dict, keys=None) -> None:
    for k in (expected if keys is None else keys):
        if k not in loaded:
            raise ValueError(f"checkpoint is missing tensor {k!r}")
        if tuple(loaded[k].shape) != tuple(expected[k].shape):
            raise ValueError(f"shape mismatch for {k!r}: {loaded[k].shape} vs {expected[k].shape}")
