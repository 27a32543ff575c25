"""Binary checkpoint container.

Layout: magic "A124", little-endian u32 format version, u64 header length,
canonical JSON header (sorted keys, no whitespace), then the raw parameter
payload in manifest order. Canonical JSON plus fixed tensor ordering makes
save -> load -> save byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import field
from .config import Config
from .encoding import Grid4D, HexPlaneEncoding, MultiScaleGrid3D, build_layout, torch_dtype
from .errors import DataFormatError
from .scene import SceneModel

MAGIC = b"A124"
FORMAT_VERSION = 1

_NP_DTYPE = {"float32": "<f4", "float64": "<f8"}


def _encoding_header(enc) -> dict[str, Any]:
    if isinstance(enc, HexPlaneEncoding):
        return {"kind": "hexplane",
                "resolutions": [int(r) for r in enc.resolutions],
                "feature_dim": enc.feature_dim}
    kind = "grid4d" if isinstance(enc, Grid4D) else "grid3d"
    head = {"kind": kind,
            "resolutions": [int(r) for r in enc.layout.resolutions],
            "rows": [int(enc.layout.offsets[i + 1] - enc.layout.offsets[i])
                     for i in range(enc.layout.num_levels)],
            "dense": [int(d) for d in enc.layout.dense],
            "feature_dim": enc.feature_dim}
    if kind == "grid4d":
        head["time_slices"] = enc.time_slices
    return head


def _encoding_from_header(head: dict[str, Any], table: torch.Tensor):
    kind = head["kind"]
    if kind == "hexplane":
        return HexPlaneEncoding(np.asarray(head["resolutions"], dtype=np.int64),
                                head["feature_dim"], table)
    from .kernels import LevelLayout
    rows = np.asarray(head["rows"], dtype=np.int64)
    layout = LevelLayout(resolutions=np.asarray(head["resolutions"], dtype=np.int64),
                         offsets=np.concatenate([[0], np.cumsum(rows)]).astype(np.int64),
                         dense=np.asarray(head["dense"], dtype=np.uint8))
    if kind == "grid4d":
        return Grid4D(layout, head["feature_dim"], head["time_slices"], table)
    if kind == "grid3d":
        return MultiScaleGrid3D(layout, head["feature_dim"], table)
    raise DataFormatError(f"unknown encoding kind {kind!r}")


def save_checkpoint(path: str | Path, model: SceneModel, stage: str, cfg: Config,
                    iteration: int) -> Path:
    path = Path(path)
    dtype_name = "float32" if model.dtype == torch.float32 else "float64"
    np_dtype = _NP_DTYPE[dtype_name]
    params = model.named_parameters()
    manifest = []
    payload = bytearray()
    for name, tensor in params.items():
        data = tensor.detach().numpy().astype(np_dtype).tobytes()
        manifest.append({"name": name, "shape": list(tensor.shape), "offset": len(payload)})
        payload.extend(data)
    header = {
        "config": cfg.to_dict(),
        "dtype": dtype_name,
        "encoding": _encoding_header(model.encoding),
        "iteration": iteration,
        "payload_bytes": len(payload),
        "stage": stage,
        "tensors": manifest,
        "version": FORMAT_VERSION,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.parent / (path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
    os.replace(tmp, path)
    return path


def read_header(path: str | Path) -> dict[str, Any]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise DataFormatError(f"bad checkpoint magic {magic!r}")
        fixed = f.read(12)
        if len(fixed) != 12:
            raise DataFormatError("truncated checkpoint header")
        version, header_len = struct.unpack("<IQ", fixed)
        if version != FORMAT_VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}")
        header_bytes = f.read(header_len)
        if len(header_bytes) != header_len:
            raise DataFormatError("truncated checkpoint header JSON")
    try:
        return json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"corrupt checkpoint header: {exc}") from None


def load_checkpoint(path: str | Path) -> tuple[SceneModel, dict[str, Any]]:
    path = Path(path)
    header = read_header(path)
    np_dtype = _NP_DTYPE[header["dtype"]]
    itemsize = 4 if header["dtype"] == "float32" else 8
    dtype = torch_dtype(header["dtype"])
    prefix = 4 + 12 + len(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
    blob = path.read_bytes()[prefix:]
    if len(blob) != header["payload_bytes"]:
        raise DataFormatError(f"payload is {len(blob)} bytes, manifest says {header['payload_bytes']}")
    tensors: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        end = start + count * itemsize
        if end > len(blob):
            raise DataFormatError(f"tensor {entry['name']!r} overruns the payload")
        arr = np.frombuffer(blob[start:end], dtype=np_dtype).reshape(entry["shape"])
        tensors[entry["name"]] = torch.tensor(arr, dtype=dtype).requires_grad_(True)
    for required in ("encoding.table", "heads.w1", "heads.b1", "heads.w2", "heads.b2"):
        if required not in tensors:
            raise DataFormatError(f"checkpoint missing tensor {required!r}")
    encoding = _encoding_from_header(header["encoding"], tensors["encoding.table"])
    heads = field.FieldHeads.from_tensors(tensors["heads.w1"], tensors["heads.b1"],
                                          tensors["heads.w2"], tensors["heads.b2"])
    model = SceneModel(encoding, heads, dtype)
    meta = {"stage": header["stage"], "iteration": header["iteration"],
            "config": header["config"], "dtype": header["dtype"]}
    return model, meta


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
