"""``.tlmodel.json`` persistence.

Parameters are stored as IEEE-754 hex strings (``float.hex``), so a load
reproduces every bit. A SHA-256 checksum over the canonical JSON of the
remaining fields catches truncation and tampering.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .dynamics import Mlp, MlpField
from .integrators import ResidualNet
from .midpoint import LearnedMidpoint

__all__ = [
    "FORMAT_VERSION",
    "MODEL_SUFFIX",
    "ModelFormatError",
    "ChecksumError",
    "VersionError",
    "TopologyError",
    "to_document",
    "from_document",
    "save_model",
    "load_model",
    "inspect_model",
]

FORMAT_VERSION = 1
MODEL_SUFFIX = ".tlmodel.json"


class ModelFormatError(ValueError):
    pass


class ChecksumError(ModelFormatError):
    pass


class VersionError(ModelFormatError):
    pass


class TopologyError(ModelFormatError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"model state dimension mismatch: expected n={expected}, file has n={actual}")
        self.expected = expected
        self.actual = actual


def _kind(model) -> str:
    if isinstance(model, LearnedMidpoint):
        return "midpoint"
    if isinstance(model, ResidualNet):
        return "residual"
    if isinstance(model, MlpField):
        return "dynamics"
    raise TypeError(f"cannot serialise {type(model).__name__}")


def _encode(arr: np.ndarray) -> dict:
    a = np.asarray(arr, dtype=np.float64)
    return {"shape": list(a.shape), "hex": [float(v).hex() for v in a.reshape(-1)]}


def _decode(entry: dict) -> np.ndarray:
    vals = [float.fromhex(s) for s in entry["hex"]]
    return np.array(vals, dtype=np.float64).reshape(entry["shape"])


def _digest(doc: dict) -> str:
    body = {k: v for k, v in doc.items() if k != "checksum"}
    canon = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def to_document(model, metadata: dict | None = None) -> dict:
    kind = _kind(model)
    net = model.net
    topo = {"sizes": list(net.sizes), "activations": list(net.activations), "bias": net.bias}
    if kind == "midpoint":
        topo.update(n=model.n, output_shape=model.output_shape, dt_encoding=model.dt_encoding)
    elif kind == "residual":
        topo.update(n=model.n, dt_encoding=model.dt_encoding)
    else:
        topo.update(n=model.dim)
    doc = {
        "format": "tlmodel",
        "version": FORMAT_VERSION,
        "kind": kind,
        "topology": topo,
        "metadata": dict(metadata or {}),
        "params": [_encode(p) for p in net.numpy_params()],
    }
    doc["checksum"] = _digest(doc)
    return doc


def from_document(doc: dict, expect_n: int | None = None):
    if not isinstance(doc, dict) or doc.get("format") != "tlmodel":
        raise ModelFormatError("not a tlmodel document")
    if doc.get("version") != FORMAT_VERSION:
        raise VersionError(f"unsupported model format version {doc.get('version')!r}; "
                           f"this build reads version {FORMAT_VERSION}")
    if doc.get("checksum") != _digest(doc):
        raise ChecksumError("checksum mismatch: model file is corrupt or was modified")
    topo = doc["topology"]
    n = int(topo["n"])
    if expect_n is not None and n != expect_n:
        raise TopologyError(expect_n, n)
    params = [_decode(e) for e in doc["params"]]
    net = Mlp(tuple(topo["sizes"]), tuple(topo["activations"]), params, bool(topo["bias"]))
    kind = doc["kind"]
    if kind == "midpoint":
        return LearnedMidpoint(net, n, topo["output_shape"], topo["dt_encoding"])
    if kind == "residual":
        return ResidualNet(net, n, topo["dt_encoding"])
    if kind == "dynamics":
        return MlpField(net)
    raise ModelFormatError(f"unknown model kind '{kind}'")


def save_model(model, path, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = to_document(model, metadata)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path


def _read(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ChecksumError(f"{path}: file is truncated or not valid JSON ({exc.msg})") from None


def load_model(path, expect_n: int | None = None):
    return from_document(_read(path), expect_n)


def inspect_model(path) -> dict:
    doc = _read(path)
    model = from_document(doc)
    return {
        "path": str(path),
        "version": doc["version"],
        "kind": doc["kind"],
        "topology": doc["topology"],
        "metadata": doc["metadata"],
        "n_params": model.net.n_params,
        "checksum": doc["checksum"],
    }
