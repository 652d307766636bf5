"""Single-file model artifact.

Layout::

    magic            8 bytes   b"PKMODEL\\n"
    major, minor     2 x uint16 little-endian
    sha256          32 bytes   digest of everything that follows
    header length    uint64 little-endian
    header           UTF-8 JSON (sorted keys): configs, vocab, tokens, transform,
                     history and an index of array sections (name, shape, offset)
    arrays           little-endian float64, concatenated in index order

Readers accept any minor version of their major version.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .evaluation import TargetTransform
from .otp import Vocab
from .predicate_embedding import EmbeddingModel, W2VHyper
from .sampler import SamplerConfig
from .training import PrestroidModel
from .tree_cnn import ArchConfig, ModelParams

MAGIC = b"PKMODEL\n"
FORMAT_MAJOR = 1
FORMAT_MINOR = 0
_PREFIX = struct.Struct("<8sHH32sQ")


class ArtifactError(Exception):
    """Base class for unreadable model files."""


class ArtifactChecksumError(ArtifactError):
    pass


class ArtifactVersionError(ArtifactError):
    pass


def _encode(model: PrestroidModel) -> tuple[dict, list[np.ndarray]]:
    p = model.params
    arrays: list[tuple[str, np.ndarray]] = []
    arrays += [(f"weights/{n}", a) for n, a in sorted(p.weights.items())]
    arrays += [(f"state/{n}", a) for n, a in sorted(p.state.items())]
    arrays.append(("embedding/vectors", model.embedder.vectors))
    arrays.append(("embedding/global_fallback", model.embedder.global_fallback))
    index, blobs, offset = [], [], 0
    for name, a in arrays:
        blob = np.ascontiguousarray(a, dtype="<f8")
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += blob.nbytes
        blobs.append(blob)
    e = model.embedder
    header = {
        "arch": asdict(p.arch),
        "in_features": p.in_features,
        "k": p.k,
        "dtype": str(p.dtype),
        "sampler": asdict(model.sampler),
        "vocab": {"operators": list(model.vocab.operators), "tables": list(model.vocab.tables)},
        "embedding": {
            "p_f": e.p_f,
            "tokens": list(e.tokens),
            "window": e.window,
            "min_count": e.min_count,
            "hyper": asdict(e.hyper),
        },
        "transform": {"min_log": model.transform.min_log, "max_log": model.transform.max_log},
        "history": model.history,
        "meta": model.meta,
        "arrays": index,
    }
    return header, blobs


def dumps_model(model: PrestroidModel) -> bytes:
    header, blobs = _encode(model)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    body = struct.pack("<Q", len(hbytes)) + hbytes + b"".join(b.tobytes() for b in blobs)
    digest = hashlib.sha256(body).digest()
    return MAGIC + struct.pack("<HH", FORMAT_MAJOR, FORMAT_MINOR) + digest + body


def save_model(model: PrestroidModel, path) -> str:
    """Write the artifact and return its SHA-256 file checksum (hex)."""
    data = dumps_model(model)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def loads_model(data: bytes) -> PrestroidModel:
    if len(data) < 12 or data[:8] != MAGIC:
        raise ArtifactError("not a model artifact (bad magic)")
    major, minor = struct.unpack_from("<HH", data, 8)
    if major > FORMAT_MAJOR:
        raise ArtifactVersionError(f"artifact format {major}.{minor} is newer than supported {FORMAT_MAJOR}.x")
    if major < FORMAT_MAJOR:
        raise ArtifactVersionError(f"artifact format {major}.{minor} is no longer supported")
    if len(data) < _PREFIX.size:
        raise ArtifactChecksumError("artifact truncated")
    digest = data[12:44]
    body = data[44:]
    if hashlib.sha256(body).digest() != digest:
        raise ArtifactChecksumError("artifact checksum mismatch (truncated or corrupted)")
    (hlen,) = struct.unpack_from("<Q", body, 0)
    header = json.loads(body[8 : 8 + hlen].decode("utf-8"))
    payload = memoryview(body)[8 + hlen :]
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        a = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = a.reshape(entry["shape"]).astype(np.float64)
    return _decode(header, arrays)


def _decode(header: dict, arrays: dict[str, np.ndarray]) -> PrestroidModel:
    dtype = np.dtype(header["dtype"])
    arch = ArchConfig(**header["arch"])
    weights = {n.split("/", 1)[1]: a.astype(dtype) for n, a in arrays.items() if n.startswith("weights/")}
    state = {n.split("/", 1)[1]: a.astype(dtype) for n, a in arrays.items() if n.startswith("state/")}
    params = ModelParams(arch, header["in_features"], header["k"], weights, state)
    e = header["embedding"]
    embedder = EmbeddingModel(
        e["p_f"],
        tuple(e["tokens"]),
        arrays["embedding/vectors"].reshape(len(e["tokens"]), e["p_f"]),
        e["window"],
        e["min_count"],
        W2VHyper(**e["hyper"]),
        arrays["embedding/global_fallback"],
    )
    vocab = Vocab(tuple(header["vocab"]["operators"]), tuple(header["vocab"]["tables"]))
    transform = TargetTransform(**header["transform"])
    sampler = SamplerConfig(**header["sampler"])
    return PrestroidModel(params, vocab, embedder, transform, sampler, header["history"], header["meta"])


def load_model(path) -> PrestroidModel:
    return loads_model(Path(path).read_bytes())


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
