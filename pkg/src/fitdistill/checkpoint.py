"""Binary checkpoint format.

Layout::

    b"FDCKPT\\0\\0"                   8-byte magic
    uint16 major, uint16 minor       format version, little-endian
    uint32 manifest_len
    manifest                         UTF-8 JSON, keys sorted
    payload                          raw little-endian float64, tensors in manifest order

The manifest records kind, model config, classifier settings, provenance,
one ``{"name", "shape", "offset"}`` entry per tensor (offset in bytes into
the payload) and the SHA-256 hex digest of the payload.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .models import EncoderClassifier, LanguageModel, ModelConfig

log = logging.getLogger(__name__)

MAGIC = b"FDCKPT\0\0"
VERSION = (1, 0)
_HEADER = struct.Struct("<HHI")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str  # "lm" | "classifier"
    config: ModelConfig
    params: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)
    classifier: dict = field(default_factory=dict)  # structure, pooling, interaction, head_dim, freeze_encoder

    @classmethod
    def from_model(cls, model: LanguageModel | EncoderClassifier, **provenance) -> "Checkpoint":
        params = {k: v.copy() for k, v in model.params.items()}
        if isinstance(model, LanguageModel):
            return cls("lm", model.config, params, dict(provenance))
        meta = {
            "structure": model.structure,
            "pooling": model.pooling,
            "interaction": model.interaction,
            "head_dim": model.head_dim,
            "freeze_encoder": model.freeze_encoder,
        }
        return cls("classifier", model.config, params, dict(provenance), meta)

    def model(self, role: str = "student") -> LanguageModel:
        if self.kind != "lm":
            raise CheckpointError(f"checkpoint holds a {self.kind}, not a language model")
        return LanguageModel(self.config, {k: v.copy() for k, v in self.params.items()}, role)

    def classifier_model(self) -> EncoderClassifier:
        if self.kind != "classifier":
            raise CheckpointError(f"checkpoint holds a {self.kind}, not a classifier")
        return EncoderClassifier(self.config, {k: v.copy() for k, v in self.params.items()}, **self.classifier)

    def digest(self) -> str:
        return params_digest(self.params)


def params_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()


def _payload(params: dict[str, np.ndarray]) -> tuple[list[dict], bytes]:
    entries, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    return entries, b"".join(chunks)


def to_bytes(ckpt: Checkpoint, version: tuple[int, int] = VERSION) -> bytes:
    entries, payload = _payload(ckpt.params)
    manifest = {
        "kind": ckpt.kind,
        "config": asdict(ckpt.config),
        "classifier": ckpt.classifier,
        "provenance": ckpt.provenance,
        "tensors": entries,
        "payload_bytes": len(payload),
        "digest": hashlib.sha256(payload).hexdigest(),
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + _HEADER.pack(version[0], version[1], len(mbytes)) + mbytes + payload


def from_bytes(blob: bytes) -> Checkpoint:
    head = len(MAGIC) + _HEADER.size
    if len(blob) < head or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated header)")
    major, minor, mlen = _HEADER.unpack_from(blob, len(MAGIC))
    if major != VERSION[0]:
        raise CheckpointError(f"unsupported checkpoint format version {major}.{minor}")
    if minor > VERSION[1]:
        log.warning("checkpoint format %d.%d is newer than %d.%d; loading anyway", major, minor, *VERSION)
    if len(blob) < head + mlen:
        raise CheckpointError("checkpoint truncated inside manifest")
    try:
        manifest = json.loads(blob[head : head + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from None
    payload = blob[head + mlen :]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(
            f"payload has {len(payload)} bytes, manifest says {manifest['payload_bytes']} (truncated?)"
        )
    if hashlib.sha256(payload).hexdigest() != manifest["digest"]:
        raise CheckpointError("payload digest mismatch (corrupted checkpoint)")
    params = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return Checkpoint(
        manifest["kind"], ModelConfig(**manifest["config"]), params, manifest["provenance"], manifest["classifier"]
    )


def save_checkpoint(ckpt: Checkpoint, location: str | Path) -> Path:
    path = Path(location)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(location: str | Path) -> Checkpoint:
    path = Path(location)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
