"""Binary checkpoint format.

Layout, all integers little-endian::

    8 bytes   magic "ONNSEG01"
    u32       format version (1)
    32 bytes  SHA-256 of the model config's canonical JSON
    u64       epoch
    u64       step
    u32 + n   RNG state, UTF-8 JSON
    u32 + n   metadata (train state, optimizer step), UTF-8 JSON
    u32       tensor count, then per tensor:
              u32 name length, name bytes, u32 rank, rank x u32 dims,
              float32 payload in C order

Tensor names carry a kind prefix: ``param/``, ``buffer/``, ``adam.m/`` or
``adam.v/``. Values are stored at 32-bit precision while compute stays at
64-bit, so a loaded model equals the saved one rounded to float32.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .errors import OnnSegError

MAGIC = b"ONNSEG01"
VERSION = 1


class CheckpointError(OnnSegError):
    pass


class WrongMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class DigestMismatchError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config_digest: bytes
    epoch: int = 0
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def group(self, prefix: str) -> Dict[str, np.ndarray]:
        """Tensors under ``prefix/`` keyed by their bare names."""
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def encode(ck: Checkpoint) -> bytes:
    if len(ck.config_digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    out = [MAGIC, struct.pack("<I", VERSION), ck.config_digest,
           struct.pack("<QQ", ck.epoch, ck.step)]
    for doc in (ck.rng_state, ck.meta):
        raw = json.dumps(doc, sort_keys=True).encode()
        out += [struct.pack("<I", len(raw)), raw]
    out.append(struct.pack("<I", len(ck.tensors)))
    for name, arr in ck.tensors.items():
        a = np.array(arr, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
        nb = name.encode()
        out += [struct.pack("<I", len(nb)), nb, struct.pack("<I", a.ndim),
                struct.pack(f"<{a.ndim}I", *a.shape), a.tobytes()]
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"checkpoint truncated reading {what}: need {n} bytes at offset {self.pos}, "
                f"file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes, expected_digest: Optional[bytes] = None) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) >= len(MAGIC) and buf[:len(MAGIC)] != MAGIC:
        raise WrongMagicError(f"not a checkpoint: magic {buf[:8]!r} != {MAGIC!r}")
    r.take(len(MAGIC), "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {VERSION}")
    digest = r.take(32, "config digest")
    if expected_digest is not None and digest != expected_digest:
        raise DigestMismatchError(
            f"checkpoint was written for config {digest.hex()[:16]}..., "
            f"current config is {expected_digest.hex()[:16]}...")
    epoch, step = r.unpack("<QQ", "counters")
    docs = []
    for what in ("rng state", "metadata"):
        (n,) = r.unpack("<I", f"{what} length")
        docs.append(json.loads(r.take(n, what).decode()))
    (count,) = r.unpack("<I", "tensor count")
    tensors = OrderedDict()
    for i in range(count):
        (n,) = r.unpack("<I", f"tensor {i} name length")
        name = r.take(n, f"tensor {i} name").decode()
        (rank,) = r.unpack("<I", f"{name} rank")
        dims = r.unpack(f"<{rank}I", f"{name} dims")
        size = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * size, f"{name} payload")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the last tensor")
    return Checkpoint(digest, epoch, step, docs[0], docs[1], tensors)


def save_checkpoint(path, ck: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ck))
    tmp.replace(path)


def load_checkpoint(path, expected_digest: Optional[bytes] = None) -> Checkpoint:
    return decode(Path(path).read_bytes(), expected_digest)


# -- bridging to live training objects ----------------------------------------

def capture(model_cfg, store, opt_state=None, train_state=None, rng=None) -> Checkpoint:
    tensors = OrderedDict(store.state_arrays())
    meta = {}
    if opt_state is not None:
        meta["adam_step"] = opt_state.step
        for name in store.params:
            if name in opt_state.m:
                tensors[f"adam.m/{name}"] = opt_state.m[name]
                tensors[f"adam.v/{name}"] = opt_state.v[name]
    if train_state is not None:
        meta["train_state"] = train_state.to_dict()
    return Checkpoint(model_cfg.digest(),
                      train_state.epoch if train_state else 0,
                      train_state.step if train_state else 0,
                      rng.bit_generator.state if rng is not None else {},
                      meta, tensors)


def restore(ck: Checkpoint, store, opt_state=None, rng=None) -> None:
    """Load weights and buffers into ``store``; optionally the optimizer
    moments and the shuffling RNG."""
    store.load_arrays({k: v for k, v in ck.tensors.items()
                       if k.startswith(("param/", "buffer/"))})
    if opt_state is not None:
        opt_state.step = int(ck.meta.get("adam_step", 0))
        opt_state.m = {k: v.astype(np.float64) for k, v in ck.group("adam.m").items()}
        opt_state.v = {k: v.astype(np.float64) for k, v in ck.group("adam.v").items()}
    if rng is not None and ck.rng_state:
        rng.bit_generator.state = ck.rng_state


def import_weights(store, path, prefix: str = "enc.") -> int:
    """Copy ``param/`` and ``buffer/`` tensors whose names start with
    ``prefix`` from a checkpoint file, ignoring its config digest.

    This is the hook for externally converted encoder weights. Returns the
    number of tensors copied.
    """
    ck = load_checkpoint(path)
    picked = {k: v for k, v in ck.tensors.items()
              if k.split("/", 1)[0] in ("param", "buffer") and k.split("/", 1)[1].startswith(prefix)}
    store.load_arrays(picked, strict=False)
    return len(picked)
