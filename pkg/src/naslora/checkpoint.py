"""Binary checkpoint container.

Layout, all integers little-endian:

    bytes  8   magic "NASLORA1"
    u32        format version (currently 1)
    u64        config text length, then that many UTF-8 bytes
    u64        tensor count
    per tensor (sorted by name, so files are canonical):
        u32        name length, then that many UTF-8 bytes
        u32        rank
        u64 * rank extents
        f64 * prod payload, C order

A checkpoint stores the complete training state: every model tensor
(frozen and trainable), the channel masks as 0/1 vectors, both optimizer
groups (moments plus step counters) and the epoch counter, together with
the run's config text verbatim. Round-trips are bitwise.
"""
from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import CheckpointError
from .optim import AdamState

MAGIC = b"NASLORA1"
VERSION = 1


def write_checkpoint(path, config_text: str, tensors: dict[str, np.ndarray]) -> None:
    """Atomic: assembled in a temp file in the target directory, then renamed."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    cfg = config_text.encode("utf-8")
    blob += struct.pack("<Q", len(cfg))
    blob += cfg
    blob += struct.pack("<Q", len(tensors))
    for name in sorted(tensors):
        # order="C" rather than ascontiguousarray: the latter turns 0-d into 1-d
        arr = np.asarray(tensors[name], dtype=np.float64, order="C")
        enc = name.encode("utf-8")
        blob += struct.pack("<I", len(enc))
        blob += enc
        blob += struct.pack("<I", arr.ndim)
        for extent in arr.shape:
            blob += struct.pack("<Q", extent)
        blob += arr.tobytes()

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint: truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def read_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise CheckpointError(f"checkpoint: cannot read {path}: {e}") from e

    cur = _Cursor(raw)
    if cur.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("checkpoint: bad magic")
    version = cur.u32()
    if version != VERSION:
        raise CheckpointError(
            f"checkpoint: unsupported format version {version}, expected {VERSION}")
    config_text = cur.take(cur.u64()).decode("utf-8")
    count = cur.u64()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = cur.take(cur.u32()).decode("utf-8")
        rank = cur.u32()
        shape = tuple(cur.u64() for _ in range(rank))
        n = 1
        for extent in shape:
            n *= extent
        payload = cur.take(8 * n)
        arr = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        if name in tensors:
            raise CheckpointError(f"checkpoint: duplicate tensor {name!r}")
        tensors[name] = arr
    if cur.pos != len(raw):
        raise CheckpointError("checkpoint: trailing data after tensor table")
    return config_text, tensors


def _opt_entries(prefix: str, state: AdamState) -> dict[str, np.ndarray]:
    out = {f"{prefix}/step": np.asarray(float(state.step_count))}
    for name, m in state.m.items():
        out[f"{prefix}/m/{name}"] = m
        out[f"{prefix}/v/{name}"] = state.v[name]
    return out


def collect_state(model, opt_w: AdamState, opt_a: AdamState,
                  epoch: int) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for name, t in model.frozen_params().items():
        tensors[name] = t.data
    for name, t in model.trainable_params().items():
        tensors[name] = t.data
    for name, arr in model.named_masks().items():
        tensors[name] = arr
    tensors.update(_opt_entries("opt/w", opt_w))
    tensors.update(_opt_entries("opt/a", opt_a))
    tensors["meta/epoch"] = np.asarray(float(epoch))
    return tensors


def _restore_opt(prefix: str, tensors: dict[str, np.ndarray]) -> AdamState:
    state = AdamState()
    step_key = f"{prefix}/step"
    if step_key not in tensors:
        raise CheckpointError(f"checkpoint: missing {step_key!r}")
    state.step_count = int(tensors.pop(step_key))
    m_pre, v_pre = f"{prefix}/m/", f"{prefix}/v/"
    for key in [k for k in tensors if k.startswith(m_pre)]:
        name = key[len(m_pre):]
        v_key = v_pre + name
        if v_key not in tensors:
            raise CheckpointError(f"checkpoint: missing {v_key!r}")
        state.m[name] = tensors.pop(key).copy()
        state.v[name] = tensors.pop(v_key).copy()
    return state


def restore_state(model, tensors: dict[str, np.ndarray]) -> tuple[AdamState, AdamState, int]:
    """Load a collect_state() table into a freshly built model.

    Returns the two optimizer groups and the stored epoch. The model must
    have been constructed from the checkpoint's own config: every tensor
    name and shape must match, and the stored channel masks must equal the
    model's seeded masks bit for bit.
    """
    remaining = dict(tensors)
    params = dict(model.frozen_params())
    params.update(model.trainable_params())
    for name, t in params.items():
        if name not in remaining:
            raise CheckpointError(f"checkpoint: missing tensor {name!r}")
        arr = remaining.pop(name)
        if arr.shape != t.data.shape:
            raise CheckpointError(
                f"checkpoint: shape mismatch for {name!r}: "
                f"stored {arr.shape}, model {t.data.shape}")
        t.data = arr.copy()
        t.grad = None
    for name, mask in model.named_masks().items():
        if name not in remaining:
            raise CheckpointError(f"checkpoint: missing tensor {name!r}")
        stored = remaining.pop(name)
        if stored.shape != mask.shape or not np.array_equal(stored, mask):
            raise CheckpointError(f"checkpoint: channel mask {name!r} does not "
                                  "match the model's seeded mask")
    opt_w = _restore_opt("opt/w", remaining)
    opt_a = _restore_opt("opt/a", remaining)
    if "meta/epoch" not in remaining:
        raise CheckpointError("checkpoint: missing tensor 'meta/epoch'")
    epoch = int(remaining.pop("meta/epoch"))
    if remaining:
        extra = ", ".join(sorted(remaining)[:4])
        raise CheckpointError(f"checkpoint: unexpected tensors: {extra}")
    return opt_w, opt_a, epoch


def save_training_state(path, config_text: str, model, opt_w: AdamState,
                        opt_a: AdamState, epoch: int) -> None:
    write_checkpoint(path, config_text, collect_state(model, opt_w, opt_a, epoch))
