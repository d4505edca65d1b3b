"""Binary checkpoint persistence.

Layout (all integers little-endian):

    magic "GPHT" | u32 version | u64 config-block length | config block
    | u32 array count | arrays...

where the config block is UTF-8 ``key=value`` lines (model fields plus
``meta.*`` training metadata) and each array record is

    u16 name length | name UTF-8 | u8 scope (0 non-head, 1 head) | u8 rank
    | u32 per dimension | float64 row-major values

Arrays are ordered by name; save -> load round-trips bit-exactly.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointFormatError, CheckpointVersionError
from .model import SCOPE_HEAD, SCOPE_NON_HEAD, ModelConfig, ModelParams, params_from_arrays

MAGIC = b"GPHT"
VERSION = 1

_CONFIG_FIELDS = (
    "num_stages", "pool_kernels", "token_len", "max_tokens", "model_width",
    "layers_per_stage", "attention_heads", "feedforward_width", "dropout_rate",
    "seed",
)


@dataclass
class Checkpoint:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    scopes: dict[str, str]
    metadata: dict[str, str] = field(default_factory=dict)
    version: int = VERSION


def from_params(params: ModelParams, metadata: dict[str, str] | None = None) -> Checkpoint:
    """Snapshot live parameters into a detached checkpoint."""
    return Checkpoint(
        config=params.config,
        arrays={n: t.values.copy() for n, t in params.arrays.items()},
        scopes=dict(params.scopes),
        metadata=dict(metadata or {}),
    )


def to_params(ckpt: Checkpoint) -> ModelParams:
    """Materialize trainable parameters from a checkpoint."""
    return params_from_arrays(ckpt.config, ckpt.arrays, ckpt.scopes)


def _encode_config_block(config: ModelConfig, metadata: dict[str, str]) -> bytes:
    lines = []
    for name in _CONFIG_FIELDS:
        value = getattr(config, name)
        if name == "pool_kernels":
            value = ",".join(str(k) for k in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{name}={value}")
    for key in sorted(metadata):
        value = metadata[key]
        if "\n" in key or "=" in key or "\n" in str(value):
            raise CheckpointFormatError(f"metadata key/value not encodable: {key!r}")
        lines.append(f"meta.{key}={value}")
    return "\n".join(lines).encode("utf-8")


def _decode_config_block(block: bytes) -> tuple[ModelConfig, dict[str, str]]:
    fields: dict[str, str] = {}
    metadata: dict[str, str] = {}
    for line in block.decode("utf-8").splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        if key.startswith("meta."):
            metadata[key[5:]] = value
        else:
            fields[key] = value
    try:
        config = ModelConfig(
            num_stages=int(fields["num_stages"]),
            pool_kernels=tuple(int(k) for k in fields["pool_kernels"].split(",")),
            token_len=int(fields["token_len"]),
            max_tokens=int(fields["max_tokens"]),
            model_width=int(fields["model_width"]),
            layers_per_stage=int(fields["layers_per_stage"]),
            attention_heads=int(fields["attention_heads"]),
            feedforward_width=int(fields["feedforward_width"]),
            dropout_rate=float(fields["dropout_rate"]),
            seed=int(fields["seed"]),
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"invalid config block: {exc}") from exc
    return config, metadata


def serialize(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    block = _encode_config_block(ckpt.config, ckpt.metadata)
    buf.write(struct.pack("<Q", len(block)))
    buf.write(block)
    names = sorted(ckpt.arrays)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f8")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        scope = ckpt.scopes[name]
        buf.write(struct.pack("<B", 1 if scope == SCOPE_HEAD else 0))
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointFormatError(
                f"truncated checkpoint: needed {n} bytes for {what} at byte "
                f"offset {self.offset}, have {len(self.data) - self.offset}"
            )
        out = self.data[self.offset:self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))[0]


def deserialize(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(
            f"bad magic {magic!r} at byte offset 0, expected {MAGIC!r}"
        )
    version = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version}, this build reads {VERSION}"
        )
    block_len = r.unpack("<Q", "config block length")
    config, metadata = _decode_config_block(r.take(block_len, "config block"))
    count = r.unpack("<I", "array count")
    arrays: dict[str, np.ndarray] = {}
    scopes: dict[str, str] = {}
    for _ in range(count):
        name_len = r.unpack("<H", "array name length")
        name = r.take(name_len, "array name").decode("utf-8")
        if name in arrays:
            raise CheckpointFormatError(f"duplicate array name {name!r}")
        scope_code = r.unpack("<B", "scope code")
        rank = r.unpack("<B", "rank")
        shape = tuple(r.unpack("<I", f"dimension of {name}") for _ in range(rank))
        n_values = int(np.prod(shape)) if shape else 1
        raw = r.take(8 * n_values, f"values of {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        scopes[name] = SCOPE_HEAD if scope_code == 1 else SCOPE_NON_HEAD
    if r.offset != len(data):
        raise CheckpointFormatError(
            f"{len(data) - r.offset} trailing bytes at offset {r.offset}"
        )
    return Checkpoint(config=config, arrays=arrays, scopes=scopes,
                      metadata=metadata, version=version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def checkpoint_hash(ckpt: Checkpoint) -> str:
    """Stable content hash (sha256 of the serialized form)."""
    return hashlib.sha256(serialize(ckpt)).hexdigest()
