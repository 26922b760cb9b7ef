"""
Checkpoint files.

Layout (all integers little-endian):
    magic b"FMCKPT", uint16 version
    uint32 metadata length + UTF-8 YAML metadata
    uint32 record count, then per record:
        uint8 section (0 parameter, 1 BN running mean, 2 BN running var, 3 FM head)
        uint16 name length + UTF-8 name
        uint8 ndim + ndim * uint32 dims
        float32 little-endian data
"""
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from core.errors import ConfigurationError, DataFormatError

logger = logging.getLogger(__name__)

MAGIC = b"FMCKPT"
VERSION = 1
PARAM, BN_MEAN, BN_VAR, FM_HEAD = 0, 1, 2, 3


@dataclass
class CheckpointState:
    params: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    bn_mean: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    bn_var: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    heads: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    meta: dict = field(default_factory=dict)

    @property
    def has_heads(self):
        return bool(self.heads)


def snapshot(model, strategy=None, include_heads=False, meta=None) -> CheckpointState:
    """Copy of the model's weights and BN statistics; FM heads only on request."""
    state = CheckpointState(meta=dict(meta or {}))
    for name, p in model.named_parameters():
        state.params[name] = p.data.astype(np.float32, copy=True)
    for name, bn in model.bn_states.items():
        state.bn_mean[name] = bn.running_mean.astype(np.float32, copy=True)
        state.bn_var[name] = bn.running_var.astype(np.float32, copy=True)
    if include_heads and strategy is not None:
        for p in strategy.parameters():
            state.heads[p.name] = p.data.astype(np.float32, copy=True)
    return state


def _records(state: CheckpointState):
    for section, table in ((PARAM, state.params), (BN_MEAN, state.bn_mean),
                           (BN_VAR, state.bn_var), (FM_HEAD, state.heads)):
        for name, arr in table.items():
            yield section, name, arr


def encode(state: CheckpointState) -> bytes:
    meta = yaml.safe_dump(state.meta, sort_keys=True).encode("utf8")
    records = list(_records(state))
    out = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(meta)), meta, struct.pack("<I", len(records))]
    for section, name, arr in records:
        raw_name = name.encode("utf8")
        out.append(struct.pack("<BH", section, len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes, source):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise DataFormatError(f"{self.source}: truncated checkpoint", self.pos)
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(raw: bytes, source="<bytes>") -> CheckpointState:
    r = _Reader(raw, source)
    if r.take(len(MAGIC)) != MAGIC:
        raise DataFormatError(f"{source}: not a checkpoint file", 0)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise DataFormatError(f"{source}: unsupported checkpoint version {version}", len(MAGIC))
    (meta_len,) = r.unpack("<I")
    state = CheckpointState(meta=yaml.safe_load(r.take(meta_len).decode("utf8")) or {})
    tables = {PARAM: state.params, BN_MEAN: state.bn_mean, BN_VAR: state.bn_var, FM_HEAD: state.heads}
    (count,) = r.unpack("<I")
    for _ in range(count):
        start = r.pos
        section, name_len = r.unpack("<BH")
        if section not in tables:
            raise DataFormatError(f"{source}: unknown section {section}", start)
        name = r.take(name_len).decode("utf8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        tables[section][name] = data
    if r.pos != len(raw):
        raise DataFormatError(f"{source}: trailing bytes after the last record", r.pos)
    return state


def save_checkpoint(state: CheckpointState, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(state))
    logger.info("[Checkpoint] wrote %s (%d tensors%s)", path, len(state.params),
                ", with FM heads" if state.has_heads else "")
    return path


def load_checkpoint(path) -> CheckpointState:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    return decode(path.read_bytes(), path)


def apply_state(state: CheckpointState, model, strategy=None):
    """
    Load weights into `model` (and FM heads into `strategy` when both carry
    them). Every model parameter must be present with a matching shape; a head
    section is ignored by head-free models.
    """
    for name, p in model.named_parameters():
        if name not in state.params:
            raise ConfigurationError(f"checkpoint has no tensor {name!r}")
        arr = state.params[name]
        if arr.shape != p.data.shape:
            raise ConfigurationError(f"checkpoint tensor {name!r} has shape {arr.shape}, model expects {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
    extra = set(state.params) - set(model.params)
    if extra:
        raise ConfigurationError(f"checkpoint tensors unknown to this model: {sorted(extra)[:3]}")
    for name, bn in model.bn_states.items():
        if name not in state.bn_mean or name not in state.bn_var:
            raise ConfigurationError(f"checkpoint has no BN statistics for {name!r}")
        bn.running_mean = state.bn_mean[name].copy()
        bn.running_var = state.bn_var[name].copy()
    if strategy is not None and state.has_heads:
        for p in strategy.parameters():
            if p.name in state.heads:
                p.data = state.heads[p.name].astype(p.data.dtype, copy=True)
    return model
