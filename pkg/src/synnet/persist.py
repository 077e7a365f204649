"""Checkpoint serialization and plain-text run configuration.

Checkpoint binary layout (all integers little-endian):
  magic "SYNNETCK" | u32 version=1
  | topology: u8 kind (0 siso, 1 miso, 2 mimo), u32 depth, u32 channel
    count, u32 channels...
  | u32 tensor count, then per tensor: u32 name length, UTF-8 name,
    u8 dtype (0 single, 1 double), u32 ndim, u32 dims..., raw scalars
  | u32 config-text length, UTF-8 config echo.

Config files are `key = value` lines; `#` comments and blank lines are
allowed; unknown keys are rejected.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from .loss import LossWeights, SsimConfig
from .model import Topology
from .optim import OptimState, TrainConfig

_MAGIC = b"SYNNETCK"
_VERSION = 1
_KINDS = ("siso", "miso", "mimo")
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.float32, 1: np.float64}


class CheckpointError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

def _parse_bool(v: str) -> bool:
    if v.lower() in ("true", "1", "yes"):
        return True
    if v.lower() in ("false", "0", "no"):
        return False
    raise ValueError(v)


def _parse_str_tuple(v: str):
    return tuple(s.strip() for s in v.split(",") if s.strip())


def _parse_int_tuple(v: str):
    return tuple(int(s) for s in v.split(",") if s.strip())


@dataclass
class RunConfig:
    lambda1: float = 10.0
    lambda2: float = 5.0
    lambda3: float = 0.5
    lambda4: float = 0.0001
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    seed: int = 42
    loss: str = "joint"
    topology: str = "siso"
    depth: int = 3
    channels: tuple = (32, 64, 64)
    final_width: int = 64
    ssim_mode: str = "local"
    ssim_window: int = 7
    edge_beta: float = 4.0
    tv_eps: float = 1e-8
    input_modalities: tuple = ("m1",)
    output_modalities: tuple = ("m2",)
    augment: bool = False
    shuffle: bool = True
    miso_index_arm: int = 0
    mimo_arm_matched_skips: bool = False
    dtype: str = "single"
    train_frac: float = 0.8


_PARSERS = {
    float: float,
    int: int,
    str: str,
    bool: _parse_bool,
    tuple: None,  # resolved per field below
}
_TUPLE_FIELDS = {
    "channels": _parse_int_tuple,
    "input_modalities": _parse_str_tuple,
    "output_modalities": _parse_str_tuple,
}


def parse_config(text: str) -> RunConfig:
    """Parse `key = value` lines into a RunConfig; missing keys keep defaults."""
    cfg = RunConfig()
    known = {f.name: f.type for f in dc_fields(RunConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        current = getattr(cfg, key)
        try:
            if key in _TUPLE_FIELDS:
                parsed = _TUPLE_FIELDS[key](value)
            elif isinstance(current, bool):
                parsed = _parse_bool(value)
            else:
                parsed = type(current)(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: cannot parse value {value!r} for {key!r}")
        setattr(cfg, key, parsed)
    return cfg


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in dc_fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def topology_from_config(cfg: RunConfig) -> Topology:
    return Topology(
        kind=cfg.topology, depth=cfg.depth, channels=cfg.channels,
        in_channels=1, out_channels=1, final_width=cfg.final_width,
        miso_index_arm=cfg.miso_index_arm,
        mimo_arm_matched_skips=cfg.mimo_arm_matched_skips)


def train_config_from_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg.batch_size, epochs=cfg.epochs, seed=cfg.seed,
        loss=cfg.loss,
        loss_weights=LossWeights(cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.lambda4),
        ssim=SsimConfig(mode=cfg.ssim_mode, window=cfg.ssim_window),
        edge_beta=cfg.edge_beta, shuffle=cfg.shuffle, tv_eps=cfg.tv_eps)


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    topology: Topology
    tensors: dict              # ordered name -> ndarray
    config_text: str = ""
    version: int = _VERSION


def save_checkpoint(path: str, cp: Checkpoint):
    t = cp.topology
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<I", _VERSION)
    out += struct.pack("<B", _KINDS.index(t.kind))
    out += struct.pack("<I", t.depth)
    out += struct.pack("<I", len(t.channels))
    out += struct.pack(f"<{len(t.channels)}I", *t.channels)
    out += struct.pack("<I", len(cp.tensors))
    for name, arr in cp.tensors.items():
        if arr.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode()
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<B", _DTYPE_TAGS[arr.dtype])
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
    cb = cp.config_text.encode()
    out += struct.pack("<I", len(cb)) + cb
    with open(path, "wb") as f:
        f.write(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        b = self.raw[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(8, "magic") != _MAGIC:
        raise CheckpointError("bad magic")
    version = r.u32("version")
    if version != _VERSION:
        raise CheckpointError(f"unsupported version {version}")
    kind_tag = r.u8("topology kind")
    if kind_tag >= len(_KINDS):
        raise CheckpointError(f"bad topology kind tag {kind_tag}")
    depth = r.u32("depth")
    n_ch = r.u32("channel count")
    channels = struct.unpack(f"<{n_ch}I", r.take(4 * n_ch, "channels"))
    count = r.u32("tensor count")
    tensors = {}
    for i in range(count):
        nlen = r.u32(f"tensor {i} name length")
        name = r.take(nlen, f"tensor {i} name").decode()
        tag = r.u8(f"tensor {name!r} dtype")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"tensor {name!r}: bad dtype tag {tag}")
        ndim = r.u32(f"tensor {name!r} ndim")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"tensor {name!r} dims"))
        dtype = np.dtype(_TAG_DTYPES[tag]).newbyteorder("<")
        nbytes = int(np.prod(dims)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(r.take(nbytes, f"tensor {name!r} data"), dtype=dtype)
        tensors[name] = arr.reshape(dims).astype(_TAG_DTYPES[tag]).copy()
    clen = r.u32("config length")
    config_text = r.take(clen, "config text").decode()
    # kind/depth/channels come from the binary block; the remaining topology
    # fields ride in the config echo
    try:
        cfg = parse_config(config_text) if config_text else RunConfig()
    except ConfigError:
        cfg = RunConfig()
    topo = Topology(kind=_KINDS[kind_tag], depth=depth, channels=channels,
                    final_width=cfg.final_width,
                    miso_index_arm=cfg.miso_index_arm,
                    mimo_arm_matched_skips=cfg.mimo_arm_matched_skips)
    return Checkpoint(topo, tensors, config_text, version)


# ---------------------------------------------------------------------------
# packing training state into checkpoint tensors
# ---------------------------------------------------------------------------

def pack_training(topology: Topology, params, state, opt_state: OptimState,
                  config_text: str) -> Checkpoint:
    tensors = {}
    for name, arr in params.items():
        tensors[f"param.{name}"] = arr
    for name, arr in state.items():
        tensors[f"state.{name}"] = arr
    for name, arr in opt_state.velocity.items():
        tensors[f"velocity.{name}"] = arr
    tensors["optim.iteration"] = np.array([opt_state.iteration], dtype=np.float64)
    tensors["optim.epoch"] = np.array([opt_state.epoch], dtype=np.float64)
    return Checkpoint(topology, tensors, config_text)


def unpack_training(cp: Checkpoint, lr: float, momentum: float):
    """(params, state, opt_state) from a packed checkpoint."""
    params, state, velocity = {}, {}, {}
    for name, arr in cp.tensors.items():
        if name.startswith("param."):
            params[name[len("param."):]] = arr
        elif name.startswith("state."):
            state[name[len("state."):]] = arr
        elif name.startswith("velocity."):
            velocity[name[len("velocity."):]] = arr
    opt = OptimState(velocity=velocity,
                     iteration=int(cp.tensors["optim.iteration"][0]),
                     epoch=int(cp.tensors["optim.epoch"][0]),
                     lr=lr, momentum=momentum)
    return params, state, opt
