"""Residual networks for 32x32 encoded skeleton images.

Each residual unit computes ``relu(F(x) + shortcut(x))`` with
``F = conv3x3 - BN - ReLU - Dropout - conv3x3 - BN``.  The stem is a 3x3
conv with 16 filters followed by BN and ReLU; three stages of
``(depth - 2) / 6`` units run at widths 16, 32 and 64, and global mean
pooling feeds a fully connected classifier.  The first unit of stages 2
and 3 halves the resolution with a stride-2 conv and a 1x1 stride-2
projection shortcut.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (
    BatchNorm2d,
    Conv2d,
    Dropout,
    GlobalMeanPool,
    Linear,
    Module,
    Parameter,
    ReLU,
    make_rng,
)
from .errors import (
    BadCheckpoint,
    NoForwardCache,
    ShapeError,
    ShapeMismatch,
    UnsupportedDepth,
    VersionMismatch,
)

SUPPORTED_DEPTHS = (20, 32, 44, 56, 110)
STAGE_WIDTHS = (16, 32, 64)

CHECKPOINT_MAGIC = b"SKRN"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass(frozen=True)
class NetworkSpec:
    depth: int
    num_classes: int
    widths: tuple[int, ...] = STAGE_WIDTHS
    dropout: float = 0.5
    input_size: int = 32
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        per_unit = 2 * len(self.widths)
        if self.depth < 2 + per_unit or (self.depth - 2) % per_unit:
            raise UnsupportedDepth(
                f"depth {self.depth} is not {per_unit}n+2 for {len(self.widths)} stages"
            )
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")

    @property
    def units_per_stage(self) -> int:
        return (self.depth - 2) // (2 * len(self.widths))

    @property
    def is_standard_architecture(self) -> bool:
        return self.depth in SUPPORTED_DEPTHS and self.widths == STAGE_WIDTHS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**{**d, "widths": tuple(d["widths"])})


@dataclass(frozen=True)
class ResidualUnitSpec:
    in_channels: int
    out_channels: int
    stride: int
    shortcut: str  # "identity" or "projection"

    def __post_init__(self):
        needs_projection = self.in_channels != self.out_channels or self.stride != 1
        if self.shortcut == "identity" and needs_projection:
            raise ValueError("identity shortcut needs equal widths and stride 1")
        if self.shortcut not in ("identity", "projection"):
            raise ValueError(f"unknown shortcut {self.shortcut!r}")


def unit_specs(spec: NetworkSpec) -> list[list[ResidualUnitSpec]]:
    """Residual unit layout, one list per stage."""
    stages = []
    prev = spec.widths[0]
    for s, width in enumerate(spec.widths):
        units = []
        for u in range(spec.units_per_stage):
            stride = 2 if (s > 0 and u == 0) else 1
            kind = "identity" if (prev == width and stride == 1) else "projection"
            units.append(ResidualUnitSpec(prev, width, stride, kind))
            prev = width
        stages.append(units)
    return stages


class ResidualUnit(Module):
    def __init__(self, us: ResidualUnitSpec, dropout: float, rng, dtype):
        self.spec = us
        self.conv1 = Conv2d(us.in_channels, us.out_channels, 3, us.stride, rng, dtype)
        self.bn1 = BatchNorm2d(us.out_channels, dtype)
        self.relu1 = ReLU()
        self.drop = Dropout(dropout)
        self.conv2 = Conv2d(us.out_channels, us.out_channels, 3, 1, rng, dtype)
        self.bn2 = BatchNorm2d(us.out_channels, dtype)
        if us.shortcut == "projection":
            self.proj = Conv2d(us.in_channels, us.out_channels, 1, us.stride, rng, dtype)
            self.proj_bn = BatchNorm2d(us.out_channels, dtype)
        else:
            self.proj = self.proj_bn = None
        self.relu_out = ReLU()

    def children(self) -> list[tuple[str, Module]]:
        out = [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.proj is not None:
            out += [("proj", self.proj), ("proj_bn", self.proj_bn)]
        return out

    def forward(self, x, train=False, rng=None):
        h = self.conv1(x, train)
        h = self.bn1(h, train)
        h = self.relu1(h, train)
        h = self.drop(h, train, rng)
        h = self.conv2(h, train)
        h = self.bn2(h, train)
        if self.proj is not None:
            sc = self.proj_bn(self.proj(x, train), train)
        else:
            sc = x
        return self.relu_out(h + sc, train)

    def backward(self, dy):
        d = self.relu_out.backward(dy)
        dh = self.bn2.backward(d)
        dh = self.conv2.backward(dh)
        dh = self.drop.backward(dh)
        dh = self.relu1.backward(dh)
        dh = self.bn1.backward(dh)
        dx = self.conv1.backward(dh)
        if self.proj is not None:
            dx = dx + self.proj.backward(self.proj_bn.backward(d))
        else:
            dx = dx + d
        return dx


class ResNet:
    def __init__(self, spec: NetworkSpec, rng=None, dtype=np.float32):
        rng = make_rng(rng if rng is not None else 0)
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.metadata: dict = {}
        self.stem = Conv2d(spec.in_channels, spec.widths[0], 3, 1, rng, dtype)
        self.stem_bn = BatchNorm2d(spec.widths[0], dtype)
        self.stem_relu = ReLU()
        self.stages = [
            [ResidualUnit(us, spec.dropout, rng, dtype) for us in stage]
            for stage in unit_specs(spec)
        ]
        self.pool = GlobalMeanPool()
        self.fc = Linear(spec.widths[-1], spec.num_classes, rng, dtype)
        self._ready_for_backward = False

    @property
    def units(self) -> list[ResidualUnit]:
        return [u for stage in self.stages for u in stage]

    def named_modules(self) -> list[tuple[str, Module]]:
        mods = [("stem.conv", self.stem), ("stem.bn", self.stem_bn)]
        for s, stage in enumerate(self.stages, 1):
            for u, unit in enumerate(stage, 1):
                mods += [(f"stage{s}.unit{u}.{n}", m) for n, m in unit.children()]
        mods.append(("fc", self.fc))
        return mods

    def parameters(self) -> dict[str, Parameter]:
        return {f"{p}.{n}": t for p, m in self.named_modules() for n, t in m.params().items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{p}.{n}": b for p, m in self.named_modules() for n, b in m.buffers().items()}

    def state(self) -> dict[str, np.ndarray]:
        """Every persistent array (parameters then BN running stats), by name."""
        out = {n: p.data for n, p in self.parameters().items()}
        out.update(self.buffers())
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def forward(self, x: np.ndarray, train: bool = False, rng=None, return_features=False):
        s = self.spec
        if x.ndim != 4 or x.shape[1:] != (s.in_channels, s.input_size, s.input_size):
            raise ShapeError(
                f"expected input N x {s.in_channels} x {s.input_size} x {s.input_size}, got {x.shape}"
            )
        x = x.astype(self.dtype, copy=False)
        h = self.stem_relu(self.stem_bn(self.stem(x, train), train), train)
        for unit in self.units:
            h = unit(h, train, rng)
        feats = self.pool(h, train)
        logits = self.fc(feats, train)
        self._ready_for_backward = train
        return (logits, feats) if return_features else logits

    __call__ = forward

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient w.r.t. the input."""
        if not self._ready_for_backward:
            raise NoForwardCache("backward() needs a preceding train-mode forward()")
        self._ready_for_backward = False
        d = self.fc.backward(dlogits.astype(self.dtype, copy=False))
        d = self.pool.backward(d)
        for unit in reversed(self.units):
            d = unit.backward(d)
        d = self.stem_relu.backward(d)
        d = self.stem_bn.backward(d)
        return self.stem.backward(d)

    def describe(self) -> str:
        """Layer inventory in execution order, one line per block."""
        s = self.spec
        size = s.input_size
        lines = [f"ResNet-{s.depth}  ({count_parameters(s)} parameters)",
                 f"stem      conv3x3 x{s.widths[0]}, bn, relu                      out {s.widths[0]}x{size}x{size}"]
        for si, stage in enumerate(unit_specs(s), 1):
            for ui, us in enumerate(stage, 1):
                size = (size - 1) // us.stride + 1
                lines.append(
                    f"s{si}.u{ui:<3}  conv3x3/{us.stride}-bn-relu-dropout({s.dropout:g})-conv3x3-bn x{us.out_channels}"
                    f" + {us.shortcut}, relu   out {us.out_channels}x{size}x{size}"
                )
        lines.append(f"pool      global mean                             out {s.widths[-1]}")
        lines.append(f"fc        {s.widths[-1]} -> {s.num_classes}")
        lines.append("softmax   (applied by the loss / at prediction)")
        return "\n".join(lines)


def build(spec: NetworkSpec, rng=None, dtype=np.float32, allow_custom: bool = False) -> ResNet:
    """Construct a network; only the five published depths unless ``allow_custom``."""
    if not allow_custom and not spec.is_standard_architecture:
        raise UnsupportedDepth(
            f"depth {spec.depth} with widths {spec.widths} is not one of {SUPPORTED_DEPTHS}"
        )
    return ResNet(spec, rng, dtype)


def count_parameters(spec: NetworkSpec) -> int:
    def conv(cin, cout, k):
        return cin * cout * k * k

    total = conv(spec.in_channels, spec.widths[0], 3) + 2 * spec.widths[0]
    for stage in unit_specs(spec):
        for us in stage:
            total += conv(us.in_channels, us.out_channels, 3) + 2 * us.out_channels
            total += conv(us.out_channels, us.out_channels, 3) + 2 * us.out_channels
            if us.shortcut == "projection":
                total += conv(us.in_channels, us.out_channels, 1) + 2 * us.out_channels
    return total + spec.widths[-1] * spec.num_classes + spec.num_classes


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def _pack_blob(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def write_checkpoint(path, spec: NetworkSpec, tensors: dict[str, np.ndarray], metadata: dict | None = None):
    """Little-endian layout: magic, u32 version, spec JSON, metadata JSON,
    u32 tensor count, tensor records, trailing u32 CRC32 of all prior bytes.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(_pack_blob(json.dumps(spec.to_dict(), sort_keys=True).encode()))
    buf.write(_pack_blob(json.dumps(metadata or {}, sort_keys=True).encode()))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        if le not in _DTYPE_CODES:
            raise ValueError(f"unsupported tensor dtype {arr.dtype}")
        key = name.encode()
        buf.write(struct.pack("<H", len(key)) + key)
        buf.write(struct.pack("<BB", _DTYPE_CODES[le], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=le).tobytes())
    body = buf.getvalue()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


def save(net: ResNet, path: str | os.PathLike, metadata: dict | None = None) -> None:
    meta = dict(net.metadata)
    meta.update(metadata or {})
    write_checkpoint(path, net.spec, net.state(), meta)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise BadCheckpoint("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)


def read_checkpoint(path) -> tuple[NetworkSpec, dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise BadCheckpoint(f"{path}: bad magic {data[:4]!r}")
    r = _Reader(data)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if len(data) < 12:
        raise BadCheckpoint("checkpoint is truncated")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise BadCheckpoint(f"{path}: checksum mismatch (truncated or corrupted)")
    r.data = data[:-4]
    try:
        spec = NetworkSpec.from_dict(json.loads(r.blob()))
        meta = json.loads(r.blob())
    except (ValueError, TypeError, KeyError) as exc:
        raise BadCheckpoint(f"{path}: unreadable header: {exc}") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (klen,) = r.unpack("<H")
        name = r.take(klen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise BadCheckpoint(f"{path}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).copy()
    if r.pos != len(r.data):
        raise BadCheckpoint(f"{path}: trailing bytes after tensor records")
    return spec, tensors, meta


def load_state(net: ResNet, tensors: dict[str, np.ndarray]) -> None:
    """Copy ``tensors`` into ``net`` after checking names and shapes."""
    state = net.state()
    missing = state.keys() - tensors.keys()
    extra = tensors.keys() - state.keys()
    if missing or extra:
        raise ShapeMismatch(f"tensor names differ: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
    for name, dst in state.items():
        src = tensors[name]
        if src.shape != dst.shape:
            raise ShapeMismatch(f"{name}: checkpoint shape {src.shape}, network expects {dst.shape}")
    for name, dst in state.items():
        dst[...] = tensors[name]


def load(path: str | os.PathLike) -> ResNet:
    spec, tensors, meta = read_checkpoint(path)
    dtypes = {t.dtype for t in tensors.values()}
    dtype = dtypes.pop() if len(dtypes) == 1 else np.float32
    net = ResNet(spec, rng=0, dtype=dtype)
    load_state(net, tensors)
    net.metadata = meta
    return net
