"""Tiny fully-convolutional segmentation network with an explicit f/g split.

The feature extractor ``f`` and the mask predictor ``g`` are separate name
spaces inside a :class:`ParameterSet`, so EMA transfers can target either one.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

CKPT_MAGIC = b"TTASCKPT"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkArchitecture:
    input_channels: int = 1
    feature_channels: tuple[int, ...] = (8, 16)
    predictor_channels: tuple[int, ...] = (8, 1)
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "feature_channels", tuple(int(c) for c in self.feature_channels))
        object.__setattr__(self, "predictor_channels", tuple(int(c) for c in self.predictor_channels))

    def validate(self) -> None:
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")
        if not self.feature_channels or not self.predictor_channels:
            raise ValueError("architecture needs at least one layer in each of f and g")
        if self.predictor_channels[-1] != 1:
            raise ValueError("final predictor layer must output exactly 1 channel")
        if any(c < 1 for c in self.feature_channels + self.predictor_channels):
            raise ValueError("channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer (same padding)")

    def layers(self) -> list[tuple[str, int, int]]:
        """(name prefix, in_channels, out_channels) for every conv, in order."""
        out = []
        c_in = self.input_channels
        for i, c in enumerate(self.feature_channels):
            out.append((f"f.conv{i}", c_in, c))
            c_in = c
        for i, c in enumerate(self.predictor_channels):
            out.append((f"g.conv{i}", c_in, c))
            c_in = c
        return out

    def n_params(self) -> int:
        k2 = self.kernel_size ** 2
        return sum(ci * co * k2 + co for _, ci, co in self.layers())


class ParameterSet:
    """Network weights split into feature-extractor and predictor maps.

    Names are prefixed ``f.`` or ``g.`` so the two maps never collide. Iteration
    order is the layer order of the architecture.
    """

    def __init__(self, f_params: dict[str, Tensor], g_params: dict[str, Tensor]):
        overlap = set(f_params) & set(g_params)
        if overlap:
            raise ValueError(f"f and g parameter names overlap: {sorted(overlap)}")
        self.f_params = f_params
        self.g_params = g_params

    def items(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.f_params.items()
        yield from self.g_params.items()

    def names(self) -> list[str]:
        return [n for n, _ in self.items()]

    def values(self) -> list[Tensor]:
        return [t for _, t in self.items()]

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self.items())

    def __getitem__(self, name: str) -> Tensor:
        return self.f_params[name] if name in self.f_params else self.g_params[name]

    def __len__(self) -> int:
        return len(self.f_params) + len(self.g_params)

    def structure(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, t.shape) for n, t in self.items()]

    def equals(self, other: ParameterSet) -> bool:
        """Bit-exact equality of names, shapes and values."""
        if self.structure() != other.structure():
            return False
        return all(np.array_equal(a.data, other[n].data) for n, a in self.items())

    def zero_grad(self) -> None:
        for _, t in self.items():
            t.grad = None


def _check_params(arch: NetworkArchitecture, params: ParameterSet) -> None:
    k = arch.kernel_size
    for name, ci, co in arch.layers():
        w, b = params[f"{name}.weight"], params[f"{name}.bias"]
        if w.shape != (co, ci, k, k) or b.shape != (co,):
            raise ShapeError(f"parameter {name} has shape {w.shape}/{b.shape}, expected {(co, ci, k, k)}/{(co,)}")


def init(arch: NetworkArchitecture, seed: int) -> ParameterSet:
    """He-uniform weights (bound sqrt(6/fan_in)) and zero biases."""
    arch.validate()
    rng = np.random.default_rng(seed)
    k = arch.kernel_size
    f_params: dict[str, Tensor] = {}
    g_params: dict[str, Tensor] = {}
    for name, ci, co in arch.layers():
        bound = np.sqrt(6.0 / (ci * k * k))
        w = Tensor(rng.uniform(-bound, bound, size=(co, ci, k, k)), requires_grad=True)
        b = Tensor(np.zeros(co), requires_grad=True)
        target = f_params if name.startswith("f.") else g_params
        target[f"{name}.weight"] = w
        target[f"{name}.bias"] = b
    return ParameterSet(f_params, g_params)


def forward(params: ParameterSet, batch, arch: NetworkArchitecture | None = None) -> Tensor:
    """Foreground probabilities of shape [N, 1, H, W]."""
    x = T.as_tensor(batch)
    if x.data.ndim != 4:
        raise ShapeError(f"batch must be [N, C, H, W], got {x.shape}")
    if arch is None:
        arch = infer_architecture(params)
    if x.shape[1] != arch.input_channels:
        raise ShapeError(f"batch has {x.shape[1]} channels, network expects {arch.input_channels}")
    layers = arch.layers()
    for i, (name, _, _) in enumerate(layers):
        x = T.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], padding="same")
        x = T.sigmoid(x) if i == len(layers) - 1 else T.relu(x)
    return x


def infer_architecture(params: ParameterSet) -> NetworkArchitecture:
    def widths(group: Mapping[str, Tensor]) -> list[tuple[int, int, int]]:
        ws = [t for n, t in group.items() if n.endswith(".weight")]
        return [(w.shape[0], w.shape[1], w.shape[2]) for w in ws]

    fw, gw = widths(params.f_params), widths(params.g_params)
    if not fw or not gw:
        raise ShapeError("parameter set lacks f or g layers")
    return NetworkArchitecture(
        input_channels=fw[0][1],
        feature_channels=tuple(w[0] for w in fw),
        predictor_channels=tuple(w[0] for w in gw),
        kernel_size=fw[0][2],
    )


def clone_params(src: ParameterSet) -> ParameterSet:
    def dup(group: dict[str, Tensor]) -> dict[str, Tensor]:
        return {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in group.items()}

    return ParameterSet(dup(src.f_params), dup(src.g_params))


@dataclass
class ModelTriplet:
    teacher: ParameterSet
    assistant: ParameterSet
    student: ParameterSet
    architecture: NetworkArchitecture

    @classmethod
    def from_init(cls, arch: NetworkArchitecture, seed: int) -> ModelTriplet:
        base = init(arch, seed)
        return cls(clone_params(base), clone_params(base), base, arch)

    def members(self) -> dict[str, ParameterSet]:
        return {"teacher": self.teacher, "assistant": self.assistant, "student": self.student}

    def validate(self) -> None:
        ref = self.student.structure()
        for role, ps in self.members().items():
            if ps.structure() != ref:
                raise ShapeError(f"{role} parameters differ structurally from student")
            _check_params(self.architecture, ps)


# checkpoint container --------------------------------------------------------
#
# magic "TTASCKPT" | u32 version | u32 input_channels | u32 n_f | u32*n_f |
# u32 n_g | u32*n_g | u32 kernel_size | u32 tensor_count |
# per tensor: u32 name_len | name | u32 rank | u32*rank dims | f64 LE values |
# u32 metadata_len | metadata JSON (utf-8)

def _pack_arch(arch: NetworkArchitecture) -> bytes:
    parts = [struct.pack("<I", arch.input_channels), struct.pack("<I", len(arch.feature_channels))]
    parts += [struct.pack("<I", c) for c in arch.feature_channels]
    parts.append(struct.pack("<I", len(arch.predictor_channels)))
    parts += [struct.pack("<I", c) for c in arch.predictor_channels]
    parts.append(struct.pack("<I", arch.kernel_size))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def dumps_checkpoint(arch: NetworkArchitecture, tensors: Mapping[str, np.ndarray],
                     metadata: dict | None = None) -> bytes:
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<I", CKPT_VERSION))
    out.write(_pack_arch(arch))
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            out.write(struct.pack("<I", d))
        out.write(arr.astype("<f8").tobytes())
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8") if metadata else b""
    out.write(struct.pack("<I", len(meta)))
    out.write(meta)
    return out.getvalue()


def loads_checkpoint(buf: bytes) -> tuple[NetworkArchitecture, dict[str, np.ndarray], dict | None]:
    r = _Reader(buf)
    if r.take(8) != CKPT_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic")
    version = r.u32()
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    ic = r.u32()
    fc = tuple(r.u32() for _ in range(r.u32()))
    pc = tuple(r.u32() for _ in range(r.u32()))
    arch = NetworkArchitecture(ic, fc, pc, r.u32())
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        dims = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
    meta_raw = r.take(r.u32())
    if r.pos != len(buf):
        raise CheckpointFormatError("trailing bytes after checkpoint")
    return arch, tensors, (json.loads(meta_raw) if meta_raw else None)


def params_to_arrays(params: ParameterSet, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + n: t.data for n, t in params.items()}


def params_from_arrays(arrays: Mapping[str, np.ndarray], prefix: str = "") -> ParameterSet:
    f, g = {}, {}
    for name, arr in arrays.items():
        if not name.startswith(prefix):
            continue
        short = name[len(prefix):]
        t = Tensor(arr.copy(), requires_grad=True)
        if short.startswith("f."):
            f[short] = t
        elif short.startswith("g."):
            g[short] = t
        else:
            raise CheckpointFormatError(f"tensor {name!r} belongs to neither f nor g")
    return ParameterSet(f, g)


def save_params(path, arch: NetworkArchitecture, params: ParameterSet) -> None:
    Path(path).write_bytes(dumps_checkpoint(arch, params_to_arrays(params)))


def load_params(path) -> tuple[NetworkArchitecture, ParameterSet]:
    arch, tensors, _ = loads_checkpoint(Path(path).read_bytes())
    params = params_from_arrays(tensors)
    _check_params(arch, params)
    return arch, params


def arch_to_dict(arch: NetworkArchitecture) -> dict:
    d = asdict(arch)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


__all__ = [
    "NetworkArchitecture", "ParameterSet", "ModelTriplet", "CheckpointFormatError",
    "init", "forward", "clone_params", "save_params", "load_params",
    "dumps_checkpoint", "loads_checkpoint", "params_to_arrays", "params_from_arrays",
    "infer_architecture", "arch_to_dict",
]
