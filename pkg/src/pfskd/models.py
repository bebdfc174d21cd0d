"""Toy dilated fully-convolutional segmentation nets with an embedded PFS layer."""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tape, value
from .nn import Conv2dLayer, conv2d, init_params, relu, upsample_bilinear
from .pfs import CPfsTransforms, augment, c_pfs, reduced_channels, s_pfs
from .tensor import TensorFormatError, tensor_from_buffer, tensor_to_bytes

PFS_VARIANTS = ("none", "s_pfs", "c_pfs")
CKPT_MAGIC = b"PFCK"
CKPT_VERSION = 1


class SpecMismatchError(ValueError):
    pass


@dataclass
class SegNetSpec:
    stem: list = field(default_factory=list)  # [(c_out, stride), ...]
    body: list = field(default_factory=list)  # [(c_out, dilation), ...]
    pfs_variant: str = "s_pfs"
    num_classes: int = 4
    in_channels: int = 3

    def __post_init__(self):
        self.stem = [tuple(int(v) for v in s) for s in self.stem]
        self.body = [tuple(int(v) for v in s) for s in self.body]
        if not self.stem or not self.body:
            raise ValueError("stem and body must each have at least one conv")
        if any(c < 1 or s < 1 for c, s in self.stem + self.body):
            raise ValueError("channel counts, strides and dilations must be positive")
        if self.pfs_variant not in PFS_VARIANTS:
            raise ValueError(f"pfs_variant must be one of {PFS_VARIANTS}")
        if self.num_classes < 2 or self.in_channels < 1:
            raise ValueError("need at least 2 classes and 1 input channel")

    @property
    def output_stride(self) -> int:
        return int(np.prod([s for _, s in self.stem]))

    @property
    def feat_channels(self) -> int:
        return self.body[-1][0]

    def to_json(self) -> dict:
        d = asdict(self)
        d["stem"] = [list(s) for s in self.stem]
        d["body"] = [list(s) for s in self.body]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SegNetSpec":
        return cls(**d)


def teacher_spec(num_classes: int = 4) -> SegNetSpec:
    return SegNetSpec(stem=[(16, 2), (32, 2)], body=[(32, 2), (32, 2), (32, 4), (32, 4)],
                      pfs_variant="c_pfs", num_classes=num_classes)


def student_spec(num_classes: int = 4) -> SegNetSpec:
    return SegNetSpec(stem=[(8, 2), (16, 2)], body=[(16, 2), (16, 4)],
                      pfs_variant="s_pfs", num_classes=num_classes)


class Network:
    """Parameters live in ``self.params`` (name -> ndarray); ``forward`` takes an optional override map
    so a training step can substitute tape leaves for the stored arrays."""

    def __init__(self, spec: SegNetSpec, params: dict[str, np.ndarray]):
        self.spec = spec
        self.params = params

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def layers(self):
        """(name, c_in, c_out, k, stride, dilation) for every conv, in forward order."""
        spec = self.spec
        out = []
        c = spec.in_channels
        for i, (co, s) in enumerate(spec.stem):
            out.append((f"stem.{i}", c, co, 3, s, 1))
            c = co
        for i, (co, d) in enumerate(spec.body):
            out.append((f"body.{i}", c, co, 3, 1, d))
            c = co
        if spec.pfs_variant == "c_pfs":
            r = reduced_channels(c)
            out.append(("pfs.w1", c, r, 1, 1, 1))
            out.append(("pfs.w2", c, r, 1, 1, 1))
        out.append(("cls", c, spec.num_classes, 1, 1, 1))
        return out

    def _conv(self, p, name, stride, dilation):
        return Conv2dLayer(p[f"{name}.weight"], p[f"{name}.bias"], stride, dilation)

    def forward(self, images, params: dict | None = None) -> dict:
        p = self.params if params is None else params
        spec = self.spec
        h, w = value(images).shape[2:]
        if h % spec.output_stride or w % spec.output_stride:
            raise ValueError(f"input {h}x{w} not divisible by output stride {spec.output_stride}")
        x = images
        for i, (_, s) in enumerate(spec.stem):
            x = relu(conv2d(x, self._conv(p, f"stem.{i}", s, 1)))
        for i, (_, d) in enumerate(spec.body):
            x = relu(conv2d(x, self._conv(p, f"body.{i}", 1, d)))
        feat = x
        pfs = None
        if spec.pfs_variant == "s_pfs":
            pfs = s_pfs(feat)
        elif spec.pfs_variant == "c_pfs":
            pfs = c_pfs(feat, CPfsTransforms(self._conv(p, "pfs.w1", 1, 1), self._conv(p, "pfs.w2", 1, 1)))
        if pfs is not None:
            x = augment(feat, pfs, p["pfs.gamma"])
        logits = upsample_bilinear(conv2d(x, self._conv(p, "cls", 1, 1)), h, w)
        return {"logits": logits, "feat": feat, "pfs": pfs}

    def bind(self, tape: Tape) -> dict:
        return {k: tape.leaf(v, name=k) for k, v in self.params.items()}

    def copy(self) -> "Network":
        return Network(SegNetSpec.from_json(self.spec.to_json()), {k: v.copy() for k, v in self.params.items()})

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(tensor_to_bytes(self.params[k]))
        return h.hexdigest()


def build(spec: SegNetSpec, seed: int, dtype=np.float32) -> Network:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    net = Network(spec, params)
    for name, ci, co, k, s, d in net.layers():
        layer = Conv2dLayer.create(ci, co, k, s, d, dtype=dtype)
        init_params(layer, rng)
        params[f"{name}.weight"] = layer.weight
        params[f"{name}.bias"] = layer.bias
    if spec.pfs_variant != "none":
        params["pfs.gamma"] = np.zeros((), dtype=dtype)
    return net


def forward(net: Network, images, params: dict | None = None) -> dict:
    return net.forward(images, params)


# --- checkpoints ------------------------------------------------------------------------

def checkpoint_bytes(net: Network) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<BI", CKPT_VERSION, len(net.params))]
    for name, t in net.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + tensor_to_bytes(t))
    meta = json.dumps(net.spec.to_json(), sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    return b"".join(parts)


def save_checkpoint(net: Network, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(net))


def checkpoint_from_bytes(buf: bytes, expected: SegNetSpec | None = None) -> Network:
    if buf[:4] != CKPT_MAGIC:
        raise TensorFormatError(f"bad checkpoint magic {bytes(buf[:4])!r}")
    if len(buf) < 9:
        raise TensorFormatError("truncated checkpoint header")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != CKPT_VERSION:
        raise TensorFormatError(f"unsupported checkpoint version {version}")
    pos = 9
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buf) - pos < 2:
            raise TensorFormatError("truncated checkpoint entry")
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) - pos < n:
            raise TensorFormatError("truncated checkpoint entry name")
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        if name in params:
            raise TensorFormatError(f"duplicate tensor name {name!r}")
        params[name], pos = tensor_from_buffer(buf, pos)
    if len(buf) - pos < 4:
        raise TensorFormatError("truncated checkpoint metadata")
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) - pos != n:
        raise TensorFormatError("checkpoint metadata length mismatch")
    spec = SegNetSpec.from_json(json.loads(buf[pos:pos + n].decode("utf-8")))
    if expected is not None and spec != expected:
        raise SpecMismatchError(f"checkpoint holds {spec}, expected {expected}")
    reference = build(spec, 0, dtype=next(iter(params.values())).dtype if params else np.float32)
    if set(reference.params) != set(params):
        raise SpecMismatchError("checkpoint tensors do not match its spec: "
                                f"{sorted(set(reference.params) ^ set(params))}")
    for k, v in reference.params.items():
        if params[k].shape != v.shape:
            raise SpecMismatchError(f"{k}: shape {params[k].shape} != {v.shape}")
    return Network(spec, params)


def load_checkpoint(path: str | os.PathLike, expected: SegNetSpec | None = None) -> Network:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read(), expected)
