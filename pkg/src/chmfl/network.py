"""The dual-branch PET/CT network: encoders, multi-scale fusion, decoder and classifier.

Parameters live in a flat ``dict`` mapping dotted names to tensors, e.g.
``"pet.down2.conv.weight"``. Every function that runs the network takes an
``ops`` backend; :data:`NUMERIC` evaluates tensors, :data:`SHAPES` only
propagates shapes, which lets :func:`shape_audit` trace the full-size model
without allocating feature maps.
"""

from __future__ import annotations

import io
import json
import os
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import nn
from .tensor import Tensor, add, concat, concat_shape, read_tensor, write_tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

CHECKPOINT_MAGIC = b"CHCK"
CHECKPOINT_VERSION = 1

ModelParams = Dict[str, Tensor]


class ShapeAuditError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    input_extents: Tuple[int, int, int] = (112, 112, 144)
    base_channels: int = 16
    levels: int = 5
    fc_hidden: Tuple[int, int] = (512, 128)
    num_classes: int = 2
    seg_classes: int = 2
    dropout_p: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "input_extents", tuple(int(e) for e in self.input_extents))
        object.__setattr__(self, "fc_hidden", tuple(int(e) for e in self.fc_hidden))
        if len(self.input_extents) != 3 or len(self.fc_hidden) != 2:
            raise ValueError("input_extents needs 3 values and fc_hidden 2")
        if self.levels < 2 or self.base_channels < 1:
            raise ValueError("need at least 2 levels and 1 base channel")
        step = 2 ** (self.levels - 1)
        for e in self.input_extents:
            if e < step or e % step:
                raise ValueError(f"input extent {e} is not divisible by 2^(levels-1) = {step}")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")

    def channels(self, level: int) -> int:
        """Channels of encoder level ``level`` (1-based)."""
        return self.base_channels * 2 ** (level - 1)

    def extents(self, level: int) -> Tuple[int, int, int]:
        return tuple(e // 2 ** (level - 1) for e in self.input_extents)

    @property
    def fused_width(self) -> int:
        return 2 * sum(self.channels(l) for l in range(1, self.levels + 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_extents"] = list(self.input_extents)
        d["fc_hidden"] = list(self.fc_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


DESK_NETWORK = NetworkConfig(input_extents=(32, 32, 32), base_channels=4)


@dataclass
class ForwardOutput:
    dm_logits: object
    seg_logits: object
    fused_vector: object
    level_maps: list
    pet_maps: list = field(default_factory=list)
    ct_maps: list = field(default_factory=list)
    decoder_maps: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# backends

class NumericOps:
    conv3d = staticmethod(nn.conv3d)
    conv_transpose3d = staticmethod(nn.conv_transpose3d)
    batch_norm = staticmethod(nn.batch_norm)
    elu = staticmethod(nn.elu)
    relu = staticmethod(nn.relu)
    dropout = staticmethod(nn.dropout)
    pool = staticmethod(nn.adaptive_max_pool_to_vector)
    fully_connected = staticmethod(nn.fully_connected)
    concat = staticmethod(concat)
    add = staticmethod(add)


class ShapeOnly:
    """Stand-in for a tensor that carries nothing but its shape."""

    __slots__ = ("shape",)

    def __init__(self, shape):
        self.shape = tuple(int(s) for s in shape)

    def __repr__(self):
        return f"ShapeOnly{self.shape}"


class ShapeOps:
    @staticmethod
    def conv3d(x, w, b=None, stride=1, padding=0):
        return ShapeOnly(nn.conv3d_shape(x.shape, w.shape, stride, padding))

    @staticmethod
    def conv_transpose3d(x, w, b=None, stride=1, padding=0):
        return ShapeOnly(nn.conv_transpose3d_shape(x.shape, w.shape, stride, padding))

    @staticmethod
    def batch_norm(x, gamma, beta, rm, rv, training, momentum=BN_MOMENTUM, eps=BN_EPS):
        if gamma.shape != (x.shape[1],):
            raise ValueError(f"batch_norm: {x.shape[1]} channels vs parameters {gamma.shape}")
        if training and int(np.prod(x.shape)) // x.shape[1] < 2:
            raise ValueError("batch_norm: fewer than 2 positions per channel")
        return x

    @staticmethod
    def elu(x):
        return x

    relu = elu

    @staticmethod
    def dropout(x, p, training, rng=None):
        return x

    @staticmethod
    def pool(x):
        return ShapeOnly(nn.pool_vector_shape(x.shape))

    @staticmethod
    def fully_connected(x, w, b=None):
        return ShapeOnly(nn.fc_shape(x.shape, w.shape))

    @staticmethod
    def concat(xs, axis=0):
        return ShapeOnly(concat_shape([x.shape for x in xs], axis))

    @staticmethod
    def add(a, b):
        if a.shape != b.shape:
            raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
        return a


NUMERIC = NumericOps()
SHAPES = ShapeOps()


# ---------------------------------------------------------------------------
# parameters

def _conv_entries(prefix: str, out_ch: int, in_ch: int, k: int, bn: bool = True, transposed: bool = False):
    w = (in_ch, out_ch, k, k, k) if transposed else (out_ch, in_ch, k, k, k)
    yield f"{prefix}.conv.weight", w
    yield f"{prefix}.conv.bias", (out_ch,)
    if bn:
        yield from _bn_entries(f"{prefix}.bn", out_ch)


def _bn_entries(prefix: str, ch: int):
    for stat in ("gamma", "beta", "running_mean", "running_var"):
        yield f"{prefix}.{stat}", (ch,)


def param_shapes(cfg: NetworkConfig) -> "OrderedDict[str, tuple]":
    """Every parameter name and shape; a pure function of the configuration."""
    shapes: "OrderedDict[str, tuple]" = OrderedDict()
    L = cfg.levels
    for branch in ("pet", "ct"):
        shapes.update(_conv_entries(f"{branch}.in", cfg.channels(1), 1, 5))
        for l in range(2, L + 1):
            shapes.update(_conv_entries(f"{branch}.down{l - 1}", cfg.channels(l), cfg.channels(l - 1), 2))
    for k in range(1, L):
        t = L - k
        c = cfg.channels(t)
        in_ch = 2 * cfg.channels(L) if k == 1 else cfg.channels(t + 1)
        shapes.update(_conv_entries(f"dec.up{k}", c, in_ch, 2, transposed=True))
        shapes[f"dec.res{k}.proj.weight"] = (c, 3 * c, 1, 1, 1)
        shapes[f"dec.res{k}.proj.bias"] = (c,)
        for j in (1, 2):
            shapes[f"dec.res{k}.conv{j}.weight"] = (c, c, 3, 3, 3)
            shapes[f"dec.res{k}.conv{j}.bias"] = (c,)
            shapes.update(_bn_entries(f"dec.res{k}.bn{j}", c))
    c1 = cfg.channels(1)
    shapes.update(_conv_entries("dec.out", c1, c1, 5))
    shapes["dec.head.weight"] = (cfg.seg_classes, c1, 1, 1, 1)
    shapes["dec.head.bias"] = (cfg.seg_classes,)
    widths = (cfg.fused_width,) + cfg.fc_hidden + (cfg.num_classes,)
    for i in range(3):
        shapes[f"cls.fc{i + 1}.weight"] = (widths[i + 1], widths[i])
        shapes[f"cls.fc{i + 1}.bias"] = (widths[i + 1],)
    return shapes


def is_trainable(name: str) -> bool:
    return not name.endswith(("running_mean", "running_var"))


def fan_in(name: str, shape: tuple) -> int:
    if len(shape) == 2:
        return shape[1]
    k = int(np.prod(shape[2:]))
    # transposed-conv weights are stored (in_ch, out_ch, ...)
    return (shape[0] if ".up" in name else shape[1]) * k


def init_params(cfg: NetworkConfig, rng, dtype=np.float32) -> ModelParams:
    """He-normal weights (variance 2/fan_in), zero biases, identity batch norm."""
    rng = np.random.default_rng(rng)
    params: ModelParams = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "weight":
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in(name, shape))
        elif leaf in ("gamma", "running_var"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, requires_grad=is_trainable(name), dtype=dtype)
    return params


def audit_params(params: ModelParams, cfg: NetworkConfig) -> None:
    """Raise :class:`ShapeAuditError` unless ``params`` matches ``cfg`` exactly."""
    expected = param_shapes(cfg)
    missing = [n for n in expected if n not in params]
    if missing:
        raise ShapeAuditError(f"missing parameter {missing[0]!r}" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
    extra = sorted(set(params) - set(expected))
    if extra:
        raise ShapeAuditError(f"unexpected parameter {extra[0]!r}")
    for n, shape in expected.items():
        if tuple(params[n].shape) != shape:
            raise ShapeAuditError(f"parameter {n!r} has shape {tuple(params[n].shape)}, expected {shape}")


def copy_params(params: ModelParams) -> ModelParams:
    return {n: Tensor(t.data, requires_grad=t.requires_grad) for n, t in params.items()}


# ---------------------------------------------------------------------------
# forward pieces

def _conv_block(params, prefix, x, training, ops, stride=1, padding=0, transposed=False):
    conv = ops.conv_transpose3d if transposed else ops.conv3d
    y = conv(x, params[f"{prefix}.conv.weight"], params[f"{prefix}.conv.bias"], stride, padding)
    return ops.elu(_bn(params, f"{prefix}.bn", y, training, ops))


def _bn(params, prefix, x, training, ops):
    return ops.batch_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"],
                          params[f"{prefix}.running_mean"], params[f"{prefix}.running_var"],
                          training, BN_MOMENTUM, BN_EPS)


def encoder_forward(params: ModelParams, branch: str, x, cfg: NetworkConfig,
                    training: bool, ops=NUMERIC) -> list:
    """Feature maps of all levels for one modality branch."""
    if tuple(x.shape) != (1, 1) + cfg.input_extents:
        raise ValueError(f"{branch} input has shape {tuple(x.shape)}, expected {(1, 1) + cfg.input_extents}")
    maps = [_conv_block(params, f"{branch}.in", x, training, ops, 1, 2)]
    for l in range(2, cfg.levels + 1):
        maps.append(_conv_block(params, f"{branch}.down{l - 1}", maps[-1], training, ops, 2, 0))
    return maps


def hierarchical_fusion(pet_maps: list, ct_maps: list, ops=NUMERIC):
    """Channel-concatenate PET and CT per level, max-pool each to a vector, join all levels."""
    if len(pet_maps) != len(ct_maps):
        raise ValueError("PET and CT branches have different depths")
    fused_maps, pooled = [], []
    for p, c in zip(pet_maps, ct_maps):
        if tuple(p.shape) != tuple(c.shape):
            raise ValueError(f"branch shape mismatch: PET {tuple(p.shape)} vs CT {tuple(c.shape)}")
        f = ops.concat([p, c], axis=1)
        fused_maps.append(f)
        pooled.append(ops.pool(f))
    return ops.concat(pooled, axis=1), fused_maps


def _residual_block(params, prefix, x, training, ops):
    proj = ops.conv3d(x, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"], 1, 0)
    h = ops.conv3d(proj, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"], 1, 1)
    h = ops.elu(_bn(params, f"{prefix}.bn1", h, training, ops))
    h = ops.conv3d(h, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"], 1, 1)
    h = _bn(params, f"{prefix}.bn2", h, training, ops)
    return ops.elu(ops.add(h, proj))


def cfl_decode(params: ModelParams, fused_maps: list, cfg: NetworkConfig, training: bool, ops=NUMERIC):
    """Upsample from the deepest fused map with skip connections; returns (seg_logits, stage outputs)."""
    h = fused_maps[-1]
    stages = []
    for k in range(1, cfg.levels):
        skip = fused_maps[cfg.levels - k - 1]
        up = _conv_block(params, f"dec.up{k}", h, training, ops, 2, 0, transposed=True)
        if tuple(up.shape[2:]) != tuple(skip.shape[2:]):
            raise ValueError(f"decoder stage {k}: upsampled {tuple(up.shape)} does not match skip {tuple(skip.shape)}")
        h = _residual_block(params, f"dec.res{k}", ops.concat([up, skip], axis=1), training, ops)
        stages.append(h)
    h = _conv_block(params, "dec.out", h, training, ops, 1, 2)
    seg = ops.conv3d(h, params["dec.head.weight"], params["dec.head.bias"], 1, 0)
    stages.append(seg)
    return seg, stages


def classify(params: ModelParams, fused_vector, cfg: NetworkConfig, training: bool,
             rng=None, ops=NUMERIC):
    h = fused_vector
    for i in (1, 2):
        h = ops.fully_connected(h, params[f"cls.fc{i}.weight"], params[f"cls.fc{i}.bias"])
        h = ops.dropout(ops.relu(h), cfg.dropout_p, training, rng)
    return ops.fully_connected(h, params["cls.fc3.weight"], params["cls.fc3.bias"])


def forward(params: ModelParams, pet, ct, cfg: NetworkConfig, training: bool = False,
            rng=None, ops=NUMERIC) -> ForwardOutput:
    pet_maps = encoder_forward(params, "pet", pet, cfg, training, ops)
    ct_maps = encoder_forward(params, "ct", ct, cfg, training, ops)
    fused_vector, fused_maps = hierarchical_fusion(pet_maps, ct_maps, ops)
    seg, stages = cfl_decode(params, fused_maps, cfg, training, ops)
    logits = classify(params, fused_vector, cfg, training, rng, ops)
    return ForwardOutput(logits, seg, fused_vector, fused_maps, pet_maps, ct_maps, stages)


# ---------------------------------------------------------------------------
# shape audit

def shape_audit(cfg: NetworkConfig) -> "OrderedDict[str, tuple]":
    """Trace the forward pass on shapes alone and name each stage's output."""
    params = {n: ShapeOnly(s) for n, s in param_shapes(cfg).items()}
    x = ShapeOnly((1, 1) + cfg.input_extents)
    out = forward(params, x, x, cfg, training=True, ops=SHAPES)
    rows: "OrderedDict[str, tuple]" = OrderedDict()
    rows["Input Transition"] = out.pet_maps[0].shape
    for l in range(1, cfg.levels):
        rows[f"Down_Conv_{l}"] = out.pet_maps[l].shape
    for k in range(1, cfg.levels):
        rows[f"Up_Conv_{k}"] = out.decoder_maps[k - 1].shape
    rows["Output Transition"] = out.seg_logits.shape
    rows["Fused Vector"] = out.fused_vector.shape
    rows["DM Logits"] = out.dm_logits.shape
    return rows


def expected_shapes(cfg: NetworkConfig) -> "OrderedDict[str, tuple]":
    """Closed-form stage shapes for ``cfg``."""
    rows: "OrderedDict[str, tuple]" = OrderedDict()
    rows["Input Transition"] = (1, cfg.channels(1)) + cfg.extents(1)
    for l in range(2, cfg.levels + 1):
        rows[f"Down_Conv_{l - 1}"] = (1, cfg.channels(l)) + cfg.extents(l)
    for k in range(1, cfg.levels):
        t = cfg.levels - k
        rows[f"Up_Conv_{k}"] = (1, cfg.channels(t)) + cfg.extents(t)
    rows["Output Transition"] = (1, cfg.seg_classes) + cfg.input_extents
    rows["Fused Vector"] = (1, cfg.fused_width)
    rows["DM Logits"] = (1, cfg.num_classes)
    return rows


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: ModelParams, cfg: NetworkConfig, path) -> None:
    """Write atomically: the file appears only once fully written."""
    audit_params(params, cfg)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_bytes = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<Q", len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<Q", len(params)))
    for name in sorted(params):
        raw = name.encode("utf-8")
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
        write_tensor(buf, params[name])
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path, expect_cfg: Optional[NetworkConfig] = None) -> Tuple[ModelParams, NetworkConfig]:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
        try:
            (n,) = struct.unpack("<Q", f.read(8))
            cfg = NetworkConfig.from_dict(json.loads(f.read(n).decode()))
            (count,) = struct.unpack("<Q", f.read(8))
            params: ModelParams = {}
            for _ in range(count):
                (n,) = struct.unpack("<Q", f.read(8))
                name = f.read(n).decode("utf-8")
                t = read_tensor(f)
                t.requires_grad = is_trainable(name)
                params[name] = t
        except (struct.error, EOFError, UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({e})") from None
    audit_params(params, cfg)
    if expect_cfg is not None:
        audit_params(params, expect_cfg)
        if expect_cfg != cfg:
            raise ShapeAuditError(f"checkpoint was built for {cfg}, expected {expect_cfg}")
    return params, cfg


def segmentation_decision(seg_logits) -> np.ndarray:
    """Per-voxel argmax over classes as a (D, H, W) binary array (ties go to background)."""
    data = seg_logits.data if isinstance(seg_logits, Tensor) else np.asarray(seg_logits)
    return (data[0, 1] > data[0, 0]).astype(np.float32)


def dm_probability(dm_logits) -> float:
    z = (dm_logits.data if isinstance(dm_logits, Tensor) else np.asarray(dm_logits))[0].astype(np.float64)
    e = np.exp(z - z.max())
    return float(e[1] / e.sum())


def level_channels(cfg: NetworkConfig) -> List[int]:
    return [cfg.channels(l) for l in range(1, cfg.levels + 1)]
