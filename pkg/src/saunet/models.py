"""The five network variants, exact parameter accounting, and checkpoints.

Variants (in ablation-ladder order): ``unet18`` plain conv blocks,
``unet-sa`` adds the spatial attention gate, ``sd-unet`` adds DropBlock to
the blocks, ``backbone`` adds batch norm on top of DropBlock, and
``sa-unet`` is backbone plus spatial attention.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .layers import (
    BatchNorm2d,
    Conv2d,
    ConvBlock,
    ConvTranspose2d,
    DropBlockConfig,
    SpatialAttention,
)
from .tensor import DEFAULT_DTYPE, Tensor, concat_channels, maxpool2d, sigmoid

__all__ = [
    "VARIANT_LADDER",
    "REFERENCE_PARAM_COUNTS",
    "ArchitectureSpec",
    "Network",
    "ParameterReport",
    "build_variant",
    "count_params",
    "predict_binary",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "SpecMismatchError",
]

VARIANT_LADDER = ("unet18", "unet-sa", "sd-unet", "backbone", "sa-unet")

_BLOCK_KIND = {
    "unet18": "unet",
    "unet-sa": "unet",
    "sd-unet": "sdunet",
    "backbone": "backbone",
    "sa-unet": "backbone",
}
_HAS_SAM = frozenset({"unet-sa", "sa-unet"})

# Expected (total, trainable, non_trainable) for the default geometry:
# base 16, depth 3, RGB in, 1 out, 3x3 up-convolutions.
REFERENCE_PARAM_COUNTS = {
    "unet18": (535_793, 535_793, 0),
    "unet-sa": (535_891, 535_891, 0),
    "sd-unet": (535_793, 535_793, 0),
    "backbone": (538_609, 537_201, 1_408),
    "sa-unet": (538_707, 537_299, 1_408),
}


class CheckpointError(ValueError):
    pass


class SpecMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    """Declarative description of one network variant."""

    variant: str = "sa-unet"
    base_channels: int = 16
    depth: int = 3
    in_channels: int = 3
    out_channels: int = 1
    upconv_kernel: int = 3
    dropblock: DropBlockConfig = field(default_factory=DropBlockConfig)

    def __post_init__(self):
        if self.variant not in VARIANT_LADDER:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANT_LADDER}")
        for name in ("base_channels", "depth", "in_channels", "out_channels", "upconv_kernel"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "base_channels": self.base_channels,
            "depth": self.depth,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "upconv_kernel": self.upconv_kernel,
            "dropblock": {
                "block_size": self.dropblock.block_size,
                "drop_rate": self.dropblock.drop_rate,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        db = d.get("dropblock", {})
        return cls(
            variant=d["variant"],
            base_channels=d["base_channels"],
            depth=d["depth"],
            in_channels=d["in_channels"],
            out_channels=d["out_channels"],
            upconv_kernel=d["upconv_kernel"],
            dropblock=DropBlockConfig(block_size=db["block_size"], drop_rate=db["drop_rate"]),
        )


@dataclass
class ParameterReport:
    total: int
    trainable: int
    non_trainable: int
    per_layer: list[tuple[str, int, bool]]


class Network:
    """Encoder-decoder with skip connections, built from an ArchitectureSpec.

    Weights are drawn deterministically from the seed, in construction
    order.  The forward pass accepts inputs whose spatial dims are divisible
    by 2**depth and returns a per-pixel probability map.
    """

    def __init__(self, spec: ArchitectureSpec, seed: int, dtype=DEFAULT_DTYPE):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        kind = _BLOCK_KIND[spec.variant]
        db = spec.dropblock if kind in ("sdunet", "backbone") else None

        enc_channels = [spec.base_channels * 2**i for i in range(spec.depth)]
        bottleneck_channels = spec.base_channels * 2**spec.depth

        self.encoders: list[ConvBlock] = []
        prev = spec.in_channels
        for ch in enc_channels:
            self.encoders.append(ConvBlock(prev, ch, kind, rng, db, dtype=dtype))
            prev = ch
        self.bottleneck = ConvBlock(prev, bottleneck_channels, kind, rng, db, dtype=dtype)
        self.sam = SpatialAttention(rng, dtype=dtype) if spec.variant in _HAS_SAM else None

        self.upconvs: list[ConvTranspose2d] = []
        self.decoders: list[ConvBlock] = []
        prev = bottleneck_channels
        for ch in reversed(enc_channels):
            self.upconvs.append(ConvTranspose2d(prev, ch, spec.upconv_kernel, rng, dtype=dtype))
            self.decoders.append(ConvBlock(2 * ch, ch, kind, rng, db, dtype=dtype))
            prev = ch
        self.head = Conv2d(enc_channels[0], spec.out_channels, 1, rng, init="glorot", dtype=dtype)

    def forward(
        self,
        x: Tensor,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
        update_stats: Optional[bool] = None,
    ) -> Tensor:
        n, c, h, w = x.shape
        if c != self.spec.in_channels:
            raise ValueError(f"expected {self.spec.in_channels} input channels, got {c}")
        factor = 2**self.spec.depth
        if h % factor or w % factor:
            raise ValueError(f"spatial dims must be divisible by {factor}, got {h}x{w}")
        skips = []
        for enc in self.encoders:
            x = enc(x, train, rng, update_stats)
            skips.append(x)
            x = maxpool2d(x)
        x = self.bottleneck(x, train, rng, update_stats)
        if self.sam is not None:
            x = self.sam(x)
        for up, dec, skip in zip(self.upconvs, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(concat_channels(skip, x), train, rng, update_stats)
        return sigmoid(self.head(x))

    __call__ = forward

    def _block_items(self, name: str, block: ConvBlock):
        for i, (conv, bn) in enumerate(((block.conv1, block.bn1), (block.conv2, block.bn2)), start=1):
            yield f"{name}.conv{i}.weight", conv.weight, True
            if conv.bias is not None:
                yield f"{name}.conv{i}.bias", conv.bias, True
            if bn is not None:
                yield f"{name}.bn{i}.gamma", bn.gamma, True
                yield f"{name}.bn{i}.beta", bn.beta, True
                yield f"{name}.bn{i}.moving_mean", bn.moving_mean, False
                yield f"{name}.bn{i}.moving_var", bn.moving_var, False

    def named_arrays(self):
        """Yield (name, Tensor-or-ndarray, trainable) for all network state,
        in a fixed order."""
        for i, enc in enumerate(self.encoders, start=1):
            yield from self._block_items(f"enc{i}", enc)
        yield from self._block_items("bottleneck", self.bottleneck)
        if self.sam is not None:
            yield "sam.weight", self.sam.weight, True
        for stage, (up, dec) in enumerate(zip(self.upconvs, self.decoders)):
            idx = self.spec.depth - stage
            yield f"up{idx}.weight", up.weight, True
            yield f"up{idx}.bias", up.bias, True
            yield from self._block_items(f"dec{idx}", dec)
        yield "head.weight", self.head.weight, True
        if self.head.bias is not None:
            yield "head.bias", self.head.bias, True

    def trainable_params(self) -> list[tuple[str, Tensor]]:
        return [(name, obj) for name, obj, trainable in self.named_arrays() if trainable]

    def batchnorms(self) -> list[BatchNorm2d]:
        blocks = self.encoders + [self.bottleneck] + self.decoders
        return [bn for b in blocks for bn in (b.bn1, b.bn2) if bn is not None]


def build_variant(spec: ArchitectureSpec, seed: int, dtype=DEFAULT_DTYPE) -> Network:
    return Network(spec, seed, dtype=dtype)


def count_params(net: Network) -> ParameterReport:
    per_layer = []
    total = trainable = 0
    for name, obj, is_trainable in net.named_arrays():
        arr = obj.data if isinstance(obj, Tensor) else obj
        n = int(arr.size)
        per_layer.append((name, n, is_trainable))
        total += n
        if is_trainable:
            trainable += n
    return ParameterReport(
        total=total, trainable=trainable, non_trainable=total - trainable, per_layer=per_layer
    )


def predict_binary(prob, threshold: float = 0.5) -> np.ndarray:
    """Threshold a probability map into a {0, 1} mask (>= convention)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    arr = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    return (arr >= threshold).astype(np.uint8)


# ---------------------------------------------------------------------------
# checkpoint format
#
# magic "SAUN" | u32 version | u32 meta_len | meta JSON (spec + optimizer
# scalars) | u32 n_records | records | u32 crc32 of everything before it.
# Record: u16 name_len | name | u8 dtype tag | u8 rank | u32 dims | raw
# little-endian data.  Bit-exact round trip for every stored array.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SAUN"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_TAG_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    le = arr.dtype.newbyteorder("<")
    if le not in _DTYPE_TAGS:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for record {name!r}")
    nb = name.encode("utf-8")
    out = struct.pack("<H", len(nb)) + nb
    out += struct.pack("<BB", _DTYPE_TAGS[le], arr.ndim)
    out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    out += arr.astype(le, copy=False).tobytes()
    return out


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_record(cur: _Cursor) -> tuple[str, np.ndarray]:
    (name_len,) = cur.unpack("<H")
    name = cur.take(name_len).decode("utf-8")
    tag, rank = cur.unpack("<BB")
    if tag not in _TAG_DTYPES:
        raise CheckpointError(f"unknown dtype tag {tag} in record {name!r}")
    dims = cur.unpack(f"<{rank}I") if rank else ()
    dtype = _TAG_DTYPES[tag]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    raw = cur.take(count * dtype.itemsize)
    arr = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    return name, arr


def save_checkpoint(net: Network, path, optimizer=None) -> None:
    """Serialize all network state (and optionally optimizer moments) losslessly."""
    meta = {"spec": net.spec.to_dict(), "optimizer": None}
    records: list[tuple[str, np.ndarray]] = []
    for name, obj, _ in net.named_arrays():
        arr = obj.data if isinstance(obj, Tensor) else obj
        records.append((f"param/{name}", arr))
    if optimizer is not None:
        meta["optimizer"] = optimizer.meta_dict()
        for name, arr in optimizer.moment_arrays():
            records.append((name, arr))

    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(meta_bytes)) + meta_bytes
    buf += struct.pack("<I", len(records))
    for name, arr in records:
        buf += _pack_record(name, arr)
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path, expected_spec: Optional[ArchitectureSpec] = None):
    """Rebuild a Network (and optimizer state, if stored) from a checkpoint.

    Returns (net, optimizer_state) where optimizer_state is None or a dict
    with "meta", "m", and "v" entries.  Raises CheckpointError on corruption
    and SpecMismatchError when expected_spec disagrees with the stored one.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise CheckpointError("truncated checkpoint file")
    body, (stored_crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != stored_crc:
        raise CheckpointError("checksum mismatch; checkpoint is corrupt")
    cur = _Cursor(body)
    if cur.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = cur.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = cur.unpack("<I")
    meta = json.loads(cur.take(meta_len).decode("utf-8"))
    spec = ArchitectureSpec.from_dict(meta["spec"])
    if expected_spec is not None and spec != expected_spec:
        raise SpecMismatchError(
            f"checkpoint stores variant {spec.variant!r} with geometry {spec.to_dict()}, "
            f"which does not match the requested {expected_spec.to_dict()}"
        )
    (n_records,) = cur.unpack("<I")
    stored: dict[str, np.ndarray] = {}
    for _ in range(n_records):
        name, arr = _unpack_record(cur)
        if name in stored:
            raise CheckpointError(f"duplicate record {name!r}")
        stored[name] = arr

    params = {n: a for n, a in stored.items() if n.startswith("param/")}
    first = next(iter(params.values()))
    net = Network(spec, seed=0, dtype=first.dtype)
    expected_names = {f"param/{name}" for name, _, _ in net.named_arrays()}
    if expected_names != set(params):
        missing = expected_names - set(params)
        extra = set(params) - expected_names
        raise CheckpointError(f"parameter records do not match architecture (missing {missing}, extra {extra})")
    for name, obj, _ in net.named_arrays():
        arr = params[f"param/{name}"]
        target = obj.data if isinstance(obj, Tensor) else obj
        if target.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}: {target.shape} vs {arr.shape}")
        if isinstance(obj, Tensor):
            obj.data = arr
        else:
            target[...] = arr

    optim_state = None
    if meta.get("optimizer") is not None:
        optim_state = {
            "meta": meta["optimizer"],
            "m": {n[len("adam.m/") :]: a for n, a in stored.items() if n.startswith("adam.m/")},
            "v": {n[len("adam.v/") :]: a for n, a in stored.items() if n.startswith("adam.v/")},
        }
    return net, optim_state
