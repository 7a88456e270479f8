"""Encoder-decoder fully-convolutional model for the density-map tasks.

The network is built from the kernels in tcrcount.nn: per encoder level two
(or more) conv3x3+BN+ReLU units followed by 2x2 max pooling, a bottleneck
block, and a mirrored decoder with 2x2 transposed-conv upsampling and skip
concatenations, ending in a 1x1 conv producing one logit map per task.
Output maps are sigmoid activations, pixel-aligned with the input.

A loaded inference-mode model is immutable: forward_maps never mutates state,
so one instance can serve many tile workers concurrently. Training mode
mutates batch-norm running stats and must not run concurrently.
"""
from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import nn


class WeightFormatError(ValueError):
    """Weight file is not an FCNW file at all."""


class WeightVersionError(WeightFormatError):
    """Weight file has an unsupported format version."""


class WeightChecksumError(WeightFormatError):
    """Weight file is truncated or corrupted (CRC mismatch)."""


class WeightConfigError(WeightFormatError):
    """Weight file holds a model of a different configuration."""


@dataclass(frozen=True)
class ModelConfig:
    """Topology descriptor.

    deep_convs, when set, is the conv count of the deepest encoder level and
    of the bottleneck (the knob that calibrates the receptive field); the
    remaining levels use convs_per_level.
    """

    levels: int
    base_channels: int
    in_channels: int = 3
    out_maps: int = 2
    convs_per_level: int = 2
    deep_convs: Optional[int] = None

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1 or self.in_channels < 1 \
                or self.out_maps < 1 or self.convs_per_level < 1:
            raise ValueError(f"invalid model config: {self}")
        if self.deep_convs is not None and self.deep_convs < 1:
            raise ValueError(f"invalid deep_convs: {self.deep_convs}")

    def convs_at(self, level: int) -> int:
        """Conv count for encoder level `level` (0-based); levels-1 is deepest."""
        if level == self.levels - 1 and self.deep_convs is not None:
            return self.deep_convs
        return self.convs_per_level

    @property
    def bottleneck_convs(self) -> int:
        return self.deep_convs if self.deep_convs is not None else self.convs_per_level

    @property
    def min_input(self) -> int:
        return 2 ** self.levels


#: Trains on a CPU in minutes; used by the synthetic experiments.
DESK_CONFIG = ModelConfig(levels=3, base_channels=16, out_maps=2)
#: Full-scale topology: depth/width calibrated so the bottleneck
#: receptive field is exactly 188 px.
REFERENCE_CONFIG = ModelConfig(levels=4, base_channels=64, out_maps=2, deep_convs=3)

SEG_DESK_CONFIG = ModelConfig(levels=2, base_channels=8, out_maps=1)


def receptive_field(config: ModelConfig) -> int:
    """Receptive field (px) of one bottleneck pixel, via the standard
    recurrence r <- r + (k-1)*jump; jump *= stride, applied encoder-to-bottleneck."""
    r, jump = 1, 1
    for lvl in range(config.levels):
        for _ in range(config.convs_at(lvl)):
            r += 2 * jump          # 3x3 conv, stride 1
        r += jump                  # 2x2 pool adds (k-1)*jump ...
        jump *= 2                  # ... then doubles the jump
    for _ in range(config.bottleneck_convs):
        r += 2 * jump
    return r


def output_receptive_field(config: ModelConfig) -> int:
    """Input extent one *output* pixel sees: the bottleneck field plus the
    decoder convolutions (the 2x2/stride-2 up-convs themselves map each
    output pixel to exactly one input pixel, so they only halve the jump).

    This, not the bottleneck field, bounds how far tile-border effects
    reach; halo sizing uses ceil(output_receptive_field / 2).
    """
    r = receptive_field(config)
    jump = 2 ** config.levels
    for _ in range(config.levels):
        jump //= 2
        r += 2 * jump * config.convs_per_level
    return r


class _ConvBN:
    """conv3x3 (same padding) + batch norm + ReLU."""

    def __init__(self, name: str, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.name = name
        fan_in = in_ch * 9
        self.weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, 3, 3)).astype(np.float32)
        self.bias = np.zeros(out_ch, dtype=np.float32)
        self.gamma = np.ones(out_ch, dtype=np.float32)
        self.beta = np.zeros(out_ch, dtype=np.float32)
        self.running_mean = np.zeros(out_ch, dtype=np.float32)
        self.running_var = np.ones(out_ch, dtype=np.float32)

    def forward(self, x, train, tape=None):
        y, c1 = nn.conv2d(x, self.weight, self.bias)
        y, c2 = nn.batchnorm2d(y, self.gamma, self.beta, self.running_mean, self.running_var, train)
        y, c3 = nn.relu(y)
        if tape is not None:
            tape[self.name] = (c1, c2, c3)
        return y

    def backward(self, tape, dy, grads):
        c1, c2, c3 = tape.pop(self.name)
        dy = nn.relu_backward(c3, dy).x
        g2 = nn.batchnorm2d_backward(c2, dy)
        grads[self.name + ".gamma"] = g2.weight
        grads[self.name + ".beta"] = g2.bias
        g1 = nn.conv2d_backward(c1, g2.x)
        grads[self.name + ".weight"] = g1.weight
        grads[self.name + ".bias"] = g1.bias
        return g1.x

    def params(self):
        yield self.name + ".weight", self.weight
        yield self.name + ".bias", self.bias
        yield self.name + ".gamma", self.gamma
        yield self.name + ".beta", self.beta

    def buffers(self):
        yield self.name + ".running_mean", self.running_mean
        yield self.name + ".running_var", self.running_var


class _UpConv:
    """2x2 stride-2 transposed conv halving the channel count."""

    def __init__(self, name: str, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.name = name
        fan_in = in_ch * 4
        self.weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), (in_ch, out_ch, 2, 2)).astype(np.float32)
        self.bias = np.zeros(out_ch, dtype=np.float32)

    def forward(self, x, tape=None):
        y, c = nn.transposed_conv2d(x, self.weight, self.bias)
        if tape is not None:
            tape[self.name] = c
        return y

    def backward(self, tape, dy, grads):
        g = nn.transposed_conv2d_backward(tape.pop(self.name), dy)
        grads[self.name + ".weight"] = g.weight
        grads[self.name + ".bias"] = g.bias
        return g.x

    def params(self):
        yield self.name + ".weight", self.weight
        yield self.name + ".bias", self.bias

    def buffers(self):
        return iter(())


class _Head:
    """Final 1x1 conv to the output logit maps."""

    def __init__(self, name: str, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.name = name
        self.weight = rng.normal(0.0, np.sqrt(2.0 / in_ch), (out_ch, in_ch, 1, 1)).astype(np.float32)
        self.bias = np.zeros(out_ch, dtype=np.float32)

    def forward(self, x, tape=None):
        y, c = nn.conv2d(x, self.weight, self.bias)
        if tape is not None:
            tape[self.name] = c
        return y

    def backward(self, tape, dy, grads):
        g = nn.conv2d_backward(tape.pop(self.name), dy)
        grads[self.name + ".weight"] = g.weight
        grads[self.name + ".bias"] = g.bias
        return g.x

    def params(self):
        yield self.name + ".weight", self.weight
        yield self.name + ".bias", self.bias

    def buffers(self):
        return iter(())


class UNet:
    """The assembled network. Build with build_unet()."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        ch = config.base_channels
        self.enc: list[list[_ConvBN]] = []
        self.dec: list[list[_ConvBN]] = []
        self.ups: list[_UpConv] = []
        in_ch = config.in_channels
        for lvl in range(config.levels):
            out_ch = ch * (2 ** lvl)
            block = []
            for i in range(config.convs_at(lvl)):
                block.append(_ConvBN(f"enc{lvl}.{i}", in_ch, out_ch, rng))
                in_ch = out_ch
            self.enc.append(block)
        bott_ch = ch * (2 ** config.levels)
        self.bottleneck = []
        for i in range(config.bottleneck_convs):
            self.bottleneck.append(_ConvBN(f"bott.{i}", in_ch, bott_ch, rng))
            in_ch = bott_ch
        for lvl in reversed(range(config.levels)):
            skip_ch = ch * (2 ** lvl)
            self.ups.append(_UpConv(f"up{lvl}", in_ch, skip_ch, rng))
            block = []
            block_in = skip_ch * 2
            for i in range(config.convs_per_level):
                block.append(_ConvBN(f"dec{lvl}.{i}", block_in, skip_ch, rng))
                block_in = skip_ch
            self.dec.append(block)
            in_ch = skip_ch
        self.head = _Head("head", in_ch, config.out_maps, rng)

    # ----- parameter plumbing -------------------------------------------

    def _units(self):
        for block in self.enc:
            yield from block
        yield from self.bottleneck
        for up, block in zip(self.ups, self.dec):
            yield up
            yield from block
        yield self.head

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        for unit in self._units():
            yield from unit.params()

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for unit in self._units():
            yield from unit.buffers()

    def state_items(self) -> list[tuple[str, np.ndarray]]:
        items = list(self.named_params())
        items.extend(self.named_buffers())
        return items

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.named_params())

    # ----- forward / backward -------------------------------------------

    def _check_input(self, x):
        m = self.config.min_input
        if x.shape[1] != self.config.in_channels:
            raise nn.ShapeError(
                f"input has {x.shape[1]} channels, model expects {self.config.in_channels}")
        if x.shape[2] < m or x.shape[3] < m:
            raise nn.ShapeError(
                f"input {x.shape[2]}x{x.shape[3]} is below the minimum {m}x{m} "
                f"for levels={self.config.levels}")

    def forward_logits(self, x: np.ndarray, train: bool = False, tape: Optional[dict] = None):
        """x: (N, in_ch, H, W) in [0,1] -> logits (N, out_maps, H, W)."""
        self._check_input(x)
        skips = []
        h = x
        for lvl in range(self.config.levels):
            for unit in self.enc[lvl]:
                h = unit.forward(h, train, tape)
            skips.append(h)
            (h, _), pc = nn.maxpool2x2(h)
            if tape is not None:
                tape[f"pool{lvl}"] = pc
        for unit in self.bottleneck:
            h = unit.forward(h, train, tape)
        for i, lvl in enumerate(reversed(range(self.config.levels))):
            h = self.ups[i].forward(h, tape)
            up_shape = h.shape
            skip = skips[lvl]
            crop = (h.shape[2] - skip.shape[2], h.shape[3] - skip.shape[3])
            if crop != (0, 0):
                h = h[:, :, :skip.shape[2], :skip.shape[3]]
            cat, cc = nn.concat_channels(skip, h)
            if tape is not None:
                tape[f"cat{lvl}"] = (cc, crop, up_shape)
            h = cat
            for unit in self.dec[i]:
                h = unit.forward(h, train, tape)
        return self.head.forward(h, tape)

    def backward(self, tape: dict, dlogits: np.ndarray) -> dict:
        """Walks the tape in reverse; returns {param name: gradient}."""
        grads: dict[str, np.ndarray] = {}
        d = self.head.backward(tape, dlogits, grads)
        dskips: dict[int, np.ndarray] = {}
        for i in reversed(range(self.config.levels)):
            lvl = self.config.levels - 1 - i
            for unit in reversed(self.dec[i]):
                d = unit.backward(tape, d, grads)
            cc, crop, up_shape = tape.pop(f"cat{lvl}")
            dskip, dup = nn.concat_channels_backward(cc, d)
            if crop != (0, 0):
                full = np.zeros(up_shape, dtype=dup.dtype)
                full[:, :, :dup.shape[2], :dup.shape[3]] = dup
                dup = full
            d = self.ups[i].backward(tape, dup, grads)
            dskips[lvl] = dskip
        for unit in reversed(self.bottleneck):
            d = unit.backward(tape, d, grads)
        for lvl in reversed(range(self.config.levels)):
            d = nn.maxpool2x2_backward(tape.pop(f"pool{lvl}"), d).x
            d = d + dskips[lvl]
            for unit in reversed(self.enc[lvl]):
                d = unit.backward(tape, d, grads)
        grads["__input__"] = d
        return grads

    def forward_maps(self, image: np.ndarray) -> np.ndarray:
        """Inference: RGB image (C,H,W) or (N,C,H,W) in [0,1] -> sigmoid maps.

        Map order is fixed: [detection, classification] for the two-map model,
        [segmentation] for the one-map model. Output pixels align 1:1 with
        the input. Reentrant; shares no mutable state.
        """
        squeeze = image.ndim == 3
        x = image[None] if squeeze else image
        logits = self.forward_logits(x.astype(np.float32, copy=False), train=False)
        maps, _ = nn.sigmoid(logits)
        return maps[0] if squeeze else maps


def build_unet(config: ModelConfig, seed: int = 0) -> UNet:
    """Deterministic construction: the same seed gives bit-identical weights."""
    return UNet(config, seed)


def parameter_count(model: UNet) -> int:
    return model.parameter_count()


# ------------------------------------------------------------ serialization
#
# Weight file ("FCNW"): magic, format version u32, config block (levels,
# base_channels, in_channels, out_maps, convs_per_level, deep_convs; u32 each,
# deep_convs 0 = unset), record count u32, then per-record: id (u16 length +
# utf-8 bytes), ndim u8, dims u32 each, float32 little-endian data. The file
# ends with a CRC32 (u32 LE) of all preceding bytes.

_MAGIC = b"FCNW"
_VERSION = 1


def save_weights(model: UNet, path) -> None:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    cfg = model.config
    deep = cfg.deep_convs if cfg.deep_convs is not None else 0
    buf.write(struct.pack("<7I", _VERSION, cfg.levels, cfg.base_channels,
                          cfg.in_channels, cfg.out_maps, cfg.convs_per_level, deep))
    items = model.state_items()
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4", copy=False).tobytes())
    body = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_weights(path, expect_config: Optional[ModelConfig] = None) -> UNet:
    """Rebuilds the model; load(save(m)) reproduces bit-identical outputs."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != _MAGIC:
        raise WeightFormatError(f"{path}: not an FCNW weight file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise WeightChecksumError(f"{path}: checksum mismatch (truncated or corrupted)")
    off = 4
    version, levels, base, in_ch, out_maps, cpl, deep = struct.unpack_from("<7I", body, off)
    off += 28
    if version != _VERSION:
        raise WeightVersionError(f"{path}: format version {version}, expected {_VERSION}")
    config = ModelConfig(levels=levels, base_channels=base, in_channels=in_ch,
                         out_maps=out_maps, convs_per_level=cpl,
                         deep_convs=deep if deep else None)
    if expect_config is not None and config != expect_config:
        raise WeightConfigError(f"{path}: file holds {config}, expected {expect_config}")
    (n_records,) = struct.unpack_from("<I", body, off)
    off += 4
    model = UNet(config, seed=0)
    slots = dict(model.state_items())
    seen = set()
    for _ in range(n_records):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        if name not in slots:
            raise WeightConfigError(f"{path}: unexpected record {name!r}")
        if slots[name].shape != arr.shape:
            raise WeightConfigError(
                f"{path}: record {name!r} has shape {arr.shape}, model expects {slots[name].shape}")
        slots[name][...] = arr
        seen.add(name)
    missing = set(slots) - seen
    if missing:
        raise WeightConfigError(f"{path}: missing records {sorted(missing)[:4]}")
    return model


def clone_state(model: UNet) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in model.state_items()}


def restore_state(model: UNet, state: dict[str, np.ndarray]) -> None:
    for name, arr in model.state_items():
        arr[...] = state[name]
