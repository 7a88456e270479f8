"""Multi-resolution slide pyramids: an open directory format.

A slide is a directory with `manifest.json` and binary PPM (P6) tiles:

    manifest.json: {format_version, width, height, mpp, tile_size,
                    levels: [{index, width, height,
                              tiles: [{x, y, file, crc32}]}]}

Level k is the level-0 image box-downsampled by 2**k (computed directly from
level 0, single rounding). Pyramids are immutable after build; concurrent
region reads are safe.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

FORMAT_VERSION = 1

#: 40X scans carry 4.4 pixels per micron.
MPP_40X = 1.0 / 4.4


class IntegrityError(RuntimeError):
    """A tile is missing or fails its manifest checksum."""


def magnification_mpp(magnification: float) -> float:
    """Microns per pixel at the given optical magnification (40X anchor)."""
    if magnification <= 0:
        raise ValueError(f"magnification must be positive, got {magnification}")
    return MPP_40X * (40.0 / magnification)


def magnification_factor(slide_mpp: float, magnification: float) -> float:
    """Resize factor applied to a slide's level 0 to reach `magnification`."""
    f = slide_mpp / magnification_mpp(magnification)
    if f > 1.0 + 1e-9:
        raise ValueError(
            f"slide (mpp={slide_mpp:.4f}) is coarser than {magnification}X; cannot upsample")
    return min(f, 1.0)


# ----------------------------------------------------------------- PPM I/O

def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6), 8-bit RGB, image shaped (H, W, 3)."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"write_ppm wants uint8 (H,W,3), got {image.dtype} {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise IntegrityError(f"{path}: not a P6 PPM")
    # header: magic, width, height, maxval, single whitespace, then raster
    fields: list[bytes] = []
    i = 2
    while len(fields) < 3:
        while i < len(blob) and blob[i:i + 1].isspace():
            i += 1
        if blob[i:i + 1] == b"#":
            while i < len(blob) and blob[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(blob) and not blob[j:j + 1].isspace():
            j += 1
        fields.append(blob[i:j])
        i = j
    i += 1
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise IntegrityError(f"{path}: unsupported maxval {maxval}")
    if len(blob) - i < w * h * 3:
        raise IntegrityError(f"{path}: truncated raster")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=i)
    return data.reshape(h, w, 3)


# ------------------------------------------------------------- downsampling

def box_downsample(image: np.ndarray, block: int) -> np.ndarray:
    """Mean over block×block cells (partial edge cells average what exists),
    rounded half-up to uint8. Output dims are ceil-divided."""
    if block == 1:
        return image
    h, w = image.shape[:2]
    eh = np.arange(0, h, block)
    ew = np.arange(0, w, block)
    acc = np.add.reduceat(np.add.reduceat(image.astype(np.float64), eh, axis=0), ew, axis=1)
    ch = np.minimum(eh + block, h) - eh
    cw = np.minimum(ew + block, w) - ew
    counts = ch[:, None] * cw[None, :]
    out = acc / counts[:, :, None]
    return np.floor(out + 0.5).astype(np.uint8)


def _bilinear(image: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    """Sample image (H,W,C) at float coords (clamped); sy/sx are 1-D axes."""
    h, w = image.shape[:2]
    sy = np.clip(sy, 0.0, h - 1.0)
    sx = np.clip(sx, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None, None]
    fx = (sx - x0)[None, :, None]
    img = image.astype(np.float64)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.floor(out + 0.5).astype(np.uint8)


# ------------------------------------------------------------------ pyramid

class RegionRead(NamedTuple):
    pixels: np.ndarray  # uint8 (H, W, 3)
    clipped: bool


@dataclass
class _Level:
    index: int
    width: int
    height: int
    tiles: dict  # (tx, ty) -> {"file": str, "crc32": int}


class SlidePyramid:
    """Read-only view over a pyramid directory."""

    def __init__(self, root: Path, manifest: dict):
        self.root = Path(root)
        self.width = int(manifest["width"])
        self.height = int(manifest["height"])
        self.mpp = float(manifest["mpp"])
        self.tile_size = int(manifest["tile_size"])
        self.levels: list[_Level] = []
        for lv in manifest["levels"]:
            tiles = {(t["x"], t["y"]): t for t in lv["tiles"]}
            self.levels.append(_Level(lv["index"], lv["width"], lv["height"], tiles))

    @classmethod
    def open(cls, root) -> "SlidePyramid":
        root = Path(root)
        with open(root / "manifest.json") as fh:
            manifest = json.load(fh)
        if manifest.get("format_version") != FORMAT_VERSION:
            raise IntegrityError(f"{root}: unsupported format_version")
        return cls(root, manifest)

    def level_downsample(self, index: int) -> int:
        return 1 << index

    def _tile(self, level: _Level, tx: int, ty: int) -> np.ndarray:
        rec = level.tiles.get((tx, ty))
        if rec is None:
            raise IntegrityError(f"missing tile ({tx},{ty}) at level {level.index}")
        path = self.root / rec["file"]
        try:
            blob = path.read_bytes()
        except FileNotFoundError as exc:
            raise IntegrityError(f"missing tile file {path}") from exc
        if zlib.crc32(blob) != rec["crc32"]:
            raise IntegrityError(f"checksum mismatch for {path}")
        return read_ppm(path)

    def read_level(self, index: int, x: int, y: int, w: int, h: int) -> np.ndarray:
        """Pixel-exact rectangle from one stored level (level coords)."""
        level = self.levels[index]
        if x < 0 or y < 0 or x + w > level.width or y + h > level.height or w <= 0 or h <= 0:
            raise ValueError(f"level-{index} read {x},{y},{w},{h} outside {level.width}x{level.height}")
        ts = self.tile_size
        out = np.empty((h, w, 3), dtype=np.uint8)
        for ty in range(y // ts, (y + h - 1) // ts + 1):
            for tx in range(x // ts, (x + w - 1) // ts + 1):
                tile = self._tile(level, tx, ty)
                ox, oy = tx * ts, ty * ts
                sx0, sy0 = max(x, ox), max(y, oy)
                sx1 = min(x + w, ox + tile.shape[1])
                sy1 = min(y + h, oy + tile.shape[0])
                out[sy0 - y:sy1 - y, sx0 - x:sx1 - x] = \
                    tile[sy0 - oy:sy1 - oy, sx0 - ox:sx1 - ox]
        return out

    def read_region(self, x: int, y: int, w: int, h: int, factor: float = 1.0) -> RegionRead:
        """Level-0 rectangle resampled by `factor` ∈ (0, 1].

        Reads from the finest stored level whose downsample is ≤ 1/factor and
        bilinear-resizes to the exact requested scale. Out-of-bounds rects are
        clipped (flagged in the result). Deterministic.
        """
        if not (0.0 < factor <= 1.0 + 1e-12):
            raise ValueError(f"resize factor must be in (0, 1], got {factor}")
        cx0, cy0 = max(0, x), max(0, y)
        cx1, cy1 = min(x + w, self.width), min(y + h, self.height)
        clipped = (cx0, cy0, cx1, cy1) != (x, y, x + w, y + h)
        if cx1 <= cx0 or cy1 <= cy0:
            raise ValueError(f"region {x},{y},{w},{h} lies outside the slide")
        x, y, w, h = cx0, cy0, cx1 - cx0, cy1 - cy0

        k = 0
        while k + 1 < len(self.levels) and (1 << (k + 1)) * factor <= 1.0 + 1e-12:
            k += 1
        ds = 1 << k
        out_w = max(1, int(round(w * factor)))
        out_h = max(1, int(round(h * factor)))

        # exact fast path: power-of-two factor with an aligned rect
        if abs(ds * factor - 1.0) < 1e-12 and x % ds == 0 and y % ds == 0 \
                and w % ds == 0 and h % ds == 0:
            return RegionRead(self.read_level(k, x // ds, y // ds, w // ds, h // ds), clipped)

        # general path: sample with half-pixel-center mapping
        sx = x + (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
        sy = y + (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
        sxk = (sx + 0.5) / ds - 0.5
        syk = (sy + 0.5) / ds - 0.5
        level = self.levels[k]
        lx0 = max(0, int(np.floor(sxk.min())))
        ly0 = max(0, int(np.floor(syk.min())))
        lx1 = min(level.width, int(np.ceil(sxk.max())) + 2)
        ly1 = min(level.height, int(np.ceil(syk.max())) + 2)
        window = self.read_level(k, lx0, ly0, lx1 - lx0, ly1 - ly0)
        return RegionRead(_bilinear(window, syk - ly0, sxk - lx0), clipped)

    def read_magnification(self, x: int, y: int, w: int, h: int,
                           magnification: float) -> RegionRead:
        return self.read_region(x, y, w, h, magnification_factor(self.mpp, magnification))


def build_pyramid(image: np.ndarray, out_dir, tile_size: int = 256,
                  mpp: float = MPP_40X) -> SlidePyramid:
    """Write a pyramid directory for a level-0 uint8 RGB image.

    Tiles are written first, the manifest (with per-tile CRC32) last, so a
    crash never leaves a manifest naming missing data.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"level-0 image must be (H,W,3), got {image.shape}")
    h0, w0 = image.shape[:2]
    if h0 == 0 or w0 == 0:
        raise ValueError("level-0 image has a zero dimension")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    levels_meta = []
    k = 0
    while True:
        level_img = box_downsample(image, 1 << k)
        lh, lw = level_img.shape[:2]
        ldir = out_dir / f"level_{k}"
        ldir.mkdir(exist_ok=True)
        tiles = []
        for ty in range(math.ceil(lh / tile_size)):
            for tx in range(math.ceil(lw / tile_size)):
                tile = level_img[ty * tile_size:(ty + 1) * tile_size,
                                 tx * tile_size:(tx + 1) * tile_size]
                rel = f"level_{k}/t_{tx}_{ty}.ppm"
                write_ppm(out_dir / rel, np.ascontiguousarray(tile))
                tiles.append({"x": tx, "y": ty, "file": rel,
                              "crc32": zlib.crc32((out_dir / rel).read_bytes())})
        levels_meta.append({"index": k, "width": lw, "height": lh, "tiles": tiles})
        if max(lw, lh) <= tile_size:
            break
        k += 1
    manifest = {"format_version": FORMAT_VERSION, "width": w0, "height": h0,
                "mpp": mpp, "tile_size": tile_size, "levels": levels_meta}
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh)
    return SlidePyramid.open(out_dir)


# -------------------------------------------------------------- annotations

def load_annotations(path) -> dict:
    """Per-slide annotation file: points [{x,y,class}], polygons [[x,y],...], mpp."""
    with open(path) as fh:
        ann = json.load(fh)
    for key in ("points", "polygons", "mpp"):
        if key not in ann:
            raise ValueError(f"{path}: annotation file missing {key!r}")
    return ann


def save_annotations(path, points, polygons, mpp: float) -> None:
    with open(path, "w") as fh:
        json.dump({"points": points, "polygons": polygons, "mpp": mpp}, fh)
