"""Polygon rasterization and image normalization for the network inputs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import AnnotationSet, DomainError

SCALE_FACTORS = (8, 4, 2, 1)  # downscaling factors, coarse to fine
CHANNEL_NAMES = ("interior", "edge", "vertices")


@dataclass(frozen=True)
class RasterTriple:
    channels: np.ndarray  # (3, H, W) uint8 in {0, 1}

    def __post_init__(self):
        c = np.asarray(self.channels, dtype=np.uint8)
        if c.ndim != 3 or c.shape[0] != 3:
            raise DomainError(f"raster must be (3, H, W), got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "channels", c)

    @property
    def extent(self) -> tuple[int, int]:
        return self.channels.shape[1], self.channels.shape[2]

    @property
    def interior(self) -> np.ndarray:
        return self.channels[0]

    @property
    def edge(self) -> np.ndarray:
        return self.channels[1]

    @property
    def vertices(self) -> np.ndarray:
        return self.channels[2]

    def as_float(self, dtype=np.float64) -> np.ndarray:
        return self.channels.astype(dtype)


@dataclass(frozen=True)
class ImagePatch:
    pixels: np.ndarray  # (3, H, W) float in [-1, 1]

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != 3:
            raise DomainError(f"image patch must be (3, H, W), got {p.shape}")
        p.setflags(write=False)
        object.__setattr__(self, "pixels", p)

    @property
    def extent(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]


def _round_half_up(v: np.ndarray) -> np.ndarray:
    return np.floor(v + 0.5).astype(np.int64)


def polygon_interior_mask(vertices: np.ndarray, extent: tuple[int, int]) -> np.ndarray:
    """Even-odd fill sampled at pixel centers, one scanline per row."""
    h, w = extent
    mask = np.zeros((h, w), dtype=bool)
    x0, y0 = vertices[:, 0], vertices[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    cols = np.arange(w, dtype=np.float64)
    lo = max(int(np.ceil(y0.min())), 0)
    hi = min(int(np.ceil(y0.max())), h - 1)
    for row in range(lo, hi + 1):
        y = float(row)
        crosses = ((y0 <= y) & (y1 > y)) | ((y0 > y) & (y1 <= y))
        if not crosses.any():
            continue
        a0, b0, a1, b1 = x0[crosses], y0[crosses], x1[crosses], y1[crosses]
        xs = np.sort(a0 + (y - b0) / (b1 - b0) * (a1 - a0))
        # count of crossings strictly right of each pixel center
        right = len(xs) - np.searchsorted(xs, cols, side="right")
        mask[row] = (right % 2) == 1
    return mask


def _segment_pixels(p0: np.ndarray, p1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c0, r0 = _round_half_up(p0)
    c1, r1 = _round_half_up(p1)
    n = int(max(abs(c1 - c0), abs(r1 - r0)))
    if n == 0:
        return np.array([r0]), np.array([c0])
    t = np.arange(n + 1) / n
    cols = _round_half_up(c0 + t * (c1 - c0))
    rows = _round_half_up(r0 + t * (r1 - r0))
    return rows, cols


def rasterize_triple(a: AnnotationSet, extent: tuple[int, int]) -> RasterTriple:
    h, w = int(extent[0]), int(extent[1])
    if h <= 0 or w <= 0:
        raise DomainError(f"extent must be positive, got {extent}")
    out = np.zeros((3, h, w), dtype=np.uint8)
    for poly in a.polygons:
        v = poly.vertices
        out[0] |= polygon_interior_mask(v, (h, w))
        for k in range(len(v)):
            rows, cols = _segment_pixels(v[k], v[(k + 1) % len(v)])
            keep = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
            out[1, rows[keep], cols[keep]] = 1
        c, r = _round_half_up(v[:, 0]), _round_half_up(v[:, 1])
        keep = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        out[2, r[keep], c[keep]] = 1
    return RasterTriple(out)


def _block_view(arr: np.ndarray, factor: int) -> np.ndarray:
    c, h, w = arr.shape
    if h % factor or w % factor:
        raise DomainError(f"extent {(h, w)} not divisible by {factor}")
    return arr.reshape(c, h // factor, factor, w // factor, factor)


def downsample_raster(r, factor: int):
    """Block-mean for ``ImagePatch``, block-max for ``RasterTriple``."""
    if factor not in SCALE_FACTORS:
        raise DomainError(f"factor must be one of {SCALE_FACTORS}")
    if factor == 1:
        return r
    if isinstance(r, ImagePatch):
        return ImagePatch(_block_view(r.pixels, factor).mean(axis=(2, 4)))
    if isinstance(r, RasterTriple):
        return RasterTriple(_block_view(r.channels, factor).max(axis=(2, 4)))
    raise TypeError(f"cannot downsample {type(r).__name__}")


def normalize_rgb(raw: np.ndarray) -> ImagePatch:
    """Map an ``(H, W, 3)`` 8-bit image to ``[-1, 1]``, channels first."""
    raw = np.asarray(raw, dtype=np.float64)
    return ImagePatch(np.transpose(raw / 127.5 - 1.0, (2, 0, 1)))


def denormalize_rgb(image: ImagePatch) -> np.ndarray:
    v = np.transpose(image.pixels, (1, 2, 0))
    return np.clip(np.floor((v + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)


def build_pyramid(image: ImagePatch, a: AnnotationSet) -> dict[int, tuple[ImagePatch, AnnotationSet]]:
    """Per downscaling factor (8, 4, 2, 1): block-mean image and scaled annotations."""
    h, w = image.extent
    if h % 8 or w % 8:
        raise DomainError(f"extent {(h, w)} must be divisible by 8; pad first")
    levels = {}
    for factor in SCALE_FACTORS:
        levels[factor] = (
            downsample_raster(image, factor),
            a.scaled(1.0 / factor, (h // factor, w // factor)),
        )
    return levels


def pad_to_multiple(image: ImagePatch, multiple: int = 8) -> tuple[ImagePatch, tuple[int, int]]:
    """Reflect-pad bottom/right so both sides divide ``multiple``; returns the pad amounts."""
    h, w = image.extent
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return image, (0, 0)
    mode = "reflect" if h > ph and w > pw else "edge"
    return ImagePatch(np.pad(image.pixels, ((0, 0), (0, ph), (0, pw)), mode=mode)), (ph, pw)


def load_png(path) -> ImagePatch:
    from PIL import Image

    with Image.open(path) as im:
        return normalize_rgb(np.asarray(im.convert("RGB")))


def save_png(image: ImagePatch, path) -> None:
    from PIL import Image

    Image.fromarray(denormalize_rgb(image), mode="RGB").save(path, format="PNG")


def save_raster_debug(r: RasterTriple, prefix) -> list[Path]:
    """Write each channel as an 8-bit grayscale PNG named ``<prefix>_<channel>.png``."""
    from PIL import Image

    paths = []
    for name, ch in zip(CHANNEL_NAMES, r.channels):
        p = Path(f"{prefix}_{name}.png")
        Image.fromarray((ch * 255).astype(np.uint8), mode="L").save(p, format="PNG")
        paths.append(p)
    return paths
