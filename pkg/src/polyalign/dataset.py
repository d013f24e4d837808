"""Procedural building scenes, annotation files and dataset manifests.

Ground-truth annotations are written next to the misaligned ones but never
loaded here: ``load_dataset`` only returns what an aligner is allowed to see.
See ``metrics.load_ground_truth`` for the evaluation side.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .deform import FieldSpec, corrupt_annotations, derive_seed, make_rng, sample_gaussian_field
from .geometry import AnnotationSet, DisplacementField, DomainError, Polygon, read_field, write_field
from .raster import ImagePatch, load_png, normalize_rgb, pad_to_multiple, polygon_interior_mask, rasterize_triple, save_png

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


class LoadError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    height: int = 256
    width: int = 256
    buildings: tuple[int, int] = (8, 14)
    size: tuple[float, float] = (14.0, 40.0)
    rotation_deg: tuple[float, float] = (-30.0, 30.0)
    l_shape_prob: float = 0.35
    misalignment_cap: float = 16.0
    misalignment_correlation: float | None = None
    per_building_offset: float = 0.0  # extra constant offset per building, in px (0 disables)
    pixel_noise: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.height % 8 or self.width % 8 or min(self.height, self.width) < 64:
            raise DomainError(f"scene extent must be >= 64 and divisible by 8, got {(self.height, self.width)}")
        if self.buildings[0] < 0 or self.buildings[1] < self.buildings[0]:
            raise DomainError(f"invalid building count range {self.buildings}")
        if self.size[0] <= 0 or self.size[1] < self.size[0]:
            raise DomainError(f"invalid size range {self.size}")

    def misalignment_spec(self, seed: int) -> FieldSpec:
        return FieldSpec(self.height, self.width, self.misalignment_cap, self.misalignment_correlation, seed)


@dataclass
class Scene:
    image_id: str
    image: ImagePatch
    true_annotations: AnnotationSet
    annotations: AnnotationSet  # A_0, the misaligned input
    noise_field: DisplacementField
    building_offsets: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))


def _building_outline(rng, size_range, rot_range, l_prob) -> np.ndarray:
    w = rng.uniform(*size_range)
    h = rng.uniform(*size_range)
    if rng.random() < l_prob:
        cw, ch = w * rng.uniform(0.35, 0.65), h * rng.uniform(0.35, 0.65)
        pts = np.array([[0, 0], [w, 0], [w, h - ch], [w - cw, h - ch], [w - cw, h], [0, h]])
    else:
        pts = np.array([[0, 0], [w, 0], [w, h], [0, h]])
    pts = pts - pts.mean(axis=0)
    a = math.radians(rng.uniform(*rot_range))
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return pts @ rot.T


def place_buildings(spec: SceneSpec, rng, max_tries: int = 400) -> list[np.ndarray]:
    """Rotated rectangles and L-shapes with disjoint bounding circles."""
    target = int(rng.integers(spec.buildings[0], spec.buildings[1] + 1))
    margin = 6.0
    placed, circles = [], []
    tries = 0
    while len(placed) < target and tries < max_tries:
        tries += 1
        outline = _building_outline(rng, spec.size, spec.rotation_deg, spec.l_shape_prob)
        r = float(np.linalg.norm(outline, axis=1).max())
        lo, hi = r + margin, np.array([spec.width, spec.height]) - r - margin
        if hi[0] <= lo or hi[1] <= lo:
            continue
        c = np.array([rng.uniform(lo, hi[0]), rng.uniform(lo, hi[1])])
        if any(np.linalg.norm(c - c2) < r + r2 + margin for c2, r2 in circles):
            continue
        placed.append(outline + c)
        circles.append((c, r))
    if len(placed) < target:
        log.warning("placed %d of %d buildings after %d tries", len(placed), target, tries)
    return placed


def render_image(spec: SceneSpec, polygons: list[np.ndarray], rng) -> np.ndarray:
    """8-bit RGB rendering: textured ground, flat roofs, dark outlines, pixel noise."""
    h, w = spec.height, spec.width
    tex = sample_gaussian_field(FieldSpec(h, w, 1.0, max(4.0, min(h, w) / 8), int(rng.integers(2**63))))
    base = np.array([96.0, 118.0, 84.0]) + rng.uniform(-12, 12, 3)
    img = base + 28.0 * tex.dx[..., None] * np.array([1.0, 0.9, 0.7]) + 14.0 * tex.dy[..., None]
    for poly in polygons:
        mask = polygon_interior_mask(poly, (h, w))
        if rng.random() < 0.7:
            img[mask] = rng.uniform(150, 230, 3)
        else:
            img[mask] = rng.uniform(40, 80, 3) + [60, 0, 0]
    edges = rasterize_triple(AnnotationSet(tuple(Polygon(p) for p in polygons), "", (h, w)), (h, w)).edge
    img[edges.astype(bool)] *= 0.55
    img += rng.normal(0.0, spec.pixel_noise, img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def generate_scene(spec: SceneSpec, image_id: str = "scene") -> Scene:
    rng = make_rng(derive_seed(spec.seed, 1))
    polygons = place_buildings(spec, rng)
    raw = render_image(spec, polygons, rng)
    truth = AnnotationSet(tuple(Polygon(p) for p in polygons), image_id, (spec.height, spec.width))
    noisy, f = corrupt_annotations(truth, spec.misalignment_spec(derive_seed(spec.seed, 2)))
    offsets = np.zeros((len(polygons), 2))
    if spec.per_building_offset > 0 and polygons:
        orng = make_rng(derive_seed(spec.seed, 3))
        ang = orng.uniform(0, 2 * np.pi, len(polygons))
        rad = spec.per_building_offset * np.sqrt(orng.random(len(polygons)))
        offsets = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
        noisy = AnnotationSet(
            tuple(Polygon(p.vertices + o) for p, o in zip(noisy.polygons, offsets)), image_id, truth.extent)
    return Scene(image_id, normalize_rgb(raw), truth, noisy, f, offsets)


def save_annotations(a: AnnotationSet, path) -> None:
    """Write the JSON annotation document; coordinates keep 6 decimals."""
    text = json.dumps(a.to_json_dict(6), separators=(",", ":"))
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_annotations(path) -> AnnotationSet:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: invalid JSON at byte offset {len(text[:exc.pos].encode('utf-8'))}: {exc.msg}") from exc
    try:
        return AnnotationSet.from_json_dict(doc)
    except (DomainError, TypeError, ValueError) as exc:
        raise LoadError(f"{path}: {exc}") from exc


@dataclass
class ManifestEntry:
    image_id: str
    image: str
    annotations: str
    true_annotations: str | None = None
    field: str | None = None
    split: str = "train"

    def to_dict(self) -> dict:
        d = {"image_id": self.image_id, "image": self.image, "annotations": self.annotations, "split": self.split}
        if self.true_annotations is not None:
            d["true_annotations"] = self.true_annotations
        if self.field is not None:
            d["field"] = self.field
        return d


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    format_version: int = MANIFEST_VERSION

    def write(self, path) -> None:
        doc = {"format_version": self.format_version, "entries": [e.to_dict() for e in self.entries]}
        Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise LoadError(f"{path}: {exc.strerror}") from exc
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise LoadError(f"{path}: invalid JSON at byte offset {len(text[:exc.pos].encode('utf-8'))}: {exc.msg}") from exc
        if doc.get("format_version") != MANIFEST_VERSION:
            raise LoadError(f"{path}: unsupported manifest version {doc.get('format_version')!r}")
        entries = []
        for k, e in enumerate(doc.get("entries", [])):
            try:
                entries.append(ManifestEntry(**e))
            except TypeError as exc:
                raise LoadError(f"{path}: entry {k}: {exc}") from exc
        return cls(entries)


def write_scenes(scenes: list[Scene], out_dir, split: str = "train") -> Path:
    """Persist scenes (PNG, JSON, field files) plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    for sub in ("images", "annotations", "truth", "fields"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for s in scenes:
        save_png(s.image, out / "images" / f"{s.image_id}.png")
        save_annotations(s.annotations, out / "annotations" / f"{s.image_id}.json")
        save_annotations(s.true_annotations, out / "truth" / f"{s.image_id}.json")
        write_field(s.noise_field, out / "fields" / f"{s.image_id}.dfld")
        entries.append(ManifestEntry(
            s.image_id, f"images/{s.image_id}.png", f"annotations/{s.image_id}.json",
            f"truth/{s.image_id}.json", f"fields/{s.image_id}.dfld", split))
    manifest = out / "manifest.json"
    DatasetManifest(entries).write(manifest)
    return manifest


@dataclass
class LoadedImage:
    image_id: str
    image: ImagePatch  # padded to a multiple of 8
    annotations: AnnotationSet  # A_0, in original coordinates
    extent: tuple[int, int]  # original (H, W)
    pad: tuple[int, int]  # rows, cols added at bottom/right
    split: str = "train"


def load_dataset(manifest_path) -> list[LoadedImage]:
    manifest_path = Path(manifest_path)
    manifest = DatasetManifest.read(manifest_path)
    root = manifest_path.parent
    out = []
    for e in manifest.entries:
        img_path = root / e.image
        if not img_path.exists():
            raise LoadError(f"{manifest_path}: entry {e.image_id!r}: missing image {img_path}")
        try:
            image = load_png(img_path)
        except OSError as exc:
            raise LoadError(f"{manifest_path}: entry {e.image_id!r}: unreadable image {img_path}") from exc
        ann = load_annotations(root / e.annotations)
        extent = image.extent
        if ann.extent != extent:
            raise LoadError(f"entry {e.image_id!r}: annotation extent {ann.extent} != image extent {extent}")
        try:
            ann.validate()
        except DomainError as exc:
            raise LoadError(f"entry {e.image_id!r}: {exc}") from exc
        padded, pad = pad_to_multiple(image, 8)
        out.append(LoadedImage(e.image_id, padded, ann, extent, pad, e.split))
    return out


def load_noise_field(manifest_path, image_id: str) -> DisplacementField:
    manifest_path = Path(manifest_path)
    for e in DatasetManifest.read(manifest_path).entries:
        if e.image_id == image_id and e.field:
            return read_field(manifest_path.parent / e.field)
    raise LoadError(f"{manifest_path}: no field recorded for {image_id!r}")
