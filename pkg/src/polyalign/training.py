"""Self-supervised triplet generation and per-scale model training."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import net
from .deform import FieldSpec, derive_seed, make_rng, sample_gaussian_field
from .geometry import AnnotationSet, ConfigError, DisplacementField, DomainError, warp_annotations_forward
from .raster import SCALE_FACTORS, ImagePatch, RasterTriple, downsample_raster, rasterize_triple

log = logging.getLogger(__name__)

TRIPLET_CAP_PX = 4.0


class TrainingDivergence(RuntimeError):
    """Raised when a loss or gradient turns non-finite."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float = 1e-3
    seg_loss_weight: float = 0.1
    patch_size: int = 64
    master_seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    positive_patch_prob: float = 0.9
    triplet_cap: float = TRIPLET_CAP_PX
    correlation_fraction: float = 0.25  # correlation length as a fraction of the patch side
    widths: tuple[int, ...] = (16, 32, 64)
    fusion: str = "concat"
    dtype: str = "float32"
    warm_start: bool = False
    augment: bool = False  # random flips/transposes of each training patch

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        mult = max(2 ** len(self.widths), 8)
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.patch_size % mult:
            raise ConfigError(f"patch_size {self.patch_size} must be divisible by {mult}")
        if self.batch_size < 1 or self.learning_rate <= 0 or self.seg_loss_weight < 0:
            raise ConfigError("batch_size >= 1, learning_rate > 0 and seg_loss_weight >= 0 required")
        if not 0 < self.triplet_cap <= net.DISP_BOUND_PX:
            raise ConfigError(f"triplet_cap must lie in (0, {net.DISP_BOUND_PX}]")

    @property
    def descriptor(self) -> net.ArchDescriptor:
        return net.ArchDescriptor(self.widths, 3, self.fusion)


@dataclass(frozen=True)
class TrainingTriplet:
    image: ImagePatch
    misaligned_raster: RasterTriple
    target_field: DisplacementField
    aligned_raster: RasterTriple  # segmentation target
    scale: int  # downscaling factor


def _clip_to_window(a: AnnotationSet, extent: tuple[int, int], margin: float) -> AnnotationSet:
    h, w = extent
    keep = []
    for p in a.polygons:
        lo, hi = p.vertices.min(axis=0), p.vertices.max(axis=0)
        if hi[0] >= -margin and hi[1] >= -margin and lo[0] <= w + margin and lo[1] <= h + margin:
            keep.append(p)
    return AnnotationSet(tuple(keep), a.image_id, extent)


def triplet_at_level(
    image: ImagePatch,
    annotations: AnnotationSet,
    spec: FieldSpec,
    scale: int,
    field_fn: Callable[[FieldSpec], DisplacementField] = sample_gaussian_field,
) -> TrainingTriplet:
    """Build a triplet from an image and annotations already at the target scale."""
    if image.extent != spec.extent:
        raise DomainError(f"spec extent {spec.extent} != image extent {image.extent}")
    a = _clip_to_window(AnnotationSet(annotations.polygons, annotations.image_id, image.extent),
                        image.extent, 2 * TRIPLET_CAP_PX + 2)
    f = field_fn(spec)
    moved = warp_annotations_forward(a, f)
    return TrainingTriplet(
        image=image,
        misaligned_raster=rasterize_triple(moved, image.extent),
        target_field=f,
        aligned_raster=rasterize_triple(a, image.extent),
        scale=scale,
    )


def build_triplet(image: ImagePatch, annotations: AnnotationSet, spec: FieldSpec, scale: int,
                  field_fn=sample_gaussian_field) -> TrainingTriplet:
    """Downsample (image, annotations) by ``scale`` and deform them with a field drawn from ``spec``.

    ``spec`` is expressed at the downsampled resolution; its cap must not exceed
    the network's 4 px output range.
    """
    if scale not in SCALE_FACTORS:
        raise ConfigError(f"scale must be one of {SCALE_FACTORS}")
    if spec.amplitude_cap > net.DISP_BOUND_PX:
        raise ConfigError(f"triplet cap {spec.amplitude_cap} exceeds {net.DISP_BOUND_PX} px")
    img = downsample_raster(image, scale)
    ann = annotations.scaled(1.0 / scale, img.extent)
    return triplet_at_level(img, ann, spec, scale, field_fn)


def loss_displacement(pred: DisplacementField, target: DisplacementField) -> float:
    """Sum over pixels of the squared Euclidean error between two fields."""
    if pred.extent != target.extent:
        raise DomainError(f"field extents differ: {pred.extent} vs {target.extent}")
    d = pred.vectors - target.vectors
    return float((d * d).sum())


def loss_segmentation(logits: np.ndarray, target: RasterTriple) -> float:
    """Mean binary cross-entropy of (3, H, W) logits against the boolean raster."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape != target.channels.shape:
        raise DomainError(f"logits {z.shape} do not match target {target.channels.shape}")
    t = target.as_float()
    return float((np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean())


def total_loss_fn(target_disp: np.ndarray, target_seg: np.ndarray, seg_weight: float):
    """Batch loss: mean per-sample displacement loss plus weighted segmentation loss."""
    n = target_disp.shape[0]

    def fn(disp, seg):
        d = ad.scale(ad.sum_squared_error(disp, target_disp), 1.0 / n)
        if seg_weight == 0:
            return d
        return ad.add(d, ad.scale(ad.bce_with_logits_mean(seg, target_seg), seg_weight))

    return fn


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    model: net.ModelParams,
    grads: dict[str, np.ndarray],
    config: TrainConfig,
    step_index: int,
    state: AdamState,
) -> net.ModelParams:
    """One bias-corrected adaptive-moment update; ``state`` carries the moments."""
    if step_index < 1:
        raise ConfigError("step_index starts at 1")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient in {name} at step {step_index}", model)
    b1, b2, lr = config.beta1, config.beta2, config.learning_rate
    new = {}
    for name, p in model.params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** step_index)
        vhat = v / (1 - b2 ** step_index)
        new[name] = p - lr * mhat / (np.sqrt(vhat) + config.adam_eps)
    return net.ModelParams(model.descriptor, new, model.scale)


@dataclass
class ScaleLevel:
    image: ImagePatch
    annotations: AnnotationSet


def _crop(level: ScaleLevel, top: int, left: int, size: int) -> tuple[ImagePatch, AnnotationSet]:
    img = ImagePatch(level.image.pixels[:, top:top + size, left:left + size])
    ann = level.annotations.translated(-left, -top, (size, size))
    return img, ann


def _sample_patch(level: ScaleLevel, size: int, rng: np.random.Generator, positive_prob: float):
    h, w = level.image.extent
    polys = level.annotations.polygons
    if polys and rng.random() < positive_prob:
        c = polys[rng.integers(len(polys))].vertices.mean(axis=0)
        top = int(np.clip(np.floor(c[1]) - rng.integers(size), 0, h - size))
        left = int(np.clip(np.floor(c[0]) - rng.integers(size), 0, w - size))
    else:
        top = int(rng.integers(h - size + 1))
        left = int(rng.integers(w - size + 1))
    return _crop(level, top, left, size)


def dihedral(image: ImagePatch, ann: AnnotationSet, k: int) -> tuple[ImagePatch, AnnotationSet]:
    """One of the 8 flips/transposes of a square patch; bit 0 flips x, bit 1 flips y, bit 2 transposes."""
    px = image.pixels
    n = px.shape[-1] - 1
    v = ann.all_vertices().copy()
    if k & 4:
        px, v = px.transpose(0, 2, 1), v[:, ::-1]
    if k & 1:
        px, v[:, 0] = px[:, :, ::-1], n - v[:, 0]
    if k & 2:
        px, v[:, 1] = px[:, ::-1, :], n - v[:, 1]
    return ImagePatch(np.ascontiguousarray(px)), ann.with_vertices(v)


def make_batch(
    levels: Sequence[ScaleLevel],
    scale: int,
    config: TrainConfig,
    seed: int,
    field_fn=sample_gaussian_field,
) -> list[TrainingTriplet]:
    """Deterministic batch of triplets for one optimizer step."""
    rng = make_rng(seed)
    out = []
    for k in range(config.batch_size):
        level = levels[int(rng.integers(len(levels)))]
        size = min(config.patch_size, *level.image.extent)
        img, ann = _sample_patch(level, size, rng, config.positive_patch_prob)
        if config.augment:
            img, ann = dihedral(img, ann, int(rng.integers(8)))
        spec = FieldSpec(size, size, config.triplet_cap,
                         max(4.0, size * config.correlation_fraction), derive_seed(seed, k))
        out.append(triplet_at_level(img, ann, spec, scale, field_fn))
    return out


def stack_batch(batch: Sequence[TrainingTriplet], dtype) -> tuple[np.ndarray, ...]:
    image = np.stack([t.image.pixels for t in batch]).astype(dtype)
    raster = np.stack([t.misaligned_raster.channels for t in batch]).astype(dtype)
    disp = np.stack([np.moveaxis(t.target_field.vectors, -1, 0) for t in batch]).astype(dtype)
    seg = np.stack([t.aligned_raster.channels for t in batch]).astype(dtype)
    return image, raster, disp, seg


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def totals(self) -> np.ndarray:
        return np.array([r[3] for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "disp_loss", "seg_loss", "total", "wall_ms"])
            for step, d, s, t, ms in self.rows:
                w.writerow([step, repr(d), repr(s), repr(t), f"{ms:.1f}"])


def prepare_levels(scenes: Sequence[tuple[ImagePatch, AnnotationSet]], scale: int) -> list[ScaleLevel]:
    levels = []
    for image, ann in scenes:
        img = downsample_raster(image, scale)
        levels.append(ScaleLevel(img, ann.scaled(1.0 / scale, img.extent)))
    return levels


def train_scale_model(
    scenes: Sequence[tuple[ImagePatch, AnnotationSet]],
    scale: int,
    config: TrainConfig,
    seed: int,
    init: net.ModelParams | None = None,
    field_fn=sample_gaussian_field,
) -> tuple[net.ModelParams, TrainLog]:
    """Train one network for downscaling factor ``scale``."""
    dtype = np.dtype(config.dtype)
    model = init if init is not None else net.init_model(
        config.descriptor, derive_seed(seed, 0), scale, dtype)
    model = net.ModelParams(model.descriptor, {k: v.astype(dtype) for k, v in model.params.items()}, scale)
    levels = prepare_levels(scenes, scale)
    logbook, state = TrainLog(), AdamState()
    if config.steps == 0 or not levels:
        return model, logbook
    mult = 2 ** model.descriptor.depth
    for lv in levels:
        if min(config.patch_size, *lv.image.extent) % mult:
            raise DomainError(f"scaled extent {lv.image.extent} incompatible with depth {model.descriptor.depth}")
    for step in range(1, config.steps + 1):
        t0 = time.perf_counter()
        batch = make_batch(levels, scale, config, derive_seed(seed, 1, step), field_fn)
        image, raster, disp_t, seg_t = stack_batch(batch, dtype)
        loss_fn = total_loss_fn(disp_t, seg_t, config.seg_loss_weight)
        loss, grads, out = net.loss_and_grads(model, image, raster, loss_fn)
        disp_loss = float(((out.disp - disp_t) ** 2).sum() / len(batch))
        seg_loss = (loss - disp_loss) / config.seg_loss_weight if config.seg_loss_weight else 0.0
        if not np.isfinite(loss):
            raise TrainingDivergence(f"non-finite loss at step {step} (scale 1/{scale})", model)
        model = optimizer_step(model, grads, config, step, state)
        logbook.rows.append((step, disp_loss, seg_loss, loss, 1000 * (time.perf_counter() - t0)))
        if step % 100 == 0:
            log.info("scale 1/%d step %d loss %.3f", scale, step, loss)
    return model, logbook


def train_scale_models(
    scenes: Sequence[tuple[ImagePatch, AnnotationSet]],
    config: TrainConfig,
    seed: int | None = None,
    init: dict[int, net.ModelParams] | None = None,
    field_fn=sample_gaussian_field,
) -> tuple[dict[int, net.ModelParams], dict[int, TrainLog]]:
    """Train the four per-scale models independently (coarse to fine)."""
    seed = config.master_seed if seed is None else seed
    models, logs = {}, {}
    for scale in SCALE_FACTORS:
        models[scale], logs[scale] = train_scale_model(
            scenes, scale, config, derive_seed(seed, scale),
            None if init is None else init.get(scale), field_fn)
    return models, logs


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
