"""Coarse-to-fine alignment and the multiple-rounds correction loop."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from . import net
from .dataset import LoadedImage, save_annotations
from .deform import derive_seed, noisier_spec, corrupt_annotations
from .geometry import AnnotationSet, ConfigError, DisplacementField, align_annotations_inverse, upsample_field, write_field
from .raster import SCALE_FACTORS, ImagePatch, downsample_raster, rasterize_triple
from .training import TrainConfig, TrainingDivergence, train_scale_models

log = logging.getLogger(__name__)

MODES = ("standard", "AS1", "AS2", "noisier")
MAX_PASS_CORRECTION_PX = sum(net.DISP_BOUND_PX * f for f in SCALE_FACTORS)  # 60 px per component

# A predictor is either trained parameters or a callable
# (image_s, raster_s, annotations_s, factor) -> DisplacementField at that scale.
Predictor = Union[net.ModelParams, Callable[..., DisplacementField]]


@dataclass
class AlignOptions:
    tol: float = 0.01
    max_iter: int = 10
    method: str = "fixed_point"  # or "first_order"
    reraster: bool = True  # False: rasterize at full resolution and max-pool


@dataclass
class AlignmentModel:
    models: dict[int, Predictor]
    round_index: int = 0

    def __post_init__(self):
        if sorted(self.models) != sorted(SCALE_FACTORS):
            raise ConfigError(f"need exactly one model per scale {SCALE_FACTORS}, got {sorted(self.models)}")


def predict_at_scale(model_s: Predictor, image_s, raster_s, annotations_s, factor: int) -> DisplacementField:
    if isinstance(model_s, net.ModelParams):
        if model_s.scale != factor:
            raise ConfigError(f"model trained for 1/{model_s.scale} applied at 1/{factor}")
        return net.predict_field(model_s, image_s, raster_s)
    return model_s(image_s, raster_s, annotations_s, factor)


def align_step_at_scale(
    model_s: Predictor,
    image: ImagePatch,
    annotations: AnnotationSet,
    scale: int,
    options: AlignOptions | None = None,
) -> AnnotationSet:
    """One coarse-to-fine step: predict at 1/``scale`` and move the full-resolution vertices."""
    options = options or AlignOptions()
    work = AnnotationSet(annotations.polygons, annotations.image_id, image.extent)
    image_s = downsample_raster(image, scale)
    ann_s = work.scaled(1.0 / scale, image_s.extent)
    if options.reraster:
        raster_s = rasterize_triple(ann_s, image_s.extent)
    else:
        raster_s = downsample_raster(rasterize_triple(work, image.extent), scale)
    field_s = predict_at_scale(model_s, image_s, raster_s, ann_s, scale)
    full = upsample_field(field_s, scale)
    out = align_annotations_inverse(work, full, options.tol, options.max_iter, options.method)
    return AnnotationSet(out.polygons, annotations.image_id, annotations.extent)


def align_multiresolution(
    m: AlignmentModel,
    image: ImagePatch,
    annotations: AnnotationSet,
    options: AlignOptions | None = None,
) -> AnnotationSet:
    """Apply the per-scale models at 1/8, 1/4, 1/2 and 1 in turn."""
    current = annotations
    for factor in SCALE_FACTORS:
        current = align_step_at_scale(m.models[factor], image, current, factor, options)
    return current


@dataclass
class RoundState:
    round: int
    annotations: dict[str, AnnotationSet]
    checkpoint_paths: list[Path] = field(default_factory=list)
    metrics: dict[str, dict] = field(default_factory=dict)
    trained: bool = False
    inference_input: str = ""


Trainer = Callable[[list[tuple[ImagePatch, AnnotationSet]], int, int, "AlignmentModel | None"], tuple]


def default_trainer(config: TrainConfig, log_dir_fn=None) -> Trainer:
    def trainer(scenes, round_index, seed, previous):
        init = None
        if config.warm_start and previous is not None:
            init = {f: p for f, p in previous.models.items() if isinstance(p, net.ModelParams)}
        models, logs = train_scale_models(scenes, config, seed, init)
        return AlignmentModel(models, round_index), logs

    return trainer


def _align_all(model, images: Sequence[LoadedImage], inputs: dict[str, AnnotationSet],
               options: AlignOptions, threads: int) -> dict[str, AnnotationSet]:
    def one(img):
        return img.image_id, align_multiresolution(model, img.image, inputs[img.image_id], options)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return dict(pool.map(one, images))
    return dict(map(one, images))


def run_multiround(
    dataset: Sequence[LoadedImage],
    rounds: int,
    mode: str = "standard",
    config: TrainConfig | None = None,
    out_dir=None,
    evaluate: Callable[[dict[str, AnnotationSet]], dict[str, dict]] | None = None,
    trainer: Trainer | None = None,
    options: AlignOptions | None = None,
    seed: int | None = None,
    threads: int = 1,
) -> list[RoundState]:
    """Alternate training on the current annotations and re-aligning.

    ``standard``: A_r = M_r(A_0); ``AS1``: A_r = M_r(A_{r-1}); ``AS2``: M_1 only,
    A_r = M_1(A_{r-1}); ``noisier``: corrupt A_0 by a 16 px field, then standard.
    ``evaluate`` receives each round's annotations and returns per-image metrics;
    ground truth stays on the caller's side.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    config = config or TrainConfig()
    options = options or AlignOptions()
    seed = config.master_seed if seed is None else seed
    trainer = trainer or default_trainer(config)
    out = Path(out_dir) if out_dir is not None else None

    a0 = {img.image_id: img.annotations for img in dataset}
    if mode == "noisier":
        noisy = {}
        for k, img in enumerate(dataset):
            h, w = img.annotations.extent
            noisy[img.image_id], f = corrupt_annotations(img.annotations, noisier_spec(h, w, derive_seed(seed, 7, k)))
            if out is not None:
                (out / "noisier").mkdir(parents=True, exist_ok=True)
                write_field(f, out / "noisier" / f"{img.image_id}.dfld")
        a0 = noisy

    states = [RoundState(0, dict(a0), inference_input="A0")]
    if out is not None:
        _persist_round(out, states[0], evaluate, audit=["round 0 original annotations"])

    model = None
    for r in range(1, rounds + 1):
        previous = states[-1].annotations
        audit = []
        state = RoundState(r, {})
        if mode != "AS2" or model is None:
            train_input = f"A{r - 1}"
            scenes = [(img.image, AnnotationSet(previous[img.image_id].polygons, img.image_id, img.image.extent))
                      for img in dataset]
            audit.append(f"train round={r} input={train_input} images={len(scenes)}")
            try:
                model, logs = trainer(scenes, r, derive_seed(seed, 100 + r), model)
            except TrainingDivergence as exc:
                log.error("round %d aborted: %s", r, exc)
                if out is not None:
                    rdir = out / "rounds" / f"r{r}"
                    rdir.mkdir(parents=True, exist_ok=True)
                    (rdir / "audit.log").write_text("\n".join(audit + [f"aborted: {exc}"]) + "\n")
                raise RoundAborted(states, exc) from exc
            state.trained = True
            if out is not None:
                state.checkpoint_paths = _save_models(out / "rounds" / f"r{r}", model, logs)
        else:
            audit.append(f"reuse model=M1 round={r}")
        model.round_index = r
        if mode in ("standard", "noisier"):
            source, inputs = "A0", states[0].annotations
        else:
            source, inputs = f"A{r - 1}", previous
        for img in dataset:
            audit.append(f"align image={img.image_id} model=M{r if state.trained else 1} input={source}")
        state.inference_input = source
        state.annotations = _align_all(model, dataset, inputs, options, threads)
        states.append(state)
        if out is not None:
            _persist_round(out, state, evaluate, audit)
        elif evaluate is not None:
            state.metrics = evaluate(state.annotations)
    return states


class RoundAborted(RuntimeError):
    """Training diverged; ``states`` holds the rounds completed before the failure."""

    def __init__(self, states, cause):
        super().__init__(f"round {len(states)} aborted: {cause}")
        self.states = states
        self.cause = cause


def _save_models(rdir: Path, model: AlignmentModel, logs) -> list[Path]:
    ck = rdir / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    paths = []
    for factor, m in model.models.items():
        if isinstance(m, net.ModelParams):
            p = ck / f"r{model.round_index}_s{factor}.ckpt"
            net.save_checkpoint(m, p)
            paths.append(p)
    for factor, lg in (logs or {}).items():
        lg.write_csv(rdir / f"train_s{factor}.csv")
    return paths


METRIC_COLUMNS = ("image_id", "n_vertices", "mean", "q50", "q90", "q95", "max")


def _persist_round(out: Path, state: RoundState, evaluate, audit: list[str]) -> None:
    rdir = out / "rounds" / f"r{state.round}"
    (rdir / "annotations").mkdir(parents=True, exist_ok=True)
    for image_id in sorted(state.annotations):
        save_annotations(state.annotations[image_id], rdir / "annotations" / f"{image_id}.json")
    (rdir / "audit.log").write_text("\n".join(audit) + "\n")
    if evaluate is not None:
        state.metrics = evaluate(state.annotations)
        with open(rdir / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for image_id in sorted(state.metrics):
                s = state.metrics[image_id]
                w.writerow([image_id, int(s["n"])] + [repr(s[k]) for k in METRIC_COLUMNS[2:]])


def max_vertex_movement(before: AnnotationSet, after: AnnotationSet) -> float:
    """Largest per-component vertex displacement between two structurally equal sets."""
    if not before.polygons:
        return 0.0
    return float(np.abs(after.all_vertices() - before.all_vertices()).max())
