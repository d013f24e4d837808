"""Command-line entry point: ``polyalign {synth,run,eval,gradcheck,align}``.

Configuration is an INI file (see README for every key). Command-line flags
override the matching config entries.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import gradcheck, net
from .dataset import LoadError, SceneSpec, generate_scene, load_annotations, load_dataset, save_annotations, write_scenes
from .deform import derive_seed
from .geometry import ConfigError, DomainError
from .metrics import (
    QUANTILES,
    RoundCurve,
    default_thresholds,
    distances_array,
    emit_report,
    load_ground_truth,
    summarize,
    vertex_distances,
)
from .pipeline import MODES, AlignmentModel, AlignOptions, RoundAborted, align_multiresolution, run_multiround
from .raster import SCALE_FACTORS
from .training import TrainConfig, TrainingDivergence

log = logging.getLogger("polyalign")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


@dataclass
class ExperimentConfig:
    scenes: int = 8
    scene: SceneSpec = field(default_factory=SceneSpec)
    manifest: Path | None = None
    training: TrainConfig = field(default_factory=TrainConfig)
    rounds: int = 2
    mode: str = "standard"
    seed: int | None = None
    align: AlignOptions = field(default_factory=AlignOptions)
    thresholds: np.ndarray = field(default_factory=default_thresholds)
    svg: bool = True
    out: Path = Path("out")
    threads: int = 1
    deterministic: bool = False

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.rounds < 1 or self.scenes < 0 or self.threads < 1:
            raise ConfigError("rounds >= 1, scenes >= 0 and threads >= 1 required")
        if self.deterministic and self.seed is None:
            raise ConfigError("--deterministic needs an explicit seed ([pipeline] seed or --seed)")
        if self.manifest is not None and not self.manifest.exists():
            raise ConfigError(f"manifest {self.manifest} does not exist")

    @property
    def master_seed(self) -> int:
        return 0 if self.seed is None else self.seed


def _typed(cls, section: configparser.SectionProxy, skip=()) -> dict:
    """Convert the keys of ``section`` to the field types of dataclass ``cls``."""
    out = {}
    known = {f.name: f for f in fields(cls)}
    for key, raw in section.items():
        if key in skip:
            continue
        if key not in known:
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        default = getattr(cls(), key)
        try:
            if isinstance(default, bool):
                out[key] = section.getboolean(key)
            elif isinstance(default, int):
                out[key] = int(raw)
            elif isinstance(default, float) or default is None:
                out[key] = None if raw.strip().lower() == "none" else float(raw)
            elif isinstance(default, tuple):
                out[key] = tuple(type(default[0])(x) for x in raw.replace(",", " ").split())
            else:
                out[key] = raw.strip()
        except ValueError as exc:
            raise ConfigError(f"[{section.name}] {key} = {raw!r}: {exc}") from exc
    return out


SECTIONS = ("dataset", "training", "pipeline", "metrics", "output")


def load_config(path=None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is None:
        return cfg
    path = Path(path)
    cp = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{name}]")
    if cp.has_section("dataset"):
        sec = cp["dataset"]
        if "manifest" in sec:
            cfg.manifest = (path.parent / sec["manifest"]).resolve()
        if "scenes" in sec:
            cfg.scenes = sec.getint("scenes")
        cfg.scene = SceneSpec(**_typed(SceneSpec, sec, skip=("manifest", "scenes")))
    if cp.has_section("training"):
        cfg.training = TrainConfig(**_typed(TrainConfig, cp["training"]))
    if cp.has_section("pipeline"):
        sec = cp["pipeline"]
        own = {"rounds", "mode", "seed", "threads"}
        cfg.align = AlignOptions(**_typed(AlignOptions, sec, skip=own))
        cfg.rounds = sec.getint("rounds", cfg.rounds)
        cfg.mode = sec.get("mode", cfg.mode)
        cfg.threads = sec.getint("threads", cfg.threads)
        if "seed" in sec:
            cfg.seed = sec.getint("seed")
    if cp.has_section("metrics"):
        sec = cp["metrics"]
        cfg.thresholds = default_thresholds(sec.getint("tau_count", 64), sec.getfloat("tau_min", 0.125),
                                            sec.getfloat("tau_max", 64.0))
        cfg.svg = sec.getboolean("svg", True)
    if cp.has_section("output") and "dir" in cp["output"]:
        cfg.out = (path.parent / cp["output"]["dir"]).resolve()
    return cfg


def apply_flags(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "mode", None):
        cfg.mode = args.mode
    if getattr(args, "rounds", None) is not None:
        cfg.rounds = args.rounds
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    if getattr(args, "out", None):
        cfg.out = Path(args.out)
    cfg.deterministic = bool(getattr(args, "deterministic", False))
    if cfg.deterministic:
        cfg.threads = 1
    cfg.training = replace(cfg.training, master_seed=cfg.master_seed)
    cfg.validate()
    return cfg


def synth_dataset(cfg: ExperimentConfig, out_dir) -> Path:
    scenes = []
    for k in range(cfg.scenes):
        spec = replace(cfg.scene, seed=derive_seed(cfg.scene.seed, cfg.master_seed, k))
        scenes.append(generate_scene(spec, f"scene{k:03d}"))
    return write_scenes(scenes, out_dir)


def cmd_synth(cfg: ExperimentConfig) -> int:
    manifest = synth_dataset(cfg, cfg.out)
    print(f"wrote {cfg.scenes} scenes, manifest {manifest}")
    return EXIT_OK


def _evaluator(truth):
    def evaluate(annotations):
        return {k: summarize(distances_array(vertex_distances(a, truth[k]))) for k, a in annotations.items()}
    return evaluate


def _pooled(states, truth) -> list[np.ndarray]:
    return [np.concatenate([distances_array(vertex_distances(s.annotations[k], truth[k]))
                            for k in sorted(s.annotations)]) for s in states]


def print_quantile_table(curves: list[RoundCurve], stream=None) -> None:
    stream = stream or sys.stdout
    print(f"{'round':>5} {'mode':>9} " + " ".join(f"{'q' + str(q):>8}" for q in QUANTILES) + f" {'median/r0':>10}",
          file=stream)
    base = np.median(curves[0].distances)
    for c in curves:
        qs = np.percentile(c.distances, QUANTILES)
        ratio = np.median(c.distances) / base if base > 0 else float("nan")
        print(f"{c.round:>5} {c.mode:>9} " + " ".join(f"{q:8.3f}" for q in qs) + f" {ratio:10.3f}", file=stream)


def cmd_run(cfg: ExperimentConfig) -> int:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    manifest = cfg.manifest or synth_dataset(cfg, out / "data")
    data = load_dataset(manifest)
    truth = load_ground_truth(manifest)
    if set(truth) != {d.image_id for d in data}:
        log.warning("ground truth missing for some images; metrics are skipped")
        truth = {}
    evaluate = _evaluator(truth) if truth else None
    try:
        states = run_multiround(data, cfg.rounds, cfg.mode, cfg.training, out, evaluate,
                                options=cfg.align, seed=cfg.master_seed, threads=cfg.threads)
        code = EXIT_OK
    except RoundAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        states, code = exc.states, EXIT_DIVERGED
    if truth:
        curves = [RoundCurve(s.round, cfg.mode, d) for s, d in zip(states, _pooled(states, truth))]
        emit_report(curves, out / "report", cfg.thresholds, cfg.svg)
        print_quantile_table(curves)
    return code


def _annotation_pairs(eval_path: Path, gt_path: Path):
    if eval_path.is_dir() != gt_path.is_dir():
        raise ConfigError("eval and gt must both be files or both be directories")
    if not eval_path.is_dir():
        return [(eval_path.stem, eval_path, gt_path)]
    pairs = []
    for p in sorted(eval_path.glob("*.json")):
        q = gt_path / p.name
        if not q.exists():
            raise LoadError(f"no ground truth {q} for {p}")
        pairs.append((p.stem, p, q))
    return pairs


def cmd_eval(eval_path, gt_path, cfg: ExperimentConfig) -> int:
    rows, all_d = [], []
    for name, p, q in _annotation_pairs(Path(eval_path), Path(gt_path)):
        recs = vertex_distances(load_annotations(p), load_annotations(q))
        rows.extend((name, r.polygon, r.vertex, r.distance) for r in recs)
        all_d.extend(r.distance for r in recs)
    if not all_d:
        raise DomainError("no vertices to evaluate")
    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.out / "distances.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "polygon", "vertex", "distance_px"])
        w.writerows([a, b, c, repr(d)] for a, b, c, d in rows)
    curves = [RoundCurve(0, "eval", np.array(all_d))]
    emit_report(curves, cfg.out, cfg.thresholds, cfg.svg)
    print_quantile_table(curves)
    return EXIT_OK


def cmd_gradcheck(corrupt: bool = False, stream=None) -> int:
    stream = stream or sys.stdout
    errs = {}
    for name, (build, xs) in gradcheck.op_cases().items():
        errs[name] = gradcheck.check_op(build, xs, corrupt=corrupt)
    if not corrupt:
        errs["network+loss (concat)"] = gradcheck.check_training_loss((4, 8), "concat", 8)
        errs["network+loss (dual)"] = gradcheck.check_training_loss((4, 8, 8), "dual", 16)
    worst = max(errs.values())
    for name, e in errs.items():
        print(f"{name:<24} max rel err {e:.3e}  {'ok' if e <= gradcheck.TOLERANCE else 'FAIL'}", file=stream)
    ok = worst <= gradcheck.TOLERANCE
    print(f"gradcheck {'PASS' if ok else 'FAIL'}: worst {worst:.3e} (tolerance {gradcheck.TOLERANCE:g})", file=stream)
    return EXIT_OK if ok else EXIT_CONFIG


def find_checkpoints(ckpt_dir: Path, round_index: int | None = None) -> dict[int, Path]:
    found = {}
    for p in ckpt_dir.rglob("r*_s*.ckpt"):
        r, s = p.stem[1:].split("_s")
        found.setdefault(int(r), {})[int(s)] = p
    if not found:
        raise LoadError(f"no checkpoints under {ckpt_dir}")
    r = max(found) if round_index is None else round_index
    if sorted(found.get(r, {})) != sorted(SCALE_FACTORS):
        raise LoadError(f"round {r} under {ckpt_dir} lacks one of the scales {SCALE_FACTORS}")
    return found[r]


def cmd_align(cfg: ExperimentConfig, ckpt_dir, round_index=None) -> int:
    if cfg.manifest is None:
        raise ConfigError("align needs [dataset] manifest in the config")
    paths = find_checkpoints(Path(ckpt_dir), round_index)
    model = AlignmentModel({f: net.load_checkpoint(p) for f, p in paths.items()})
    (cfg.out / "annotations").mkdir(parents=True, exist_ok=True)
    for img in load_dataset(cfg.manifest):
        out = align_multiresolution(model, img.image, img.annotations, cfg.align)
        save_annotations(out, cfg.out / "annotations" / f"{img.image_id}.json")
    print(f"aligned annotations written to {cfg.out / 'annotations'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--threads", type=int)
    common.add_argument("--deterministic", action="store_true", help="single thread; requires explicit seeds")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="polyalign", description="Multi-round polygon-to-image alignment.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    run = sub.add_parser("run", parents=[common], help="multi-round training and alignment with reports")
    run.add_argument("--mode", choices=MODES)
    run.add_argument("--rounds", type=int)
    ev = sub.add_parser("eval", parents=[common], help="distance CDF of annotations against ground truth")
    ev.add_argument("annotations", help="annotation JSON file or directory")
    ev.add_argument("ground_truth", help="ground-truth JSON file or directory")
    gc = sub.add_parser("gradcheck", help="finite-difference check of every op and the training loss")
    gc.add_argument("--corrupt", action="store_true", help="negative control: perturb analytic gradients")
    al = sub.add_parser("align", parents=[common], help="apply saved per-scale checkpoints to a dataset")
    al.add_argument("--checkpoints", required=True, help="directory searched for r<R>_s<F>.ckpt files")
    al.add_argument("--round", type=int, help="round to load (default: latest)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.corrupt)
        cfg = apply_flags(load_config(args.config), args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "eval":
            return cmd_eval(args.annotations, args.ground_truth, cfg)
        return cmd_align(cfg, args.checkpoints, args.round)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LoadError, DomainError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
