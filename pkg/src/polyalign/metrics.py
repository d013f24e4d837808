"""Vertex-distance accuracy curves against ground-truth annotations."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import AnnotationSet, DomainError

QUANTILES = (50, 90, 95)


@dataclass(frozen=True)
class DistanceRecord:
    distance: float
    polygon: int
    vertex: int


def vertex_distances(eval_a: AnnotationSet, gt_a: AnnotationSet) -> list[DistanceRecord]:
    """Euclidean distance per corresponding vertex (same polygon, same index)."""
    if eval_a.vertex_counts != gt_a.vertex_counts:
        raise DomainError(
            f"structure mismatch: {len(eval_a)} vs {len(gt_a)} polygons or differing vertex counts")
    out = []
    for k, (pe, pg) in enumerate(zip(eval_a.polygons, gt_a.polygons)):
        d = np.linalg.norm(pe.vertices - pg.vertices, axis=1)
        out.extend(DistanceRecord(float(x), k, i) for i, x in enumerate(d))
    return out


def distances_array(records: Iterable[DistanceRecord]) -> np.ndarray:
    return np.array([r.distance for r in records], dtype=np.float64)


def default_thresholds(n: int = 64, lo: float = 0.125, hi: float = 64.0) -> np.ndarray:
    return np.geomspace(lo, hi, n)


def accuracy_cdf(records, thresholds: Sequence[float]) -> list[tuple[float, float]]:
    """Fraction of records with distance strictly below each threshold."""
    d = records if isinstance(records, np.ndarray) else distances_array(records)
    if d.size == 0:
        raise DomainError("no distance records")
    t = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(t) < 0):
        raise DomainError("thresholds must be ascending")
    counts = np.searchsorted(np.sort(d), t, side="left")
    return [(float(tau), float(c / d.size)) for tau, c in zip(t, counts)]


def quantiles(distances: np.ndarray, qs: Sequence[float] = QUANTILES) -> dict[float, float]:
    return {q: float(np.percentile(distances, q)) for q in qs}


@dataclass
class RoundCurve:
    round: int
    mode: str
    distances: np.ndarray


def emit_report(curves: Sequence[RoundCurve], out_dir, thresholds=None, svg: bool = True) -> list[Path]:
    """Write ``cdf.csv``, ``quantiles.csv`` and optionally ``cdf.svg``."""
    if not curves:
        raise DomainError("emit_report needs at least one round")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    thresholds = default_thresholds() if thresholds is None else thresholds
    written = [out / "cdf.csv", out / "quantiles.csv"]
    with open(written[0], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "mode", "tau_px", "fraction"])
        for c in curves:
            for tau, frac in accuracy_cdf(c.distances, thresholds):
                w.writerow([c.round, c.mode, repr(tau), repr(frac)])
    with open(written[1], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "mode", "q50", "q90", "q95"])
        for c in curves:
            q = quantiles(c.distances)
            w.writerow([c.round, c.mode] + [repr(q[k]) for k in QUANTILES])
    if svg:
        written.append(out / "cdf.svg")
        written[-1].write_text(render_svg(curves, thresholds), encoding="utf-8")
    return written


def read_cdf_csv(path) -> list[tuple[int, str, float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["round"]), r["mode"], float(r["tau_px"]), float(r["fraction"])) for r in rows]


_COLORS = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2")


def render_svg(curves: Sequence[RoundCurve], thresholds, width: int = 480, height: int = 320) -> str:
    """Accuracy curves on a log-threshold axis."""
    t = np.asarray(thresholds, dtype=np.float64)
    pad = 40
    lx0, lx1 = np.log2(t[0]), np.log2(t[-1])

    def px(tau, frac):
        x = pad + (np.log2(tau) - lx0) / max(lx1 - lx0, 1e-12) * (width - 2 * pad)
        y = height - pad - frac * (height - 2 * pad)
        return f"{x:.2f},{y:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 8}" font-size="11" text-anchor="middle">threshold (px, log scale)</text>',
    ]
    for k, c in enumerate(curves):
        pts = " ".join(px(tau, f) for tau, f in accuracy_cdf(c.distances, t))
        color = _COLORS[k % len(_COLORS)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{pad + 6}" y="{pad + 12 * (k + 1)}" font-size="10" fill="{color}">'
                     f'{c.mode} round {c.round}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def load_ground_truth(manifest_path) -> dict[str, AnnotationSet]:
    """Hidden ground truth for synthetic datasets, keyed by image id."""
    from .dataset import DatasetManifest, load_annotations

    manifest_path = Path(manifest_path)
    out = {}
    for e in DatasetManifest.read(manifest_path).entries:
        if e.true_annotations:
            out[e.image_id] = load_annotations(manifest_path.parent / e.true_annotations)
    return out


def summarize(distances: np.ndarray) -> dict[str, float]:
    q = quantiles(distances)
    return {"n": float(distances.size), "mean": float(distances.mean()),
            "q50": q[50], "q90": q[90], "q95": q[95], "max": float(distances.max())}
