"""Polygon annotations, displacement fields and the vertex warping operators.

Coordinate convention used across the package: ``x`` runs rightward (column),
``y`` runs downward (row), and grid node ``(i, j)`` sits at the pixel center
``(x=j, y=i)``. Displacement vectors are stored as ``(dx, dy)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

FIELD_MAGIC = b"DFLD"
OVERHANG_PX = 64.0
UPSAMPLE_FACTORS = (1, 2, 4, 8)


class DomainError(ValueError):
    """Raised when an operation is called outside its valid domain."""


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Polygon:
    vertices: np.ndarray  # (n, 2) of (x, y)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 2)
        if len(v) < 3:
            raise DomainError(f"polygon needs >= 3 vertices, got {len(v)}")
        if not np.all(np.isfinite(v)):
            raise DomainError("polygon vertices must be finite")
        object.__setattr__(self, "vertices", _frozen(v))

    def __len__(self) -> int:
        return len(self.vertices)

    def __eq__(self, other):
        return isinstance(other, Polygon) and np.array_equal(self.vertices, other.vertices)

    __hash__ = None


@dataclass(frozen=True)
class AnnotationSet:
    polygons: tuple[Polygon, ...]
    image_id: str = ""
    extent: tuple[int, int] = (0, 0)  # (H, W)

    def __post_init__(self):
        polys = tuple(p if isinstance(p, Polygon) else Polygon(p) for p in self.polygons)
        object.__setattr__(self, "polygons", polys)
        object.__setattr__(self, "extent", (int(self.extent[0]), int(self.extent[1])))

    def __len__(self) -> int:
        return len(self.polygons)

    def __eq__(self, other):
        return (
            isinstance(other, AnnotationSet)
            and self.image_id == other.image_id
            and self.extent == other.extent
            and len(self.polygons) == len(other.polygons)
            and all(a == b for a, b in zip(self.polygons, other.polygons))
        )

    __hash__ = None

    @property
    def vertex_counts(self) -> list[int]:
        return [len(p) for p in self.polygons]

    def all_vertices(self) -> np.ndarray:
        """Stack every vertex into a single ``(N, 2)`` array."""
        if not self.polygons:
            return np.zeros((0, 2))
        return np.concatenate([p.vertices for p in self.polygons])

    def with_vertices(self, flat: np.ndarray) -> "AnnotationSet":
        """Rebuild the set with the same structure from a stacked vertex array."""
        out, start = [], 0
        for n in self.vertex_counts:
            out.append(Polygon(flat[start:start + n]))
            start += n
        return AnnotationSet(tuple(out), self.image_id, self.extent)

    def scaled(self, factor: float, extent: tuple[int, int] | None = None) -> "AnnotationSet":
        if extent is None:
            extent = (int(round(self.extent[0] * factor)), int(round(self.extent[1] * factor)))
        return AnnotationSet(
            tuple(Polygon(p.vertices * factor) for p in self.polygons), self.image_id, extent
        )

    def translated(self, dx: float, dy: float, extent: tuple[int, int] | None = None) -> "AnnotationSet":
        off = np.array([dx, dy])
        return AnnotationSet(
            tuple(Polygon(p.vertices + off) for p in self.polygons),
            self.image_id,
            self.extent if extent is None else extent,
        )

    def validate(self) -> None:
        """Check the overhang invariant; raises ``DomainError`` on violation."""
        h, w = self.extent
        for k, p in enumerate(self.polygons):
            x, y = p.vertices[:, 0], p.vertices[:, 1]
            if (
                x.min() < -OVERHANG_PX or x.max() > w + OVERHANG_PX
                or y.min() < -OVERHANG_PX or y.max() > h + OVERHANG_PX
            ):
                raise DomainError(f"polygon {k} of {self.image_id!r} lies outside extent {self.extent}")

    def to_json_dict(self, decimals: int = 6) -> dict:
        return {
            "image_id": self.image_id,
            "extent": [self.extent[0], self.extent[1]],
            "polygons": [
                [[round(float(x), decimals), round(float(y), decimals)] for x, y in p.vertices]
                for p in self.polygons
            ],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "AnnotationSet":
        return cls(
            tuple(Polygon(np.asarray(p, dtype=np.float64)) for p in doc.get("polygons", [])),
            str(doc.get("image_id", "")),
            tuple(doc.get("extent", (0, 0))),
        )


@dataclass(frozen=True)
class DisplacementField:
    vectors: np.ndarray = field(repr=False)  # (H, W, 2) of (dx, dy)

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 2:
            raise DomainError(f"field vectors must be (H, W, 2), got {v.shape}")
        object.__setattr__(self, "vectors", _frozen(v))

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def extent(self) -> tuple[int, int]:
        return self.vectors.shape[0], self.vectors.shape[1]

    @property
    def dx(self) -> np.ndarray:
        return self.vectors[..., 0]

    @property
    def dy(self) -> np.ndarray:
        return self.vectors[..., 1]

    @classmethod
    def zeros(cls, height: int, width: int) -> "DisplacementField":
        return cls(np.zeros((height, width, 2)))

    @classmethod
    def constant(cls, height: int, width: int, dx: float, dy: float) -> "DisplacementField":
        v = np.empty((height, width, 2))
        v[..., 0] = dx
        v[..., 1] = dy
        return cls(v)

    @classmethod
    def from_function(cls, height: int, width: int, fn) -> "DisplacementField":
        """Evaluate ``fn(x, y) -> (dx, dy)`` (vectorized) on every grid node."""
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        dx, dy = fn(xx, yy)
        return cls(np.stack(np.broadcast_arrays(dx, dy), axis=-1))

    def __add__(self, other: "DisplacementField") -> "DisplacementField":
        return DisplacementField(self.vectors + other.vectors)

    def __mul__(self, k: float) -> "DisplacementField":
        return DisplacementField(self.vectors * k)

    __rmul__ = __mul__


def sample_points(f: DisplacementField, points: np.ndarray) -> np.ndarray:
    """Bilinearly sample ``f`` at an ``(N, 2)`` array of ``(x, y)`` points.

    Points outside the grid are clamped to the boundary first.
    """
    h, w = f.extent
    if h == 0 or w == 0:
        raise DomainError("cannot sample an empty field")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x = np.clip(pts[:, 0], 0.0, w - 1)
    y = np.clip(pts[:, 1], 0.0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = (x - x0)[:, None]
    ty = (y - y0)[:, None]
    v = f.vectors
    top = v[y0, x0] * (1 - tx) + v[y0, x1] * tx
    bottom = v[y1, x0] * (1 - tx) + v[y1, x1] * tx
    return top * (1 - ty) + bottom * ty


def bilinear_sample(f: DisplacementField, p: Sequence[float]) -> tuple[float, float]:
    dx, dy = sample_points(f, np.asarray(p, dtype=np.float64).reshape(1, 2))[0]
    return float(dx), float(dy)


def _check_extent(a: AnnotationSet, f: DisplacementField) -> None:
    if tuple(a.extent) != f.extent:
        raise DomainError(f"annotation extent {a.extent} does not match field extent {f.extent}")


def warp_annotations_forward(a: AnnotationSet, f: DisplacementField) -> AnnotationSet:
    """Move each vertex ``v`` to ``v + f(v)``."""
    _check_extent(a, f)
    if not a.polygons:
        return a
    v = a.all_vertices()
    return a.with_vertices(v + sample_points(f, v))


@dataclass
class ConvergenceReport:
    iterations: int
    max_residual: float
    unconverged: list[tuple[int, int]]  # (polygon index, vertex index)

    @property
    def converged(self) -> bool:
        return not self.unconverged


def invert_points(
    targets: np.ndarray,
    f: DisplacementField,
    tol: float = 0.01,
    max_iter: int = 10,
    method: str = "fixed_point",
) -> tuple[np.ndarray, np.ndarray, int]:
    """Solve ``x + f(x) = target`` for each target point.

    Returns ``(points, residual_norms, iterations)``. ``method="first_order"``
    takes a single step ``x = target - f(target)``.
    """
    if tol <= 0 or max_iter < 1:
        raise ConfigError("tol must be > 0 and max_iter >= 1")
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    x = t.copy()
    if method == "first_order":
        x = t - sample_points(f, t)
        res = np.linalg.norm(x + sample_points(f, x) - t, axis=1)
        return x, res, 1
    if method != "fixed_point":
        raise ConfigError(f"unknown inversion method {method!r}")
    res = np.linalg.norm(x + sample_points(f, x) - t, axis=1) if len(t) else np.zeros(0)
    it = 0
    while it < max_iter and len(t) and res.max() > tol:
        x = t - sample_points(f, x)
        res = np.linalg.norm(x + sample_points(f, x) - t, axis=1)
        it += 1
    return x, res, it


def align_annotations_inverse(
    a_misaligned: AnnotationSet,
    f: DisplacementField,
    tol: float = 0.01,
    max_iter: int = 10,
    method: str = "fixed_point",
    return_report: bool = False,
):
    """Undo a forward warp: find ``v`` with ``v + f(v) = v'`` for every vertex.

    Non-converged vertices keep their last iterate and are listed in the
    report (returned when ``return_report`` is set).
    """
    _check_extent(a_misaligned, f)
    if not a_misaligned.polygons:
        out, report = a_misaligned, ConvergenceReport(0, 0.0, [])
    else:
        x, res, it = invert_points(a_misaligned.all_vertices(), f, tol, max_iter, method)
        bad = np.flatnonzero(res > tol)
        owners = np.repeat(np.arange(len(a_misaligned)), a_misaligned.vertex_counts)
        starts = np.concatenate([[0], np.cumsum(a_misaligned.vertex_counts)[:-1]])
        unconverged = [(int(owners[k]), int(k - starts[owners[k]])) for k in bad]
        out = a_misaligned.with_vertices(x)
        report = ConvergenceReport(it, float(res.max()), unconverged)
    return (out, report) if return_report else out


def upsample_field(f: DisplacementField, factor: int) -> DisplacementField:
    """Bilinearly resample to ``factor`` times the extent, scaling vectors by ``factor``.

    Fine pixel ``X`` maps to coarse coordinate ``X / factor``.
    """
    if factor not in UPSAMPLE_FACTORS:
        raise ConfigError(f"upsample factor must be one of {UPSAMPLE_FACTORS}, got {factor}")
    if factor == 1:
        return f
    h, w = f.extent
    yy, xx = np.mgrid[0:h * factor, 0:w * factor].astype(np.float64) / factor
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    v = sample_points(f, pts).reshape(h * factor, w * factor, 2)
    return DisplacementField(v * factor)


def field_stats(f: DisplacementField) -> dict:
    if f.height == 0 or f.width == 0:
        raise DomainError("empty field")
    return {
        "max_abs": float(np.abs(f.vectors).max()),
        "mean_dx": float(f.dx.mean()),
        "mean_dy": float(f.dy.mean()),
    }


def lipschitz_estimate(f: DisplacementField) -> float:
    """Largest finite-difference slope of either component along either axis."""
    v = f.vectors
    gx = np.abs(np.diff(v, axis=1)).max() if f.width > 1 else 0.0
    gy = np.abs(np.diff(v, axis=0)).max() if f.height > 1 else 0.0
    return float(max(gx, gy))


def write_field(f: DisplacementField, path) -> None:
    h, w = f.extent
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC + struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(f.vectors, dtype="<f4").tobytes())


def read_field(path) -> DisplacementField:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FIELD_MAGIC:
        raise DomainError(f"{path}: bad field magic {blob[:4]!r}")
    h, w = struct.unpack("<II", blob[4:12])
    data = np.frombuffer(blob[12:], dtype="<f4")
    if data.size != h * w * 2:
        raise DomainError(f"{path}: expected {h * w * 2} floats, found {data.size}")
    return DisplacementField(data.reshape(h, w, 2).astype(np.float64))
