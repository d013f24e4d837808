"""Smooth random displacement fields.

Each field channel is white Gaussian noise on a coarse lattice, bilinearly
interpolated to full resolution and rescaled so the largest component equals
an amplitude drawn uniformly from ``(0, amplitude_cap]``. All randomness goes
through numpy's PCG64 generator seeded from a ``SeedSequence``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .geometry import AnnotationSet, ConfigError, DisplacementField, warp_annotations_forward

DEFAULT_CAP_PX = 32.0
NOISIER_CAP_PX = 16.0


@dataclass(frozen=True)
class FieldSpec:
    height: int
    width: int
    amplitude_cap: float = DEFAULT_CAP_PX
    correlation_length: float | None = None  # defaults to H / 4
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"field extent must be positive, got {(self.height, self.width)}")
        if not 0 < self.amplitude_cap <= 64:
            raise ConfigError(f"amplitude_cap must lie in (0, 64], got {self.amplitude_cap}")
        if self.correlation_length is None:
            object.__setattr__(self, "correlation_length", max(4.0, self.height / 4))
        cl = self.correlation_length
        if not 4 <= cl <= max(4, min(self.height, self.width)):
            raise ConfigError(f"correlation_length {cl} outside [4, {min(self.height, self.width)}]")

    @property
    def extent(self) -> tuple[int, int]:
        return self.height, self.width

    def with_seed(self, seed: int) -> "FieldSpec":
        return FieldSpec(self.height, self.width, self.amplitude_cap, self.correlation_length, seed)

    def to_dict(self) -> dict:
        return asdict(self)


def derive_seed(master_seed: int, *index: int) -> int:
    """Stable 64-bit child seed for ``(master_seed, index...)``."""
    ss = np.random.SeedSequence([int(master_seed) & (2**64 - 1), *[int(i) for i in index]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed) & (2**64 - 1))))


def _lattice_weights(n_px: int, spacing: float) -> tuple[int, np.ndarray, np.ndarray, np.ndarray]:
    nodes = max(2, int(np.floor((n_px - 1) / spacing)) + 1)
    step = max(n_px - 1, 1) / (nodes - 1)
    pos = np.arange(n_px) / step
    i0 = np.minimum(np.floor(pos).astype(np.intp), nodes - 2)
    t = pos - i0
    return nodes, i0, i0 + 1, t


def sample_gaussian_field(spec: FieldSpec) -> DisplacementField:
    rng = make_rng(spec.seed)
    h, w = spec.extent
    ny, r0, r1, ty = _lattice_weights(h, spec.correlation_length)
    nx, c0, c1, tx = _lattice_weights(w, spec.correlation_length)
    coarse = rng.standard_normal((2, ny, nx))
    amplitude = spec.amplitude_cap * (1.0 - rng.random())  # uniform on (0, cap]
    # separable bilinear interpolation, rows then columns
    rows = coarse[:, r0, :] * (1 - ty)[None, :, None] + coarse[:, r1, :] * ty[None, :, None]
    full = rows[:, :, c0] * (1 - tx) + rows[:, :, c1] * tx
    peak = np.abs(full).max()
    if peak > 0:
        full *= amplitude / peak
    return DisplacementField(np.moveaxis(full, 0, -1))


def corrupt_annotations(a: AnnotationSet, spec: FieldSpec) -> tuple[AnnotationSet, DisplacementField]:
    """Warp ``a`` forward by a freshly sampled field; returns the field too."""
    if tuple(a.extent) != spec.extent:
        raise ConfigError(f"field spec extent {spec.extent} does not cover annotations {a.extent}")
    f = sample_gaussian_field(spec)
    return warp_annotations_forward(a, f), f


def noisier_spec(height: int, width: int, seed: int, correlation_length: float | None = None) -> FieldSpec:
    return FieldSpec(height, width, NOISIER_CAP_PX, correlation_length, seed)
