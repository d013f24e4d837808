"""Stand-in predictors with known answers, for exercising the alignment machinery."""

from __future__ import annotations

import numpy as np

from .geometry import DisplacementField, invert_points, upsample_field
from .net import DISP_BOUND_PX
from .raster import SCALE_FACTORS


def zero_predictor(image_s, raster_s, annotations_s, factor) -> DisplacementField:
    h, w = image_s.extent
    return DisplacementField.zeros(h, w)


class OraclePredictor:
    """Predicts the true remaining misalignment, clamped to the per-scale output range.

    ``noise_fields`` maps image id to the full-resolution field that produced the
    misaligned annotations (``v' = v + f(v)``). The oracle tracks where every
    full-resolution grid point currently sits and restarts from the noise field
    whenever a pass begins at the coarsest scale.
    """

    def __init__(self, noise_fields: dict[str, DisplacementField], bound: float = DISP_BOUND_PX):
        self.noise_fields = noise_fields
        self.bound = bound
        self._positions: dict[str, np.ndarray] = {}

    def _reset(self, image_id: str) -> np.ndarray:
        f = self.noise_fields[image_id]
        yy, xx = np.mgrid[0:f.height, 0:f.width].astype(np.float64)
        return np.stack([xx, yy], axis=-1) + f.vectors

    def __call__(self, image_s, raster_s, annotations_s, factor: int) -> DisplacementField:
        key = annotations_s.image_id
        if factor == SCALE_FACTORS[0] or key not in self._positions:
            self._positions[key] = self._reset(key)
        pos = self._positions[key]
        h, w = image_s.extent
        coarse = pos[::factor, ::factor][:h, :w]
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) * factor
        residual = (coarse - np.stack([xx, yy], axis=-1)) / factor
        g = DisplacementField(np.clip(residual, -self.bound, self.bound))
        full = upsample_field(g, factor)
        moved, _, _ = invert_points(pos.reshape(-1, 2), full, tol=1e-6, max_iter=100)
        self._positions[key] = moved.reshape(pos.shape)
        return g


def oracle_alignment_model(noise_fields: dict[str, DisplacementField]):
    from .pipeline import AlignmentModel

    oracle = OraclePredictor(noise_fields)
    return AlignmentModel({f: oracle for f in SCALE_FACTORS})


def zero_alignment_model():
    from .pipeline import AlignmentModel

    return AlignmentModel({f: zero_predictor for f in SCALE_FACTORS})
