import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyalign.deform import FieldSpec, sample_gaussian_field
from polyalign.geometry import (
    AnnotationSet,
    ConfigError,
    DisplacementField,
    DomainError,
    Polygon,
    align_annotations_inverse,
    bilinear_sample,
    field_stats,
    lipschitz_estimate,
    read_field,
    upsample_field,
    warp_annotations_forward,
    write_field,
)


def dx_field(values):
    v = np.asarray(values, dtype=float)
    return DisplacementField(np.stack([v, np.zeros_like(v)], axis=-1))


def square_set(extent=(32, 32)):
    return AnnotationSet(
        (Polygon([[4, 4], [12, 4], [12, 10], [4, 10]]), Polygon([[20.5, 18], [27, 19.25], [22, 26]])),
        "sq", extent)


def bilinear_oracle(grid, x, y):
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, grid.shape[1] - 1), min(y0 + 1, grid.shape[0] - 1)
    tx, ty = x - x0, y - y0
    return ((1 - tx) * (1 - ty) * grid[y0, x0] + tx * (1 - ty) * grid[y0, x1]
            + (1 - tx) * ty * grid[y1, x0] + tx * ty * grid[y1, x1])


class TestBilinearSample:
    def test_center_of_cell(self):
        assert bilinear_sample(dx_field([[0, 2], [4, 6]]), (0.5, 0.5))[0] == 3.0

    def test_grid_node_exact(self):
        rng = np.random.default_rng(1)
        f = DisplacementField(rng.normal(size=(3, 4, 2)))
        assert bilinear_sample(f, (1, 0)) == tuple(f.vectors[0, 1])

    def test_quarter_point_matches_weight_formula(self):
        grid = np.array([[0.0, 2.0], [4.0, 6.0]])
        expected = bilinear_oracle(grid, 0.25, 0.0)
        assert expected == 0.5
        assert bilinear_sample(dx_field(grid), (0.25, 0.0))[0] == expected

    def test_random_points_match_oracle(self):
        rng = np.random.default_rng(2)
        grid = rng.normal(size=(5, 7))
        f = dx_field(grid)
        for x, y in rng.uniform([0, 0], [6, 4], size=(50, 2)):
            assert bilinear_sample(f, (x, y))[0] == pytest.approx(bilinear_oracle(grid, x, y), abs=1e-12)

    def test_clamps_outside_domain(self):
        f = dx_field([[0, 2], [4, 6]])
        assert bilinear_sample(f, (-3, -3))[0] == 0.0
        assert bilinear_sample(f, (10, 0.5))[0] == 4.0

    def test_empty_field(self):
        with pytest.raises(DomainError):
            bilinear_sample(DisplacementField(np.zeros((0, 3, 2))), (0, 0))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 5), st.floats(0, 3))
    def test_linear_in_field(self, alpha, beta, x, y):
        rng = np.random.default_rng(3)
        f = DisplacementField(rng.normal(size=(4, 6, 2)))
        g = DisplacementField(rng.normal(size=(4, 6, 2)))
        lhs = np.array(bilinear_sample(f * alpha + g * beta, (x, y)))
        rhs = alpha * np.array(bilinear_sample(f, (x, y))) + beta * np.array(bilinear_sample(g, (x, y)))
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


class TestWarp:
    def test_zero_field_identity(self):
        a = square_set()
        assert warp_annotations_forward(a, DisplacementField.zeros(32, 32)) == a

    def test_constant_shift(self):
        a = square_set()
        out = warp_annotations_forward(a, DisplacementField.constant(32, 32, 3, -2))
        np.testing.assert_array_equal(out.all_vertices(), a.all_vertices() + [3, -2])
        assert out.vertex_counts == a.vertex_counts

    def test_linear_field_analytic(self):
        a = AnnotationSet((Polygon([[10, 5], [20, 5], [15, 12]]),), "t", (32, 32))
        f = DisplacementField.from_function(32, 32, lambda x, y: (0.1 * x, 0 * y))
        out = warp_annotations_forward(a, f)
        np.testing.assert_allclose(out.polygons[0].vertices[0], [11, 5], atol=1e-12)
        oracle = a.all_vertices() + np.stack([0.1 * a.all_vertices()[:, 0], np.zeros(3)], axis=1)
        np.testing.assert_allclose(out.all_vertices(), oracle, atol=1e-12)

    def test_extent_mismatch(self):
        with pytest.raises(DomainError):
            warp_annotations_forward(square_set((32, 32)), DisplacementField.zeros(16, 32))

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
    def test_constant_fields_compose(self, ax, ay, bx, by):
        a = square_set()
        c1 = DisplacementField.constant(32, 32, ax, ay)
        c2 = DisplacementField.constant(32, 32, bx, by)
        two = warp_annotations_forward(warp_annotations_forward(a, c1), c2)
        one = warp_annotations_forward(a, c1 + c2)
        np.testing.assert_allclose(two.all_vertices(), one.all_vertices(), atol=1e-9)


class TestInverse:
    def test_zero_field(self):
        a = square_set()
        assert align_annotations_inverse(a, DisplacementField.zeros(32, 32)) == a

    def test_constant_field_subtracts(self):
        a = AnnotationSet((Polygon([[10, 10], [14, 10], [12, 13]]),), "c", (32, 32))
        out = align_annotations_inverse(a, DisplacementField.constant(32, 32, 3, -2))
        np.testing.assert_allclose(out.polygons[0].vertices[0], [7, 12], atol=1e-12)

    def test_linear_field_solves_algebraically(self):
        # x + 0.2 x = 12  ->  x = 10
        f = DisplacementField.from_function(64, 64, lambda x, y: (0.2 * x, 0 * y))
        a = AnnotationSet((Polygon([[12, 3], [24, 3], [18, 9]]),), "l", (64, 64))
        out, report = align_annotations_inverse(a, f, tol=1e-10, max_iter=100, return_report=True)
        assert out.polygons[0].vertices[0][0] == pytest.approx(10.0, abs=1e-9)
        assert report.converged

    def test_nonconvergence_reported(self):
        f = DisplacementField.from_function(64, 64, lambda x, y: (0.9 * x, 0 * y))
        a = AnnotationSet((Polygon([[40, 3], [50, 3], [45, 9]]),), "l", (64, 64))
        out, report = align_annotations_inverse(a, f, tol=1e-6, max_iter=2, return_report=True)
        assert not report.converged
        assert (0, 0) in report.unconverged
        assert out.vertex_counts == a.vertex_counts

    def test_first_order_variant(self):
        f = DisplacementField.constant(32, 32, 1.5, 0.5)
        a = square_set()
        out = align_annotations_inverse(a, f, method="first_order")
        np.testing.assert_allclose(out.all_vertices(), a.all_vertices() - [1.5, 0.5], atol=1e-12)

    def test_round_trip_random_smooth_fields(self):
        rng = np.random.default_rng(5)
        checked = 0
        for seed in range(40):
            f = sample_gaussian_field(FieldSpec(64, 64, 8.0, 32.0, seed))
            if lipschitz_estimate(f) >= 0.5:
                continue
            pts = rng.uniform(2, 62, size=(12, 2))
            a = AnnotationSet((Polygon(pts[:4]), Polygon(pts[4:8]), Polygon(pts[8:])), "r", (64, 64))
            back = align_annotations_inverse(warp_annotations_forward(a, f), f, tol=0.005, max_iter=20)
            assert np.abs(back.all_vertices() - a.all_vertices()).max() <= 0.01
            checked += 1
        assert checked >= 20


class TestUpsample:
    def test_factor_one_identity(self):
        f = DisplacementField(np.random.default_rng(0).normal(size=(4, 4, 2)))
        assert upsample_field(f, 1) is f

    def test_constant_scaled(self):
        up = upsample_field(DisplacementField.constant(4, 4, 1, 0), 8)
        assert up.extent == (32, 32)
        assert np.all(up.dx == 8) and np.all(up.dy == 0)

    def test_linear_ramp(self):
        a, b, c = 0.3, -0.2, 1.0
        f = DisplacementField.from_function(8, 8, lambda x, y: (a * x + b * y + c, -a * y))
        up = upsample_field(f, 2)
        yy, xx = np.mgrid[0:16, 0:16] / 2.0
        inside = (xx <= 7) & (yy <= 7)
        np.testing.assert_allclose(up.dx[inside], 2 * (a * xx + b * yy + c)[inside], atol=1e-6)
        np.testing.assert_allclose(up.dy[inside], 2 * (-a * yy)[inside], atol=1e-6)

    def test_bad_factor(self):
        with pytest.raises(ConfigError):
            upsample_field(DisplacementField.zeros(4, 4), 3)


class TestFieldStats:
    def test_zero(self):
        assert field_stats(DisplacementField.zeros(3, 3)) == {"max_abs": 0.0, "mean_dx": 0.0, "mean_dy": 0.0}

    def test_constant(self):
        assert field_stats(DisplacementField.constant(3, 5, 3, -2)) == {"max_abs": 3.0, "mean_dx": 3.0, "mean_dy": -2.0}

    def test_random_matches_double_loop(self):
        f = DisplacementField(np.random.default_rng(9).normal(size=(6, 5, 2)))
        mx, sx, sy = 0.0, 0.0, 0.0
        for i in range(6):
            for j in range(5):
                dx, dy = f.vectors[i, j]
                mx = max(mx, abs(dx), abs(dy))
                sx += dx
                sy += dy
        s = field_stats(f)
        assert s["max_abs"] == mx
        assert s["mean_dx"] == pytest.approx(sx / 30, rel=1e-12)
        assert s["mean_dy"] == pytest.approx(sy / 30, rel=1e-12)

    def test_empty(self):
        with pytest.raises(DomainError):
            field_stats(DisplacementField(np.zeros((0, 0, 2))))


class TestTypes:
    def test_polygon_needs_three_vertices(self):
        with pytest.raises(DomainError):
            Polygon([[0, 0], [1, 1]])

    def test_polygon_rejects_nan(self):
        with pytest.raises(DomainError):
            Polygon([[0, 0], [1, np.nan], [2, 0]])

    def test_overhang_validation(self):
        AnnotationSet((Polygon([[-60, 0], [10, 0], [5, 5]]),), "ok", (32, 32)).validate()
        with pytest.raises(DomainError):
            AnnotationSet((Polygon([[-70, 0], [10, 0], [5, 5]]),), "bad", (32, 32)).validate()

    def test_immutable_vertices(self):
        p = Polygon([[0, 0], [1, 0], [0, 1]])
        with pytest.raises(ValueError):
            p.vertices[0, 0] = 5


def test_field_file_round_trip(tmp_path):
    f = DisplacementField(np.random.default_rng(4).normal(size=(5, 7, 2)).astype(np.float32))
    write_field(f, tmp_path / "f.dfld")
    blob = (tmp_path / "f.dfld").read_bytes()
    assert blob[:4] == b"DFLD" and len(blob) == 12 + 5 * 7 * 2 * 4
    # dx then dy interleaved per cell, row-major
    assert np.frombuffer(blob[12:20], "<f4").tolist() == f.vectors[0, 0].astype(np.float32).tolist()
    np.testing.assert_array_equal(read_field(tmp_path / "f.dfld").vectors, f.vectors)
