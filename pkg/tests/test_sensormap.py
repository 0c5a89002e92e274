import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowtact.errors import OutOfDomainError
from flowtact.sensormap import (
    RegionGrid,
    SensorLayout,
    assign_region,
    build_shadow_chart,
    interpolate_region_bilinear,
    load_sensor_layout,
    map_readings_to_keypoints,
    read_readings_csv,
    save_sensor_layout,
    sensors_to_keypoints,
)


def brute_force_region(grid, p):
    for region in range(grid.n_regions):
        o = grid.region_origin(region)
        if o[0] <= p[0] < o[0] + grid.side and o[1] <= p[1] < o[1] + grid.side:
            return region
    return None


def rectangle_exists(pts, q):
    """Brute-force predicate: some 4 sensors form an axis-aligned rectangle
    enclosing q (degenerate sides allowed only when q sits on them)."""
    present = {(round(x, 12), round(y, 12)) for x, y in pts}
    xs = sorted({p[0] for p in present})
    ys = sorted({p[1] for p in present})
    for x0 in xs:
        if x0 > q[0]:
            continue
        for x1 in xs:
            if x1 < q[0]:
                continue
            for y0 in ys:
                if y0 > q[1]:
                    continue
                for y1 in ys:
                    if y1 < q[1]:
                        continue
                    if all((x, y) in present for x in (x0, x1) for y in (y0, y1)):
                        return True
    return False


class TestAssignRegion:
    grid = RegionGrid(origin=(0.0, 0.0), side=0.25, rows=4, cols=4)  # binary-exact side

    def test_point_strictly_inside(self):
        # region 3 is row 0, col 3
        assert assign_region(self.grid, (0.8, 0.1)) == 3

    def test_shared_edge_goes_to_upper_right_square(self):
        # a point exactly on an internal boundary belongs to the square whose
        # origin matches it (half-open convention)
        assert assign_region(self.grid, (0.25, 0.1)) == 1
        assert assign_region(self.grid, (0.1, 0.25)) == 4
        assert assign_region(self.grid, (0.25, 0.25)) == 5

    def test_outside_chart_rejected(self):
        with pytest.raises(OutOfDomainError):
            assign_region(self.grid, (-0.01, 0.5))
        with pytest.raises(OutOfDomainError):
            assign_region(self.grid, (1.0, 0.5))  # far edge is exclusive

    def test_matches_brute_force_containment(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 1.0, size=(100, 2)) * 0.999
        for p in pts:
            assert assign_region(self.grid, p) == brute_force_region(self.grid, p)


class TestBilinear:
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])

    def test_affine_field_center(self):
        vals = np.array([0.0, 1.0, 1.0, 2.0])  # f(x, y) = x + y
        assert interpolate_region_bilinear(self.corners, vals, (0.5, 0.5)) == pytest.approx(1.0)

    def test_affine_field_off_center(self):
        vals = np.array([0.0, 1.0, 1.0, 2.0])
        assert interpolate_region_bilinear(self.corners, vals, (0.25, 0.75)) == pytest.approx(1.0)

    def test_constant_field(self):
        vals = np.full(4, 3.3)
        assert interpolate_region_bilinear(self.corners, vals, (0.123, 0.77)) == pytest.approx(3.3)

    def test_node_exactness(self):
        vals = np.array([0.5, 1.5, 2.5, 3.5])
        for i, c in enumerate(self.corners):
            assert interpolate_region_bilinear(self.corners, vals, c) == pytest.approx(vals[i])

    def test_grid_line_collapses_to_linear(self):
        vals = np.array([0.0, 1.0, 2.0, 3.0])
        got = interpolate_region_bilinear(self.corners, vals, (0.0, 0.5))
        assert got == pytest.approx(1.0)  # between v00=0 and v01=2

    def test_single_sensor_nearest_neighbor(self):
        assert interpolate_region_bilinear(np.array([[0.3, 0.3]]), np.array([2.0]), (0.9, 0.9)) == 2.0

    def test_empty_sensor_set_rejected(self):
        with pytest.raises(ValueError):
            interpolate_region_bilinear(np.zeros((0, 2)), np.zeros(0), (0.5, 0.5))

    @given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
    @settings(max_examples=50, deadline=None)
    def test_convex_combination_bound(self, qx, qy):
        vals = np.array([0.1, 4.0, 2.0, 0.7])
        got = interpolate_region_bilinear(self.corners, vals, (qx, qy))
        assert vals.min() - 1e-12 <= got <= vals.max() + 1e-12

    @given(st.integers(0, 3), st.floats(0.05, 0.95), st.floats(0.05, 0.95))
    @settings(max_examples=50, deadline=None)
    def test_monotone_in_every_sensor(self, idx, qx, qy):
        vals = np.array([1.0, 2.0, 0.5, 1.5])
        before = interpolate_region_bilinear(self.corners, vals, (qx, qy))
        bumped = vals.copy()
        bumped[idx] += 0.7
        after = interpolate_region_bilinear(self.corners, bumped, (qx, qy))
        assert after >= before - 1e-12


class TestShadowChart:
    def test_sensor_counts(self):
        layout, grid = build_shadow_chart()
        assert len(layout) == 148
        palm = layout.positions[:, 1] < 0.08
        assert int(palm.sum()) == 66
        assert int((~palm).sum()) == 82

    def test_sixteen_regions_all_populated(self):
        layout, grid = build_shadow_chart()
        assert grid.n_regions == 16
        assert set(np.unique(layout.regions)) == set(range(16))

    def test_all_sensors_inside_chart(self):
        layout, grid = build_shadow_chart()
        for p in layout.positions:
            assign_region(grid, p)  # must not raise

    def test_node_exactness_at_all_sensor_sites(self):
        layout, grid = build_shadow_chart()
        rng = np.random.default_rng(1)
        readings = rng.uniform(0, 5, size=148)
        values = map_readings_to_keypoints(layout, grid, layout.positions, readings)
        np.testing.assert_allclose(values, readings, atol=1e-12)

    def test_affine_pressure_field_reproduced(self):
        # wherever a corner-forming rectangle encloses the keypoint (checked
        # by an independent brute-force predicate) the bilinear path must
        # reproduce an affine field exactly; elsewhere the fallback must
        # return the nearest sensor's reading
        layout, grid = build_shadow_chart()
        a, b, c = 3.0, 2.0, 0.5

        def f(p):
            return a * p[0] + b * p[1] + c

        readings = np.array([f(p) for p in layout.positions])
        rng = np.random.default_rng(2)
        n_bilinear = 0
        for region in range(16):
            pts = layout.positions[layout.regions == region]
            vals = readings[layout.regions == region]
            lo, hi = pts.min(axis=0), pts.max(axis=0)
            if np.any(hi - lo <= 1e-6):
                continue
            for _ in range(8):
                kp = lo + rng.uniform(0.05, 0.95, size=2) * (hi - lo)
                got = map_readings_to_keypoints(layout, grid, kp[None], readings)[0]
                if rectangle_exists(pts, kp):
                    assert got == pytest.approx(f(kp), abs=1e-9)
                    n_bilinear += 1
                else:
                    nearest = vals[np.argmin(((pts - kp) ** 2).sum(axis=1))]
                    assert got == pytest.approx(nearest, abs=1e-12)
        assert n_bilinear >= 40  # the bilinear path dominates on this chart


class TestSensorsToKeypoints:
    def test_zero_readings_zero_contacts(self):
        layout, grid = build_shadow_chart()
        kp = layout.positions[:10]
        frame = sensors_to_keypoints(layout, grid, kp, np.zeros(148))
        np.testing.assert_array_equal(frame.values, 0.0)

    def test_keypoint_on_sensor_site(self):
        layout, grid = build_shadow_chart()
        readings = np.zeros(148)
        readings[37] = 3.0
        frame = sensors_to_keypoints(layout, grid, layout.positions[37][None], readings, threshold=0.1)
        assert frame.values[0] == 1.0

    def test_out_of_range_readings_rejected(self):
        layout, grid = build_shadow_chart()
        with pytest.raises(ValueError):
            sensors_to_keypoints(layout, grid, layout.positions[:1], np.full(148, 6.0))

    def test_keypoint_outside_chart_rejected(self):
        layout, grid = build_shadow_chart()
        with pytest.raises(OutOfDomainError):
            sensors_to_keypoints(layout, grid, np.array([[-0.5, 0.5]]), np.zeros(148))


class TestSerialization:
    def test_json_roundtrip(self, tmp_path):
        layout, grid = build_shadow_chart()
        path = tmp_path / "chart.json"
        save_sensor_layout(path, layout, grid)
        layout2, grid2 = load_sensor_layout(path)
        assert grid2 == grid
        np.testing.assert_array_equal(layout.ids, layout2.ids)
        np.testing.assert_array_equal(layout.positions, layout2.positions)
        np.testing.assert_array_equal(layout.regions, layout2.regions)

    def test_readings_csv_replay(self, tmp_path):
        path = tmp_path / "readings.csv"
        rows = ["timestamp," + ",".join(f"r{i}" for i in range(4))]
        rows.append("0.0," + ",".join("0.5" for _ in range(4)))
        rows.append("0.05," + ",".join("1.0" for _ in range(4)))
        path.write_text("\n".join(rows) + "\n")
        out = list(read_readings_csv(path, n_sensors=4))
        assert len(out) == 2
        assert out[0][0] == 0.0
        np.testing.assert_array_equal(out[1][1], np.ones(4))

    def test_csv_column_count_enforced(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("0.0,1.0,2.0\n")
        with pytest.raises(ValueError):
            list(read_readings_csv(path, n_sensors=4))
