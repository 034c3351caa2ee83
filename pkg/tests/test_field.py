import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stcalib.errors import OutOfBounds
from stcalib.field import (
    FieldConfig,
    MultiResGrid,
    RadianceField,
    field_eval,
    field_eval_backward,
    level_resolutions,
    sh_encode,
    spatial_hash,
)
from stcalib.gradcheck import central_diff, rel_error

UNIT = dict(bounds_min=(0.0, 0.0, 0.0), bounds_max=(1.0, 1.0, 1.0))
SMALL = FieldConfig(n_levels=4, base_resolution=4, max_resolution=32, log2_hash_size=10, hidden_width=16,
                    geo_features=7, color_hidden_width=16, grid_init_scale=0.5, **UNIT)


def corner_grid():
    cfg = FieldConfig(n_levels=1, base_resolution=2, max_resolution=2, **UNIT)
    g = MultiResGrid(cfg)
    for i in range(2):
        for j in range(2):
            for k in range(2):
                g.table[g.row_index(0, (i, j, k))] = (i + 2 * j + 4 * k, i * j * k)
    return g


class TestHash:
    def test_pinned_values(self):
        # bit-exact pins of the instant-NGP spatial hash
        assert int(spatial_hash(0, 0, 0, 1 << 16)) == 0
        assert int(spatial_hash(1, 0, 0, 1 << 16)) == 1
        assert int(spatial_hash(0, 1, 0, 1 << 16)) == 2654435761 % (1 << 16)
        assert int(spatial_hash(0, 0, 1, 1 << 16)) == 805459861 % (1 << 16)
        assert int(spatial_hash(3, 5, 7, 1 << 16)) == (3 ^ (5 * 2654435761) ^ (7 * 805459861)) % (1 << 16)

    def test_resolutions_geometric(self):
        r = level_resolutions(FieldConfig())
        assert r[0] == 16 and r[-1] == 256 and len(r) == 8
        assert np.all(np.diff(r) > 0)

    def test_hashed_matches_dense_without_collisions(self):
        dense = FieldConfig(n_levels=1, base_resolution=8, max_resolution=8, log2_hash_size=20, **UNIT)
        gd, gh = MultiResGrid(dense), MultiResGrid(dense)
        assert not gd.hashed[0]
        ijk = np.stack(np.meshgrid(*[np.arange(8)] * 3, indexing="ij"), -1).reshape(-1, 3)
        # the 512 vertices land in distinct rows of a 2^20 table
        assert len({int(spatial_hash(*v, 1 << 20)) for v in ijk}) == len(ijk)
        gh.hashed[:] = True
        gh.table = np.zeros((1 << 20, 2))
        rng = np.random.default_rng(0)
        for v, f in zip(ijk, rng.normal(size=(len(ijk), 2))):
            gd.table[gd.row_index(0, v)] = f
            gh.table[gh.row_index(0, v)] = f
        x = rng.uniform(0, 1, (200, 3))
        np.testing.assert_array_equal(gd.encode(x), gh.encode(x))


class TestEncode:
    def test_vertex_returns_row(self):
        g = corner_grid()
        np.testing.assert_array_equal(g.encode([1.0, 0.0, 1.0]), [5.0, 0.0])
        np.testing.assert_array_equal(g.encode([0.0, 0.0, 0.0]), [0.0, 0.0])

    def test_cell_center_is_mean(self):
        g = corner_grid()
        np.testing.assert_allclose(g.encode([0.5, 0.5, 0.5]), [3.5, 0.125], atol=1e-15)

    def test_hand_trilinear(self):
        g = corner_grid()
        x, y, z = 0.25, 0.5, 0.75
        want0 = x + 2 * y + 4 * z
        want1 = x * y * z
        np.testing.assert_allclose(g.encode([x, y, z]), [want0, want1], atol=1e-14)

    def test_out_of_bounds(self):
        with pytest.raises(OutOfBounds):
            corner_grid().encode([1.1, 0.5, 0.5])

    def test_output_dim(self):
        rf = RadianceField(SMALL, seed=0)
        assert rf.grid.encode(np.full((5, 3), 0.3)).shape == (5, SMALL.n_levels * SMALL.features_per_level)

    @settings(max_examples=50, deadline=None)
    @given(st.tuples(*[st.floats(0, 1)] * 3))
    def test_weights_partition_unity(self, x):
        # all-ones features make the output the weight sum of every level
        g = MultiResGrid(SMALL)
        g.table[:] = 1.0
        np.testing.assert_allclose(g.encode(np.array(x)), 1.0, atol=1e-12)


class TestFieldEval:
    def test_zero_baseline(self):
        rf = RadianceField(FieldConfig(), zero=True)
        sigma, rgb = field_eval(rf.grid, rf.decoder, [0.1, 0.2, 0.3], [0, 0, 1])
        assert sigma == pytest.approx(np.log(2.0), abs=1e-12)
        np.testing.assert_allclose(rgb, 0.5)

    def test_deterministic_and_ranges(self):
        rf = RadianceField(SMALL, seed=3)
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.uniform(0, 1, 3)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            a = field_eval(rf.grid, rf.decoder, x, d)
            b = field_eval(rf.grid, rf.decoder, x, d)
            assert a[0] == b[0] and np.array_equal(a[1], b[1])
            assert a[0] >= 0 and np.all((a[1] >= 0) & (a[1] <= 1))

    def test_batched_matches_single(self):
        rf = RadianceField(SMALL, seed=4)
        rng = np.random.default_rng(1)
        x = rng.uniform(0, 1, (6, 3))
        d = rng.normal(size=(6, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        s, c, _ = rf.forward(x, d)
        for i in range(6):
            si, ci = field_eval(rf.grid, rf.decoder, x[i], d[i])
            assert s[i] == pytest.approx(si, rel=1e-14)
            np.testing.assert_allclose(c[i], ci, rtol=1e-14)

    def test_groups_match_repeated_directions(self):
        rf = RadianceField(SMALL, seed=5)
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 1, (7, 3))
        d = rng.normal(size=(2, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        s1, c1, _ = rf.forward(x, d, groups=np.array([0, 3]))
        s2, c2, _ = rf.forward(x, np.repeat(d, [3, 4], axis=0))
        np.testing.assert_allclose(s1, s2, rtol=1e-14)
        np.testing.assert_allclose(c1, c2, rtol=1e-12)


class TestBackward:
    def test_zero_adjoint(self):
        rf = RadianceField(SMALL, seed=0)
        grads, gx = field_eval_backward(rf.grid, rf.decoder, [0.3, 0.4, 0.5], [0, 0, 1], 0.0, np.zeros(3))
        assert all(not g.any() for g in grads.values())
        assert not np.any(gx)

    def test_locality(self):
        cfg = FieldConfig(n_levels=1, base_resolution=4, max_resolution=4, grid_init_scale=0.5, hidden_width=8,
                          color_hidden_width=8, geo_features=3, **UNIT)
        rf = RadianceField(cfg, seed=1)
        grads, _ = field_eval_backward(rf.grid, rf.decoder, [0.1, 0.1, 0.1], [0, 0, 1], 1.0, np.ones(3))
        touched = {rf.grid.row_index(0, (i, j, k)) for i in (0, 1) for j in (0, 1) for k in (0, 1)}
        far = rf.grid.row_index(0, (3, 3, 3))
        assert far not in touched
        assert not grads["grid"][far].any()
        untouched = np.setdiff1d(np.arange(len(rf.grid.table)), sorted(touched))
        assert not grads["grid"][untouched].any()

    def test_position_gradient_fd(self):
        rf = RadianceField(SMALL, seed=2)
        rng = np.random.default_rng(5)
        a_rgb = np.array([0.3, -0.7, 0.2])
        worst = 0.0
        for _ in range(20):
            x = rng.uniform(0.1, 0.9, 3)
            d = np.array([0.0, 0.6, 0.8])
            _, gx = field_eval_backward(rf.grid, rf.decoder, x, d, 0.5, a_rgb)

            def f():
                s, c = field_eval(rf.grid, rf.decoder, x, d)
                return 0.5 * s + a_rgb @ c

            fd = central_diff(f, x, 1e-5)
            if np.linalg.norm(fd) > 1e-6:
                worst = max(worst, rel_error(gx, fd))
        # ReLU kinks inside the finite-difference step are the only source of mismatch
        assert worst < 1e-2

    def test_sh_jacobian(self):
        rng = np.random.default_rng(0)
        d = rng.normal(size=(5, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        for deg in range(4):
            _, J = sh_encode(d, deg, jacobian=True)
            h = 1e-6
            for k in range(3):
                e = np.zeros(3)
                e[k] = h
                fd = (sh_encode(d + e, deg) - sh_encode(d - e, deg)) / (2 * h)
                np.testing.assert_allclose(J[:, :, k], fd, atol=1e-7)


class TestParams:
    def test_copy_independent(self):
        rf = RadianceField(SMALL, seed=0)
        cp = rf.copy()
        cp.grid.table[0, 0] += 1
        assert rf.grid.table[0, 0] != cp.grid.table[0, 0]
        for k, v in rf.params.items():
            if k != "grid":
                np.testing.assert_array_equal(v, cp.params[k])

    def test_init_ranges(self):
        rf = RadianceField(FieldConfig(), seed=0)
        assert np.abs(rf.grid.table).max() <= 1e-4
        w1 = rf.decoder.params["w1"]
        assert np.abs(w1).max() <= np.sqrt(6.0 / sum(w1.shape))
