import numpy as np
import pytest

from atgnn import tensor as T
from atgnn.blocks import (
    PatchNodes,
    add_position,
    dilation_schedule,
    downsample,
    graph_conv,
    k_schedule,
    pgn_block,
    pgn_param_shapes,
    stem,
)
from atgnn.config import pyramid_med, pyramid_s
from atgnn.errors import DimensionError
from atgnn.graph import FeatureGraph, knn_graph
from oracles import graph_conv_oracle


def make_params(shapes, rng, scale=0.5, zero=False):
    out = {}
    for name, shape in shapes.items():
        if zero:
            data = np.zeros(shape)
        elif name.endswith("gamma"):
            data = 1.0 + 0.1 * rng.normal(size=shape)
        else:
            data = scale * rng.normal(size=shape)
        out[name] = T.DiffValue(data, requires_grad=True, name=name)
    return out


def nodes(data, grid=None):
    data = np.asarray(data, dtype=float)
    return PatchNodes(T.DiffValue(data), grid or (data.shape[0], 1))


def gc_params(rng, dim, norm=False, zero=False, biases=True):
    shapes = {k.replace("blk.gc.", "gc."): v for k, v in pgn_param_shapes("blk", dim, 4, norm).items() if ".gc." in k}
    if not biases:
        shapes = {k: v for k, v in shapes.items() if ".b_" not in k}
    return make_params(shapes, rng, zero=zero)


class TestSchedules:
    def test_isotropic_k_from_k_to_2k(self):
        ks = k_schedule(9, 12)
        assert ks[0] == 9 and ks[-1] == 18
        assert all(a <= b for a, b in zip(ks, ks[1:]))

    def test_single_layer(self):
        assert k_schedule(9, 1) == [9]
        assert dilation_schedule(4, 1) == [1]

    def test_dilation_ramp(self):
        ds = dilation_schedule(4, 12)
        assert ds[0] == 1 and ds[-1] == 4
        assert all(a <= b for a, b in zip(ds, ds[1:]))
        assert dilation_schedule(4, 2) == [1, 4]

    @pytest.mark.parametrize("depth", [2, 3, 7, 16])
    @pytest.mark.parametrize("k", [3, 9, 20])
    def test_k_nondecreasing_and_doubles(self, depth, k):
        ks = k_schedule(k, depth)
        assert ks[0] == k and ks[-1] == 2 * k
        assert all(a <= b for a, b in zip(ks, ks[1:]))


class TestStem:
    def test_shape(self, rng):
        shapes = {}
        cin = 1
        for i, cout in enumerate([4, 8, 16, 32]):
            shapes[f"stem.conv{i}.weight"] = (9 * cin, cout)
            shapes[f"stem.conv{i}.bias"] = (cout,)
            cin = cout
        params = make_params(shapes, rng)
        out = stem(rng.normal(size=(64, 64)), params, 4)
        assert out.grid == (4, 4)
        assert out.features.shape == (16, 32)

    def test_zero_input_gives_position_encoding(self, rng):
        shapes = {"stem.conv0.weight": (9, 4), "stem.conv0.bias": (4,), "stem.conv1.weight": (36, 8), "stem.conv1.bias": (8,)}
        params = make_params(shapes, rng)
        params["stem.conv0.bias"].data[:] = 0
        params["stem.conv1.bias"].data[:] = 0
        x = stem(np.zeros((16, 16)), params, 2)
        np.testing.assert_array_equal(x.features.data, 0.0)
        pos = T.DiffValue(rng.normal(size=(16, 8)))
        np.testing.assert_array_equal(add_position(x, pos).features.data, pos.data)

    def test_frequency_major_layout(self, rng):
        # a single 1x1-equivalent tap: only the centre weight of one conv is nonzero
        params = {
            "stem.conv0.weight": T.DiffValue(np.eye(9)[:, [4]]),
            "stem.conv0.bias": T.DiffValue(np.zeros(1)),
        }
        spec = rng.normal(size=(4, 6))  # 4 frames, 6 bins
        out = stem(spec, params, 1)
        assert out.grid == (3, 2)
        # node (f, t) reads image[2f, 2t] = spec[2t, 2f]
        for f in range(3):
            for t in range(2):
                assert out.features.data[f * 2 + t, 0] == spec[2 * t, 2 * f]

    def test_non_divisible(self, rng):
        params = make_params({"stem.conv0.weight": (9, 2), "stem.conv0.bias": (2,)}, rng)
        with pytest.raises(DimensionError, match="multiple of 4"):
            stem(np.zeros((12, 10)), {**params, "stem.conv1.weight": None}, 2)

    def test_gradient(self, rng):
        shapes = {"stem.conv0.weight": (9, 3), "stem.conv0.bias": (3,), "stem.conv1.weight": (27, 4), "stem.conv1.bias": (4,)}
        params = make_params(shapes, rng)
        spec = rng.normal(size=(8, 8))
        w = rng.normal(size=(4, 4))
        f = lambda: T.sum_all(T.mul(stem(spec, params, 2).features, T.DiffValue(w)))
        assert T.check_gradient(f, params.values()) < 1e-4


class TestGraphConv:
    def test_identical_nodes(self, rng):
        params = gc_params(rng, 3)
        row = rng.normal(size=3)
        x = nodes(np.tile(row, (5, 1)))
        g = knn_graph(x.features.data, 2)
        y, _ = graph_conv(x, params, "gc", graph=g)
        for r in y.features.data[1:]:
            np.testing.assert_array_equal(r, y.features.data[0])
        u = row @ params["gc.w_in"].data + params["gc.b_in"].data
        v = np.concatenate([u, np.zeros(3)]) @ params["gc.w_update"].data + params["gc.b_update"].data
        expect = T.gelu(T.DiffValue(v)).data @ params["gc.w_out"].data + params["gc.b_out"].data + row
        np.testing.assert_allclose(y.features.data[0], expect, rtol=1e-13)

    def test_zero_weights_is_identity(self, rng):
        params = gc_params(rng, 4, norm=True, zero=True)
        x = nodes(rng.normal(size=(6, 4)))
        y, _ = graph_conv(x, params, "gc", k=2)
        np.testing.assert_array_equal(y.features.data, x.features.data)

    def test_matches_straight_line_oracle(self):
        x = [[0.5, -1.0], [1.5, 0.25], [-0.75, 2.0], [0.0, 0.5]]
        w_in = [[0.3, -0.2], [0.1, 0.4]]
        w_update = [[0.2, 0.1], [-0.3, 0.5], [0.6, -0.1], [0.05, 0.2]]
        w_out = [[1.0, -0.5], [0.25, 0.75]]
        nbrs = [[1, 3], [0, 2], [3, 1], [0, 2]]
        params = {
            "gc.w_in": T.DiffValue(w_in),
            "gc.w_update": T.DiffValue(w_update),
            "gc.w_out": T.DiffValue(w_out),
        }
        g = FeatureGraph(np.array(nbrs), 2, 1)
        y, _ = graph_conv(nodes(x), params, "gc", graph=g)
        np.testing.assert_allclose(y.features.data, graph_conv_oracle(x, nbrs, w_in, w_update, w_out), rtol=1e-13)

    def test_permutation_equivariance_fixed_topology(self, rng):
        n, dim = 9, 4
        params = gc_params(rng, dim, norm=True)
        data = rng.normal(size=(n, dim))
        g = knn_graph(data, 3)
        perm = rng.permutation(n)
        inv = np.argsort(perm)
        g_perm = FeatureGraph(inv[g.neighbors[perm]], 3, 1)
        y, _ = graph_conv(nodes(data), params, "gc", graph=g)
        yp, _ = graph_conv(nodes(data[perm]), params, "gc", graph=g_perm)
        np.testing.assert_allclose(yp.features.data, y.features.data[perm], rtol=1e-12, atol=1e-14)

    def test_graph_size_mismatch(self, rng):
        params = gc_params(rng, 2)
        with pytest.raises(DimensionError):
            graph_conv(nodes(rng.normal(size=(4, 2))), params, "gc", graph=FeatureGraph(np.zeros((3, 1), int), 1, 1))

    def test_dim_mismatch(self, rng):
        params = gc_params(rng, 3)
        with pytest.raises(DimensionError):
            graph_conv(nodes(rng.normal(size=(4, 2))), params, "gc", k=1)


class TestPgnBlock:
    def block_params(self, rng, dim, zero=False):
        return make_params(pgn_param_shapes("b", dim, 4, True), rng, zero=zero)

    def test_zero_ffn_is_identity(self, rng):
        params = self.block_params(rng, 4)
        for name, p in params.items():
            if ".ffn." in name:
                p.data[:] = 0
        x = nodes(rng.normal(size=(8, 4)))
        y_gc, _ = graph_conv(x, params, "b.gc", k=3, d=1)
        y, _ = pgn_block(x, params, "b", 3, 1)
        np.testing.assert_array_equal(y.features.data, y_gc.features.data)

    def test_zero_stack_is_identity(self, rng):
        x = nodes(rng.normal(size=(16, 8)), (4, 4))
        params = {}
        for i in range(3):
            params.update(make_params(pgn_param_shapes(f"s{i}", 8, 4, True), rng, zero=True))
        y = x
        for i in range(3):
            y, _ = pgn_block(y, params, f"s{i}", 3, 2)
        np.testing.assert_array_equal(y.features.data, x.features.data)

    def test_graph_rebuilt_from_features(self, rng):
        params = self.block_params(rng, 4)
        x = nodes(rng.normal(size=(10, 4)))
        _, g = pgn_block(x, params, "b", 3, 2)
        u = T.layer_norm(x.features, params["b.gc.norm.gamma"], params["b.gc.norm.beta"]).data
        u = u @ params["b.gc.w_in"].data + params["b.gc.b_in"].data
        from atgnn.graph import dilated_knn_graph

        np.testing.assert_array_equal(g.neighbors, dilated_knn_graph(u, 3, 2).neighbors)

    def test_gradient_check(self, rng):
        params = self.block_params(rng, 6)
        x = T.DiffValue(rng.normal(size=(12, 6)), requires_grad=True)
        w = rng.normal(size=(12, 6))
        f = lambda: T.sum_all(T.mul(pgn_block(PatchNodes(x, (3, 4)), params, "b", 4, 2)[0].features, T.DiffValue(w)))
        assert T.check_gradient(f, [x, *params.values()]) < 1e-4


class TestDownsample:
    def test_shape(self, rng):
        params = make_params({"d.weight": (9 * 32, 64), "d.bias": (64,)}, rng)
        y = downsample(nodes(rng.normal(size=(64, 32)), (8, 8)), params, "d")
        assert y.grid == (4, 4) and y.features.shape == (16, 64)

    @pytest.mark.parametrize("preset", [pyramid_s, pyramid_med])
    def test_all_stage_pairs(self, preset, rng):
        dims = preset().dims
        for a, b in zip(dims, dims[1:]):
            params = make_params({"d.weight": (9 * a, b), "d.bias": (b,)}, rng)
            y = downsample(nodes(rng.normal(size=(16, a)), (4, 4)), params, "d")
            assert y.grid == (2, 2) and y.dim == b

    def test_odd_grid(self, rng):
        params = make_params({"d.weight": (18, 4), "d.bias": (4,)}, rng)
        with pytest.raises(DimensionError, match="even"):
            downsample(nodes(rng.normal(size=(15, 2)), (3, 5)), params, "d")

    def test_gradient(self, rng):
        params = make_params({"d.weight": (27, 5), "d.bias": (5,)}, rng)
        x = T.DiffValue(rng.normal(size=(16, 3)), requires_grad=True)
        w = rng.normal(size=(4, 5))
        f = lambda: T.sum_all(T.mul(downsample(PatchNodes(x, (4, 4)), params, "d").features, T.DiffValue(w)))
        assert T.check_gradient(f, [x, *params.values()]) < 1e-4
