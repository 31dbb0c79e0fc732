import numpy as np
import pytest

from semverify.netcore import (
    AddNode,
    AffineNode,
    EvalError,
    GraphBuilder,
    InputNode,
    NetworkGraph,
    ReLUNode,
    Tensor,
    backward,
    forward,
    validate_graph,
)

from helpers import fd_gradient, random_fc_graph, reference_forward


def t(values, shape=None):
    arr = np.asarray(values, dtype=np.float32)
    if shape is not None:
        arr = arr.reshape(shape)
    return Tensor.of(arr)


class TestTensor:
    def test_shape_data_consistency(self):
        x = Tensor((2, 3), np.arange(6, dtype=np.float32))
        assert x.array.shape == (2, 3)

    def test_rejects_size_mismatch(self):
        with pytest.raises(ValueError):
            Tensor((2, 3), np.zeros(5, dtype=np.float32))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Tensor.of(np.array([1.0, np.nan]))


class TestValidateGraph:
    def test_minimal_well_formed_graph(self):
        b = GraphBuilder()
        x = b.input("x", (3,))
        a = b.affine(np.ones((2, 3)), np.zeros(2), x)
        b.relu(a)
        assert validate_graph(b.build()) == []

    def test_shape_mismatch_reported(self):
        nodes = [
            InputNode("x", (4,)),
            AffineNode(np.ones((2, 3), np.float32), np.zeros(2, np.float32), 0),
        ]
        errs = validate_graph(NetworkGraph(nodes))
        assert len(errs) == 1 and "shape mismatch" in errs[0] and "node 1" in errs[0]

    def test_forward_reference_is_order_error(self):
        nodes = [
            InputNode("x", (2,)),
            AddNode(0, 2),  # refers to a later node
            ReLUNode(0),
        ]
        errs = validate_graph(NetworkGraph(nodes, output=1))
        assert any("topological order" in e for e in errs)

    def test_duplicate_input_name(self):
        nodes = [InputNode("x", (2,)), InputNode("x", (2,))]
        assert any("duplicate" in e for e in validate_graph(NetworkGraph(nodes)))

    def test_non_finite_weights_rejected(self):
        nodes = [
            InputNode("x", (2,)),
            AffineNode(np.array([[np.inf, 0.0]], np.float32), np.zeros(1, np.float32), 0),
        ]
        assert any("non-finite" in e for e in validate_graph(NetworkGraph(nodes)))


class TestForward:
    def test_identity_affine_then_relu(self):
        b = GraphBuilder()
        x = b.input("x", (2,))
        a = b.affine(np.eye(2), np.zeros(2), x)
        b.relu(a)
        out = forward(b.build(), {"x": t([3.0, -2.0])})
        np.testing.assert_array_equal(out.data, [3.0, 0.0])

    def test_channel_sum_via_two_adds(self):
        b = GraphBuilder()
        z = b.input("z", (2,))
        n = b.input("n", (2,))
        eps = b.input("eps", (2,))
        zn = b.add_nodes(z, n)
        b.add_nodes(zn, eps)
        out = forward(
            b.build(),
            {"z": t([1.0, 1.0]), "n": t([0.5, -0.5]), "eps": t([0.01, 0.01])},
        )
        np.testing.assert_allclose(out.data, [1.51, 0.51], rtol=1e-6)

    def test_matches_straight_line_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            g = random_fc_graph(rng, in_dim=4, widths=(5, 4, 3))
            x = rng.normal(size=4).astype(np.float32)
            got = forward(g, {"x": Tensor.of(x)}).data
            want = reference_forward(g, {"x": x}, dtype=np.float32)
            assert np.max(np.abs(got - want)) == 0.0

    def test_conv_matches_direct_loop(self):
        rng = np.random.default_rng(1)
        from helpers import reference_conv2d

        kern = rng.normal(size=(2, 3, 3, 3)).astype(np.float32)
        bias = rng.normal(size=2).astype(np.float32)
        x = rng.normal(size=(3, 6, 6)).astype(np.float32)
        b = GraphBuilder()
        xin = b.input("x", (3, 6, 6))
        b.conv2d(kern, bias, xin, stride=2, padding=1)
        got = forward(b.build(), {"x": Tensor.of(x)}).array
        want = reference_conv2d(x, kern, bias, stride=2, padding=1)
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_conv_transpose_matches_direct_loop(self):
        rng = np.random.default_rng(2)
        from helpers import reference_conv_transpose2d

        kern = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        bias = rng.normal(size=3).astype(np.float32)
        x = rng.normal(size=(2, 5, 5)).astype(np.float32)
        b = GraphBuilder()
        xin = b.input("x", (2, 5, 5))
        b.conv_transpose2d(kern, bias, xin, stride=2, padding=1)
        got = forward(b.build(), {"x": Tensor.of(x)}).array
        want = reference_conv_transpose2d(x, kern, bias, stride=2, padding=1)
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_missing_and_extra_inputs(self):
        g = random_fc_graph(np.random.default_rng(3))
        with pytest.raises(EvalError, match="missing"):
            forward(g, {})
        with pytest.raises(EvalError, match="unknown"):
            forward(g, {"x": t([0.0, 0.0, 0.0]), "y": t([1.0])})

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        g = random_fc_graph(rng, in_dim=6, widths=(8, 8, 2))
        x = Tensor.of(rng.normal(size=6).astype(np.float32))
        a = forward(g, {"x": x}).data
        b = forward(g, {"x": x}).data
        assert np.array_equal(a, b)

    def test_piecewise_linear_within_activation_pattern(self):
        rng = np.random.default_rng(5)
        g = random_fc_graph(rng, in_dim=3, widths=(4, 2))
        # two nearby points sharing the activation pattern
        a = rng.normal(size=3).astype(np.float32)
        bpt = (a + rng.normal(scale=1e-3, size=3)).astype(np.float32)
        lam = 0.37
        mid = (lam * a + (1 - lam) * bpt).astype(np.float32)
        fa = forward(g, {"x": Tensor.of(a)}).data
        fb = forward(g, {"x": Tensor.of(bpt)}).data
        fm = forward(g, {"x": Tensor.of(mid)}).data
        np.testing.assert_allclose(fm, lam * fa + (1 - lam) * fb, atol=1e-5)


class TestBackward:
    def test_affine_adjoint(self):
        w = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], np.float32)
        b = GraphBuilder()
        x = b.input("x", (2,))
        b.affine(w, np.zeros(3), x)
        ct = t([1.0, -1.0, 0.5])
        grads = backward(b.build(), {"x": t([0.3, 0.7])}, ct)
        np.testing.assert_allclose(grads["x"].data, w.T @ ct.data, rtol=1e-6)

    def test_relu_mask(self):
        b = GraphBuilder()
        x = b.input("x", (2,))
        b.relu(x)
        grads = backward(b.build(), {"x": t([-1.0, 2.0])}, t([1.0, 1.0]))
        np.testing.assert_array_equal(grads["x"].data, [0.0, 1.0])

    def test_relu_subgradient_at_zero_is_zero(self):
        b = GraphBuilder()
        x = b.input("x", (1,))
        b.relu(x)
        grads = backward(b.build(), {"x": t([0.0])}, t([1.0]))
        assert grads["x"].data[0] == 0.0

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        checked = 0
        while checked < 8:
            g = random_fc_graph(rng, in_dim=3, widths=(5, 4, 2))
            x = rng.normal(size=3).astype(np.float32)
            # keep pre-activations away from the ReLU kinks
            vals = reference_forward(g, {"x": x}, dtype=np.float64)
            pre_ok = True
            from semverify.netcore import forward_values

            fv = forward_values(g, {"x": Tensor.of(x)})
            for i, node in enumerate(g.nodes):
                if isinstance(node, ReLUNode) and np.min(np.abs(fv[node.pred])) < 1e-2:
                    pre_ok = False
            if not pre_ok:
                continue
            checked += 1
            ct = rng.normal(size=vals.size)
            grads = backward(g, {"x": Tensor.of(x)}, Tensor.of(ct.astype(np.float32)))
            want = fd_gradient(g, {"x": x.astype(np.float64)}, ct)["x"]
            denom = np.maximum(np.abs(want), 1e-8)
            rel = np.abs(grads["x"].data.astype(np.float64) - want) / denom
            assert np.max(rel) < 1e-4

    def test_add_fanout_accumulates(self):
        # y = x + x doubles the cotangent
        b = GraphBuilder()
        x = b.input("x", (2,))
        b.add_nodes(x, x)
        grads = backward(b.build(), {"x": t([1.0, 2.0])}, t([1.0, 1.0]))
        np.testing.assert_array_equal(grads["x"].data, [2.0, 2.0])

    def test_cotangent_shape_checked(self):
        g = random_fc_graph(np.random.default_rng(7))
        with pytest.raises(EvalError, match="cotangent"):
            backward(g, {"x": t([0.0, 0.0, 0.0])}, t([1.0]))
