import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from semverify.boundprop import (
    ACTIVE,
    INACTIVE,
    Box,
    EmptyRegion,
    PhaseAssignment,
    interval_bounds,
    linear_bounds,
)
from semverify.netcore import GraphBuilder

from helpers import batch_forward_nodes, random_fc_graph, split_box_samples

ESCAPE_TOL = 1e-9


def dag_graph_with_add(rng, in_dim=3):
    """x -> two affine/ReLU branches -> Add -> affine, exercising fan-out."""
    b = GraphBuilder()
    x = b.input("x", (in_dim,))
    a1 = b.affine(rng.normal(size=(4, in_dim)), rng.normal(size=4), x)
    r1 = b.relu(a1)
    a2 = b.affine(rng.normal(size=(4, in_dim)), rng.normal(size=4), x)
    r2 = b.relu(a2)
    s = b.add_nodes(r1, r2)
    b.affine(rng.normal(size=(2, 4)), rng.normal(size=2), s)
    return b.build()


def assert_samples_inside(g, box, bounds_by_node, n_samples=10_000, seed=0):
    rng = np.random.default_rng(seed)
    samples = box.sample(rng, n_samples)
    vals = batch_forward_nodes(g, split_box_samples(g, box, samples))
    for i, v in enumerate(vals):
        nb = bounds_by_node[i]
        assert np.all(v >= nb.lower - ESCAPE_TOL), f"lower escape at node {i}"
        assert np.all(v <= nb.upper + ESCAPE_TOL), f"upper escape at node {i}"


class TestBox:
    def test_rejects_inverted(self):
        with pytest.raises(ValueError):
            Box.of([1.0], [0.0])

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=6))
    def test_contains_center(self, lows):
        lo = np.asarray(lows)
        box = Box.of(lo, lo + 1.0)
        assert box.contains(box.center)


class TestIntervalBounds:
    def test_linear_image_of_interval(self):
        b = GraphBuilder()
        x = b.input("x", (1,))
        b.affine([[2.0]], [0.0], x)
        res = interval_bounds(b.build(), Box.of([-1.0], [1.0]))
        np.testing.assert_allclose(res.output.lower, [-2.0], atol=1e-12)
        np.testing.assert_allclose(res.output.upper, [2.0], atol=1e-12)
        assert res.output.lower[0] <= -2.0 <= res.output.upper[0]

    def test_relu_rule_unknown_and_fixed(self):
        b = GraphBuilder()
        x = b.input("x", (1,))
        a = b.affine([[1.0]], [0.5], x)  # pre-activation in [-1, 2] for x in [-1.5, 1.5]
        r = b.relu(a)
        g = b.build()
        box = Box.of([-1.5], [1.5])
        res = interval_bounds(g, box)
        np.testing.assert_allclose(res.node_boxes[r].lower, [0.0], atol=1e-12)
        np.testing.assert_allclose(res.node_boxes[r].upper, [2.0], atol=1e-9)
        inactive = PhaseAssignment(g, {r: np.array([INACTIVE], np.int8)})
        res2 = interval_bounds(g, box, inactive)
        np.testing.assert_allclose(res2.node_boxes[r].lower, [0.0], atol=1e-12)
        np.testing.assert_allclose(res2.node_boxes[r].upper, [0.0], atol=1e-12)

    def test_sampling_soundness_random_nets(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            g = random_fc_graph(rng, in_dim=3, widths=(5, 4, 2))
            box = Box.of(rng.uniform(-2, 0, 3), rng.uniform(0.1, 2, 3))
            res = interval_bounds(g, box)
            assert_samples_inside(g, box, res.node_boxes)

    def test_sampling_soundness_dag(self):
        rng = np.random.default_rng(12)
        g = dag_graph_with_add(rng)
        box = Box.uniform(-1.0, 1.0, 3)
        res = interval_bounds(g, box)
        assert_samples_inside(g, box, res.node_boxes)

    def test_sampling_soundness_conv(self):
        rng = np.random.default_rng(13)
        b = GraphBuilder()
        x = b.input("x", (1, 4, 4))
        c = b.conv2d(rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2), x, stride=1, padding=1)
        r = b.relu(c)
        f = b.flatten(r)
        b.affine(rng.normal(size=(3, 32)), rng.normal(size=3), f)
        g = b.build()
        box = Box.uniform(-0.5, 0.5, 16)
        res = interval_bounds(g, box)
        assert_samples_inside(g, box, res.node_boxes, n_samples=500)

    def test_empty_region_signalled(self):
        b = GraphBuilder()
        x = b.input("x", (1,))
        a = b.affine([[1.0]], [0.0], x)
        r = b.relu(a)
        g = b.build()
        # pre-activation is strictly negative over the box, active phase is impossible
        phases = PhaseAssignment(g, {r: np.array([ACTIVE], np.int8)})
        with pytest.raises(EmptyRegion):
            interval_bounds(g, Box.of([-2.0], [-1.0]), phases)

    def test_monotone_in_box(self):
        rng = np.random.default_rng(14)
        g = random_fc_graph(rng, in_dim=3, widths=(4, 2))
        inner = Box.of([-0.5, -0.2, 0.0], [0.5, 0.3, 0.4])
        outer = Box.of([-1.0, -0.5, -0.1], [1.0, 0.5, 0.6])
        ri = interval_bounds(g, inner).output
        ro = interval_bounds(g, outer).output
        assert ri.contained_in(ro, tol=ESCAPE_TOL)


class TestLinearBounds:
    def test_affine_only_exact(self):
        rng = np.random.default_rng(20)
        b = GraphBuilder()
        x = b.input("x", (3,))
        w1, b1 = rng.normal(size=(4, 3)), rng.normal(size=4)
        w2, b2 = rng.normal(size=(2, 4)), rng.normal(size=2)
        h = b.affine(w1, b1, x)
        b.affine(w2, b2, h)
        g = b.build()
        box = Box.of([-1.0, -2.0, 0.5], [1.0, -1.0, 2.0])
        relax = linear_bounds(g, box)
        # closed form: center +/- sum |coef| * radius of the composed map
        comp_w = (w2 @ w1).astype(np.float64)
        comp_b = (w2 @ b1 + b2).astype(np.float64)
        mid = comp_w @ box.center + comp_b
        rad = np.abs(comp_w) @ (box.width / 2)
        np.testing.assert_allclose(relax.output.lo, mid - rad, atol=1e-6)
        np.testing.assert_allclose(relax.output.up, mid + rad, atol=1e-6)

    def test_single_relu_chord_endpoint(self):
        # pre-activation x in [-1, 1]: chord value at x=1 is 1*(1-(-1))/2 = 1
        b = GraphBuilder()
        x = b.input("x", (1,))
        b.relu(x)
        g = b.build()
        relax = linear_bounds(g, Box.of([-1.0], [1.0]))
        rid = g.relu_ids()[0]
        pre = relax.pre_relu[rid]
        np.testing.assert_allclose(pre.lo, [-1.0], atol=1e-9)
        np.testing.assert_allclose(pre.up, [1.0], atol=1e-9)
        out = relax.node_intervals[rid]
        np.testing.assert_allclose(out.upper, [1.0], atol=1e-9)

    def test_contained_in_interval_bounds_and_sound(self):
        rng = np.random.default_rng(21)
        for _ in range(5):
            g = random_fc_graph(rng, in_dim=3, widths=(5, 4, 2))
            box = Box.of(rng.uniform(-2, 0, 3), rng.uniform(0.1, 2, 3))
            iv = interval_bounds(g, box)
            relax = linear_bounds(g, box)
            for i in relax.node_intervals:
                assert relax.node_intervals[i].contained_in(iv.node_boxes[i], tol=ESCAPE_TOL)
            assert_samples_inside(g, box, relax.node_intervals)

    def test_dag_containment_and_soundness(self):
        rng = np.random.default_rng(22)
        g = dag_graph_with_add(rng)
        box = Box.uniform(-1.0, 1.0, 3)
        iv = interval_bounds(g, box)
        relax = linear_bounds(g, box)
        assert relax.output_box().contained_in(iv.output, tol=ESCAPE_TOL)
        assert_samples_inside(g, box, relax.node_intervals)

    def test_pre_relu_affine_forms_are_sound(self):
        rng = np.random.default_rng(23)
        g = random_fc_graph(rng, in_dim=3, widths=(4, 4, 2))
        box = Box.uniform(-1.0, 1.0, 3)
        relax = linear_bounds(g, box)
        samples = box.sample(rng, 2000)
        vals = batch_forward_nodes(g, split_box_samples(g, box, samples))
        for rid, pair in relax.pre_relu.items():
            pred = g.nodes[rid].pred
            pre = vals[pred]
            lo_aff = samples @ pair.a_lo.T + pair.c_lo
            up_aff = samples @ pair.a_up.T + pair.c_up
            assert np.all(pre >= lo_aff - 1e-9)
            assert np.all(pre <= up_aff + 1e-9)

    def test_phase_refinement_tightens_or_empties(self):
        # children inherit the parent's intervals, so refinement can only
        # tighten; the refined bounds must stay sound on the refined region
        rng = np.random.default_rng(24)
        g = random_fc_graph(rng, in_dim=3, widths=(4, 2))
        box = Box.uniform(-1.0, 1.0, 3)
        base = linear_bounds(g, box)
        samples = box.sample(rng, 5000)
        vals = batch_forward_nodes(g, split_box_samples(g, box, samples))
        for rid, pair in base.pre_relu.items():
            pre_vals = vals[g.nodes[rid].pred]
            for j in range(pair.lo.size):
                if not (pair.lo[j] < 0 < pair.up[j]):
                    continue
                for phase in (ACTIVE, INACTIVE):
                    phases = PhaseAssignment(g, {rid: np.zeros(pair.lo.size, np.int8)})
                    phases = phases.with_phase(rid, j, phase)
                    try:
                        refined = linear_bounds(
                            g, box, phases, prior_intervals=base.node_intervals
                        )
                    except EmptyRegion:
                        continue
                    assert refined.output_box().contained_in(base.output_box(), tol=1e-9)
                    # soundness on the samples consistent with the fixed phase
                    mask = pre_vals[:, j] >= 0 if phase == ACTIVE else pre_vals[:, j] <= 0
                    out_vals = vals[g.output][mask]
                    ob = refined.output_box()
                    assert np.all(out_vals >= ob.lower - ESCAPE_TOL)
                    assert np.all(out_vals <= ob.upper + ESCAPE_TOL)

    def test_monotone_in_box(self):
        rng = np.random.default_rng(25)
        for k in range(10):
            g = random_fc_graph(rng, in_dim=3, widths=(4, 3, 2))
            inner_lo = rng.uniform(-1, 0, 3)
            inner_up = rng.uniform(0, 1, 3)
            pad = rng.uniform(0, 1, 3)
            inner = Box.of(inner_lo, inner_up)
            outer = Box.of(inner_lo - pad, inner_up + pad)
            ri = linear_bounds(g, inner).output_box()
            ro = linear_bounds(g, outer).output_box()
            assert ri.contained_in(ro, tol=1e-9)

    def test_conv_transpose_soundness(self):
        rng = np.random.default_rng(26)
        b = GraphBuilder()
        x = b.input("x", (2, 3, 3))
        ct = b.conv_transpose2d(rng.normal(size=(2, 1, 4, 4)), rng.normal(size=1), x,
                                stride=2, padding=1)
        r = b.relu(ct)
        f = b.flatten(r)
        b.affine(rng.normal(size=(2, 36)), rng.normal(size=2), f)
        g = b.build()
        box = Box.uniform(-0.7, 0.7, 18)
        relax = linear_bounds(g, box)
        assert_samples_inside(g, box, relax.node_intervals, n_samples=300)
