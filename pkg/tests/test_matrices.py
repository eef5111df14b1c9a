import numpy as np
import pytest

from corrtree.graph import TreeGraph, contract, parse_graph
from corrtree.matrices import (
    InfeasibleTargetsError,
    assemble_precision,
    children_correlation,
    children_correlation_batch,
    class_correlations_batch,
    correlation_classes,
    correlation_oracle,
    element_correlation,
    expand_targets,
    node_order,
    scale_to_covariance,
    solve_variances,
)
from helpers import (
    balanced_eight,
    fork,
    one_parent_three,
    paired_four,
    random_tree,
    random_variances,
    two_level,
)


def idx_of(graph, name):
    return node_order(graph).index(name)


class TestPrecision:
    def test_one_parent(self):
        g = one_parent_three()
        q = assemble_precision(g, {"p1": 1.0})
        p = idx_of(g, "p1")
        assert q[p, p] == pytest.approx(4.0)
        for c in ("c1", "c2", "c3"):
            i = idx_of(g, c)
            assert q[i, i] == 1.0
            assert q[i, p] == -1.0
        # off-diagonal zeros between children
        assert q[0, 1] == q[0, 2] == q[1, 2] == 0.0

    def test_two_level(self):
        g = two_level()
        q = assemble_precision(g, {"p1": 1.0, "p2": 1.0})
        p1, p2 = idx_of(g, "p1"), idx_of(g, "p2")
        assert q[p2, p2] == pytest.approx(3.0)
        assert q[p2, p1] == pytest.approx(-1.0)
        assert q[p1, p1] == pytest.approx(3.0)  # 1 child + own + lower latent

    def test_fork_root_diagonal(self):
        g = fork()
        v = {"p1": 2.0, "p2": 0.5, "p3": 4.0}
        q = assemble_precision(g, v)
        p1 = idx_of(g, "p1")
        assert q[p1, p1] == pytest.approx(1 / 2.0 + 1 / 0.5 + 1 / 4.0)
        p2 = idx_of(g, "p2")
        assert q[p2, p2] == pytest.approx(3 + 1 / 0.5)
        assert q[p2, p1] == pytest.approx(-1 / 0.5)

    def test_symmetry_and_sparsity(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            g = random_tree(rng, max_latents=6, max_children=8)
            v = random_variances(rng, g)
            q = assemble_precision(g, v)
            assert np.allclose(q, q.T)
            order = node_order(g)
            for i, a in enumerate(order):
                for j, b in enumerate(order):
                    if i >= j:
                        continue
                    linked = g.parent_of.get(a) == b or g.parent_of.get(b) == a
                    assert (q[i, j] != 0) == linked

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ValueError, match="positive"):
            assemble_precision(one_parent_three(), {"p1": 0.0})
        with pytest.raises(ValueError, match="positive"):
            assemble_precision(one_parent_three(), {"p1": -1.0})


class TestCorrelation:
    def test_one_parent_exchangeable(self):
        c = children_correlation(one_parent_three(), {"p1": 1.0})
        expect = np.full((3, 3), 0.5)
        np.fill_diagonal(expect, 1.0)
        assert np.allclose(c, expect, atol=1e-12)

    def test_two_level_values(self):
        c = children_correlation(two_level(), {"p1": 1.0, "p2": 1.0})
        assert c[0, 1] == pytest.approx(2.0 / 3.0, abs=1e-12)
        assert c[0, 2] == pytest.approx(1.0 / np.sqrt(6.0), abs=1e-12)
        assert c[1, 2] == pytest.approx(1.0 / np.sqrt(6.0), abs=1e-12)

    def test_paired_four_targets(self):
        c = children_correlation(paired_four(), {"p1": 8.0, "p2": 1.0, "p3": 1.0})
        assert c[0, 1] == pytest.approx(0.9, abs=1e-12)
        assert c[2, 3] == pytest.approx(0.9, abs=1e-12)
        assert c[0, 2] == pytest.approx(0.8, abs=1e-12)

    def test_oracle_fork_formulas(self):
        v = {"p1": 1.3, "p2": 0.7, "p3": 2.2}
        c = correlation_oracle(fork(), v)
        var1 = 1 + v["p2"] + v["p1"]
        var4 = 1 + v["p3"] + v["p1"]
        rho1 = (v["p1"] + v["p2"]) / var1
        rho2 = v["p1"] / np.sqrt(var1 * var4)
        assert c[0, 1] == pytest.approx(rho1, abs=1e-15)
        assert c[0, 3] == pytest.approx(rho2, abs=1e-15)

    def test_single_child(self):
        g = parse_graph("latent p1\nchild c1 : p1\n")
        assert correlation_oracle(g, {"p1": 3.0}).tolist() == [[1.0]]
        assert np.allclose(children_correlation(g, {"p1": 3.0}), [[1.0]])

    def test_oracle_matches_inversion(self):
        rng = np.random.default_rng(42)
        for _ in range(60):
            g = random_tree(rng, max_latents=8, max_children=10)
            v = random_variances(rng, g)
            a = children_correlation(g, v)
            b = correlation_oracle(g, v)
            assert np.max(np.abs(a - b)) < 1e-10

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(5)
        g = fork()
        vs = [random_variances(rng, g) for _ in range(6)]
        arrays = {m: np.array([v[m] for v in vs]) for m in g.latents}
        stack = children_correlation_batch(g, arrays)
        for i, v in enumerate(vs):
            assert np.allclose(stack[i], children_correlation(g, v), atol=1e-12)

    def test_exchangeability_of_one_latent_graphs(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            k = int(rng.integers(2, 9))
            text = "latent p1\n" + "".join(f"child c{i} : p1\n" for i in range(k))
            g = parse_graph(text)
            c = children_correlation(g, {"p1": float(rng.uniform(0.05, 20))})
            off = c[~np.eye(k, dtype=bool)]
            assert np.ptp(off) < 1e-12

    def test_positive_definite_unit_diagonal(self):
        rng = np.random.default_rng(9)
        for _ in range(40):
            g = random_tree(rng, max_latents=8, max_children=12)
            v = random_variances(rng, g)
            c = children_correlation(g, v)
            assert np.max(np.abs(np.diag(c) - 1)) < 1e-12
            assert np.linalg.eigvalsh(c).min() > -1e-10
            off = c[~np.eye(c.shape[0], dtype=bool)]
            if off.size:
                assert off.min() >= 0.0
                assert off.max() < 1.0


class TestContractionSemantics:
    def test_monotone_under_removal(self):
        rng = np.random.default_rng(21)
        for _ in range(15):
            g = random_tree(rng, max_latents=6, max_children=8)
            v = random_variances(rng, g)
            seq = contract(g)
            for k, removed in enumerate(seq.removal_order[:-1]):
                before = seq.graphs[k]
                after = seq.graphs[k + 1]
                cb = correlation_oracle(before, {m: v[m] for m in before.latents})
                ca = correlation_oracle(after, {m: v[m] for m in after.latents})
                from corrtree.graph import ancestors

                anc = {c: set(ancestors(before, c)) for c in before.children}
                for i, a in enumerate(before.children):
                    for j in range(i + 1, len(before.children)):
                        b = before.children[j]
                        if removed in anc[a] and removed in anc[b]:
                            assert ca[i, j] <= cb[i, j] + 1e-12
                        elif removed not in anc[a] and removed not in anc[b]:
                            assert ca[i, j] == pytest.approx(cb[i, j], abs=1e-12)

    def test_identity_element(self):
        seq = contract(two_level())
        last = element_correlation(seq.graphs[-1], {})
        assert np.array_equal(last, np.eye(3))


class TestClassesAndSolve:
    def test_classes_paired_four(self):
        classes = correlation_classes(paired_four())
        assert classes == {
            "p1": [("c1", "c3"), ("c1", "c4"), ("c2", "c3"), ("c2", "c4")],
            "p2": [("c1", "c2")],
            "p3": [("c3", "c4")],
        }

    def test_classes_balanced_eight_count(self):
        classes = correlation_classes(balanced_eight())
        assert len(classes) == 7
        assert len(classes["p1"]) == 16

    def test_expand_targets_conflict(self):
        with pytest.raises(ValueError, match="conflicting"):
            expand_targets(paired_four(), {("c1", "c3"): 0.8, ("c2", "c4"): 0.7})

    def test_expand_targets_missing(self):
        with pytest.raises(ValueError, match="no target"):
            expand_targets(paired_four(), {("c1", "c2"): 0.9})

    def test_solve_paired_four(self):
        v = solve_variances(
            paired_four(),
            {("c1", "c2"): 0.9, ("c3", "c4"): 0.9, ("c1", "c3"): 0.8},
        )
        assert v["p1"] == pytest.approx(8.0, abs=1e-7)
        assert v["p2"] == pytest.approx(1.0, abs=1e-7)
        assert v["p3"] == pytest.approx(1.0, abs=1e-7)

    def test_solve_one_parent(self):
        g = one_parent_three()
        v = solve_variances(g, {"c1:c2": 0.5})
        assert v["p1"] == pytest.approx(1.0, abs=1e-8)

    def test_solve_infeasible(self):
        with pytest.raises(InfeasibleTargetsError) as err:
            solve_variances(
                paired_four(),
                {("c1", "c2"): 0.5, ("c3", "c4"): 0.5, ("c1", "c3"): 0.9},
            )
        assert err.value.classes  # names the violated class

    def test_solve_round_trip(self):
        rng = np.random.default_rng(17)
        done = 0
        while done < 20:
            g = random_tree(rng, max_latents=6, max_children=8)
            if len(g.children) < 2:
                continue
            truth = random_variances(rng, g, lo=0.2, hi=5.0)
            classes = correlation_classes(g)
            c = correlation_oracle(g, truth)
            order = list(g.children)
            targets = {}
            for pairs in classes.values():
                a, b = pairs[0]
                targets[(a, b)] = c[order.index(a), order.index(b)]
            solved = solve_variances(g, targets)
            c2 = correlation_oracle(g, solved)
            for pairs in classes.values():
                a, b = pairs[0]
                got = c2[order.index(a), order.index(b)]
                assert got == pytest.approx(targets[(a, b)], abs=1e-8)
            done += 1

    def test_class_correlations_batch(self):
        g = paired_four()
        arrays = {"p1": np.array([8.0, 1.0]), "p2": np.array([1.0, 1.0]),
                  "p3": np.array([1.0, 1.0])}
        rho = class_correlations_batch(g, arrays)
        assert rho["p2"][0] == pytest.approx(0.9)
        assert rho["p1"][0] == pytest.approx(0.8)
        assert rho["p1"][1] == pytest.approx(1.0 / 3.0)


class TestScale:
    def test_identity(self):
        cov = scale_to_covariance(np.eye(2), [2.0, 3.0])
        assert np.allclose(cov, np.diag([4.0, 9.0]))

    def test_unit_scales_no_op(self):
        c = children_correlation(one_parent_three(), {"p1": 1.0})
        assert np.allclose(scale_to_covariance(c, [1.0, 1.0, 1.0]), c)

    def test_named_scales(self):
        c = children_correlation(paired_four(), {"p1": 8.0, "p2": 1.0, "p3": 1.0})
        cov = scale_to_covariance(
            c, {"c1": 1.0, "c2": 0.2, "c3": 0.1, "c4": 0.5},
            children=("c1", "c2", "c3", "c4"),
        )
        assert cov[0, 1] == pytest.approx(0.9 * 1.0 * 0.2, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            scale_to_covariance(np.eye(3), [1.0, 2.0])

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError, match="positive"):
            scale_to_covariance(np.eye(2), [1.0, 0.0])
