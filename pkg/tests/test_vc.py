import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dnfnet.autodiff import ContractError
from dnfnet.vc import (
    BoolDnf,
    Leaf,
    Node,
    complete_tree,
    conjunction_to_rank1_tree,
    crossover,
    dnf_vcdim_bound,
    emit_vc_curves,
    evaluate_tree,
    random_tree,
    rank,
    tree_to_dnf,
    tree_vcdim,
    truth_table,
)


class TestRank:
    def test_leaf(self):
        assert rank(Leaf(1)) == 0

    @pytest.mark.parametrize("r", range(7))
    def test_complete_tree(self, r):
        assert rank(complete_tree(r)) == r

    def test_unbalanced(self):
        tree = Node(0, complete_tree(2), Leaf(0))
        assert rank(tree) == 2

    def test_figure_three_chain(self):
        chain = conjunction_to_rank1_tree([(i, True) for i in range(5)])
        assert rank(chain) == 1
        node, depth = chain, 0
        while isinstance(node, Node):
            assert node.var == depth and node.right == Leaf(0)
            node, depth = node.left, depth + 1
        assert depth == 5 and node == Leaf(1)


class TestVcFormulas:
    def test_rank_one(self):
        assert tree_vcdim(5, 1) == 6

    @pytest.mark.parametrize("n", [1, 7, 20])
    def test_full_rank(self, n):
        assert tree_vcdim(n, n) == 2**n

    def test_large_value(self):
        assert tree_vcdim(100, 3) == 166751

    def test_bad_rank(self):
        with pytest.raises(ContractError):
            tree_vcdim(3, 4)

    def test_dnf_bound_values(self):
        assert dnf_vcdim_bound(7, 1) == pytest.approx(2 * 8 * math.log2(3))
        assert dnf_vcdim_bound(10, 2) == pytest.approx(113.7, abs=0.05)

    @settings(max_examples=100)
    @given(st.integers(1, 500), st.integers(1, 500))
    def test_dnf_bound_monotone(self, n, k):
        assert dnf_vcdim_bound(n + 1, k) > dnf_vcdim_bound(n, k)
        assert dnf_vcdim_bound(n, k + 1) > dnf_vcdim_bound(n, k)


class TestConversions:
    def test_single_positive_leaf(self):
        dnf = tree_to_dnf(Leaf(1))
        assert dnf.conjunctions == (frozenset(),)
        assert dnf([0, 1]) == 1

    def test_all_negative(self):
        dnf = tree_to_dnf(Node(0, Leaf(0), Leaf(0)))
        assert dnf.conjunctions == ()
        assert dnf([1]) == 0

    def test_contradictory_path_dropped(self):
        tree = Node(0, Node(0, Leaf(0), Leaf(1)), Leaf(0))
        assert tree_to_dnf(tree).conjunctions == ()

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 4), st.integers(0, 2**32 - 1))
    def test_tree_dnf_equivalence(self, n, depth, seed):
        tree = random_tree(np.random.default_rng(seed), n, depth)
        dnf = tree_to_dnf(tree)
        np.testing.assert_array_equal(truth_table(lambda x: evaluate_tree(tree, x), n), truth_table(dnf, n))

    def test_single_literal(self):
        tree = conjunction_to_rank1_tree([(3, False)])
        assert isinstance(tree, Node) and rank(tree) == 1
        assert evaluate_tree(tree, [0, 0, 0, 0]) == 1 and evaluate_tree(tree, [0, 0, 0, 1]) == 0

    @pytest.mark.parametrize("n", range(1, 7))
    def test_all_conjunctions_small_n(self, n):
        for pattern in itertools.product((None, True, False), repeat=n):
            lits = [(v, pol) for v, pol in enumerate(pattern) if pol is not None]
            tree = conjunction_to_rank1_tree(lits)
            dnf = BoolDnf((frozenset(lits),))
            assert rank(tree) == (1 if lits else 0)
            np.testing.assert_array_equal(truth_table(lambda x: evaluate_tree(tree, x), n), truth_table(dnf, n))


class TestCurves:
    def test_rank_one_series(self):
        rows = emit_vc_curves(range(1, 30), [1], [4])
        assert all(v == n + 1 for n, s, v in rows if s == "tree_r1")

    def test_empty_range(self):
        assert emit_vc_curves(range(0), [1, 2], [8]) == []

    def test_crossover_is_first_exceeding_n(self):
        rows = emit_vc_curves(range(1, 200), [2], [4])
        n = crossover(rows, "tree_r2", "dnf_k4")
        assert tree_vcdim(n, 2) > dnf_vcdim_bound(n, 4)
        assert all(tree_vcdim(m, 2) <= dnf_vcdim_bound(m, 4) for m in range(2, n))

    def test_no_crossover(self):
        assert crossover(emit_vc_curves(range(1, 10), [1], [100]), "tree_r1", "dnf_k100") is None
