"""Boolean decision trees, DNFs and their VC-dimension formulas.

Trees branch on Boolean variables: the left child is taken when the variable
is 1, the right child when it is 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product
from typing import Iterable, Sequence, Union

import numpy as np

from .autodiff import ContractError


@dataclass(frozen=True)
class Leaf:
    label: int


@dataclass(frozen=True)
class Node:
    var: int
    left: "BoolTree"  # var == 1
    right: "BoolTree"  # var == 0


BoolTree = Union[Leaf, Node]
Literal = tuple[int, bool]  # (variable index, polarity); polarity False means negated


@dataclass(frozen=True)
class BoolDnf:
    conjunctions: tuple[frozenset[Literal], ...]

    def __call__(self, x: Sequence[int]) -> int:
        return int(any(all(bool(x[v]) == pol for v, pol in c) for c in self.conjunctions))


def rank(tree: BoolTree) -> int:
    """0 for a leaf; 1 + r if both subtrees have rank r, else the larger rank."""
    if isinstance(tree, Leaf):
        return 0
    r0, r1 = rank(tree.left), rank(tree.right)
    return r0 + 1 if r0 == r1 else max(r0, r1)


def evaluate_tree(tree: BoolTree, x: Sequence[int]) -> int:
    while isinstance(tree, Node):
        tree = tree.left if x[tree.var] else tree.right
    return tree.label


def tree_vcdim(n: int, r: int) -> int:
    """Exact VC-dimension of rank-<=r decision trees on n Boolean variables:
    sum_{i=0..r} C(n, i)."""
    if not 0 <= r <= n:
        raise ContractError(f"need 0 <= r <= n, got r={r}, n={n}")
    return sum(math.comb(n, i) for i in range(r + 1))


def dnf_vcdim_bound(n: int, k: int, base: float = 2.0) -> float:
    """Upper bound 2 (n + 1) k log(3k) on the VC-dimension of k-term DNFs."""
    if n < 1 or k < 1:
        raise ContractError("n and k must be positive")
    return 2.0 * (n + 1) * k * math.log(3 * k, base)


def tree_to_dnf(tree: BoolTree) -> BoolDnf:
    """One conjunction per positive leaf, made of the path conditions."""
    conjunctions = []

    def walk(node, path):
        if isinstance(node, Leaf):
            if node.label:
                conjunctions.append(frozenset(path))
            return
        walk(node.left, path + [(node.var, True)])
        walk(node.right, path + [(node.var, False)])

    walk(tree, [])
    return BoolDnf(tuple(c for c in conjunctions if _satisfiable(c)))


def _satisfiable(c: Iterable[Literal]) -> bool:
    seen: dict[int, bool] = {}
    for v, pol in c:
        if seen.setdefault(v, pol) != pol:
            return False
    return True



def conjunction_to_rank1_tree(literals: Sequence[Literal]) -> BoolTree:
    """Chain tree: each node tests one literal; the satisfying branch leads to
    the next node, the other branch to a 0-leaf; the last node's satisfying
    branch is a 1-leaf.  An empty conjunction is the constant-true leaf."""
    tree: BoolTree = Leaf(1)
    for var, pol in reversed(list(literals)):
        tree = Node(var, tree, Leaf(0)) if pol else Node(var, Leaf(0), tree)
    return tree


def truth_table(fn, n: int) -> np.ndarray:
    return np.array([fn(x) for x in product((0, 1), repeat=n)], dtype=np.int8)


def random_tree(rng: np.random.Generator, n: int, max_depth: int, p_leaf: float = 0.3) -> BoolTree:
    """Random tree over ``n`` variables; variables may repeat along a path."""

    def grow(depth):
        if depth == max_depth or rng.random() < p_leaf:
            return Leaf(int(rng.integers(2)))
        return Node(int(rng.integers(n)), grow(depth + 1), grow(depth + 1))

    return grow(0)


def complete_tree(depth: int, n: int | None = None) -> BoolTree:
    n = depth if n is None else n

    def grow(level, label):
        if level == depth:
            return Leaf(label)
        return Node(level % n, grow(level + 1, 1), grow(level + 1, 0))

    return grow(0, 1)


def emit_vc_curves(
    n_range: Iterable[int],
    tree_ranks: Iterable[int],
    dnf_ks: Iterable[int],
    base: float = 2.0,
) -> list[tuple[int, str, float]]:
    """Rows ``(n, series, value)``: ``tree_r<r>`` exact tree VC-dimensions
    (only where r <= n) and ``dnf_k<k>`` DNF upper bounds."""
    tree_ranks, dnf_ks = list(tree_ranks), list(dnf_ks)
    rows: list[tuple[int, str, float]] = []
    for n in n_range:
        for r in tree_ranks:
            if r <= n:
                rows.append((n, f"tree_r{r}", float(tree_vcdim(n, r))))
        for k in dnf_ks:
            rows.append((n, f"dnf_k{k}", dnf_vcdim_bound(n, k, base)))
    return rows


def crossover(rows: Sequence[tuple[int, str, float]], tree_series: str, dnf_series: str) -> int | None:
    """Smallest n at which the tree series exceeds the DNF series, if any."""
    tree = {n: v for n, s, v in rows if s == tree_series}
    dnf = {n: v for n, s, v in rows if s == dnf_series}
    for n in sorted(set(tree) & set(dnf)):
        if tree[n] > dnf[n]:
            return n
    return None
