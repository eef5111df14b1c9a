"""Shared fixtures: the standard example graphs and a random-tree generator."""
from __future__ import annotations

import numpy as np

from corrtree.graph import TreeGraph, parse_graph

ONE_PARENT_THREE = "latent p1\nchild c1 : p1\nchild c2 : p1\nchild c3 : p1\n"
ONE_PARENT_TWO = "latent p1\nchild c1 : p1\nchild c2 : p1\n"

# Two latents: a chain; c1, c2 under the lower latent, c3 under the root.
TWO_LEVEL = """\
latent p1
latent p2 : p1
child c1 : p2
child c2 : p2
child c3 : p1
"""

# Three latents: root with two branches, three children on one, one on the other.
FORK = """\
latent p1
latent p2 : p1
latent p3 : p1
child c1 : p2
child c2 : p2
child c3 : p2
child c4 : p3
"""

# Three latents, two children per branch.
PAIRED_FOUR = """\
latent p1
latent p2 : p1
latent p3 : p1
child c1 : p2
child c2 : p2
child c3 : p3
child c4 : p3
"""

# Balanced binary latent tree: 7 latents over 8 children in 4 pairs.
BALANCED_EIGHT = """\
latent p1
latent p2 : p1
latent p3 : p1
latent p4 : p2
latent p5 : p2
latent p6 : p3
latent p7 : p3
child c1 : p4
child c2 : p4
child c3 : p5
child c4 : p5
child c5 : p6
child c6 : p6
child c7 : p7
child c8 : p7
"""


def one_parent_three() -> TreeGraph:
    return parse_graph(ONE_PARENT_THREE)


def one_parent_two() -> TreeGraph:
    return parse_graph(ONE_PARENT_TWO)


def two_level() -> TreeGraph:
    return parse_graph(TWO_LEVEL)


def fork() -> TreeGraph:
    return parse_graph(FORK)


def paired_four() -> TreeGraph:
    return parse_graph(PAIRED_FOUR)


def balanced_eight() -> TreeGraph:
    return parse_graph(BALANCED_EIGHT)


def random_tree(rng: np.random.Generator, max_latents: int = 12,
                max_children: int = 20) -> TreeGraph:
    """Random valid tree: every latent hangs off an earlier one."""
    n_lat = int(rng.integers(1, max_latents + 1))
    n_chi = int(rng.integers(1, max_children + 1))
    latents = tuple(f"p{i+1}" for i in range(n_lat))
    children = tuple(f"c{i+1}" for i in range(n_chi))
    parent_of = {}
    for i in range(1, n_lat):
        parent_of[latents[i]] = latents[int(rng.integers(0, i))]
    for c in children:
        parent_of[c] = latents[int(rng.integers(0, n_lat))]
    return TreeGraph(latents, children, parent_of)


def random_variances(rng: np.random.Generator, graph: TreeGraph,
                     lo: float = 0.05, hi: float = 20.0) -> dict[str, float]:
    return {m: float(rng.uniform(lo, hi)) for m in graph.latents}
