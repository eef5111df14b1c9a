"""Rooted latent-tree graphs: parsing, validation, ancestry, and contraction.

A graph has latent nodes (one of which is the root) and child nodes (leaves).
Every non-root node has exactly one latent parent.  Removing latents one at a
time, root last, yields a nested sequence of simpler graphs that ends in an
identity (no-latent) model.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_TOKEN_RE = re.compile(r"[^\s:]+|:")


class GraphError(ValueError):
    """Invalid graph text or structure."""


class GraphSyntaxError(GraphError):
    """Malformed declaration line, with 1-based location."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass(frozen=True)
class TreeGraph:
    """Immutable rooted tree of latent nodes with leaf children.

    ``latents`` and ``children`` keep declaration order; ``parent_of`` maps
    every node except the root to its (latent) parent.
    """

    latents: tuple[str, ...]
    children: tuple[str, ...]
    parent_of: dict[str, str]

    @property
    def root(self) -> str:
        for name in self.latents:
            if name not in self.parent_of:
                return name
        raise GraphError("graph has no root")

    def is_latent(self, name: str) -> bool:
        return name in self.latents

    def nodes(self) -> tuple[str, ...]:
        return self.children + self.latents

    def dependents_of(self, latent: str) -> tuple[str, ...]:
        """Direct dependents (children first, then latents), declaration order."""
        out = [c for c in self.children if self.parent_of.get(c) == latent]
        out += [m for m in self.latents if self.parent_of.get(m) == latent]
        return tuple(out)


@dataclass(frozen=True)
class IdentityModel:
    """Terminal element of a contraction: no latents, children independent."""

    children: tuple[str, ...]


@dataclass(frozen=True)
class ModelSequence:
    """Nested graphs from one contraction; last element is the identity marker."""

    graphs: tuple
    removal_order: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.graphs)


@dataclass(frozen=True)
class Violation:
    code: str
    nodes: tuple[str, ...]
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


def _tokens(line: str) -> list[tuple[str, int]]:
    return [(m.group(0), m.start() + 1) for m in _TOKEN_RE.finditer(line)]


def parse_graph(text: str) -> TreeGraph:
    """Parse DSL source into a validated TreeGraph.

    One declaration per line: ``latent NAME [: PARENT]`` or
    ``child NAME : PARENT``.  Exactly one latent line omits the parent (the
    root).  ``#`` starts a comment; blank lines are ignored.  Parents must be
    declared before they are referenced, so declaration order is topological.
    """
    raw_lines = text.splitlines()
    # Names declared as children anywhere, for pointed error messages when one
    # is referenced as a parent.
    future_children = set()
    for raw in raw_lines:
        toks = [t for t, _ in _tokens(raw.split("#", 1)[0])]
        if len(toks) >= 2 and toks[0] == "child":
            future_children.add(toks[1])

    latents: list[str] = []
    children: list[str] = []
    parent_of: dict[str, str] = {}
    seen: dict[str, int] = {}
    root: str | None = None

    for lineno, raw in enumerate(raw_lines, start=1):
        code = raw.split("#", 1)[0]
        toks = _tokens(code)
        if not toks:
            continue
        kind, kcol = toks[0]
        if kind not in ("latent", "child"):
            raise GraphSyntaxError(f"expected 'latent' or 'child', got {kind!r}", lineno, kcol)
        if len(toks) < 2:
            raise GraphSyntaxError("missing node name", lineno, kcol + len(kind))
        name, ncol = toks[1]
        if not NAME_RE.match(name):
            raise GraphSyntaxError(f"invalid name {name!r}", lineno, ncol)

        parent = None
        if len(toks) == 2:
            if kind == "child":
                raise GraphSyntaxError(f"child {name!r} needs ': PARENT'", lineno, ncol + len(name))
        elif len(toks) == 4 and toks[2][0] == ":":
            parent, pcol = toks[3]
            if not NAME_RE.match(parent):
                raise GraphSyntaxError(f"invalid parent name {parent!r}", lineno, pcol)
        else:
            tok, col = toks[2]
            raise GraphSyntaxError(f"unexpected token {tok!r}", lineno, col)

        if name in seen:
            raise GraphSyntaxError(
                f"duplicate node {name!r} (first declared on line {seen[name]})", lineno, ncol
            )
        seen[name] = lineno

        if parent is not None:
            if parent == name:
                raise GraphSyntaxError(f"node {name!r} cannot be its own parent", lineno, ncol)
            if parent not in latents:
                if parent in future_children:
                    raise GraphSyntaxError(f"child {parent!r} used as parent", lineno, ncol)
                raise GraphSyntaxError(
                    f"unknown parent {parent!r} (parents must be latents declared earlier)",
                    lineno,
                    ncol,
                )
            parent_of[name] = parent

        if kind == "latent":
            if parent is None:
                if root is not None:
                    raise GraphSyntaxError(
                        f"multiple roots: {root!r} and {name!r}", lineno, ncol
                    )
                root = name
            latents.append(name)
        else:
            children.append(name)

    if root is None:
        raise GraphError("no root: every latent has a parent" if latents else "no latent declared")
    if not children:
        raise GraphError("no children declared")
    return TreeGraph(tuple(latents), tuple(children), parent_of)


def serialize(graph: TreeGraph) -> str:
    """Render a graph back to DSL text (latents first, declaration order)."""
    lines = []
    for m in graph.latents:
        p = graph.parent_of.get(m)
        lines.append(f"latent {m}" if p is None else f"latent {m} : {p}")
    for c in graph.children:
        lines.append(f"child {c} : {graph.parent_of[c]}")
    return "\n".join(lines) + "\n"


def validate(graph: TreeGraph) -> list[Violation]:
    """Return every violated structural invariant (empty list = valid)."""
    out: list[Violation] = []
    names = list(graph.children) + list(graph.latents)
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        out.append(Violation("duplicate-node", tuple(dupes), f"duplicate node names: {dupes}"))
    if not graph.latents:
        out.append(Violation("no-latents", (), "graph has no latent node"))
    if not graph.children:
        out.append(Violation("no-children", (), "graph has no child node"))

    latent_set = set(graph.latents)
    child_set = set(graph.children)

    roots = tuple(m for m in graph.latents if m not in graph.parent_of)
    if len(roots) > 1:
        out.append(Violation("multiple-roots", roots, f"multiple roots: {list(roots)}"))
    elif not roots and graph.latents:
        out.append(Violation("no-root", (), "every latent has a parent"))

    for c in graph.children:
        p = graph.parent_of.get(c)
        if p is None:
            out.append(Violation("child-missing-parent", (c,), f"child {c!r} has no parent"))
        elif p in child_set:
            out.append(Violation("child-used-as-parent", (p, c), f"child {p!r} is parent of {c!r}"))
        elif p not in latent_set:
            out.append(Violation("unknown-parent", (p, c), f"{c!r} has unknown parent {p!r}"))

    index = {m: i for i, m in enumerate(graph.latents)}
    for m in graph.latents:
        if m in roots:
            continue
        p = graph.parent_of.get(m)
        if p is None:
            continue  # counted under roots above
        if p in child_set:
            out.append(Violation("child-used-as-parent", (p, m), f"child {p!r} is parent of {m!r}"))
        elif p not in latent_set:
            out.append(Violation("unknown-parent", (p, m), f"{m!r} has unknown parent {p!r}"))
        elif index[p] >= index[m]:
            out.append(
                Violation(
                    "declaration-order",
                    (m, p),
                    f"latent {m!r} declared before its parent {p!r}",
                )
            )

    for key in graph.parent_of:
        if key not in latent_set and key not in child_set:
            out.append(Violation("unknown-node", (key,), f"parent map names unknown node {key!r}"))

    # A cycle among latents never reaches a root.
    for m in graph.latents:
        seen = {m}
        cur = m
        while cur in graph.parent_of and graph.parent_of[cur] in latent_set:
            cur = graph.parent_of[cur]
            if cur in seen:
                out.append(Violation("cycle", tuple(sorted(seen)), f"latent cycle through {cur!r}"))
                break
            seen.add(cur)

    # De-duplicate identical findings (cycles are found once per member).
    uniq: list[Violation] = []
    for v in out:
        if all(not (v.code == u.code and set(v.nodes) == set(u.nodes)) for u in uniq):
            uniq.append(v)
    return uniq


def ancestors(graph: TreeGraph, node: str) -> list[str]:
    """Latent ancestors of ``node``, nearest first, root last."""
    if node not in graph.children and node not in graph.latents:
        raise GraphError(f"unknown node {node!r}")
    out: list[str] = []
    cur = node
    while cur in graph.parent_of:
        cur = graph.parent_of[cur]
        out.append(cur)
        if len(out) > len(graph.latents):
            raise GraphError("parent chain does not terminate (cycle)")
    return out


def common_ancestors(graph: TreeGraph, a: str, b: str) -> set[str]:
    """Shared latent ancestors of two distinct children (never empty)."""
    if a == b:
        raise GraphError("nodes must be distinct")
    for n in (a, b):
        if n not in graph.children:
            raise GraphError(f"{n!r} is not a child node")
    return set(ancestors(graph, a)) & set(ancestors(graph, b))


def default_removal_order(graph: TreeGraph) -> tuple[str, ...]:
    """Reverse of latent declaration order; the root is removed last."""
    return tuple(reversed(graph.latents))


def remove_latent(graph: TreeGraph, latent: str) -> TreeGraph | IdentityModel:
    """Delete one latent, re-attaching its dependents to its parent.

    Removing the only latent yields the IdentityModel marker; removing the
    root while other latents remain is an error.
    """
    if latent not in graph.latents:
        raise GraphError(f"{latent!r} is not a latent of this graph")
    if len(graph.latents) == 1:
        return IdentityModel(graph.children)
    if latent not in graph.parent_of:
        raise GraphError(f"cannot remove root {latent!r} while other latents remain")
    grand = graph.parent_of[latent]
    parent_of = {}
    for node, p in graph.parent_of.items():
        if node == latent:
            continue
        parent_of[node] = grand if p == latent else p
    return TreeGraph(
        tuple(m for m in graph.latents if m != latent), graph.children, parent_of
    )


def contract(graph: TreeGraph, order: list[str] | tuple[str, ...] | None = None) -> ModelSequence:
    """Generate the nested model sequence by removing one latent per step.

    ``order`` must be a permutation of the latents ending with the root;
    by default latents are removed in reverse declaration order.  Dependents
    of a removed latent are re-attached to its parent, which is exactly the
    model obtained by forcing that latent's variance to zero.
    """
    if order is None:
        order = default_removal_order(graph)
    order = tuple(order)
    if sorted(order) != sorted(graph.latents):
        raise GraphError("removal order must be a permutation of the latents")
    if order[-1] != graph.root:
        raise GraphError(f"removal order must end with the root {graph.root!r}")
    seq: list[TreeGraph | IdentityModel] = [graph]
    cur: TreeGraph = graph
    for m in order:
        nxt = remove_latent(cur, m)
        seq.append(nxt)
        if isinstance(nxt, TreeGraph):
            cur = nxt
    return ModelSequence(tuple(seq), order)
