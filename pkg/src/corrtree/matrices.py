"""Precision, covariance, and correlation matrices induced by a latent tree.

Two independent routes to the children correlation matrix are provided: the
joint-precision route (assemble, factorize, invert, normalize) and a direct
path-rule oracle (marginal variances and covariances as sums of ancestor
variances).  They agree to near machine precision and are cross-checked in
the test suite.
"""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from .graph import GraphError, IdentityModel, TreeGraph, ancestors

Variances = Mapping[str, float]


class FactorizationError(RuntimeError):
    """Cholesky factorization failed even after a jitter retry."""


def check_variances(graph: TreeGraph, variances: Variances, allow_zero: bool = False) -> None:
    """Every latent must have a finite, positive (or nonnegative) variance."""
    for m in graph.latents:
        if m not in variances:
            raise GraphError(f"missing variance for latent {m!r}")
        v = float(variances[m])
        if not np.isfinite(v):
            raise ValueError(f"variance of {m!r} is not finite")
        if v < 0 or (v == 0 and not allow_zero):
            raise ValueError(f"variance of {m!r} must be positive, got {v}")


def node_order(graph: TreeGraph) -> tuple[str, ...]:
    """Matrix node order: children first, then latents, declaration order."""
    return graph.children + graph.latents


def assemble_precision(graph: TreeGraph, variances: Variances) -> np.ndarray:
    """Joint precision of (children, latents) for fixed latent variances.

    Children have unit conditional variance given their parent; a latent with
    variance q2 conditional on its parent contributes 1/q2 to its own diagonal
    and -1/q2 to the edge with its parent.
    """
    check_variances(graph, variances)
    order = node_order(graph)
    idx = {name: i for i, name in enumerate(order)}
    n = len(order)
    q = np.zeros((n, n))
    for c in graph.children:
        i, j = idx[c], idx[graph.parent_of[c]]
        q[i, i] = 1.0
        q[i, j] = q[j, i] = -1.0
        q[j, j] += 1.0
    for m in graph.latents:
        i = idx[m]
        prec = 1.0 / float(variances[m])
        q[i, i] += prec
        p = graph.parent_of.get(m)
        if p is not None:
            j = idx[p]
            q[i, j] += -prec
            q[j, i] += -prec
            q[j, j] += prec
    return q


def _chol_with_jitter(a: np.ndarray, jitter: float = 1e-10):
    try:
        return scipy.linalg.cho_factor(a, lower=True)
    except scipy.linalg.LinAlgError:
        pass
    try:
        return scipy.linalg.cho_factor(a + jitter * np.eye(a.shape[0]), lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise FactorizationError(f"matrix is not positive definite: {exc}") from exc


def spd_inverse(a: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix via Cholesky."""
    factor = _chol_with_jitter(a)
    inv = scipy.linalg.cho_solve(factor, np.eye(a.shape[0]))
    return 0.5 * (inv + inv.T)


def _normalize(cov: np.ndarray) -> np.ndarray:
    d = 1.0 / np.sqrt(np.diagonal(cov, axis1=-2, axis2=-1))
    corr = cov * d[..., :, None] * d[..., None, :]
    corr = 0.5 * (corr + np.swapaxes(corr, -1, -2))
    idx = np.arange(cov.shape[-1])
    corr[..., idx, idx] = 1.0
    return corr


def children_correlation(graph: TreeGraph, variances: Variances) -> np.ndarray:
    """Children-block correlation matrix by inverting the joint precision."""
    prec = assemble_precision(graph, variances)
    cov = spd_inverse(prec)
    k = len(graph.children)
    return _normalize(cov)[:k, :k]


def children_correlation_batch(graph: TreeGraph, variances: Mapping[str, np.ndarray]) -> np.ndarray:
    """Vectorized ``children_correlation`` over a batch of variance values.

    ``variances`` maps each latent to a scalar or a (B,) array; returns a
    (B, K, K) stack.  Uses the same precision parametrization as the scalar
    route (batched LU inversion instead of Cholesky).
    """
    arrays = {m: np.atleast_1d(np.asarray(variances[m], dtype=float)) for m in graph.latents}
    b = max(a.shape[0] for a in arrays.values())
    order = node_order(graph)
    idx = {name: i for i, name in enumerate(order)}
    n = len(order)
    q = np.zeros((b, n, n))
    for c in graph.children:
        i, j = idx[c], idx[graph.parent_of[c]]
        q[:, i, i] = 1.0
        q[:, i, j] = q[:, j, i] = -1.0
        q[:, j, j] += 1.0
    for m in graph.latents:
        v = np.broadcast_to(arrays[m], (b,))
        if np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise ValueError(f"variance of {m!r} must be positive and finite")
        i = idx[m]
        prec = 1.0 / v
        q[:, i, i] += prec
        p = graph.parent_of.get(m)
        if p is not None:
            j = idx[p]
            q[:, i, j] -= prec
            q[:, j, i] -= prec
            q[:, j, j] += prec
    cov = np.linalg.inv(q)
    k = len(graph.children)
    return _normalize(cov)[:, :k, :k]


def correlation_oracle(graph: TreeGraph, variances: Variances) -> np.ndarray:
    """Children correlation straight from the graph, no matrix inversion.

    Var(c) = 1 + sum of ancestor variances; Cov(c_i, c_j) = sum of variances
    over the shared ancestors.
    """
    check_variances(graph, variances)
    k = len(graph.children)
    paths = [set(ancestors(graph, c)) for c in graph.children]
    var = np.array(
        [1.0 + sum(float(variances[m]) for m in path) for path in paths]
    )
    corr = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            cov = sum(float(variances[m]) for m in paths[i] & paths[j])
            corr[i, j] = corr[j, i] = cov / np.sqrt(var[i] * var[j])
    return corr


def element_correlation(element: TreeGraph | IdentityModel, variances: Variances) -> np.ndarray:
    """Correlation matrix of one contraction-sequence element."""
    if isinstance(element, IdentityModel):
        return np.eye(len(element.children))
    sub = {m: float(variances[m]) for m in element.latents}
    return children_correlation(element, sub)


def scale_to_covariance(corr: np.ndarray, scales: Mapping[str, float] | Sequence[float],
                        children: Sequence[str] | None = None) -> np.ndarray:
    """Covariance D C D from a correlation matrix and per-child scales.

    ``scales`` is either a sequence aligned with the matrix order or a map
    from child name to standard deviation (then ``children`` gives the order).
    """
    if isinstance(scales, Mapping):
        if children is None:
            raise ValueError("child order required when scales are given by name")
        s = np.array([float(scales[c]) for c in children])
    else:
        s = np.asarray(scales, dtype=float)
    if s.shape[0] != corr.shape[0]:
        raise ValueError("scale vector length does not match matrix dimension")
    if np.any(s <= 0):
        raise ValueError("scales must be positive")
    return corr * s[:, None] * s[None, :]


def correlation_classes(graph: TreeGraph) -> dict[str, list[tuple[str, str]]]:
    """Group child pairs by their nearest shared ancestor (the class key).

    Pairs in one class share the same common-ancestor set, hence the same
    correlation value for any variance assignment.  Keys follow latent
    declaration order; values list pairs in child declaration order.
    """
    paths = {c: ancestors(graph, c) for c in graph.children}
    classes: dict[str, list[tuple[str, str]]] = {}
    for i, a in enumerate(graph.children):
        for b in graph.children[i + 1:]:
            shared = set(paths[a]) & set(paths[b])
            meet = next(m for m in paths[a] if m in shared)
            classes.setdefault(meet, []).append((a, b))
    return {m: classes[m] for m in graph.latents if m in classes}


def class_correlations_batch(graph: TreeGraph, variances: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Per-class correlation values (path rule), vectorized over a batch."""
    arrays = {m: np.atleast_1d(np.asarray(variances[m], dtype=float)) for m in graph.latents}
    b = max(a.shape[0] for a in arrays.values())
    paths = {c: set(ancestors(graph, c)) for c in graph.children}
    var = {
        c: 1.0 + sum(np.broadcast_to(arrays[m], (b,)) for m in paths[c])
        for c in graph.children
    }
    out = {}
    for meet, pairs in correlation_classes(graph).items():
        a, c = pairs[0]
        cov = sum(np.broadcast_to(arrays[m], (b,)) for m in paths[a] & paths[c])
        out[meet] = cov / np.sqrt(var[a] * var[c])
    return out


class InfeasibleTargetsError(ValueError):
    """Requested class correlations are not reachable by positive variances."""

    def __init__(self, message: str, classes: tuple[str, ...] = ()):
        super().__init__(message)
        self.classes = classes


def _normalize_pair(key) -> tuple[str, str]:
    if isinstance(key, str):
        parts = key.split(":")
        if len(parts) != 2:
            raise ValueError(f"pair key {key!r} must look like 'c1:c2'")
        return parts[0].strip(), parts[1].strip()
    a, b = key
    return str(a), str(b)


def expand_targets(graph: TreeGraph, targets: Mapping) -> dict[str, float]:
    """Resolve pair-keyed targets to one value per correlation class."""
    classes = correlation_classes(graph)
    pair_to_class = {}
    for meet, pairs in classes.items():
        for a, b in pairs:
            pair_to_class[(a, b)] = meet
            pair_to_class[(b, a)] = meet
    by_class: dict[str, float] = {}
    for key, value in targets.items():
        pair = _normalize_pair(key)
        if pair not in pair_to_class:
            raise ValueError(f"{pair} is not a child pair of this graph")
        meet = pair_to_class[pair]
        rho = float(value)
        if not 0.0 < rho < 1.0:
            raise ValueError(f"target for {pair} must be in (0, 1), got {rho}")
        if meet in by_class and abs(by_class[meet] - rho) > 1e-12:
            raise ValueError(
                f"conflicting targets for correlation class {meet!r}: "
                f"{by_class[meet]} vs {rho}"
            )
        by_class[meet] = rho
    missing = sorted(set(classes) - set(by_class))
    if missing:
        raise ValueError(f"no target given for correlation class(es) {missing}")
    return by_class


def solve_variances(graph: TreeGraph, targets: Mapping, tol: float = 1e-10,
                    max_iter: int = 200) -> dict[str, float]:
    """Latent variances whose induced correlations match the given targets.

    ``targets`` maps child pairs (tuples or ``"a:b"`` strings) to values in
    (0, 1), one per correlation class.  Solved by damped Gauss-Newton on log
    variances with analytic path-rule residuals; raises
    ``InfeasibleTargetsError`` naming the worst class when no assignment fits.
    """
    by_class = expand_targets(graph, targets)
    classes = correlation_classes(graph)
    names = list(graph.latents)
    pos = {m: i for i, m in enumerate(names)}
    reps = [(meet, classes[meet][0]) for meet in by_class]
    want = np.array([by_class[meet] for meet, _ in reps])
    paths = {c: set(ancestors(graph, c)) for c in graph.children}
    above = {m: {m} | set(ancestors(graph, m)) for m in names}

    def residual_and_jac(logq):
        q = np.exp(logq)
        r = np.empty(len(reps))
        jac = np.zeros((len(reps), len(names)))
        for row, (meet, (a, b)) in enumerate(reps):
            va = 1.0 + sum(q[pos[m]] for m in paths[a])
            vb = 1.0 + sum(q[pos[m]] for m in paths[b])
            cov = sum(q[pos[m]] for m in above[meet])
            denom = np.sqrt(va * vb)
            rho = cov / denom
            r[row] = rho - want[row]
            for m in names:
                d = 0.0
                if m in above[meet]:
                    d += 1.0 / denom
                if m in paths[a]:
                    d -= rho / (2.0 * va)
                if m in paths[b]:
                    d -= rho / (2.0 * vb)
                jac[row, pos[m]] = d * q[pos[m]]  # chain rule onto log variance
        return r, jac

    logq = np.zeros(len(names))
    r, jac = residual_and_jac(logq)
    for _ in range(max_iter):
        if np.max(np.abs(r)) <= tol:
            break
        step, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        norm0 = np.linalg.norm(r)
        scale = 1.0
        for _ in range(40):
            trial = logq + scale * step
            r_try, jac_try = residual_and_jac(np.clip(trial, -60, 60))
            if np.linalg.norm(r_try) < norm0:
                logq = np.clip(trial, -60, 60)
                r, jac = r_try, jac_try
                break
            scale *= 0.5
        else:
            break  # no descent direction left
    if np.max(np.abs(r)) > 1e-8:
        worst = int(np.argmax(np.abs(r)))
        meet, pair = reps[worst]
        raise InfeasibleTargetsError(
            f"targets are infeasible: class {meet!r} (pair {pair}) misses its "
            f"target {want[worst]} by {abs(r[worst]):.3g}",
            classes=(meet,),
        )
    return {m: float(np.exp(logq[pos[m]])) for m in names}
