"""Sequential penalized-complexity prior over latent-tree variances.

Each contraction step pairs a flexible model (one extra latent, variance xi)
with its base model (that latent removed).  The step distance is
sqrt(2 * KLD(flexible || base)); an exponential law with a common rate on the
distance induces, by change of variables, the prior on xi.  The joint prior
over all variances is the product of the per-step conditional densities along
the removal order.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from .graph import GraphError, IdentityModel, TreeGraph, contract, remove_latent
from .matrices import (
    FactorizationError,
    _chol_with_jitter,
    children_correlation,
    children_correlation_batch,
    class_correlations_batch,
    element_correlation,
)

XI_MAX = 1e12  # bracket cap for distance inversion
_NEG_TOL = 1e-12


class InvalidProfileError(RuntimeError):
    """Step distance failed its monotonicity contract."""


class DistanceSaturationError(RuntimeError):
    """Distance stays below the requested value up to the bracket cap."""


class DistanceSaturationWarning(UserWarning):
    """Some draws were capped at the bracket limit instead of solved."""


@dataclass(frozen=True)
class PCPriorSpec:
    """Rate of the exponential distance law plus the parent-removal order.

    The rate is shared across all steps; ``removal_order`` of None means the
    graph's default (reverse declaration) order.
    """

    rate: float = 5.0
    removal_order: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"rate must be positive, got {self.rate}")


@dataclass(frozen=True)
class PriorDensity:
    log_density: float
    param: str  # "variance" or "log-variance"


def kld_gaussian(c_flex: np.ndarray, c_base: np.ndarray) -> float:
    """KLD of the flexible zero-mean Gaussian from the base one.

    0.5 * (tr(C_base^-1 C_flex) - n - log det C_flex + log det C_base);
    tiny negative round-off (within 1e-12) is clamped to zero.
    """
    c_flex = np.asarray(c_flex, dtype=float)
    c_base = np.asarray(c_base, dtype=float)
    if c_flex.shape != c_base.shape or c_flex.ndim != 2:
        raise ValueError(f"dimension mismatch: {c_flex.shape} vs {c_base.shape}")
    n = c_flex.shape[0]
    base_factor = _chol_with_jitter(c_base)
    flex_factor = _chol_with_jitter(c_flex)
    trace = float(np.trace(scipy.linalg.cho_solve(base_factor, c_flex)))
    logdet_base = 2.0 * float(np.sum(np.log(np.diag(base_factor[0]))))
    logdet_flex = 2.0 * float(np.sum(np.log(np.diag(flex_factor[0]))))
    kld = 0.5 * (trace - n - logdet_flex + logdet_base)
    if kld < -_NEG_TOL:
        raise ValueError(f"KLD evaluated negative ({kld:.3g}); inputs are not valid correlations")
    return max(kld, 0.0)


def _kld_batch(flex: np.ndarray, base_inv: np.ndarray, base_logdet, n: int) -> np.ndarray:
    trace = np.einsum("...ij,...ij->...", base_inv, flex)
    sign, logdet_flex = np.linalg.slogdet(flex)
    if np.any(sign <= 0):
        raise FactorizationError("flexible correlation matrix is not positive definite")
    kld = 0.5 * (trace - n - logdet_flex + base_logdet)
    bad = kld < -_NEG_TOL
    if np.any(bad):
        raise ValueError(f"KLD evaluated negative ({kld[bad].min():.3g})")
    return np.maximum(kld, 0.0)


def _prep_base(base, cond_arrays: Mapping[str, np.ndarray], b: int):
    """Inverse and log-determinant of the base correlation, batched."""
    if isinstance(base, IdentityModel):
        k = len(base.children)
        return np.eye(k), 0.0
    c_base = children_correlation_batch(base, cond_arrays)
    sign, logdet = np.linalg.slogdet(c_base)
    if np.any(sign <= 0):
        raise FactorizationError("base correlation matrix is not positive definite")
    return np.linalg.inv(c_base), logdet


class DistanceProfile:
    """Distance xi -> d(xi) for removing one latent at fixed conditioning.

    d(0) = 0 and d is increasing; ``assert_monotone`` probes a log grid and
    raises ``InvalidProfileError`` on any decrease.
    """

    def __init__(self, graph: TreeGraph, removed: str, conditioning: Mapping[str, float]):
        if removed not in graph.latents:
            raise GraphError(f"{removed!r} is not a latent of this graph")
        if removed in conditioning:
            raise ValueError(f"conditioning must not include the removed latent {removed!r}")
        missing = [m for m in graph.latents if m != removed and m not in conditioning]
        if missing:
            raise ValueError(f"conditioning is missing variances for {missing}")
        self.graph = graph
        self.removed = removed
        self.conditioning = {m: float(conditioning[m]) for m in graph.latents if m != removed}
        self.base = remove_latent(graph, removed)
        self._c_base = element_correlation(self.base, self.conditioning)
        self._n = len(graph.children)
        self._base_inv, self._base_logdet = _prep_base(self.base, self.conditioning, 1)
        self._fisher: float | None = None

    def __call__(self, xi):
        arr = np.asarray(xi, dtype=float)
        if arr.ndim == 0:
            x = float(arr)
            if x < 0:
                raise ValueError(f"variance must be nonnegative, got {x}")
            if x == 0.0:
                return 0.0
            c_flex = children_correlation(self.graph, {**self.conditioning, self.removed: x})
            return math.sqrt(2.0 * kld_gaussian(c_flex, self._c_base))
        return self.batch(arr)

    def batch(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if np.any(xi < 0):
            raise ValueError("variances must be nonnegative")
        out = np.zeros(xi.shape)
        live = xi > 0
        if np.any(live):
            values = {m: np.full(live.sum(), v) for m, v in self.conditioning.items()}
            values[self.removed] = xi[live]
            flex = children_correlation_batch(self.graph, values)
            kld = _kld_batch(flex, self._base_inv, self._base_logdet, self._n)
            out[live] = np.sqrt(2.0 * kld)
        return out

    def derivative(self, xi: float) -> float:
        """Central-difference d'(xi); step 1e-6 absolute or relative."""
        if xi <= 0:
            raise ValueError("derivative defined for positive variance only")
        h = max(1e-6, 1e-6 * xi)
        if xi - h < 0:
            h = xi  # d(0) = 0 exactly, still a centered stencil
        return (self(xi + h) - self(xi - h)) / (2.0 * h)

    def fisher_at_base(self) -> float:
        """Curvature I(0) of twice the KLD at xi = 0.

        One-sided Richardson extrapolation of 2*KLD(h)/h^2 = (d(h)/h)^2 on
        h, h/2, h/4 with h = 1e-3.
        """
        if self._fisher is None:
            h = 1e-3
            f = [(self(s) / s) ** 2 for s in (h, h / 2, h / 4)]
            self._fisher = (8.0 * f[2] - 6.0 * f[1] + f[0]) / 3.0
        return self._fisher

    def assert_monotone(self, lo: float = 1e-6, hi: float = 1e6, n: int = 200) -> None:
        grid = np.logspace(math.log10(lo), math.log10(hi), n)
        d = self.batch(grid)
        drops = np.diff(d) < -1e-13
        if np.any(drops):
            at = grid[1:][drops][0]
            raise InvalidProfileError(f"distance decreases near xi = {at:.6g}")


def step_distance(graph: TreeGraph, v_remaining: Mapping[str, float], removed: str,
                  xi: float) -> float:
    """Distance between the graph with ``removed`` at variance xi and the
    contracted graph without it, at fixed remaining variances."""
    return DistanceProfile(graph, removed, v_remaining)(xi)


def fisher_at_base(graph: TreeGraph, v_remaining: Mapping[str, float], removed: str) -> float:
    return DistanceProfile(graph, removed, v_remaining).fisher_at_base()


def _density_from_profile(profile: DistanceProfile, xi: float, rate: float,
                          mode: str, param: str) -> PriorDensity:
    if xi <= 0:
        raise ValueError(f"variance must be positive, got {xi}")
    if param not in ("variance", "log-variance"):
        raise ValueError(f"unknown parametrization {param!r}")
    if mode == "exact":
        dist = profile(xi)
        deriv = profile.derivative(xi)
        if deriv <= 0:
            # Distances below ~sqrt(eps) drown in factorization round-off;
            # there the first-order slope sqrt(I(0)) is the exact limit.
            if dist < 1e-7:
                deriv = math.sqrt(profile.fisher_at_base())
            else:
                raise InvalidProfileError(
                    f"distance is not increasing at xi = {xi:.6g} (d' = {deriv:.3g})"
                )
        log_density = math.log(rate) - rate * dist + math.log(deriv)
    elif mode == "approx":
        scale = rate * math.sqrt(profile.fisher_at_base())
        log_density = math.log(scale) - scale * xi
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if param == "log-variance":
        log_density += math.log(xi)
    return PriorDensity(log_density, param)


def step_log_density(graph: TreeGraph, v_remaining: Mapping[str, float], removed: str,
                     xi: float, rate: float, mode: str = "exact",
                     param: str = "variance") -> PriorDensity:
    """Log prior density of one conditional step.

    Exact mode: log(rate) - rate*d(xi) + log d'(xi) with a numeric Jacobian.
    Approx mode: first-order distance sqrt(I(0))*xi, i.e. an exponential
    density with rate*sqrt(I(0)).  The log-variance parametrization adds
    log(xi).
    """
    profile = DistanceProfile(graph, removed, v_remaining)
    return _density_from_profile(profile, xi, rate, mode, param)


@dataclass(frozen=True)
class LadderStep:
    removed: str
    flexible: TreeGraph
    base: TreeGraph | IdentityModel

    @property
    def base_latents(self) -> tuple[str, ...]:
        return self.base.latents if isinstance(self.base, TreeGraph) else ()


class PriorLadder:
    """All flexible/base pairs of one removal order, ready for evaluation.

    Step k removes ``order[k]`` from the k-th contracted graph; conditioning
    variances of step k are those of latents still present in its base.
    """

    def __init__(self, graph: TreeGraph, removal_order: Sequence[str] | None = None):
        seq = contract(graph, removal_order)
        self.graph = graph
        self.removal_order = seq.removal_order
        self.steps = tuple(
            LadderStep(seq.removal_order[k], seq.graphs[k], seq.graphs[k + 1])
            for k in range(len(seq.removal_order))
        )

    def log_density(self, variances: Mapping[str, float], rate: float,
                    mode: str = "exact", param: str = "variance") -> tuple[float, list[PriorDensity]]:
        parts = []
        total = 0.0
        for step in self.steps:
            cond = {m: float(variances[m]) for m in step.base_latents}
            profile = DistanceProfile(step.flexible, step.removed, cond)
            dens = _density_from_profile(profile, float(variances[step.removed]), rate, mode, param)
            parts.append(dens)
            total += dens.log_density
        return total, parts

    def sample_arrays(self, rate: float, n: int, seed,
                      conditioning: Mapping[str, float] | None = None,
                      on_saturation: str = "warn") -> dict[str, np.ndarray]:
        """Draw n joint variance assignments, root-first along the ladder.

        ``conditioning`` may fix the variances of the last latents in the
        removal order (a root-side suffix); only the earlier steps are then
        sampled.  Deterministic for a given seed.  Draws whose distance is
        unreachable below the bracket cap are capped with a warning
        (``on_saturation="warn"``) or raise (``"error"``).
        """
        conditioning = dict(conditioning or {})
        order = self.removal_order
        suffix = order[len(order) - len(conditioning):]
        if set(conditioning) != set(suffix):
            raise ValueError(
                "conditioning must fix a root-side suffix of the removal order "
                f"({list(suffix)!r} for this size), got {sorted(conditioning)}"
            )
        rng = np.random.default_rng(seed)
        values: dict[str, np.ndarray] = {
            m: np.full(n, float(v)) for m, v in conditioning.items()
        }
        top = len(order) - len(conditioning)
        for k in range(top - 1, -1, -1):
            step = self.steps[k]
            cond_arrays = {m: values[m] for m in step.base_latents}
            d = rng.exponential(scale=1.0 / rate, size=n)
            values[step.removed] = _invert_distance_batch(
                step, d, cond_arrays, n, on_saturation
            )
        return values


def _invert_distance_batch(step: LadderStep, d: np.ndarray,
                           cond_arrays: Mapping[str, np.ndarray], n: int,
                           on_saturation: str = "error") -> np.ndarray:
    """Solve d(xi) = d per draw by bracket doubling plus bisection."""
    base_inv, base_logdet = _prep_base(step.base, cond_arrays, n)
    k = len(step.flexible.children)

    def dist(xi: np.ndarray) -> np.ndarray:
        values = {m: np.broadcast_to(arr, (n,)) for m, arr in cond_arrays.items()}
        values[step.removed] = np.maximum(xi, 1e-300)
        flex = children_correlation_batch(step.flexible, values)
        return np.sqrt(2.0 * _kld_batch(flex, base_inv, base_logdet, k))

    xi = np.zeros(n)
    live = d > 0
    if not np.any(live):
        return xi
    hi = np.ones(n)
    lo = np.zeros(n)
    capped = np.zeros(n, dtype=bool)
    for _ in range(100):
        vals = dist(hi)
        need = live & (vals < d) & ~capped
        if not np.any(need):
            break
        at_cap = need & (hi >= XI_MAX)
        if np.any(at_cap):
            worst = float(d[at_cap].max())
            message = (
                f"distance for removing {step.removed!r} saturates below the "
                f"requested value {worst:.6g} for {int(at_cap.sum())} draw(s) "
                f"(bracket cap {XI_MAX:.1e})"
            )
            if on_saturation == "error":
                raise DistanceSaturationError(message)
            warnings.warn(message + "; capping at the bracket limit",
                          DistanceSaturationWarning)
            capped |= at_cap
            need &= ~capped
            if not np.any(need):
                break
        lo[need] = hi[need]
        hi[need] = np.minimum(hi[need] * 2.0, XI_MAX)
    solve = live & ~capped
    for _ in range(200):
        gap = hi - lo
        active = solve & (gap > 1e-10 * np.maximum(hi, 1e-30))
        if not np.any(active):
            break
        mid = 0.5 * (lo + hi)
        vals = dist(mid)
        go_up = active & (vals < d)
        go_dn = active & ~go_up
        lo[go_up] = mid[go_up]
        hi[go_dn] = mid[go_dn]
    xi[solve] = 0.5 * (lo[solve] + hi[solve])
    xi[capped] = XI_MAX
    return xi


def joint_log_prior(graph: TreeGraph, variances: Mapping[str, float], spec: PCPriorSpec,
                    mode: str = "exact", param: str = "variance") -> float:
    """Sum of per-step conditional log densities along the removal order."""
    ladder = PriorLadder(graph, spec.removal_order)
    total, _ = ladder.log_density(variances, spec.rate, mode=mode, param=param)
    return total


def sample_prior(graph: TreeGraph, spec: PCPriorSpec, n: int, seed=0,
                 on_saturation: str = "warn") -> list[dict[str, float]]:
    """Draw n variance assignments from the sequential prior (seeded)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    ladder = PriorLadder(graph, spec.removal_order)
    arrays = ladder.sample_arrays(spec.rate, n, seed, on_saturation=on_saturation)
    names = list(graph.latents)
    return [{m: float(arrays[m][i]) for m in names} for i in range(n)]


_DECILES = tuple(range(10, 100, 10))


def calibrate_lambda(graph: TreeGraph, rates: Sequence[float], n: int,
                     conditionings: Sequence[Mapping[str, float]] | None = None,
                     seed=0, removal_order: Sequence[str] | None = None) -> list[dict]:
    """Summaries of prior-induced child correlations per rate value.

    For every rate (and every optional conditioning of root-side variances)
    the induced correlation of each pair class is sampled and summarized by
    its deciles and mean.  Returns one row dict per (rate, conditioning,
    class); empty when n = 0.
    """
    ladder = PriorLadder(graph, removal_order)
    conds = list(conditionings) if conditionings else [{}]
    rows: list[dict] = []
    if n == 0:
        return rows
    for i, rate in enumerate(rates):
        if not rate > 0:
            raise ValueError(f"rates must be positive, got {rate}")
        for j, cond in enumerate(conds):
            arrays = ladder.sample_arrays(float(rate), n, seed=[seed, i, j],
                                          conditioning=cond)
            label = ";".join(
                f"{m}={math.sqrt(float(v)):.12g}" for m, v in sorted(cond.items())
            )
            for meet, vals in class_correlations_batch(graph, arrays).items():
                row = {"lambda": float(rate), "conditioning_sd": label,
                       "pair_class": meet}
                qs = np.percentile(vals, _DECILES)
                row.update({f"q{p}": float(q) for p, q in zip(_DECILES, qs)})
                row["mean"] = float(np.mean(vals))
                row["n"] = n
                rows.append(row)
    return rows
