"""Certificates under transport-cost shifts of the client population.

The target population may move each client's data distribution, as long as
the population-average transport cost stays within epsilon.  The certificate
maximizes the mean of per-client robust query values over per-client radii:

    maximize   (1/K) sum_k QV_k(rho_k)
    subject to rho_k >= epsilon / K,
               mean(rho) <= epsilon (1 + 1/K) + c1 sqrt(ln((K+2)/delta) / K),

where the floor covers the share of the budget any single client can absorb
and the cap inflation pays for estimating the average cost from K clients.

Each client is queried once per point of a fixed radius grid; the resulting
profile is replaced by its concave upper envelope (robust query values are
concave and nondecreasing in the radius, so the envelope is both an upper
bound and exact at the grid).  The allocation over piecewise-linear concave
envelopes is solved exactly by greedy water-filling on segment slopes, and
the certificate level is located by bisection on [0, 1], returning the upper
end of the final bracket so the answer errs upward.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .certificates import CertifiedBound
from .losses import Hypothesis
from .query import Client

__all__ = [
    "QvProfile",
    "RadiusAllocation",
    "BisectionTrace",
    "mean_radius_cap",
    "build_profiles",
    "feasibility_check",
    "bisection_certificate",
    "wass_mean_bound",
]

DEFAULT_C1 = float(1.0 / np.sqrt(2.0))
DEFAULT_C2 = 1.0
DEFAULT_GRID_SIZE = 16
DEFAULT_LEVEL_TOL = 1e-3


@dataclass
class QvProfile:
    """One client's robust-query curve sampled on a radius grid, stored as
    the vertices of its concave upper envelope."""

    client_id: int
    n_samples: int
    rhos: np.ndarray
    qvs: np.ndarray
    hull_x: np.ndarray = field(init=False)
    hull_y: np.ndarray = field(init=False)

    def __post_init__(self):
        self.rhos = np.asarray(self.rhos, dtype=float)
        self.qvs = np.asarray(self.qvs, dtype=float)
        if len(self.rhos) != len(self.qvs) or len(self.rhos) == 0:
            raise ValueError("profile needs matching nonempty grids")
        if np.any(np.diff(self.rhos) <= 0):
            raise ValueError("radius grid must be strictly increasing")
        self.hull_x, self.hull_y = _upper_hull(self.rhos, self.qvs)

    def envelope(self, rho) -> np.ndarray:
        """Piecewise-linear envelope value; clamps outside the grid range."""
        return np.interp(rho, self.hull_x, self.hull_y)

    def segments(self) -> list[tuple[float, float, float]]:
        """(slope, x_start, width) of each hull piece, left to right."""
        out = []
        for i in range(len(self.hull_x) - 1):
            w = self.hull_x[i + 1] - self.hull_x[i]
            s = (self.hull_y[i + 1] - self.hull_y[i]) / w
            out.append((float(s), float(self.hull_x[i]), float(w)))
        return out


def _upper_hull(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Upper convex hull of the points (monotone chain); input x increasing."""
    hull: list[tuple[float, float]] = []
    for xi, yi in zip(x, y):
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            # keep the chain concave: drop the middle point when it sags
            if (y2 - y1) * (xi - x1) <= (yi - y1) * (x2 - x1):
                hull.pop()
            else:
                break
        hull.append((float(xi), float(yi)))
    hx = np.array([p[0] for p in hull])
    hy = np.array([p[1] for p in hull])
    return hx, hy


@dataclass
class RadiusAllocation:
    rho: np.ndarray           # per-client radii
    mean_rho: float
    values: np.ndarray        # envelope values at those radii
    objective: float          # mean of values


@dataclass
class BisectionTrace:
    steps: list[dict] = field(default_factory=list)
    final_width: float = 1.0

    def record(self, a, b, t, feasible):
        self.steps.append({"a": a, "b": b, "t": t, "feasible": bool(feasible)})


def mean_radius_cap(epsilon: float, delta: float, K: int,
                    c1: float = DEFAULT_C1, *, include_slack: bool = True) -> float:
    cap = epsilon * (1.0 + 1.0 / K)
    if include_slack:
        cap += c1 * float(np.sqrt(np.log((K + 2) / delta) / K))
    return cap


def build_profiles(
    clients: list[Client],
    h: Hypothesis,
    epsilon: float,
    delta: float,
    grid_size: int = DEFAULT_GRID_SIZE,
    c1: float = DEFAULT_C1,
    *,
    include_slack: bool = True,
) -> list[QvProfile]:
    """Query every client on a shared radius grid covering [epsilon/K, K*cap].

    The top of the grid is the whole population budget concentrated on one
    client; the grid is log-spaced since the curves flatten quickly.  Each
    grid point consumes one query from the client's budget.
    """
    if not clients:
        raise ValueError("at least one client required")
    if grid_size < 1:
        raise ValueError("grid_size must be positive")
    K = len(clients)
    floor = epsilon / K
    top = K * mean_radius_cap(epsilon, delta, K, c1, include_slack=include_slack)
    if top <= floor + 1e-15:
        grid = np.array([floor])
    elif floor <= 0.0:
        grid = np.concatenate([[0.0], np.geomspace(top / 10.0 ** (grid_size - 1),
                                                   top, max(grid_size - 1, 1))])
    else:
        grid = np.geomspace(floor, top, grid_size)
    grid = np.unique(grid)

    profiles = []
    for c in clients:
        qvs = np.array([c.query(h, float(r)).value for r in grid])
        profiles.append(
            QvProfile(client_id=c.client_id, n_samples=c.n_samples,
                      rhos=grid.copy(), qvs=qvs)
        )
    return profiles


def _waterfill(profiles: list[QvProfile], floor: float, mean_cap: float) -> RadiusAllocation:
    """Exact maximizer of the mean envelope value under the radius floor and
    mean cap: pour the spare budget onto hull segments in slope order."""
    K = len(profiles)
    rho = np.full(K, floor)
    budget = K * (mean_cap - floor)
    segs = []  # (negative slope for sorting, client, seg_start, width)
    for i, p in enumerate(profiles):
        for slope, x0, width in p.segments():
            lo = max(x0, floor)
            hi = x0 + width
            if hi <= lo or slope <= 0.0:
                continue
            segs.append((slope, i, lo, hi - lo))
    segs.sort(key=lambda s: (-s[0], s[1], s[2]))
    for slope, i, lo, width in segs:
        if budget <= 1e-18:
            break
        # segments are visited left to right within a client because concavity
        # sorts its slopes in decreasing order
        take = min(width, budget)
        rho[i] = lo + take
        budget -= take
    values = np.array([p.envelope(r) for p, r in zip(profiles, rho)])
    return RadiusAllocation(
        rho=rho,
        mean_rho=float(np.mean(rho)),
        values=values,
        objective=float(np.mean(values)),
    )


def feasibility_check(
    t: float,
    profiles: list[QvProfile],
    epsilon: float,
    delta: float,
    c1: float = DEFAULT_C1,
    *,
    include_slack: bool = True,
) -> tuple[bool, RadiusAllocation]:
    """Is there a feasible radius allocation whose mean envelope value
    reaches level t?  Returns the exact maximizer as witness."""
    K = len(profiles)
    floor = epsilon / K
    cap = mean_radius_cap(epsilon, delta, K, c1, include_slack=include_slack)
    best = _waterfill(profiles, floor, max(cap, floor))
    return best.objective >= t, best


def bisection_certificate(
    profiles: list[QvProfile],
    epsilon: float,
    delta: float,
    level_tol: float = DEFAULT_LEVEL_TOL,
    c1: float = DEFAULT_C1,
    *,
    include_slack: bool = True,
) -> tuple[float, BisectionTrace, RadiusAllocation]:
    """Locate the largest reachable level in [0, 1] by bisection and return
    the bracket's upper end, so the discretization error is always upward."""
    if not (0 < level_tol < 1):
        raise ValueError("level_tol must lie in (0, 1)")
    a, b = 0.0, 1.0
    trace = BisectionTrace()
    feasible0, witness = feasibility_check(
        a, profiles, epsilon, delta, c1, include_slack=include_slack
    )
    trace.record(a, b, a, feasible0)
    max_iter = int(np.ceil(np.log2(1.0 / level_tol)))
    for _ in range(max_iter):
        t = 0.5 * (a + b)
        ok, alloc = feasibility_check(
            t, profiles, epsilon, delta, c1, include_slack=include_slack
        )
        trace.record(a, b, t, ok)
        if ok:
            a, witness = t, alloc
        else:
            b = t
    trace.final_width = b - a
    return b, trace, witness


def wass_mean_bound(
    clients: list[Client],
    h: Hypothesis,
    epsilon: float,
    delta: float,
    *,
    level_tol: float = DEFAULT_LEVEL_TOL,
    grid_size: int = DEFAULT_GRID_SIZE,
    c1: float = DEFAULT_C1,
    c2: float = DEFAULT_C2,
    include_slack: bool = True,
) -> CertifiedBound:
    """Certified upper bound on the target mean risk when the target moves
    clients by at most epsilon average transport cost."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if not (0 < delta < 1):
        raise ValueError("delta must lie in (0, 1)")
    if include_slack and epsilon <= 0:
        raise ValueError("epsilon must be positive when slack terms are on "
                         "(the per-client term carries log(1/epsilon))")
    profiles = build_profiles(
        clients, h, epsilon, delta, grid_size, c1, include_slack=include_slack
    )
    level, trace, witness = bisection_certificate(
        profiles, epsilon, delta, level_tol, c1, include_slack=include_slack
    )
    K = len(clients)
    if include_slack:
        meta = float(np.sqrt(np.log((K + 2) / delta) / (2 * K)))
        ns = np.array([p.n_samples for p in profiles], dtype=float)
        per_client = float(np.mean(
            c2 * np.sqrt(np.log((K + 2) * ns / (epsilon * delta)) / ns)
        ))
    else:
        meta = per_client = 0.0
    raw = level + meta + per_client
    return CertifiedBound(
        kind="wass-mean",
        value=float(min(raw, 1.0)),
        raw_value=raw,
        slack={"meta": meta, "per_client": per_client},
        params={
            "K": K, "delta": delta, "epsilon": epsilon,
            "c1": c1, "c2": c2, "level_tol": level_tol,
            "grid_size": grid_size,
            "mean_radius_cap": mean_radius_cap(
                epsilon, delta, K, c1, include_slack=include_slack
            ),
            "include_slack": include_slack,
        },
        extra={
            "program_value": level,
            "bisection_steps": len(trace.steps),
            "final_width": trace.final_width,
            "witness_mean_rho": witness.mean_rho,
            "witness_rho": witness.rho.tolist(),
        },
    )
