"""Exact solvers and measurement tools for small instances.

Everything here is ground truth by enumeration or by a generic convex
solver, used to check the private pipeline against.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .game_core import (RoutingInstance, average_cost, best_response, check_flow, congestion,
                        is_unsatisfied)

__all__ = [
    "ResourceCapError",
    "MAX_PATHS_PER_PLAYER",
    "MAX_PROFILES",
    "enumerate_paths",
    "brute_force_opt",
    "fractional_opt",
    "verify_nash",
    "best_response_dynamics",
    "count_unsatisfied",
    "DeviationProfile",
    "canonical_menu",
    "DeviationResult",
    "measure_deviation_gain",
]

MAX_PATHS_PER_PLAYER = 1000
MAX_PROFILES = 10 ** 7


class ResourceCapError(RuntimeError):
    """Instance too large for exact enumeration."""


def enumerate_paths(inst: RoutingInstance, source, target, cap: int = MAX_PATHS_PER_PLAYER) -> np.ndarray:
    """All simple ``source``-``target`` paths as 0/1 rows, in lexicographic edge order."""
    if source == target:
        return np.zeros((1, inst.m))
    s = inst.vertex_index[source]
    t = inst.vertex_index[target]
    rows = []
    edges = []
    on_path = {s}

    def dfs(u):
        for e in inst.out_edges[u]:
            v = int(inst.heads[e])
            if v in on_path:
                continue
            edges.append(e)
            if v == t:
                r = np.zeros(inst.m)
                r[edges] = 1.0
                rows.append(r)
                if len(rows) > cap:
                    raise ResourceCapError(f"more than {cap} simple paths from {source!r} to {target!r}")
            else:
                on_path.add(v)
                dfs(v)
                on_path.discard(v)
            edges.pop()

    dfs(s)
    return np.array(rows)


def player_path_sets(inst: RoutingInstance, cap: int = MAX_PATHS_PER_PLAYER) -> list:
    return [enumerate_paths(inst, s, t, cap) for s, t in inst.demands]


def brute_force_opt(inst: RoutingInstance, max_profiles: int = MAX_PROFILES, chunk: int = 1 << 16) -> tuple:
    """Minimum average cost over all path profiles; ties go to the first profile in lexicographic order."""
    paths = player_path_sets(inst)
    shape = tuple(len(p) for p in paths)
    total = math.prod(shape)
    if total > max_profiles:
        raise ResourceCapError(f"{total} path profiles exceed the cap of {max_profiles}")
    best_val = math.inf
    best_k = -1
    for lo in range(0, total, chunk):
        k = np.arange(lo, min(lo + chunk, total))
        idx = np.unravel_index(k, shape)
        y = np.zeros((len(k), inst.m))
        for i, P in enumerate(paths):
            y += P[idx[i]]
        cost = np.einsum("ij,ij->i", y, inst.latency(y)) / inst.n
        j = int(np.argmin(cost))
        if cost[j] < best_val:
            best_val = float(cost[j])
            best_k = int(k[j])
    idx = np.unravel_index(best_k, shape)
    x = np.stack([paths[i][idx[i]] for i in range(inst.n)])
    return x, average_cost(inst, x)


def fractional_opt(inst: RoutingInstance, solver: str | None = None) -> float:
    """Optimal value of the fractional relaxation, via a conic solver."""
    import cvxpy as cp

    n, m = inst.n, inst.m
    x = cp.Variable((n, m))
    cons = [x >= 0, x <= 1]
    A = inst.incidence
    for i in range(n):
        cons.append(A @ x[i] == inst.demand_vector(i))
    y = cp.sum(x, axis=0)
    terms = []
    for e, lat in enumerate(inst.latencies):
        if lat.a > 0:
            terms.append(lat.a * (cp.power(y[e], lat.k + 1) if lat.k > 0 else y[e]))
        if lat.b > 0:
            terms.append(lat.b * y[e])
    obj = cp.sum(cp.hstack(terms)) / n if terms else cp.Constant(0.0)
    prob = cp.Problem(cp.Minimize(obj), cons)
    kw = {"solver": solver} if solver else {}
    prob.solve(**kw)
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise RuntimeError(f"relaxation solve failed: {prob.status}")
    yv = np.clip(np.asarray(x.value).sum(axis=0), 0.0, n)
    return float(np.dot(yv, inst.latency(yv)) / n)


def verify_nash(inst: RoutingInstance, x, tolls=None, eta: float = 0.0, functional: bool = False) -> tuple:
    """``(is_eta_nash, worst_player, worst_gain)`` under the flow's own congestion."""
    x = check_flow(inst, x, integral=True)
    y = congestion(x)
    worst, worst_gain = -1, -math.inf
    for i in range(inst.n):
        _, _, g = is_unsatisfied(inst, x, i, y, tolls, 0.0, functional)
        if g > worst_gain:
            worst, worst_gain = i, g
    return bool(worst_gain <= eta), worst, float(worst_gain)


def best_response_dynamics(inst: RoutingInstance, x0, tolls=None, functional: bool = False,
                           rho: float = 0.0, max_steps: int = 100000) -> tuple:
    """Move the lowest-index unsatisfied player to its best response until none is left.

    Returns ``(flow, steps)``.
    """
    x = np.array(check_flow(inst, x0, integral=True))
    for step in range(max_steps):
        y = congestion(x)
        for i in range(inst.n):
            bad, alt, _ = is_unsatisfied(inst, x, i, y, tolls, rho, functional)
            if bad:
                x[i] = alt
                break
        else:
            return x, step
    raise RuntimeError("best-response dynamics did not settle")


def count_unsatisfied(inst: RoutingInstance, x, y, tolls, zeta: float) -> int:
    return sum(bool(is_unsatisfied(inst, x, i, y, tolls, zeta)[0]) for i in range(inst.n))


@dataclass(frozen=True)
class DeviationProfile:
    """Player ``player`` reports ``report`` (``None`` opts out) then plays ``remap``.

    ``remap`` is ``"identity"``, ``"best_response"`` or ``"constant"`` (with
    ``path`` the fixed row to use).  The played path is always feasible for
    the player's true demand.
    """

    player: int
    report: tuple | None
    remap: str = "identity"
    path: tuple | None = None
    label: str = ""

    def __post_init__(self):
        if self.remap not in ("identity", "best_response", "constant"):
            raise ValueError(f"unknown remap {self.remap!r}")
        if self.remap == "constant" and self.path is None:
            raise ValueError("constant remap needs a path")


def canonical_menu(inst: RoutingInstance, i: int) -> list:
    """Identity, best response, each constant path, opt-out, swapped report."""
    s, t = inst.demands[i]
    paths = enumerate_paths(inst, s, t)
    menu = [DeviationProfile(i, (s, t), "identity", label="identity"),
            DeviationProfile(i, (s, t), "best_response", label="truthful+best-response")]
    for k, p in enumerate(paths):
        menu.append(DeviationProfile(i, (s, t), "constant", tuple(p), label=f"truthful+path{k}"))
    for k, p in enumerate(paths):
        menu.append(DeviationProfile(i, None, "constant", tuple(p), label=f"opt-out+path{k}"))
    menu.append(DeviationProfile(i, (t, s), "best_response", label="swapped+best-response"))
    for k, p in enumerate(paths):
        menu.append(DeviationProfile(i, (t, s), "constant", tuple(p), label=f"swapped+path{k}"))
    # report another player's demand, if it differs
    seen = {(s, t), (t, s)}
    for j, d in enumerate(inst.demands):
        if d not in seen:
            seen.add(d)
            menu.append(DeviationProfile(i, d, "best_response", label=f"mimic{j}+best-response"))
    return menu


@dataclass
class DeviationResult:
    profile: DeviationProfile
    gain: float
    half_width: float
    good_cost: float
    deviation_cost: float
    trials: int
    realized_alpha: float


def _played_path(inst, profile, out):
    """Path the deviator actually drives, given the mediator output ``out``."""
    i = profile.player
    if profile.remap == "constant":
        return np.array(profile.path, dtype=float)
    sugg = out.suggestions[i]
    if profile.remap == "identity":
        if sugg is None or profile.report != inst.demands[i]:
            raise ValueError("identity remap requires a truthful, routed report")
        return sugg
    # best response to the public release: noisy congestion without the own suggestion
    xi = np.zeros(inst.m) if (sugg is None or profile.report != inst.demands[i]) else sugg
    y_pub = np.clip(out.noisy_congestion - xi, 0.0, None)
    x_view = np.zeros((i + 1, inst.m))
    row, _ = best_response(inst, x_view, i, y_pub, out.tolls)
    return row


def _realized_cost(inst, out, i, played):
    others = [out.suggestions[j] for j in range(inst.n) if j != i and out.suggestions[j] is not None]
    y = played.copy()
    for r in others:
        y = y + r
    return float(np.dot(played, inst.latency(y) + out.tolls))


def measure_deviation_gain(inst: RoutingInstance, profile: DeviationProfile, trials: int, seed: int,
                           eps: float, delta: float, beta: float, opt: float | None = None,
                           cache: dict | None = None, **mediator_kw) -> DeviationResult:
    """Monte-Carlo estimate of (truthful cost) minus (deviation cost) for one player.

    Trial ``t`` of both arms uses the generator seeded by ``(seed, t)``, so
    the identity profile returns exactly zero.  ``opt`` (the integral
    optimum) enables the realized accuracy ``alpha``.
    """
    from .mediator import flowtoll

    if trials < 1:
        raise ValueError("trials must be >= 1")
    cache = {} if cache is None else cache
    i = profile.player
    truth = list(inst.demands)
    dev = list(truth)
    dev[i] = profile.report
    diffs = np.empty(trials)
    good = np.empty(trials)
    bad = np.empty(trials)
    alpha = 0.0
    for t in range(trials):
        g_out = flowtoll(inst, truth, eps, delta, beta, np.random.default_rng([seed, t]),
                         pgd_cache=cache, **mediator_kw)
        good[t] = _realized_cost(inst, g_out, i, g_out.suggestions[i])
        if opt is not None:
            alpha = max(alpha, average_cost(g_out.instance, g_out.x_bullet, check=False) - opt)
        d_out = flowtoll(inst, dev, eps, delta, beta, np.random.default_rng([seed, t]),
                         pgd_cache=cache, **mediator_kw)
        played = _played_path(inst, profile, d_out)
        bad[t] = _realized_cost(inst, d_out, i, played)
        diffs[t] = good[t] - bad[t]
    hw = 1.96 * float(diffs.std(ddof=1)) / math.sqrt(trials) if trials > 1 else math.inf
    return DeviationResult(profile, float(diffs.mean()), hw, float(good.mean()), float(bad.mean()),
                           trials, max(alpha, 0.0))
