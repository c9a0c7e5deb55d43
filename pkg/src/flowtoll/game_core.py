"""Atomic unsplittable routing games: instances, flows, costs and tolls.

Flows are plain numpy arrays of shape ``(n, m)``: row ``i`` holds player
``i``'s flow on every edge.  Integral flows have 0/1 entries and each row is
the indicator vector of a simple source-destination path.
"""
from __future__ import annotations

import heapq
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Hashable, Sequence

import numpy as np

TOL = 1e-9

__all__ = [
    "TOL",
    "InfeasibleFlowError",
    "UnreachableDemandError",
    "LatencyFn",
    "RoutingInstance",
    "congestion",
    "conservation_residual",
    "check_flow",
    "path_row",
    "path_edges",
    "average_cost",
    "player_cost",
    "path_cost_at",
    "marginal_toll",
    "marginal_tolls",
    "potential",
    "shortest_path",
    "best_response",
    "is_unsatisfied",
]


class InfeasibleFlowError(ValueError):
    """A flow violates conservation, the box constraints or integrality."""


class UnreachableDemandError(ValueError):
    """A demand's destination cannot be reached from its source."""


@dataclass(frozen=True)
class LatencyFn:
    """Edge latency ``a * y**k + b`` with ``a, b >= 0`` and integer ``k >= 1``.

    ``family`` is ``"affine"`` (``k == 1``) or ``"monomial"``.  Negative
    arguments are clamped to zero so that expressions such as ``l(y - 1)``
    stay monotone for noisy congestion values below one.
    """

    family: str
    a: float
    b: float = 0.0
    k: int = 1

    def __post_init__(self):
        if self.family not in ("affine", "monomial"):
            raise ValueError(f"unknown latency family {self.family!r}")
        if self.family == "affine" and self.k != 1:
            raise ValueError("affine latency must have k == 1")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"exponent must be an integer >= 1, got {self.k}")
        if not (self.a >= 0 and self.b >= 0) or not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValueError(f"latency coefficients must be finite and non-negative, got a={self.a}, b={self.b}")

    @classmethod
    def affine(cls, a: float, b: float = 0.0) -> "LatencyFn":
        return cls("affine", float(a), float(b), 1)

    @classmethod
    def monomial(cls, a: float, k: int, b: float = 0.0) -> "LatencyFn":
        return cls("monomial", float(a), float(b), int(k))

    def __call__(self, y):
        return self.a * np.maximum(y, 0.0) ** self.k + self.b

    def derivative(self, y):
        y = np.maximum(y, 0.0)
        return self.a * self.k * y ** (self.k - 1)

    def second_derivative(self, y):
        if self.k == 1:
            return np.zeros_like(np.asarray(y, dtype=float))
        y = np.maximum(y, 0.0)
        return self.a * self.k * (self.k - 1) * y ** (self.k - 2)

    def lipschitz(self, n: float) -> float:
        """Slope at ``n``; the tight Lipschitz constant on ``[0, n]``."""
        return float(self.derivative(float(n)))


@dataclass(frozen=True, eq=False)
class RoutingInstance:
    """Directed multigraph with per-edge latencies and ``n`` unit demands.

    ``edges`` is a sequence of ``(tail, head)`` vertex ids; parallel edges
    are distinguished by position.  ``demands`` holds ``(source, target)``
    pairs; ``source == target`` is allowed and routes the empty path.
    """

    vertices: tuple
    edges: tuple
    latencies: tuple
    demands: tuple
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "vertices", tuple(self.vertices))
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))
        object.__setattr__(self, "latencies", tuple(self.latencies))
        object.__setattr__(self, "demands", tuple(tuple(d) for d in self.demands))
        if len(set(self.vertices)) != len(self.vertices):
            raise ValueError("duplicate vertex id")
        if not self.edges:
            raise ValueError("instance needs at least one edge")
        if len(self.latencies) != len(self.edges):
            raise ValueError("one latency function per edge required")
        for lat in self.latencies:
            if not isinstance(lat, LatencyFn):
                raise TypeError("latencies must be LatencyFn instances")
        vset = set(self.vertices)
        for e, (u, v) in enumerate(self.edges):
            if u not in vset or v not in vset:
                raise ValueError(f"edge {e} ({u!r}, {v!r}) uses an unknown vertex")
        for i, (s, t) in enumerate(self.demands):
            if s not in vset or t not in vset:
                raise ValueError(f"demand {i} ({s!r}, {t!r}) uses an unknown vertex")
        for i, (s, t) in enumerate(self.demands):
            if not self.reachable(s, t):
                raise UnreachableDemandError(f"demand {i}: no directed path from {s!r} to {t!r}")

    def __eq__(self, other):
        if not isinstance(other, RoutingInstance):
            return NotImplemented
        return (self.vertices, self.edges, self.latencies, self.demands) == (
            other.vertices, other.edges, other.latencies, other.demands)

    def __hash__(self):
        return hash((self.vertices, self.edges, self.latencies, self.demands))

    @property
    def n(self) -> int:
        return len(self.demands)

    @property
    def m(self) -> int:
        return len(self.edges)

    @cached_property
    def vertex_index(self) -> dict:
        return {v: j for j, v in enumerate(self.vertices)}

    @cached_property
    def tails(self) -> np.ndarray:
        return np.array([self.vertex_index[u] for u, _ in self.edges], dtype=int)

    @cached_property
    def heads(self) -> np.ndarray:
        return np.array([self.vertex_index[v] for _, v in self.edges], dtype=int)

    @cached_property
    def out_edges(self) -> list:
        out = [[] for _ in self.vertices]
        for e, u in enumerate(self.tails):
            out[u].append(e)
        return out

    @cached_property
    def incidence(self) -> np.ndarray:
        """``A[u, e] = +1`` if ``e`` enters ``u``, ``-1`` if it leaves ``u``."""
        A = np.zeros((len(self.vertices), self.m))
        A[self.heads, np.arange(self.m)] += 1.0
        A[self.tails, np.arange(self.m)] -= 1.0
        return A

    @cached_property
    def _coef(self):
        a = np.array([lat.a for lat in self.latencies])
        b = np.array([lat.b for lat in self.latencies])
        k = np.array([lat.k for lat in self.latencies], dtype=float)
        return a, b, k

    @cached_property
    def gamma(self) -> float:
        """``max_e l_e'(n)``, the Lipschitz constant of all latencies on ``[0, n]``."""
        return max(lat.lipschitz(max(self.n, 1)) for lat in self.latencies)

    @property
    def toll_cap(self) -> float:
        return self.n * self.gamma

    def demand_vector(self, i: int) -> np.ndarray:
        """Right-hand side of ``incidence @ x_i = b``: inflow minus outflow per vertex.

        That is ``-1`` at the source, ``+1`` at the target and 0 elsewhere.
        """
        s, t = self.demands[i]
        b = np.zeros(len(self.vertices))
        if s != t:
            b[self.vertex_index[s]] = -1.0
            b[self.vertex_index[t]] = 1.0
        return b

    def latency(self, y) -> np.ndarray:
        """Vector of ``l_e(y_e)``; ``y`` may carry leading batch axes."""
        a, b, k = self._coef
        return a * np.maximum(y, 0.0) ** k + b

    def latency_derivative(self, y) -> np.ndarray:
        a, _, k = self._coef
        return a * k * np.maximum(y, 0.0) ** (k - 1)

    def latency_second_derivative(self, y) -> np.ndarray:
        a, _, k = self._coef
        y = np.maximum(y, 0.0)
        return np.where(k > 1, a * k * (k - 1) * y ** np.maximum(k - 2, 0), 0.0)

    def reachable(self, s: Hashable, t: Hashable) -> bool:
        if s == t:
            return True
        idx = {v: j for j, v in enumerate(self.vertices)}
        out = [[] for _ in self.vertices]
        for u, v in self.edges:
            out[idx[u]].append(idx[v])
        seen = {idx[s]}
        stack = [idx[s]]
        while stack:
            u = stack.pop()
            for v in out[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return idx[t] in seen

    def boundedness_violations(self) -> list:
        """Edges with ``l_e(n) > n``; such instances weaken the guarantees."""
        n = self.n
        return [e for e, lat in enumerate(self.latencies) if float(lat(n)) > n + TOL]

    def with_demands(self, demands: Sequence) -> "RoutingInstance":
        return RoutingInstance(self.vertices, self.edges, self.latencies, tuple(demands), self.name)

    def warn_if_unbounded(self):
        bad = self.boundedness_violations()
        if bad:
            warnings.warn(f"latency exceeds n at y=n on edges {bad}; guarantees assume l_e(n) <= n",
                          stacklevel=2)
        return bad


def congestion(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=float).sum(axis=0)


def conservation_residual(inst: RoutingInstance, x: np.ndarray) -> np.ndarray:
    """Per-player max-norm of ``A x_i - b_i``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    B = np.stack([inst.demand_vector(i) for i in range(x.shape[0])]) if x.shape[0] else np.zeros((0, len(inst.vertices)))
    r = x @ inst.incidence.T - B
    return np.abs(r).max(axis=1) if r.size else np.zeros(x.shape[0])


def check_flow(inst: RoutingInstance, x: np.ndarray, integral: bool = False, tol: float = TOL) -> np.ndarray:
    """Validate ``x`` against ``inst`` and return it as a float array.

    Raises :class:`InfeasibleFlowError` naming the first violated row.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (inst.n, inst.m):
        raise InfeasibleFlowError(f"flow has shape {x.shape}, expected {(inst.n, inst.m)}")
    if np.any(x < -tol) or np.any(x > 1 + tol):
        i = int(np.argwhere((x < -tol) | (x > 1 + tol))[0, 0])
        raise InfeasibleFlowError(f"player {i}: flow outside [0, 1]")
    if integral and np.any(np.abs(x - np.round(x)) > tol):
        i = int(np.argwhere(np.abs(x - np.round(x)) > tol)[0, 0])
        raise InfeasibleFlowError(f"player {i}: flow is not integral")
    A = inst.incidence
    for i in range(inst.n):
        r = A @ x[i] - inst.demand_vector(i)
        if np.abs(r).max(initial=0.0) > tol:
            u = int(np.argmax(np.abs(r)))
            raise InfeasibleFlowError(
                f"player {i}: conservation violated at vertex {inst.vertices[u]!r} (residual {r[u]:.3g})")
    return x


def path_row(inst: RoutingInstance, edge_ids: Sequence[int]) -> np.ndarray:
    row = np.zeros(inst.m)
    row[list(edge_ids)] = 1.0
    return row


def path_edges(inst: RoutingInstance, row: np.ndarray, source: Hashable) -> list:
    """Ordered edge list of the simple path encoded by the 0/1 vector ``row``."""
    used = {e for e in np.flatnonzero(np.asarray(row) > 0.5)}
    u = inst.vertex_index[source]
    order = []
    while used:
        nxt = [e for e in inst.out_edges[u] if e in used]
        if len(nxt) != 1:
            raise InfeasibleFlowError("row is not a simple path from the given source")
        e = nxt[0]
        used.discard(e)
        order.append(int(e))
        u = inst.heads[e]
    return order


def average_cost(inst: RoutingInstance, x: np.ndarray, check: bool = True) -> float:
    """Average latency ``(1/n) sum_e y_e l_e(y_e)``; works for fractional flows too."""
    if check:
        x = check_flow(inst, x, tol=1e-6)
    y = congestion(x)
    return float(np.dot(y, inst.latency(y)) / inst.n)


def player_cost(inst: RoutingInstance, x: np.ndarray, i: int, tolls=None) -> float:
    """Player ``i``'s latency plus tolls under the flow's own congestion."""
    if not 0 <= i < inst.n:
        raise IndexError(f"player index {i} out of range for n={inst.n}")
    x = np.asarray(x, dtype=float)
    tolls = np.zeros(inst.m) if tolls is None else np.asarray(tolls, dtype=float)
    y = congestion(x)
    return float(np.dot(x[i], inst.latency(y) + tolls))


def path_cost_at(inst: RoutingInstance, path, y, tolls=None) -> float:
    """Cost of ``path`` when latencies are evaluated at the given congestion ``y``."""
    tolls = np.zeros(inst.m) if tolls is None else np.asarray(tolls, dtype=float)
    return float(np.dot(np.asarray(path, dtype=float), inst.latency(np.asarray(y, dtype=float)) + tolls))


def marginal_toll(lat: LatencyFn, y: float, cap: float = math.inf) -> float:
    """``(y - 1) (l(y) - l(y - 1))`` clipped to ``[0, cap]``."""
    raw = (y - 1.0) * (float(lat(y)) - float(lat(y - 1.0)))
    return float(min(max(raw, 0.0), cap)) + 0.0     # + 0.0 turns -0.0 into 0.0


def _raw_marginal(inst: RoutingInstance, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return (y - 1.0) * (inst.latency(y) - inst.latency(y - 1.0))


def marginal_tolls(inst: RoutingInstance, y) -> np.ndarray:
    """Constant toll vector ``tau*(y)`` clipped to ``[0, n * gamma]``."""
    return np.clip(_raw_marginal(inst, y), 0.0, inst.toll_cap) + 0.0


def potential(inst: RoutingInstance, x: np.ndarray) -> float:
    """``sum_e sum_{j=1}^{y_e} [l_e(j) + tau*_e(j)]`` for an integral flow."""
    x = check_flow(inst, x, integral=True)
    y = np.rint(congestion(x)).astype(int)
    total = 0.0
    for e in range(inst.m):
        if y[e] == 0:
            continue
        j = np.arange(1, y[e] + 1, dtype=float)
        lat = inst.latencies[e]
        total += float(np.sum(lat(j) + (j - 1.0) * (lat(j) - lat(j - 1.0))))
    return total


def shortest_path(inst: RoutingInstance, source: Hashable, target: Hashable, weights) -> tuple:
    """Dijkstra over edge indices with non-negative ``weights``.

    Returns ``(row, cost)``.  Ties keep the first label found, scanning
    out-edges in index order, so the result is deterministic.
    """
    if source == target:
        return np.zeros(inst.m), 0.0
    w = np.asarray(weights, dtype=float)
    if np.any(w < -TOL):
        raise ValueError("shortest_path needs non-negative weights")
    s = inst.vertex_index[source]
    t = inst.vertex_index[target]
    dist = [math.inf] * len(inst.vertices)
    pred = [-1] * len(inst.vertices)
    dist[s] = 0.0
    heap = [(0.0, s)]
    done = [False] * len(inst.vertices)
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        if u == t:
            break
        for e in inst.out_edges[u]:
            v = inst.heads[e]
            nd = d + w[e]
            if nd < dist[v] - 1e-15 and not done[v]:
                dist[v] = nd
                pred[v] = e
                heapq.heappush(heap, (nd, v))
    if not math.isfinite(dist[t]):
        raise UnreachableDemandError(f"no path from {source!r} to {target!r}")
    row = np.zeros(inst.m)
    v = t
    while v != s:
        e = pred[v]
        row[e] = 1.0
        v = inst.tails[e]
    return row, float(np.dot(row, w))


def _deviation_weights(inst, xi, y, tolls, functional):
    # a player leaving edge e sees y_e again; joining e pushes it to y_e + 1
    z = np.asarray(y, dtype=float) + 1.0 - xi
    w = inst.latency(z)
    if functional:
        w = w + _raw_marginal(inst, z)
    else:
        w = w + tolls
    return np.maximum(w, 0.0)


def best_response(inst: RoutingInstance, x: np.ndarray, i: int, y, tolls=None, functional: bool = False):
    """Cheapest path for player ``i`` under ``y' = y - x_i + x_i'``.

    With ``functional=True`` the tolled latency ``l + tau*`` is evaluated at the
    post-deviation load instead of using the constant vector ``tolls``.
    Returns ``(row, cost)``.
    """
    xi = np.asarray(x, dtype=float)[i]
    tolls = np.zeros(inst.m) if tolls is None else np.asarray(tolls, dtype=float)
    w = _deviation_weights(inst, xi, y, tolls, functional)
    s, t = inst.demands[i]
    return shortest_path(inst, s, t, w)


def current_cost(inst: RoutingInstance, xi, y, tolls=None, functional: bool = False) -> float:
    y = np.asarray(y, dtype=float)
    if functional:
        return float(np.dot(xi, inst.latency(y) + _raw_marginal(inst, y)))
    return path_cost_at(inst, xi, y, tolls)


def is_unsatisfied(inst: RoutingInstance, x: np.ndarray, i: int, y, tolls=None, rho: float = 0.0,
                   functional: bool = False) -> tuple:
    """Whether player ``i`` can cut its cost by at least ``rho`` w.r.t. ``y``.

    Returns ``(unsatisfied, best_path, gain)``.  A zero gain never counts,
    so ``rho = 0`` flags only players with a strictly better route.
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    xi = np.asarray(x, dtype=float)[i]
    row, alt = best_response(inst, x, i, y, tolls, functional)
    gain = current_cost(inst, xi, y, tolls, functional) - alt
    if not math.isfinite(rho):
        return False, row, gain
    return bool(gain > TOL and gain >= rho - TOL), row, gain
