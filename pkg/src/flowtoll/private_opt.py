"""Convex relaxation, the Lagrangian game solver and randomized rounding.

The flow player runs projected gradient descent on ``(x, y)``; the dual
player answers each round with a one-hot penalty chosen by the exponential
mechanism.  ``psrr`` rounds one player's averaged flow to a single path.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, linprog

from .dp import (PrivacyBudget, QualityScore, advanced_composition_epsilon,
                 exp_mech_probabilities)
from .game_core import RoutingInstance, shortest_path

__all__ = [
    "ProjectionError",
    "DecompositionError",
    "relaxed_cost",
    "lagrangian_value",
    "grad_x",
    "grad_y",
    "gd_step_box",
    "FlowProjector",
    "project_flow_polytope",
    "violation_scores",
    "dual_outcomes",
    "dual_best_response",
    "iteration_count",
    "PGDConstants",
    "PGDResult",
    "p_gd",
    "replay_player",
    "initial_flow",
    "cancel_cycles",
    "path_decomposition",
    "psrr",
    "rounding_gap_bound",
    "min_x_block",
    "min_y_block",
]

DEFAULT_NOISE_FREE_ROUNDS = 400


class ProjectionError(RuntimeError):
    pass


class DecompositionError(RuntimeError):
    pass


def relaxed_cost(inst: RoutingInstance, y) -> float:
    """``c(y) = (1/n) sum_e y_e l_e(y_e)``."""
    y = np.asarray(y, dtype=float)
    return float(np.dot(y, inst.latency(y)) / inst.n)


def lagrangian_value(inst: RoutingInstance, x, y, lam) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    f = x.sum(axis=0) - y
    return relaxed_cost(inst, y) - float(np.dot(lam, f))


def grad_x(lam, n: int) -> np.ndarray:
    return -np.broadcast_to(np.asarray(lam, dtype=float), (n, len(lam))).copy()


def grad_y(inst: RoutingInstance, y, lam) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return (inst.latency(y) + y * inst.latency_derivative(y)) / inst.n + np.asarray(lam, dtype=float)


def gd_step_box(y, grad, eta: float, upper: float) -> np.ndarray:
    if eta <= 0:
        raise ValueError("step size must be positive")
    return np.clip(np.asarray(y, dtype=float) - eta * np.asarray(grad, dtype=float), 0.0, upper)


class FlowProjector:
    """Euclidean projection onto one player's fractional flow polytope.

    Solves ``min 0.5 |x - v|^2`` over ``A x = b, 0 <= x <= 1`` by a
    semismooth Newton method on the dual.  The primal iterate
    ``clip(v + A^T mu, 0, 1)`` is always in the box and stationary, so the
    conservation residual is the whole KKT residual.  The last multiplier is
    kept as a warm start for the next call.
    """

    def __init__(self, inst: RoutingInstance, i: int, tol: float = 1e-11, max_iter: int = 500):
        self.A = inst.incidence
        self.b = inst.demand_vector(i)
        self.tol = tol
        self.max_iter = max_iter
        self.mu = np.zeros(self.A.shape[0])
        self.iterations = 0

    def _dual(self, mu, v):
        x = np.clip(v + self.A.T @ mu, 0.0, 1.0)
        r = self.b - self.A @ x
        # concave dual objective, to be maximised
        val = 0.5 * np.dot(x - v, x - v) - np.dot(mu, self.A @ x - self.b)
        return val, x, r

    def __call__(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        A = self.A
        mu = self.mu.copy()
        val, x, r = self._dual(mu, v)
        k = A.shape[0]
        for it in range(self.max_iter):
            if np.abs(r).max(initial=0.0) <= self.tol:
                self.mu = mu
                self.iterations = it
                return x
            z = v + A.T @ mu
            active = ((z > 0.0) & (z < 1.0)).astype(float)
            H = (A * active) @ A.T
            rn = np.abs(r).max()
            # Levenberg-Marquardt damping: a gradient step when no coordinate is free,
            # a Newton step once the residual is small
            kappa = max(1e-2 * rn, 1e-13)
            d = np.linalg.solve(H + kappa * np.eye(k), r)
            step = 1.0
            slope = np.dot(r, d)
            moved = False
            for _ in range(60):
                cand = mu + step * d
                cval, cx, cr = self._dual(cand, v)
                crn = np.abs(cr).max(initial=0.0)
                # Armijo on the dual, or a plain residual decrease once rounding noise dominates
                if cval >= val + 1e-4 * step * slope or crn <= self.tol or (crn < 0.5 * rn and cval >= val - 1e-12 * (1 + abs(val))):
                    mu, val, x, r = cand, cval, cx, cr
                    moved = True
                    break
                step *= 0.5
            if not moved:
                # gradient ascent with the dual's Lipschitz step
                mu = mu + r / max(np.linalg.norm(A, 2) ** 2, 1.0)
                val, x, r = self._dual(mu, v)
        if np.abs(r).max(initial=0.0) <= 1e-9:
            self.mu = mu
            return x
        raise ProjectionError(f"flow projection did not converge (residual {np.abs(r).max():.3g})")


def project_flow_polytope(inst: RoutingInstance, i: int, v) -> np.ndarray:
    return FlowProjector(inst, i)(v)


def violation_scores(x, y) -> np.ndarray:
    """Signed per-edge violation ``sum_i x_ie - y_e``."""
    return np.asarray(x, dtype=float).sum(axis=0) - np.asarray(y, dtype=float)


def dual_outcomes(m: int) -> list:
    return [("+", e) for e in range(m)] + [("-", e) for e in range(m)]


def dual_best_response(inst: RoutingInstance, x, y, eps_round: float, rng, flip_sign: bool = False):
    """One-hot dual play of magnitude ``2m`` on a privately chosen signed edge.

    Selecting ``("+", e)`` sets ``lam_e = -2m`` and ``("-", e)`` sets
    ``+2m``; ``flip_sign`` reverses that rule.  Returns
    ``(lam, outcome_index, scores)``.
    """
    m = inst.m
    f = violation_scores(x, y)
    scores = np.concatenate([f, -f])
    qs = QualityScore(dual_outcomes(m), scores, 1.0)
    p = exp_mech_probabilities(qs, eps_round)
    if math.isinf(eps_round):
        k = int(np.argmax(p))
    else:
        c = np.cumsum(p)
        k = min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), 2 * m - 1)
    lam = np.zeros(m)
    sign = -1.0 if k < m else 1.0
    if flip_sign:
        sign = -sign
    lam[k % m] = sign * 2.0 * m
    return lam, k, scores


def iteration_count(n: int, m: int, eps: float, delta: float, beta: float, c_t: float = 1.0) -> int:
    raw = c_t * eps * n * math.sqrt(m) / (math.log(m * n / beta) * math.sqrt(math.log(1.0 / delta)))
    T = int(math.floor(raw))
    if T < 1:
        warnings.warn(f"iteration count {raw:.3g} rounds below 1; using T = 1", stacklevel=2)
        T = 1
    return T


@dataclass(frozen=True)
class PGDConstants:
    T: int
    eps_round: float
    G_x: float
    D_x: float
    G_y: float
    D_y: float
    eta_x: float
    eta_y: float

    @classmethod
    def build(cls, inst: RoutingInstance, T: int, eps_round: float) -> "PGDConstants":
        n, m, g = inst.n, inst.m, inst.gamma
        G_y = math.sqrt((m - 1) * (g + 1) ** 2 + (g + 1 + 2 * m) ** 2)
        D_y = n * math.sqrt(m)
        G_x = 2 * m * math.sqrt(n)
        D_x = math.sqrt(m * n)
        return cls(T, eps_round, G_x, D_x, G_y, D_y,
                   D_x / (G_x * math.sqrt(T)), D_y / (G_y * math.sqrt(T)))

    def regret_bound(self) -> float:
        """Per-round average primal regret bound ``(G_y D_y + G_x D_x) / sqrt(T)``."""
        return (self.G_y * self.D_y + self.G_x * self.D_x) / math.sqrt(self.T)

    def to_dict(self) -> dict:
        return {k: (("inf" if isinstance(v, float) and math.isinf(v) else v))
                for k, v in self.__dict__.items()}


@dataclass
class PGDResult:
    x_bar: np.ndarray
    y_bar: np.ndarray
    lam_bar: np.ndarray
    constants: PGDConstants
    dual_index: np.ndarray
    dual_value: np.ndarray
    shortfall: np.ndarray
    shortfall_bound: float
    regret_x: float
    regret_y: float
    regret_z: float
    regret_lambda: float
    lagrangian_avg: float
    noise_free: bool
    x_first: np.ndarray = field(repr=False, default=None)

    @property
    def R(self) -> float:
        return self.regret_z + self.regret_lambda

    def dual_sequence(self) -> np.ndarray:
        """Full ``(T, m)`` array of dual plays rebuilt from the one-hot record."""
        m = self.x_bar.shape[1]
        lam = np.zeros((len(self.dual_index), m))
        lam[np.arange(len(self.dual_index)), self.dual_index % m] = self.dual_value
        return lam

    def diagnostics(self) -> dict:
        c = self.constants
        return {
            "T": c.T,
            "constants": c.to_dict(),
            "regret_x": self.regret_x,
            "regret_y": self.regret_y,
            "regret_x_bound": c.G_x * c.D_x * math.sqrt(c.T),
            "regret_y_bound": c.G_y * c.D_y * math.sqrt(c.T),
            "regret_z": self.regret_z,
            "regret_z_bound": c.regret_bound(),
            "regret_lambda": self.regret_lambda,
            "lagrangian_at_average": self.lagrangian_avg,
            "max_exp_mech_shortfall": float(self.shortfall.max(initial=0.0)),
            "exp_mech_shortfall_bound": self.shortfall_bound,
            "exp_mech_rounds_within_bound": int(np.sum(self.shortfall <= self.shortfall_bound + 1e-12)),
        }


def initial_flow(inst: RoutingInstance) -> np.ndarray:
    """Every player on a fewest-hop path (ties broken by edge index)."""
    x = np.zeros((inst.n, inst.m))
    ones = np.ones(inst.m)
    for i, (s, t) in enumerate(inst.demands):
        x[i], _ = shortest_path(inst, s, t, ones)
    return x


def min_x_block(inst: RoutingInstance, lam_sum) -> float:
    """``min over F^R of -lam_sum . sum_i x_i``, one LP per player."""
    lam_sum = np.asarray(lam_sum, dtype=float)
    total = 0.0
    for i in range(inst.n):
        s, t = inst.demands[i]
        if s == t and not np.any(lam_sum > 0):
            continue
        res = linprog(-lam_sum, A_eq=inst.incidence, b_eq=inst.demand_vector(i),
                      bounds=[(0.0, 1.0)] * inst.m, method="highs")
        if res.status != 0:
            raise RuntimeError(f"player {i}: LP for the fixed-sequence minimum failed: {res.message}")
        total += float(res.fun)
    return total


def min_y_block(inst: RoutingInstance, T: int, lam_sum) -> float:
    """``min over [0, n]^m of sum_t [c(y) + lam^t . y]``, edge by edge."""
    n = inst.n
    total = 0.0
    for e, lat in enumerate(inst.latencies):
        L = float(lam_sum[e])

        def h(u):
            return T * u * float(lat(u)) / n + L * u

        def dh(u):
            return T * (float(lat(u)) + u * float(lat.derivative(u))) / n + L

        if dh(0.0) >= 0:
            u = 0.0
        elif dh(float(n)) <= 0:
            u = float(n)
        else:
            u = brentq(dh, 0.0, float(n), xtol=1e-14, rtol=1e-15)
        total += min(h(u), h(0.0), h(float(n)))
    return total


def p_gd(inst: RoutingInstance, eps: float, delta: float, beta: float, rng: np.random.Generator,
         c_t: float = 1.0, rounds: int | None = None, flip_sign: bool = False,
         budget: PrivacyBudget | None = None) -> PGDResult:
    """Private gradient descent on the restricted Lagrangian game.

    Returns the averaged primal flow together with realized regrets.  With
    ``eps = inf`` the dual player is exact and ``rounds`` (default
    ``DEFAULT_NOISE_FREE_ROUNDS``) fixes the horizon.
    """
    n, m = inst.n, inst.m
    noise_free = math.isinf(eps)
    if rounds is not None:
        T = int(rounds)
        if T < 1:
            raise ValueError("rounds must be >= 1")
    elif noise_free:
        T = DEFAULT_NOISE_FREE_ROUNDS
    else:
        T = iteration_count(n, m, eps, delta, beta, c_t)
    eps_round = advanced_composition_epsilon(eps, delta, T)
    K = PGDConstants.build(inst, T, eps_round)
    if budget is not None:
        budget.charge("p_gd", eps, delta, T=T, eps_round=eps_round, delta_round=0.0,
                      rounds_composed="advanced")

    projectors = [FlowProjector(inst, i) for i in range(n)]
    x = initial_flow(inst)
    y = x.sum(axis=0)
    x_first = x.copy()

    x_sum = np.zeros_like(x)
    y_sum = np.zeros(m)
    lam_sum = np.zeros(m)
    idx = np.empty(T, dtype=int)
    val = np.empty(T)
    shortfall = np.empty(T)
    play_x = 0.0
    play_y = 0.0
    sum_c = 0.0
    sum_pen = 0.0

    for t in range(T):
        lam, k, scores = dual_best_response(inst, x, y, eps_round, rng, flip_sign)
        idx[t] = k
        val[t] = lam[k % m]
        shortfall[t] = scores.max() - scores[k]
        x_sum += x
        y_sum += y
        lam_sum += lam
        xs = x.sum(axis=0)
        c_y = relaxed_cost(inst, y)
        play_x -= float(np.dot(lam, xs))
        play_y += c_y + float(np.dot(lam, y))
        sum_c += c_y
        sum_pen += float(np.dot(lam, xs - y))
        g_y = grad_y(inst, y, lam)
        for i in range(n):
            x[i] = projectors[i](x[i] + K.eta_x * lam)
        y = gd_step_box(y, g_y, K.eta_y, float(n))

    x_bar = x_sum / T
    y_bar = y_sum / T
    lam_bar = lam_sum / T
    regret_x = play_x - min_x_block(inst, lam_sum)
    regret_y = play_y - min_y_block(inst, T, lam_sum)
    # the best fixed dual play puts 2m on the largest average violation
    f_bar = violation_scores(x_bar, y_bar)
    regret_lam = 2 * m * float(np.abs(f_bar).max()) + sum_pen / T
    bound20 = 0.0 if noise_free else 2.0 * math.log(2 * m * T / beta) / eps_round
    return PGDResult(
        x_bar=x_bar, y_bar=y_bar, lam_bar=lam_bar, constants=K,
        dual_index=idx, dual_value=val, shortfall=shortfall, shortfall_bound=bound20,
        regret_x=regret_x, regret_y=regret_y, regret_z=(regret_x + regret_y) / T,
        regret_lambda=regret_lam,
        lagrangian_avg=lagrangian_value(inst, x_bar, y_bar, lam_bar),
        noise_free=noise_free, x_first=x_first,
    )


def replay_player(inst: RoutingInstance, i: int, dual_seq, eta_x: float, x_start=None) -> np.ndarray:
    """Recompute player ``i``'s averaged flow from the public dual plays alone.

    Only ``inst.demands[i]`` and the graph are read, so agreement with
    ``p_gd`` shows the flow update uses nothing private to other players.
    """
    if x_start is None:
        s, t = inst.demands[i]
        x_start, _ = shortest_path(inst, s, t, np.ones(inst.m))
    proj = FlowProjector(inst, i)
    xi = np.array(x_start, dtype=float)
    acc = np.zeros(inst.m)
    for lam in dual_seq:
        acc += xi
        xi = proj(xi + eta_x * lam)
    return acc / len(dual_seq)


def _find_cycle(inst: RoutingInstance, w: np.ndarray, thresh: float):
    """Edge list of some directed cycle in the support of ``w``, or None."""
    nv = len(inst.vertices)
    color = [0] * nv
    pred_edge = [-1] * nv
    for root in range(nv):
        if color[root]:
            continue
        stack = [(root, iter(inst.out_edges[root]))]
        color[root] = 1
        while stack:
            u, it = stack[-1]
            advanced = False
            for e in it:
                if w[e] <= thresh:
                    continue
                v = int(inst.heads[e])
                if color[v] == 0:
                    color[v] = 1
                    pred_edge[v] = e
                    stack.append((v, iter(inst.out_edges[v])))
                    advanced = True
                    break
                if color[v] == 1:
                    cyc = [e]
                    cur = u
                    while cur != v:
                        pe = pred_edge[cur]
                        cyc.append(pe)
                        cur = int(inst.tails[pe])
                    return cyc[::-1]
            if not advanced:
                color[u] = 2
                stack.pop()
    return None


def cancel_cycles(inst: RoutingInstance, xi, thresh: float = 1e-12) -> np.ndarray:
    """Remove circulations from a single-player flow, keeping conservation."""
    w = np.array(xi, dtype=float)
    for _ in range(inst.m + 1):
        cyc = _find_cycle(inst, w, thresh)
        if cyc is None:
            return w
        w[cyc] -= w[cyc].min()
        w[np.abs(w) <= thresh] = 0.0
    raise DecompositionError("cycle cancellation did not terminate")


def path_decomposition(inst: RoutingInstance, i: int, xi, residual_tol: float = 1e-6) -> list:
    """Split a player's fractional flow into ``(path_row, weight)`` pairs.

    Paths are stripped depth-first from the source, always trying the
    lowest-index edge with residual above ``1e-9``; each path takes its
    bottleneck value.  Returned weights are normalised to sum to one.
    """
    s, t = inst.demands[i]
    if s == t:
        return [(np.zeros(inst.m), 1.0)]
    w = cancel_cycles(inst, xi)
    src = inst.vertex_index[s]
    dst = inst.vertex_index[t]
    out = []
    for _ in range(inst.m * inst.m + inst.m + 1):
        path = _dfs_path(inst, w, src, dst, 1e-9)
        if path is None:
            break
        bott = w[path].min()
        row = np.zeros(inst.m)
        row[path] = 1.0
        out.append((row, float(bott)))
        w[path] -= bott
        w[w < 1e-15] = 0.0
    out = [(r, wt) for r, wt in out if wt > residual_tol]
    if not out:
        raise DecompositionError(f"player {i}: no source-target path in the flow support")
    total = sum(wt for _, wt in out)
    if abs(total - 1.0) > 1e-4:
        raise DecompositionError(f"player {i}: decomposition carries mass {total:.6g}, expected 1")
    return [(r, wt / total) for r, wt in out]


def _dfs_path(inst, w, src, dst, thresh):
    seen = {src}
    stack = [(src, iter(inst.out_edges[src]))]
    edges = []
    while stack:
        u, it = stack[-1]
        for e in it:
            if w[e] <= thresh:
                continue
            v = int(inst.heads[e])
            if v in seen:
                continue
            edges.append(e)
            if v == dst:
                return edges
            seen.add(v)
            stack.append((v, iter(inst.out_edges[v])))
            break
        else:
            stack.pop()
            if edges:
                edges.pop()
    return None


def psrr(inst: RoutingInstance, i: int, xi, rng: np.random.Generator, size=None, parts=None):
    """Round player ``i``'s fractional flow to one path (or ``size`` paths).

    ``parts`` may carry a precomputed ``path_decomposition`` of ``xi``.
    """
    if parts is None:
        parts = path_decomposition(inst, i, xi)
    rows = np.stack([r for r, _ in parts])
    p = np.array([wt for _, wt in parts])
    if size is None:
        return rows[int(rng.choice(len(p), p=p))].copy()
    return rows[rng.choice(len(p), size=size, p=p)]


def rounding_gap_bound(m: int, gamma: float, n: int, beta: float) -> float:
    """Additive rounding loss ``m (gamma + 1) sqrt(2 n ln(m / beta))`` (zero once ``beta >= m``)."""
    return m * (gamma + 1.0) * math.sqrt(2.0 * n * max(math.log(m / beta), 0.0))
