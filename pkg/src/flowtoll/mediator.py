"""The tolling mediator: private flow, private congestion, tolls, repair.

``flowtoll`` chains the stages.  Each player's suggestion depends only on
that player's report, the public dual plays, the noisy congestion and a
per-player random stream.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dp import NON_PRIVATE, PrivacyBudget, dp_jdp_composition_bound, laplace_noise
from .game_core import RoutingInstance, is_unsatisfied, marginal_tolls
from .private_opt import PGDResult, p_gd, path_decomposition, psrr

__all__ = [
    "p_con",
    "p_br",
    "repair_player",
    "alpha_estimate",
    "zeta_hat",
    "eta_eq_bound",
    "eta_opt_bound",
    "eta_game_bound",
    "unsatisfied_count_bound",
    "MediatorOutput",
    "resolve_reports",
    "flowtoll",
]


def p_con(x, eps: float, rng: np.random.Generator, n: int | None = None,
          budget: PrivacyBudget | None = None) -> np.ndarray:
    """Exact congestion plus ``Lap(m / eps)`` per edge, clamped to ``[0, n]``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0] if n is None else n
    m = x.shape[1]
    y = x.sum(axis=0)
    if budget is not None:
        budget.charge("p_con", eps, 0.0, scale=0.0 if math.isinf(eps) else m / eps)
    if math.isinf(eps):
        return np.clip(y, 0.0, n)
    return np.clip(y + laplace_noise(m / eps, rng, size=m), 0.0, float(n))


def repair_player(inst: RoutingInstance, i: int, xi, y_hat, tolls, zeta: float) -> tuple:
    """Return ``(path, was_unsatisfied)`` for player ``i`` against the frozen ``y_hat``.

    Only ``inst.demands[i]`` and ``xi`` are read from the player data.
    """
    x_view = np.zeros((i + 1, inst.m))
    x_view[i] = xi
    bad, alt, _ = is_unsatisfied(inst, x_view, i, y_hat, tolls, zeta)
    return (alt if bad else np.array(xi, dtype=float)), bad


def p_br(inst: RoutingInstance, tolls, y_hat, x, zeta: float) -> tuple:
    """One simultaneous pass of best responses against a fixed congestion.

    Returns ``(new_flow, unsatisfied_players)``.
    """
    x = np.asarray(x, dtype=float)
    out = x.copy()
    moved = []
    for i in range(inst.n):
        out[i], bad = repair_player(inst, i, x[i], y_hat, tolls, zeta)
        if bad:
            moved.append(i)
    return out, moved


def alpha_estimate(n: int, m: int, eps: float, c_alpha: float = 1.0) -> float:
    if math.isinf(eps):
        return 0.0
    return c_alpha * math.sqrt(n) * m ** 1.25 / math.sqrt(eps)


def _log_term(m, eps, beta):
    return 0.0 if math.isinf(eps) else m * m * math.log(m / beta) / eps


def zeta_hat(m: int, n: int, gamma: float, alpha: float, eps: float, beta: float) -> float:
    """Repair threshold ``4 sqrt(m n gamma alpha) + 8 gamma m^2 log(m/beta) / eps``."""
    return 4.0 * math.sqrt(m * n * gamma * alpha) + 8.0 * gamma * _log_term(m, eps, beta)


def eta_eq_bound(m: int, n: int, gamma: float, alpha: float, eps: float, beta: float) -> float:
    return 6.0 * math.sqrt(m * n * alpha * gamma) + 12.0 * gamma * _log_term(m, eps, beta)


def eta_opt_bound(m: int, n: int, gamma: float, alpha: float) -> float:
    extra = math.sqrt(m * n * alpha) / (2.0 * math.sqrt(gamma)) if gamma > 0 else (0.0 if alpha == 0 else math.inf)
    return alpha + math.sqrt(m * n * gamma * alpha) / 2.0 + extra


def eta_game_bound(m: int, n: int, gamma: float, alpha: float, eps: float, beta: float, delta: float) -> float:
    """Deviation-gain bound ``eta_eq + m (U + n)(2 eps + beta + delta)`` with toll cap ``U = n gamma``."""
    U = n * gamma
    return eta_eq_bound(m, n, gamma, alpha, eps, beta) + m * (U + n) * (2.0 * eps + beta + delta)


def unsatisfied_count_bound(n: int, m: int, gamma: float, alpha: float) -> float:
    if alpha <= 0:
        return 0.0
    if gamma <= 0:
        return math.inf
    return math.sqrt(n * alpha / (4.0 * m * gamma))


@dataclass
class MediatorOutput:
    suggestions: list                 # per report: path row, or None for dropped reports
    tolls: np.ndarray
    noisy_congestion: np.ndarray
    kept: list                        # report indices that were routed
    instance: RoutingInstance | None  # instance restricted to kept reports
    x_bullet: np.ndarray
    x_hat: np.ndarray
    pgd: PGDResult | None
    budget: PrivacyBudget
    alpha: float
    zeta: float
    unsatisfied_before: list = field(default_factory=list)

    def diagnostics(self) -> dict:
        d = {
            "alpha_closed_form": self.alpha,
            "zeta_hat": self.zeta,
            "unsatisfied_before_repair": len(self.unsatisfied_before),
            "unsatisfied_players": list(self.unsatisfied_before),
            "kept_reports": list(self.kept),
            "ledger": self.budget.to_dict(),
        }
        if self.pgd is not None:
            d["p_gd"] = self.pgd.diagnostics()
        if self.budget.noise_free:
            d["mode"] = NON_PRIVATE
        return d


def resolve_reports(inst: RoutingInstance, reports) -> tuple:
    """Keep reports that name known vertices and are routable; ``None`` is an opt-out."""
    kept, demands = [], []
    vset = set(inst.vertices)
    for j, r in enumerate(reports):
        if r is None:
            continue
        s, t = r
        if s not in vset or t not in vset or not inst.reachable(s, t):
            continue
        kept.append(j)
        demands.append((s, t))
    return kept, demands


def flowtoll(inst: RoutingInstance, reports, eps: float, delta: float, beta: float,
             rng: np.random.Generator, c_t: float = 1.0, c_alpha: float = 1.0,
             rounds: int | None = None, flip_dual_sign: bool = False,
             pgd_cache: dict | None = None) -> MediatorOutput:
    """Run the full mediator on the reported demands.

    ``reports`` has one entry per player: a ``(source, target)`` pair or
    ``None``.  The graph and latencies come from ``inst``; its own demands
    are ignored.  ``pgd_cache`` may hold noise-free solver results keyed by
    the kept demand tuple, since that stage is deterministic without noise.
    """
    budget = PrivacyBudget(eps, delta, beta)
    r_pgd, r_con, r_round = rng.spawn(3)
    kept, demands = resolve_reports(inst, reports)
    m = inst.m
    if not kept:
        return MediatorOutput([None] * len(reports), np.zeros(m), np.zeros(m), [], None,
                              np.zeros((0, m)), np.zeros((0, m)), None, budget, 0.0, 0.0)
    eff = inst.with_demands(demands)
    n = eff.n

    noise_free = math.isinf(eps)
    key = (tuple(demands), c_t, rounds, flip_dual_sign)
    if noise_free and pgd_cache is not None and key in pgd_cache:
        pgd = pgd_cache[key]
        budget.charge("p_gd", eps / 4, delta / 2, T=pgd.constants.T, eps_round=pgd.constants.eps_round,
                      delta_round=0.0, rounds_composed="advanced")
    else:
        pgd = p_gd(eff, eps / 4, delta / 2, beta / 2, r_pgd, c_t=c_t, rounds=rounds,
                   flip_sign=flip_dual_sign, budget=budget)
        if noise_free and pgd_cache is not None:
            pgd_cache[key] = pgd

    # one rounding stream per report slot, so opt-outs do not shift anyone's draws
    streams = r_round.spawn(len(reports))
    parts = None
    if noise_free and pgd_cache is not None:
        pkey = ("parts",) + key
        if pkey not in pgd_cache:
            pgd_cache[pkey] = [path_decomposition(eff, k, pgd.x_bar[k]) for k in range(n)]
        parts = pgd_cache[pkey]
    x_bullet = np.stack([psrr(eff, k, pgd.x_bar[k], streams[j], parts=None if parts is None else parts[k])
                         for k, j in enumerate(kept)])

    y_hat = p_con(x_bullet, eps / 4, r_con, n=n, budget=budget)
    e_rel, d_rel = dp_jdp_composition_bound(eps / 4, delta / 2, eps / 4)
    budget.claim("noisy congestion and tolls (DP in the demands)", e_rel, d_rel)
    tolls = marginal_tolls(eff, y_hat)

    alpha = alpha_estimate(n, m, eps, c_alpha)
    zeta = zeta_hat(m, n, eff.gamma, alpha, eps, beta)
    x_hat, moved = p_br(eff, tolls, y_hat, x_bullet, zeta)
    budget.claim("suggestions and tolls (joint DP)", eps, delta)

    suggestions = [None] * len(reports)
    for k, j in enumerate(kept):
        suggestions[j] = x_hat[k]
    return MediatorOutput(suggestions, tolls, y_hat, kept, eff, x_bullet, x_hat, pgd, budget,
                          alpha, zeta, moved)
