"""Differential-privacy primitives and a small budget accountant.

``math.inf`` as epsilon selects the noise-free diagnostic mode: Laplace
noise vanishes and the exponential mechanism becomes an argmax.  That mode
offers no privacy and every ledger produced in it says so.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "NON_PRIVATE",
    "laplace_sample",
    "laplace_noise",
    "QualityScore",
    "exp_mech_probabilities",
    "exponential_mechanism",
    "utility_bound_exp_mech",
    "advanced_composition_epsilon",
    "dp_jdp_composition_bound",
    "Charge",
    "PrivacyBudget",
]

NON_PRIVATE = "noise-free diagnostic mode: NOT differentially private"


def laplace_noise(scale: float, rng: np.random.Generator, size=None):
    """Laplace draws via the inverse CDF of a 64-bit uniform."""
    if scale < 0 or math.isnan(scale):
        raise ValueError(f"Laplace scale must be non-negative, got {scale}")
    if scale == 0:
        return 0.0 if size is None else np.zeros(size)
    u = rng.random(size)
    v = rng.random(size)
    # -log(1 - u) is Exp(1); a fair coin from v picks the sign
    mag = -scale * np.log1p(-u)
    sign = np.where(v < 0.5, -1.0, 1.0)
    out = sign * mag
    return float(out) if size is None else out


def laplace_sample(scale: float, rng: np.random.Generator) -> float:
    return laplace_noise(scale, rng)


@dataclass(frozen=True)
class QualityScore:
    """Scores over an ordered outcome list with a caller-supplied sensitivity."""

    outcomes: tuple
    scores: np.ndarray
    sensitivity: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=float))
        if not self.outcomes:
            raise ValueError("outcome set is empty")
        if self.scores.shape != (len(self.outcomes),):
            raise ValueError("one score per outcome required")
        if not self.sensitivity > 0:
            raise ValueError("sensitivity must be positive")


def exp_mech_probabilities(qs: QualityScore, eps: float) -> np.ndarray:
    s = qs.scores
    if np.all(s == -np.inf):
        raise ValueError("all scores are -inf")
    if math.isinf(eps):
        p = np.zeros(len(s))
        p[int(np.argmax(s))] = 1.0
        return p
    if not eps > 0:
        raise ValueError("epsilon must be positive")
    logits = eps * s / (2.0 * qs.sensitivity)
    logits = logits - logits.max()
    w = np.exp(logits)
    return w / w.sum()


def exponential_mechanism(qs: QualityScore, eps: float, rng: np.random.Generator, return_index: bool = False):
    """Sample an outcome with probability proportional to ``exp(eps q / (2 dq))``.

    With ``eps = inf`` the first maximiser in outcome order is returned and
    ``rng`` is not touched.
    """
    p = exp_mech_probabilities(qs, eps)
    if math.isinf(eps):
        k = int(np.argmax(p))
    else:
        c = np.cumsum(p)
        k = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
        k = min(k, len(p) - 1)
    return k if return_index else qs.outcomes[k]


def utility_bound_exp_mech(sensitivity: float, eps: float, n_outcomes: int, beta: float) -> float:
    """Score shortfall exceeded with probability at most ``beta``: ``(2 dq / eps) log(|O| / beta)``."""
    if math.isinf(eps):
        return 0.0
    return 2.0 * sensitivity / eps * math.log(n_outcomes / beta)


def advanced_composition_epsilon(eps_total: float, delta: float, T: int) -> float:
    """Per-round epsilon so that ``T`` adaptive rounds compose to ``(eps_total, delta)``."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if T < 1:
        raise ValueError("T must be at least 1")
    if math.isinf(eps_total):
        return math.inf
    return eps_total / math.sqrt(8.0 * T * math.log(1.0 / delta))


def dp_jdp_composition_bound(eps_j: float, delta_j: float, eps_d: float) -> tuple:
    """Privacy of a DP stage that reads the output of a JDP stage."""
    return 2.0 * eps_d + eps_j, delta_j


@dataclass(frozen=True)
class Charge:
    mechanism: str
    epsilon: float
    delta: float
    details: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return {"mechanism": self.mechanism, "epsilon": _num(self.epsilon),
                "delta": _num(self.delta), "details": {k: _num(v) for k, v in self.details.items()}}


def _num(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


class PrivacyBudget:
    """Append-only ledger of ``(mechanism, eps, delta)`` charges against a target budget."""

    def __init__(self, epsilon: float, delta: float, beta: float):
        if not (epsilon > 0):
            raise ValueError("epsilon must be positive (use math.inf for noise-free mode)")
        if not 0 <= delta < 1:
            raise ValueError("delta must lie in [0, 1)")
        if not 0 < beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        self.epsilon = float(epsilon)
        self.delta = float(delta)
        self.beta = float(beta)
        self._charges: list = []
        self.claims: list = []

    @property
    def noise_free(self) -> bool:
        return math.isinf(self.epsilon)

    @property
    def charges(self) -> tuple:
        return tuple(self._charges)

    def charge(self, mechanism: str, epsilon: float, delta: float = 0.0, **details) -> Charge:
        c = Charge(mechanism, float(epsilon), float(delta), dict(details))
        self._charges.append(c)
        return c

    def claim(self, label: str, epsilon: float, delta: float):
        """Record a derived guarantee (e.g. a composition result) without spending budget."""
        self.claims.append({"label": label, "epsilon": float(epsilon), "delta": float(delta)})

    def basic_total(self) -> tuple:
        return (math.fsum(c.epsilon for c in self._charges),
                math.fsum(c.delta for c in self._charges))

    def advanced_total(self, delta_slack: float) -> tuple:
        """Advanced composition of the charges, assuming they share one epsilon."""
        if not self._charges:
            return 0.0, 0.0
        k = len(self._charges)
        e = max(c.epsilon for c in self._charges)
        d = math.fsum(c.delta for c in self._charges)
        if math.isinf(e):
            return math.inf, d + delta_slack
        tot = math.sqrt(2 * k * math.log(1 / delta_slack)) * e + k * e * (math.exp(e) - 1)
        return tot, d + delta_slack

    def within_budget(self, tol: float = 1e-12) -> bool:
        e, d = self.basic_total()
        return e <= self.epsilon + tol and d <= self.delta + tol

    def to_dict(self) -> dict:
        e, d = self.basic_total()
        out = {
            "target": {"epsilon": _num(self.epsilon), "delta": self.delta, "beta": self.beta},
            "charges": [c.to_dict() for c in self._charges],
            "claims": [{k: _num(v) for k, v in c.items()} for c in self.claims],
            "total": {"epsilon": _num(e), "delta": d},
        }
        if self.noise_free:
            out["warning"] = NON_PRIVATE
        return out
