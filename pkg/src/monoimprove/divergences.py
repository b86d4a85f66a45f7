"""Distances between tabular policies.

Total variation is stored in the full-sum convention, sum_a |pi(a|s) - pi'(a|s)|
with range [0, 2]; this is the row-wise quantity whose max equals
||Pi^pi' - Pi^pi||_inf. KL is in nats; 0 log(0/q) = 0 and p log(p/0) = +inf.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import PolicyTable


def _pair(pi: PolicyTable, pi_prime: PolicyTable) -> tuple[np.ndarray, np.ndarray]:
    if pi.shape != pi_prime.shape:
        raise ValueError(f"policy shapes differ: {pi.shape} vs {pi_prime.shape}")
    return pi.probs, pi_prime.probs


def tv_per_state(pi: PolicyTable, pi_prime: PolicyTable) -> np.ndarray:
    p, q = _pair(pi, pi_prime)
    return np.abs(p - q).sum(axis=1)


def tv_max(pi: PolicyTable, pi_prime: PolicyTable) -> float:
    return float(tv_per_state(pi, pi_prime).max())


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) for stochastic matrices of equal shape."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    support = p > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(support, p * (np.log(np.where(support, p, 1.0)) - np.log(q)), 0.0)
    kl = terms.sum(axis=1)
    kl[np.any(support & (q <= 0), axis=1)] = np.inf
    # rounding can leave tiny negatives when rows coincide
    return np.maximum(kl, 0.0)


def kl_per_state(pi: PolicyTable, pi_prime: PolicyTable) -> np.ndarray:
    p, q = _pair(pi, pi_prime)
    return kl_rows(p, q)


def kl_max(pi: PolicyTable, pi_prime: PolicyTable) -> float:
    """max_s KL(pi(.|s) || pi'(.|s)); argument order is (reference, candidate)."""
    return float(kl_per_state(pi, pi_prime).max())


def _normalized_weights(weights, n_states: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape != (n_states,):
        raise ValueError(f"weights must have shape ({n_states},), got {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights are all zero")
    return w / total


def expected_kl(pi: PolicyTable, pi_prime: PolicyTable, weights) -> float:
    """E_{s ~ w}[KL(pi || pi')] with w normalized to a probability vector."""
    kl = kl_per_state(pi, pi_prime)
    w = _normalized_weights(weights, kl.size)
    mask = w > 0
    return float(np.dot(w[mask], kl[mask]))


def mixture_kl_metric(pi, pi_prime, beta, rho_pi, rho_beta, alpha: float) -> float:
    """alpha * E_pi[KL(pi||pi')] + (1 - alpha) * sqrt(E_pi[KL(pi||pi')] * E_beta[KL(beta||pi')])"""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    on = expected_kl(pi, pi_prime, rho_pi)
    if alpha == 1.0:
        return on
    off = expected_kl(beta, pi_prime, rho_beta)
    return alpha * on + (1.0 - alpha) * float(np.sqrt(on * off))


@dataclass(frozen=True)
class DivergenceProfile:
    tv_per_state: np.ndarray
    tv_max: float
    kl_per_state: np.ndarray
    kl_max: float
    expected_kl: float
    weights: np.ndarray

    @property
    def tv_half_per_state(self) -> np.ndarray:
        return self.tv_per_state / 2.0

    def to_dict(self) -> dict:
        def enc(x):
            return [_encode_float(v) for v in np.asarray(x).tolist()]

        return {
            "tv_per_state": enc(self.tv_per_state),
            "tv_max": self.tv_max,
            "kl_per_state": enc(self.kl_per_state),
            "kl_max": _encode_float(self.kl_max),
            "expected_kl": _encode_float(self.expected_kl),
            "weights": enc(self.weights),
        }


def divergence_profile(pi: PolicyTable, pi_prime: PolicyTable, weights=None) -> DivergenceProfile:
    tv = tv_per_state(pi, pi_prime)
    kl = kl_per_state(pi, pi_prime)
    if weights is None:
        weights = np.ones(tv.size)
    return DivergenceProfile(
        tv_per_state=tv,
        tv_max=float(tv.max()),
        kl_per_state=kl,
        kl_max=float(kl.max()),
        expected_kl=expected_kl(pi, pi_prime, weights),
        weights=_normalized_weights(weights, tv.size),
    )


def _encode_float(x: float):
    if np.isposinf(x):
        return "inf"
    if np.isneginf(x):
        return "-inf"
    return float(x)
