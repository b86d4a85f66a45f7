"""Finite MDPs, tabular policies, and exact policy evaluation by linear solves.

Conventions:
    transition[s, a, s'] = Pr(s' | s, a)
    reward[s, a]         = expected immediate reward
    probs[s, a]          = pi(a | s)

The occupancy vector ``rho`` is the *unnormalized* discounted state
distribution, rho(s) = sum_t gamma^t Pr(s_t = s), so it sums to 1 / (1 - gamma).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

INPUT_TOL = 1e-12
DERIVED_TOL = 1e-9
MAX_STATES = 512


class InvariantViolation(RuntimeError):
    """An internal consistency check failed on inputs that passed validation."""


def _frozen(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_distribution_rows(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} has non-finite entries")
    if np.any(arr < 0):
        raise ValueError(f"{what} has negative entries")
    bad = np.abs(arr.sum(axis=-1) - 1.0) > INPUT_TOL
    if np.any(bad):
        raise ValueError(f"{what} rows do not sum to 1 (worst index {np.argwhere(bad)[0].tolist()})")


@dataclass(frozen=True, eq=False)
class Mdp:
    transition: np.ndarray
    reward: np.ndarray
    rho0: np.ndarray
    gamma: float
    max_states: int = field(default=MAX_STATES, repr=False)

    def __post_init__(self):
        P = _frozen(self.transition)
        R = _frozen(self.reward)
        mu = _frozen(self.rho0)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "rho0", mu)
        object.__setattr__(self, "gamma", float(self.gamma))

        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        n_s, n_a, _ = P.shape
        if n_s < 1 or n_a < 1:
            raise ValueError("need at least one state and one action")
        if n_s > self.max_states:
            raise ValueError(f"{n_s} states exceeds the dense-solve cap of {self.max_states}")
        if R.shape != (n_s, n_a):
            raise ValueError(f"reward must have shape {(n_s, n_a)}, got {R.shape}")
        if mu.shape != (n_s,):
            raise ValueError(f"rho0 must have shape {(n_s,)}, got {mu.shape}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie strictly inside (0, 1), got {self.gamma}")
        if not np.all(np.isfinite(R)):
            raise ValueError("reward has non-finite entries")
        _check_distribution_rows(P, "transition")
        _check_distribution_rows(mu, "rho0")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "rho0": self.rho0.tolist(),
            "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Mdp:
        mdp = cls(d["transition"], d["reward"], d["rho0"], d["gamma"])
        if (mdp.n_states, mdp.n_actions) != (d["n_states"], d["n_actions"]):
            raise ValueError("declared n_states/n_actions disagree with array shapes")
        return mdp

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> Mdp:
        return cls.from_dict(json.loads(text))

    def terminal_states(self) -> np.ndarray:
        """Boolean mask of absorbing, zero-reward states (episode ends on entry)."""
        idx = np.arange(self.n_states)
        absorbing = np.all(self.transition[idx, :, idx] == 1.0, axis=1)
        return absorbing & np.all(self.reward == 0.0, axis=1)


@dataclass(frozen=True, eq=False)
class PolicyTable:
    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        object.__setattr__(self, "probs", p)
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError(f"policy must be a non-empty (S, A) matrix, got shape {p.shape}")
        _check_distribution_rows(p, "policy")

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape

    def check_compatible(self, mdp: Mdp) -> None:
        if self.shape != (mdp.n_states, mdp.n_actions):
            raise ValueError(
                f"policy shape {self.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})"
            )

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> PolicyTable:
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> PolicyTable:
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)

    def mix(self, other: PolicyTable, kappa: float) -> PolicyTable:
        """(1 - kappa) * self + kappa * other, renormalized against rounding."""
        p = (1.0 - kappa) * self.probs + kappa * other.probs
        return PolicyTable(p / p.sum(axis=1, keepdims=True))

    def to_dict(self) -> dict:
        return {"probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> PolicyTable:
        return cls(d["probs"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> PolicyTable:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class ValueBundle:
    v: np.ndarray
    q: np.ndarray
    adv: np.ndarray
    rho: np.ndarray
    eta: float


def policy_transition(mdp: Mdp, pi: PolicyTable) -> np.ndarray:
    """State-to-state matrix P^pi[s, s'] = sum_a pi(a|s) P[s, a, s']."""
    pi.check_compatible(mdp)
    return np.einsum("sa,sat->st", pi.probs, mdp.transition)


def policy_reward(mdp: Mdp, pi: PolicyTable) -> np.ndarray:
    pi.check_compatible(mdp)
    return np.einsum("sa,sa->s", pi.probs, mdp.reward)


def resolvent(mdp: Mdp, pi: PolicyTable) -> np.ndarray:
    """Explicit (I - gamma P^pi)^{-1}."""
    A = np.eye(mdp.n_states) - mdp.gamma * policy_transition(mdp, pi)
    return scipy.linalg.inv(A)


def solve_values(mdp: Mdp, pi: PolicyTable) -> ValueBundle:
    P_pi = policy_transition(mdp, pi)
    r_pi = policy_reward(mdp, pi)
    A = np.eye(mdp.n_states) - mdp.gamma * P_pi
    try:
        lu = scipy.linalg.lu_factor(A, check_finite=True)
        v = scipy.linalg.lu_solve(lu, r_pi)
        rho = scipy.linalg.lu_solve(lu, mdp.rho0, trans=1)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise InvariantViolation(f"I - gamma P^pi is not invertible: {exc}") from exc
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(rho))):
        raise InvariantViolation("linear solve produced non-finite values")

    q = mdp.reward + mdp.gamma * mdp.transition @ v
    adv = q - v[:, None]
    eta = float(mdp.rho0 @ v)

    total = 1.0 / (1.0 - mdp.gamma)
    scale = max(1.0, np.abs(r_pi).max() * total)
    if abs(rho.sum() - total) > DERIVED_TOL * total:
        raise InvariantViolation(f"occupancy mass {rho.sum()} != {total}")
    if abs(eta - float(rho @ r_pi)) > DERIVED_TOL * scale:
        raise InvariantViolation("rho0.v and rho.r_pi disagree")
    return ValueBundle(_frozen(v), _frozen(q), _frozen(adv), _frozen(rho), eta)


def bellman_residual(mdp: Mdp, pi: PolicyTable, v: np.ndarray) -> float:
    """||v - (r^pi + gamma P^pi v)||_inf"""
    target = policy_reward(mdp, pi) + mdp.gamma * policy_transition(mdp, pi) @ v
    return float(np.abs(v - target).max())


def policy_advantage(mdp: Mdp, pi: PolicyTable, pi_prime: PolicyTable, values: ValueBundle | None = None) -> np.ndarray:
    """Per-state advantage of pi_prime over pi: sum_a pi'(a|s) A^pi(s, a)."""
    pi.check_compatible(mdp)
    pi_prime.check_compatible(mdp)
    if values is None:
        values = solve_values(mdp, pi)
    # (pi' - pi) q is the same quantity; it cancels the v term exactly when pi' == pi.
    return np.einsum("sa,sa->s", pi_prime.probs - pi.probs, values.q)


def advantage_span(adv_vec) -> float:
    """max_{s,s'} |x(s) - x(s')|"""
    x = np.asarray(adv_vec, dtype=float)
    if x.size == 0:
        raise ValueError("advantage_span of an empty vector")
    return float(x.max() - x.min())


def policy_iteration(mdp: Mdp, max_iters: int = 1000) -> tuple[PolicyTable, ValueBundle]:
    """Exact Howard policy iteration; ties keep the incumbent action."""
    actions = np.zeros(mdp.n_states, dtype=int)
    for _ in range(max_iters):
        pi = PolicyTable.deterministic(actions, mdp.n_actions)
        vals = solve_values(mdp, pi)
        q = vals.q
        best = q.max(axis=1)
        current = q[np.arange(mdp.n_states), actions]
        improve = best > current + 1e-12 * max(1.0, np.abs(best).max())
        if not improve.any():
            return pi, vals
        actions = np.where(improve, q.argmax(axis=1), actions)
    raise RuntimeError("policy iteration did not converge")
