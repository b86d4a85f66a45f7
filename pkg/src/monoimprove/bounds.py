"""Exact evaluation of the on/off-policy improvement inequalities.

Every quantity here is computed from linear solves on a known MDP, so each
inequality can be checked with both sides in hand.  The lower bounds have the
shape

    alpha * rho_pi . A + (1 - alpha) * rho_beta . A  -  penalty * ||q^pi||_inf

where A is the per-state advantage of pi' over pi, and the penalty is built
from total variation (tv form) or max-KL (kl form) between the policies.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import divergences as dv
from .mdp import Mdp, PolicyTable, ValueBundle, policy_transition, resolvent, solve_values

CERT_TOL = 1e-8
LEMMA2_TOL = 1e-10


class BoundViolation(AssertionError):
    """A certified inequality failed; ``dump`` holds the reproducing tuple as JSON."""

    def __init__(self, message: str, dump: str):
        super().__init__(message)
        self.dump = dump


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha


def performance_difference(mdp: Mdp, pi: PolicyTable, pi_prime: PolicyTable) -> tuple[float, float]:
    """Return (eta(pi') - eta(pi), rho^{pi'} . A^pi_{pi'}); the two are equal in exact arithmetic."""
    base = solve_values(mdp, pi)
    new = solve_values(mdp, pi_prime)
    adv = np.einsum("sa,sa->s", pi_prime.probs - pi.probs, base.q)
    return new.eta - base.eta, float(new.rho @ adv)


def centered_inner_product_bound(x, y) -> tuple[float, float]:
    """|x.y| and ||x||_1 * span(y) / 2 for a zero-sum x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d vectors of equal length")
    if abs(x.sum()) > LEMMA2_TOL:
        raise ValueError(f"x must sum to zero, got {x.sum()!r}")
    if x.size == 0:
        return 0.0, 0.0
    return abs(float(x @ y)), float(np.abs(x).sum() * (y.max() - y.min()) / 2.0)


def _mixed_occupancy(rho_pi, rho_beta, alpha):
    if alpha == 1.0:
        return rho_pi
    # this form is exact when rho_pi == rho_beta
    return rho_beta + alpha * (rho_pi - rho_beta)


@dataclass
class _Solved:
    """Shared linear-algebra products for one (mdp, pi, pi', beta) tuple."""

    mdp: Mdp
    pi: PolicyTable
    pi_prime: PolicyTable
    beta: PolicyTable
    vpi: ValueBundle | None = None
    vbeta: ValueBundle | None = None
    vnew: ValueBundle = field(init=False)
    adv: np.ndarray = field(init=False)

    def __post_init__(self):
        for p in (self.pi, self.pi_prime, self.beta):
            p.check_compatible(self.mdp)
        if self.vpi is None:
            self.vpi = solve_values(self.mdp, self.pi)
        if self.vbeta is None:
            self.vbeta = self.vpi if self.beta is self.pi else solve_values(self.mdp, self.beta)
        self.vnew = solve_values(self.mdp, self.pi_prime)
        self.adv = np.einsum("sa,sa->s", self.pi_prime.probs - self.pi.probs, self.vpi.q)

    @property
    def q_inf(self) -> float:
        return float(np.abs(self.vpi.q).max())

    def advantage_terms(self, alpha: float) -> float:
        on = float(self.vpi.rho @ self.adv)
        if alpha == 1.0:
            return on
        return alpha * on + (1.0 - alpha) * float(self.vbeta.rho @ self.adv)


def _dist_gap(s: _Solved, alpha: float) -> tuple[float, float, float]:
    mdp, gamma = s.mdp, s.mdp.gamma
    lhs = float(np.abs(s.vnew.rho - _mixed_occupancy(s.vpi.rho, s.vbeta.rho, alpha)).sum())

    P_new = policy_transition(mdp, s.pi_prime)
    d_pi = np.abs(P_new - policy_transition(mdp, s.pi)).sum(axis=1).max()
    d_beta = np.abs(P_new - policy_transition(mdp, s.beta)).sum(axis=1).max()
    inv_norm = np.abs(resolvent(mdp, s.pi_prime)).sum(axis=1).max()
    model = gamma / (1 - gamma) * (alpha * d_pi + (1 - alpha) * d_beta) * inv_norm

    tv_pi = dv.tv_max(s.pi_prime, s.pi)
    tv_beta = dv.tv_max(s.pi_prime, s.beta)
    free = gamma / (1 - gamma) ** 2 * (alpha * tv_pi + (1 - alpha) * tv_beta)
    return lhs, float(model), float(free)


def state_dist_gap(mdp, pi, pi_prime, beta, alpha) -> tuple[float, float, float]:
    """(||rho' - mixed rho||_1, model-based bound, model-free bound)."""
    alpha = _check_alpha(alpha)
    return _dist_gap(_Solved(mdp, pi, pi_prime, beta), alpha)


def _thm1(s: _Solved, alpha: float) -> float:
    gamma = s.mdp.gamma
    tv_pi = dv.tv_max(s.pi_prime, s.pi)
    mix = alpha * tv_pi * tv_pi
    if alpha < 1.0:
        mix += (1 - alpha) * tv_pi * dv.tv_max(s.pi_prime, s.beta)
    return s.advantage_terms(alpha) - gamma / (1 - gamma) ** 2 * mix * s.q_inf


def _cor5(s: _Solved, alpha: float) -> float:
    gamma = s.mdp.gamma
    kl_pi = dv.kl_max(s.pi, s.pi_prime)
    mix = alpha * kl_pi if alpha > 0.0 else 0.0
    if alpha < 1.0:
        kl_beta = dv.kl_max(s.beta, s.pi_prime)
        # the TV-form term this relaxes is 0 whenever either factor vanishes
        prod = 0.0 if kl_pi == 0.0 or kl_beta == 0.0 else kl_pi * kl_beta
        mix += (1 - alpha) * math.sqrt(prod)
    if math.isinf(mix):
        return -math.inf
    return s.advantage_terms(alpha) - 2 * gamma / (1 - gamma) ** 2 * mix * s.q_inf


def thm1_lower_bound(mdp, pi, pi_prime, beta, alpha) -> float:
    """TV-penalized lower bound on eta(pi') - eta(pi)."""
    alpha = _check_alpha(alpha)
    return _thm1(_Solved(mdp, pi, pi_prime, beta), alpha)


def cor5_lower_bound(mdp, pi, pi_prime, beta, alpha) -> float:
    """KL-penalized lower bound on eta(pi') - eta(pi); -inf if a needed KL is infinite."""
    alpha = _check_alpha(alpha)
    return _cor5(_Solved(mdp, pi, pi_prime, beta), alpha)


def lower_bound(mdp, pi, pi_prime, beta, alpha, kind: str) -> float:
    return bound_evaluator(mdp, pi, beta, alpha, kind)(pi_prime)


def bound_evaluator(mdp, pi, beta, alpha, kind: str):
    """Return pi' -> lower bound for fixed (pi, beta, alpha), reusing the pi and beta solves."""
    alpha = _check_alpha(alpha)
    if kind not in ("tv", "kl"):
        raise ValueError(f"unknown bound kind {kind!r}")
    vpi = solve_values(mdp, pi)
    vbeta = vpi if beta is pi else solve_values(mdp, beta)
    fn = _thm1 if kind == "tv" else _cor5

    def evaluate(pi_prime: PolicyTable) -> float:
        return fn(_Solved(mdp, pi, pi_prime, beta, vpi, vbeta), alpha)

    return evaluate


@dataclass(frozen=True)
class BoundReport:
    alpha: float
    true_gap: float
    lemma1_rhs: float
    dist_gap_lhs: float
    dist_gap_model_rhs: float
    dist_gap_free_rhs: float
    thm1_lower: float
    cor5_lower: float
    q_inf_norm: float
    verdicts: dict

    @property
    def valid(self) -> bool:
        return all(v for k, v in self.verdicts.items() if k != "cor5_le_thm1")

    def slacks(self) -> dict:
        """Signed margins; negative means the inequality failed (before tolerance)."""
        return {
            "lemma1": -abs(self.true_gap - self.lemma1_rhs),
            "lemma3": self.dist_gap_model_rhs - self.dist_gap_lhs,
            "cor4": self.dist_gap_free_rhs - self.dist_gap_model_rhs,
            "thm1": self.true_gap - self.thm1_lower,
            "cor5": self.true_gap - self.cor5_lower,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (dv._encode_float(v) if isinstance(v, float) else v) for k, v in d.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def bound_report(mdp, pi, pi_prime, beta, alpha, tol: float = CERT_TOL) -> BoundReport:
    alpha = _check_alpha(alpha)
    s = _Solved(mdp, pi, pi_prime, beta)
    true_gap = s.vnew.eta - s.vpi.eta
    lemma1 = float(s.vnew.rho @ s.adv)
    lhs, model, free = _dist_gap(s, alpha)
    thm1 = _thm1(s, alpha)
    cor5 = _cor5(s, alpha)
    verdicts = {
        "lemma1": abs(true_gap - lemma1) <= tol,
        "lemma3": lhs <= model + tol,
        "cor4": model <= free + tol,
        "thm1": thm1 <= true_gap + tol,
        "cor5": cor5 <= true_gap + tol,
        # recorded, not required
        "cor5_le_thm1": cor5 <= thm1 + tol,
    }
    return BoundReport(alpha, true_gap, lemma1, lhs, model, free, thm1, cor5, s.q_inf, verdicts)


def tuple_dump(mdp, pi, pi_prime, beta, alpha) -> str:
    return json.dumps({
        "mdp": mdp.to_dict(),
        "pi": pi.to_dict(),
        "pi_prime": pi_prime.to_dict(),
        "beta": beta.to_dict(),
        "alpha": alpha,
    })


def certify_tuple(mdp, pi, pi_prime, beta, alpha, tol: float = CERT_TOL) -> BoundReport:
    """Like bound_report, but raise BoundViolation carrying the tuple on failure."""
    report = bound_report(mdp, pi, pi_prime, beta, alpha, tol)
    if not report.valid:
        failed = [k for k, v in report.verdicts.items() if not v and k != "cor5_le_thm1"]
        raise BoundViolation(f"violated: {', '.join(failed)}", tuple_dump(mdp, pi, pi_prime, beta, alpha))
    return report


# ---------------------------------------------------------------------------
# random tuples for certification sweeps

GAMMAS = (0.9, 0.95, 0.99)


def tuple_rng(root_seed: int, index: int) -> np.random.Generator:
    """Independent Philox stream for tuple ``index`` under ``root_seed``."""
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> PolicyTable:
    return PolicyTable(rng.dirichlet(np.ones(n_actions), size=n_states))


def random_mdp(rng, n_states: int, n_actions: int, gamma: float) -> Mdp:
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    R = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    mu = rng.dirichlet(np.ones(n_states))
    return Mdp(P, R, mu, gamma)


def random_tuple(rng, states=(2, 10), actions=(2, 5), gammas=GAMMAS, identical: bool = False):
    """Draw (mdp, pi, pi', beta, alpha) with Dirichlet(1) rows and U[-1, 1] rewards."""
    n_s = int(rng.integers(states[0], states[1] + 1))
    n_a = int(rng.integers(actions[0], actions[1] + 1))
    gamma = float(gammas[int(rng.integers(len(gammas)))])
    mdp = random_mdp(rng, n_s, n_a, gamma)
    pi = random_policy(rng, n_s, n_a)
    if identical:
        return mdp, pi, pi, pi, float(rng.uniform())
    return mdp, pi, random_policy(rng, n_s, n_a), random_policy(rng, n_s, n_a), float(rng.uniform())
