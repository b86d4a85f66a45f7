"""Model-based safe policy improvement driven by the exact lower bounds.

Candidates are conservative mixtures pi' = (1 - kappa) pi + kappa pi_bar, where
pi_bar is greedy on the advantage of pi over states that carry mixture weight.
The step size is chosen by evaluating the selected lower bound on a kappa grid,
then polishing the best grid point with a bounded scalar search between its
neighbours.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from scipy.optimize import minimize_scalar

from . import bounds
from .mdp import Mdp, PolicyTable, solve_values

N_KAPPA = 64
KAPPA_MIN = 1e-6
MONO_TOL = 1e-8
POLISH_XTOL = 1e-6  # relative to kappa


@dataclass(frozen=True)
class ImprovementStep:
    kappa: float
    pi_next: PolicyTable
    predicted_lower_bound: float
    realized_gap: float
    accepted: bool
    eta: float = float("nan")  # exact performance of pi_next


def kappa_grid(n: int = N_KAPPA, kappa_min: float = KAPPA_MIN) -> np.ndarray:
    """0 followed by ``n`` log-spaced points in [kappa_min, 1]."""
    return np.concatenate([[0.0], np.logspace(np.log10(kappa_min), 0.0, n)])


def _mixture_weights(mdp, pi, beta, alpha):
    rho_pi = solve_values(mdp, pi).rho
    if alpha == 1.0:
        return rho_pi
    return alpha * rho_pi + (1 - alpha) * solve_values(mdp, beta).rho


def target_policy(mdp: Mdp, pi: PolicyTable, beta: PolicyTable, alpha: float) -> PolicyTable:
    """Deterministic greedy policy on A^pi where the mixture occupancy is positive."""
    adv = solve_values(mdp, pi).adv
    w = _mixture_weights(mdp, pi, beta, alpha)
    greedy = np.zeros_like(pi.probs)
    greedy[np.arange(mdp.n_states), adv.argmax(axis=1)] = 1.0  # argmax breaks ties low
    probs = np.where((w > 0)[:, None], greedy, pi.probs)
    return PolicyTable(probs)


def _search(mdp, pi, beta, alpha, kind, pi_bar, grid, polish):
    evaluate = bounds.bound_evaluator(mdp, pi, beta, alpha, kind)

    def f(k):
        # kappa = 0 leaves pi unchanged and every bound is exactly 0 there
        return 0.0 if k == 0.0 else evaluate(pi.mix(pi_bar, k))

    values = np.array([f(k) for k in grid])
    best = int(np.argmax(values))
    kappa, bound = float(grid[best]), float(values[best])
    if polish and bound > 0.0:
        lo, hi = float(grid[max(best - 1, 0)]), float(grid[min(best + 1, grid.size - 1)])
        res = minimize_scalar(lambda k: -f(k), bounds=(lo, hi), method="bounded",
                              options={"xatol": POLISH_XTOL * max(kappa, KAPPA_MIN)})
        if res.success and -res.fun > bound:
            kappa, bound = float(res.x), float(-res.fun)
    return kappa, bound


def line_search_step(mdp: Mdp, pi: PolicyTable, beta: PolicyTable, alpha: float,
                     bound_kind: str = "tv", grid: np.ndarray | None = None,
                     polish: bool = True) -> ImprovementStep:
    """Pick kappa maximizing the lower bound; accept only if that bound is positive."""
    if bound_kind not in ("tv", "kl"):
        raise ValueError(f"bound_kind must be 'tv' or 'kl', got {bound_kind!r}")
    grid = kappa_grid() if grid is None else np.asarray(grid, dtype=float)
    pi_bar = target_policy(mdp, pi, beta, alpha)
    kappa, bound = _search(mdp, pi, beta, alpha, bound_kind, pi_bar, grid, polish)
    eta0 = solve_values(mdp, pi).eta
    if bound <= 0.0 or kappa == 0.0:
        return ImprovementStep(0.0, pi, bound, 0.0, False, eta0)
    pi_next = pi.mix(pi_bar, kappa)
    eta1 = solve_values(mdp, pi_next).eta
    return ImprovementStep(kappa, pi_next, bound, eta1 - eta0, True, eta1)


BetaSchedule = Union[PolicyTable, str, Callable[[int, list], PolicyTable]]


def _behavior(schedule: BetaSchedule, k: int, history: list[PolicyTable]) -> PolicyTable:
    if isinstance(schedule, PolicyTable):
        return schedule
    if schedule == "replay":
        return history[-2] if len(history) > 1 else history[-1]
    if schedule == "on-policy":
        return history[-1]
    if callable(schedule):
        return schedule(k, history)
    raise ValueError(f"unrecognized beta schedule {schedule!r}")


def improve_until_converged(mdp: Mdp, pi0: PolicyTable, beta_schedule: BetaSchedule = "on-policy",
                            alpha: float = 1.0, bound_kind: str = "tv", max_iters: int = 200,
                            grid: np.ndarray | None = None) -> list[ImprovementStep]:
    """Iterate line_search_step until a step is rejected or ``max_iters`` is hit.

    ``beta_schedule`` is a fixed PolicyTable, "on-policy" (beta = current pi),
    "replay" (beta = previous iterate), or a callable (k, history) -> PolicyTable.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    history = [pi0]
    steps = []
    for k in range(max_iters):
        beta = _behavior(beta_schedule, k, history)
        step = line_search_step(mdp, history[-1], beta, alpha, bound_kind, grid)
        steps.append(step)
        if not step.accepted:
            break
        if step.realized_gap < -MONO_TOL:
            raise bounds.BoundViolation(
                f"accepted step {k} decreased eta by {-step.realized_gap}",
                bounds.tuple_dump(mdp, history[-1], step.pi_next, beta, alpha),
            )
        history.append(step.pi_next)
    return steps


CSV_COLUMNS = ("iter", "kappa", "predicted_bound", "realized_gap", "eta", "accepted")


def steps_to_csv(steps: list[ImprovementStep]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for i, s in enumerate(steps):
        w.writerow([i, repr(s.kappa), repr(s.predicted_lower_bound), repr(s.realized_gap),
                    repr(s.eta), int(s.accepted)])
    return buf.getvalue()
