import numpy as np
import pytest

from monoimprove.bounds import random_mdp, random_policy
from monoimprove.mdp import Mdp, PolicyTable


def philox(seed):
    return np.random.Generator(np.random.Philox(seed))


@pytest.fixture
def rng():
    return philox(12345)


def value_iteration_for_policy(mdp: Mdp, pi: PolicyTable, tol=1e-12, max_iter=100_000):
    """Plain loop-based policy evaluation, kept independent of the linear solver."""
    n_s, n_a = mdp.n_states, mdp.n_actions
    v = [0.0] * n_s
    for _ in range(max_iter):
        new = []
        for s in range(n_s):
            total = 0.0
            for a in range(n_a):
                cont = sum(mdp.transition[s, a, t] * v[t] for t in range(n_s))
                total += pi.probs[s, a] * (mdp.reward[s, a] + mdp.gamma * cont)
            new.append(total)
        resid = max(abs(x - y) for x, y in zip(new, v))
        v = new
        if resid < tol:
            break
    return np.array(v)


def one_state_two_action(gamma=0.9):
    P = np.ones((1, 2, 1))
    R = np.array([[0.0, 1.0]])
    return Mdp(P, R, [1.0], gamma)


__all__ = ["philox", "value_iteration_for_policy", "one_state_two_action", "random_mdp", "random_policy"]


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
