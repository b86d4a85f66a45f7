import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monoimprove import bounds
from monoimprove.mdp import PolicyTable

from conftest import one_state_two_action, philox, random_mdp, random_policy


def occupancy_by_power_series(mdp, pi, terms=None):
    """rho^T = sum_t gamma^t rho0^T (P^pi)^t, truncated once gamma^t < 1e-16."""
    P = np.einsum("sa,sat->st", pi.probs, mdp.transition)
    terms = terms or int(math.log(1e-16) / math.log(mdp.gamma)) + 1
    rho, d = np.zeros(mdp.n_states), mdp.rho0.copy()
    for t in range(terms):
        rho += mdp.gamma**t * d
        d = d @ P
    return rho


def explicit_matrices(mdp, pi):
    """Pi^pi as a dense |S| x |S||A| matrix and P as |S||A| x |S|, as written in matrix notation."""
    n_s, n_a = mdp.n_states, mdp.n_actions
    Pi = np.zeros((n_s, n_s * n_a))
    for s in range(n_s):
        Pi[s, s * n_a:(s + 1) * n_a] = pi.probs[s]
    return Pi, mdp.transition.reshape(n_s * n_a, n_s)


def thm1_oracle(mdp, pi, pi2, beta, alpha):
    g = mdp.gamma
    Pi, P = explicit_matrices(mdp, pi)
    Pi2, _ = explicit_matrices(mdp, pi2)
    Pib, _ = explicit_matrices(mdp, beta)
    r = mdp.reward.reshape(-1)
    v = np.linalg.solve(np.eye(mdp.n_states) - g * Pi @ P, Pi @ r)
    q = r + g * P @ v
    adv = (Pi2 - Pi) @ q
    rho_pi = occupancy_by_power_series(mdp, pi)
    rho_b = occupancy_by_power_series(mdp, beta)
    inf = lambda M: np.abs(M).sum(axis=1).max()
    pen = alpha * inf(Pi2 - Pi) ** 2 + (1 - alpha) * inf(Pi2 - Pi) * inf(Pi2 - Pib)
    return alpha * rho_pi @ adv + (1 - alpha) * rho_b @ adv - g / (1 - g) ** 2 * pen * np.abs(q).max()


def test_performance_difference_identity_example():
    mdp = one_state_two_action(0.9)
    pi, pi2 = PolicyTable.deterministic([0], 2), PolicyTable.deterministic([1], 2)
    gap, rhs = bounds.performance_difference(mdp, pi, pi2)
    assert gap == pytest.approx(10.0, abs=1e-12)
    assert rhs == pytest.approx(10.0, abs=1e-12)
    assert bounds.performance_difference(mdp, pi, pi) == (0.0, 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_performance_difference_random(seed):
    rng = philox(seed)
    mdp = random_mdp(rng, 6, 3, 0.95)
    gap, rhs = bounds.performance_difference(mdp, random_policy(rng, 6, 3), random_policy(rng, 6, 3))
    assert abs(gap - rhs) <= 1e-9


def test_inner_product_examples():
    lhs, rhs = bounds.centered_inner_product_bound([1, -1], [3, 1])
    assert (lhs, rhs) == (2.0, 2.0)
    assert bounds.centered_inner_product_bound(np.zeros(4), [1, 2, 3, 4]) == (0.0, 0.0)
    with pytest.raises(ValueError):
        bounds.centered_inner_product_bound([1, 1], [0, 0])


@settings(max_examples=500, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=50))
def test_inner_product_property(pairs):
    x = np.array([p[0] for p in pairs])
    x = x - x.mean()
    x[-1] = -x[:-1].sum()
    if abs(x.sum()) > 1e-10:
        return
    lhs, rhs = bounds.centered_inner_product_bound(x, [p[1] for p in pairs])
    assert lhs <= rhs + 1e-10 * max(1.0, rhs)


def test_state_dist_gap_trivial():
    rng = philox(1)
    mdp = random_mdp(rng, 5, 3, 0.9)
    pi, beta = random_policy(rng, 5, 3), random_policy(rng, 5, 3)
    assert bounds.state_dist_gap(mdp, pi, pi, pi, 0.3) == (0.0, 0.0, 0.0)
    assert bounds.state_dist_gap(mdp, pi, pi, beta, 1.0) == (0.0, 0.0, 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_state_dist_gap_chain(seed):
    rng = philox(100 + seed)
    mdp = random_mdp(rng, 6, 3, 0.9)
    pi, pi2, beta = (random_policy(rng, 6, 3) for _ in range(3))
    lhs, model, free = bounds.state_dist_gap(mdp, pi, pi2, beta, 0.5)
    oracle = np.abs(
        occupancy_by_power_series(mdp, pi2)
        - 0.5 * occupancy_by_power_series(mdp, pi)
        - 0.5 * occupancy_by_power_series(mdp, beta)
    ).sum()
    assert lhs == pytest.approx(oracle, abs=1e-9)
    assert lhs <= model + 1e-8
    assert model <= free + 1e-8


def test_bounds_zero_at_identity():
    rng = philox(2)
    mdp = random_mdp(rng, 4, 3, 0.99)
    pi = random_policy(rng, 4, 3)
    for alpha in (0.0, 0.5, 1.0):
        assert bounds.thm1_lower_bound(mdp, pi, pi, pi, alpha) == 0.0
        assert bounds.cor5_lower_bound(mdp, pi, pi, pi, alpha) == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_thm1_matches_explicit_matrix_oracle(seed):
    rng = philox(200 + seed)
    mdp = random_mdp(rng, 5, 3, 0.95)
    pi, pi2, beta = (random_policy(rng, 5, 3) for _ in range(3))
    alpha = float(rng.uniform())
    got = bounds.thm1_lower_bound(mdp, pi, pi2, beta, alpha)
    assert got == pytest.approx(thm1_oracle(mdp, pi, pi2, beta, alpha), rel=1e-9, abs=1e-9)


def test_beta_independent_at_alpha_one():
    rng = philox(3)
    mdp = random_mdp(rng, 5, 3, 0.9)
    pi, pi2 = random_policy(rng, 5, 3), random_policy(rng, 5, 3)
    t = {bounds.thm1_lower_bound(mdp, pi, pi2, random_policy(rng, 5, 3), 1.0) for _ in range(5)}
    c = {bounds.cor5_lower_bound(mdp, pi, pi2, random_policy(rng, 5, 3), 1.0) for _ in range(5)}
    assert len(t) == 1 and len(c) == 1


def test_alpha_zero_drops_on_policy_advantage():
    rng = philox(4)
    mdp = random_mdp(rng, 4, 2, 0.9)
    pi, pi2, beta = (random_policy(rng, 4, 2) for _ in range(3))
    s = bounds._Solved(mdp, pi, pi2, beta)
    assert s.advantage_terms(0.0) == float(s.vbeta.rho @ s.adv)


def test_cor5_infinite_kl_sentinel():
    mdp = random_mdp(philox(5), 3, 2, 0.9)
    pi = PolicyTable.uniform(3, 2)
    pi2 = PolicyTable([[0.5, 0.5], [0.5, 0.5], [0.0, 1.0]])  # drops an action beta uses
    beta = PolicyTable.uniform(3, 2)
    assert bounds.cor5_lower_bound(mdp, pi, pi2, beta, 0.5) == -math.inf
    report = bounds.bound_report(mdp, pi, pi2, beta, 0.5)
    assert report.verdicts["cor5"]
    assert json.loads(report.to_json())["cor5_lower"] == "-inf"


@pytest.mark.parametrize("seed", range(200))
def test_randomized_soundness(seed):
    report = bounds.bound_report(*bounds.random_tuple(bounds.tuple_rng(7, seed)))
    assert report.valid, report
    assert abs(report.true_gap - report.lemma1_rhs) <= 1e-8
    assert report.dist_gap_lhs <= report.dist_gap_model_rhs + 1e-8 <= report.dist_gap_free_rhs + 2e-8
    assert report.thm1_lower <= report.true_gap + 1e-8
    assert report.cor5_lower <= report.true_gap + 1e-8


def test_report_schema():
    report = bounds.bound_report(*bounds.random_tuple(bounds.tuple_rng(1, 0)))
    d = json.loads(report.to_json())
    assert set(d) == {
        "alpha", "true_gap", "lemma1_rhs", "dist_gap_lhs", "dist_gap_model_rhs", "dist_gap_free_rhs",
        "thm1_lower", "cor5_lower", "q_inf_norm", "verdicts",
    }


def test_certify_tuple_raises_with_dump(monkeypatch):
    tup = bounds.random_tuple(bounds.tuple_rng(1, 0))
    monkeypatch.setattr(bounds, "_thm1", lambda s, a: 1e6)
    with pytest.raises(bounds.BoundViolation) as info:
        bounds.certify_tuple(*tup)
    dump = json.loads(info.value.dump)
    assert set(dump) == {"mdp", "pi", "pi_prime", "beta", "alpha"}


def test_alpha_validation():
    tup = bounds.random_tuple(bounds.tuple_rng(1, 0))
    with pytest.raises(ValueError):
        bounds.thm1_lower_bound(*tup[:4], 1.2)


def test_tuple_streams_are_reproducible():
    a = bounds.random_tuple(bounds.tuple_rng(9, 3))
    b = bounds.random_tuple(bounds.tuple_rng(9, 3))
    assert a[0].to_json() == b[0].to_json() and a[4] == b[4]
    c = bounds.random_tuple(bounds.tuple_rng(9, 4))
    assert a[0].to_json() != c[0].to_json()
