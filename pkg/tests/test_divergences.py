import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monoimprove import divergences as dv
from monoimprove.mdp import PolicyTable

from conftest import philox, random_policy


def policies(n_states=3, n_actions=3):
    row = st.lists(st.floats(0.01, 1.0), min_size=n_actions, max_size=n_actions)
    return st.lists(row, min_size=n_states, max_size=n_states).map(
        lambda rows: PolicyTable(np.array(rows) / np.array(rows).sum(axis=1, keepdims=True))
    )


def test_tv_identical_is_zero():
    pi = random_policy(philox(1), 4, 3)
    assert dv.tv_max(pi, pi) == 0.0


def test_tv_disjoint_point_masses():
    a = PolicyTable.deterministic([0, 1, 2], 3)
    b = PolicyTable.deterministic([0, 2, 2], 3)
    assert dv.tv_max(a, b) == 2.0


def test_tv_brute_force():
    rng = philox(2)
    p, q = random_policy(rng, 5, 4), random_policy(rng, 5, 4)
    oracle = 0.0
    for s in range(5):
        row = 0.0
        for a in range(4):
            row += abs(p.probs[s, a] - q.probs[s, a])
        oracle = max(oracle, row)
    assert dv.tv_max(p, q) == pytest.approx(oracle, abs=1e-15)


def test_kl_examples():
    pi = PolicyTable.uniform(3, 2)
    assert dv.kl_max(pi, pi) == 0.0
    skew = PolicyTable(np.tile([0.75, 0.25], (3, 1)))
    expected = 0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)
    assert expected == pytest.approx(0.14384, abs=1e-5)
    assert dv.kl_max(pi, skew) == pytest.approx(expected, abs=1e-6)


def test_kl_infinite_on_support_failure():
    det = PolicyTable.deterministic([0, 0], 2)
    other = PolicyTable([[0.0, 1.0], [0.5, 0.5]])
    assert dv.kl_max(det, other) == math.inf
    # zero mass in the reference contributes nothing
    assert dv.kl_max(other, PolicyTable.uniform(2, 2)) < math.inf


def test_kl_zero_iff_equal_rows():
    rng = philox(3)
    p = random_policy(rng, 4, 3)
    assert dv.kl_max(p, p) == 0.0
    q = PolicyTable(np.vstack([p.probs[:3], random_policy(rng, 1, 3).probs]))
    assert dv.kl_max(p, q) > 0.0


def test_expected_kl_examples():
    rng = philox(4)
    p, q = random_policy(rng, 3, 3), random_policy(rng, 3, 3)
    assert dv.expected_kl(p, p, [1, 2, 3]) == 0.0
    per_state = [sum(p.probs[s, a] * math.log(p.probs[s, a] / q.probs[s, a]) for a in range(3)) for s in range(3)]
    assert dv.expected_kl(p, q, [0, 1, 0]) == pytest.approx(per_state[1], abs=1e-12)
    assert dv.expected_kl(p, q, [5, 5, 5]) == pytest.approx(sum(per_state) / 3, abs=1e-12)


def test_expected_kl_errors():
    p = PolicyTable.uniform(3, 2)
    with pytest.raises(ValueError):
        dv.expected_kl(p, p, [0, 0, 0])
    with pytest.raises(ValueError):
        dv.expected_kl(p, p, [1, -1, 1])
    with pytest.raises(ValueError):
        dv.expected_kl(p, PolicyTable.uniform(2, 2), [1, 1, 1])


def test_mixture_metric():
    rng = philox(5)
    pi, pi2, beta = (random_policy(rng, 4, 3) for _ in range(3))
    rho_pi, rho_beta = rng.uniform(0.1, 2, 4), rng.uniform(0.1, 2, 4)
    assert dv.mixture_kl_metric(pi, pi2, beta, rho_pi, rho_beta, 1.0) == dv.expected_kl(pi, pi2, rho_pi)
    for alpha in (0.0, 0.3, 1.0):
        assert dv.mixture_kl_metric(pi, pi, pi, rho_pi, rho_beta, alpha) == 0.0
    on = dv.expected_kl(pi, pi2, rho_pi)
    off = dv.expected_kl(beta, pi2, rho_beta)
    assert dv.mixture_kl_metric(pi, pi2, beta, rho_pi, rho_beta, 0.0) == pytest.approx(math.sqrt(on * off), rel=1e-12)
    with pytest.raises(ValueError):
        dv.mixture_kl_metric(pi, pi2, beta, rho_pi, rho_beta, 1.5)


def test_profile_serializes_infinities():
    det = PolicyTable.deterministic([0, 1], 2)
    prof = dv.divergence_profile(det, PolicyTable([[0.0, 1.0], [0.5, 0.5]]))
    d = prof.to_dict()
    assert d["kl_max"] == "inf"
    assert d["kl_per_state"][0] == "inf"
    assert d["tv_max"] == 2.0


@settings(max_examples=200, deadline=None)
@given(policies(), policies())
def test_tv_symmetric_and_in_range(p, q):
    assert dv.tv_max(p, q) == dv.tv_max(q, p)
    tv = dv.tv_per_state(p, q)
    assert np.all(tv >= 0) and np.all(tv <= 2)


@settings(max_examples=200, deadline=None)
@given(policies(), policies(), policies())
def test_tv_triangle(p, q, r):
    assert np.all(dv.tv_per_state(p, r) <= dv.tv_per_state(p, q) + dv.tv_per_state(q, r) + 1e-12)


@settings(max_examples=300, deadline=None)
@given(policies(4, 4), policies(4, 4))
def test_pinsker(p, q):
    tv = dv.tv_per_state(p, q)
    kl = dv.kl_per_state(p, q)
    assert np.all(kl >= 0)
    # half-sum convention as stated for the profile, and the full-sum form the bounds rely on
    assert np.all((tv / 2) ** 2 / 2 <= kl + 1e-15)
    assert np.all(tv**2 <= 2 * kl + 1e-12)
    assert dv.tv_max(p, q) ** 2 <= 2 * dv.kl_max(p, q) + 1e-12
