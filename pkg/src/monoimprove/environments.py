"""Benchmark tabular MDPs and a seeded trajectory sampler.

All randomness goes through numpy's Philox counter-based generator, seeded
from a SeedSequence, so trajectories are reproducible across platforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from .mdp import Mdp, PolicyTable

ENV_KINDS = ("chain", "gridworld", "random")

CHAIN_DEFAULTS = {"length": 5, "slip": 0.0, "small_reward": 0.1, "big_reward": 1.0}
GRID_DEFAULTS = {"width": 4, "height": 4, "goal": None, "step_penalty": 0.0, "goal_reward": 1.0, "slip": 0.0,
                 "start": "corner"}
RANDOM_DEFAULTS = {"n_states": 5, "n_actions": 3, "concentration": 1.0}

# gridworld action order
MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0))  # up, down, left, right as (dx, dy)


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class EnvSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    gamma: float = 0.99

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ValueError(f"unknown environment kind {self.kind!r}; expected one of {ENV_KINDS}")

    def resolved_params(self) -> dict:
        defaults = {"chain": CHAIN_DEFAULTS, "gridworld": GRID_DEFAULTS, "random": RANDOM_DEFAULTS}[self.kind]
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ValueError(f"unknown {self.kind} parameters: {sorted(unknown)}")
        return {**defaults, **self.params}


def chain(length: int, slip: float, small_reward: float, big_reward: float, gamma: float) -> Mdp:
    """Walk on a line; action 0 moves left, 1 moves right, reversed with prob. ``slip``.

    Pushing against the left wall pays ``small_reward``, against the right wall
    ``big_reward``.  The agent starts at the left end.
    """
    if length < 2:
        raise ValueError("chain length must be at least 2")
    if not 0.0 <= slip <= 1.0:
        raise ValueError("slip must lie in [0, 1]")
    P = np.zeros((length, 2, length))
    for s in range(length):
        left, right = max(s - 1, 0), min(s + 1, length - 1)
        P[s, 0, left] += 1.0 - slip
        P[s, 0, right] += slip
        P[s, 1, right] += 1.0 - slip
        P[s, 1, left] += slip
    R = np.zeros((length, 2))
    R[0, 0] = small_reward
    R[length - 1, 1] = big_reward
    rho0 = np.zeros(length)
    rho0[0] = 1.0
    return Mdp(P, R, rho0, gamma)


def gridworld(width: int, height: int, goal, step_penalty: float, goal_reward: float,
              slip: float, gamma: float, start: str = "corner") -> Mdp:
    """Grid navigation; the goal cell is absorbing with zero reward once entered.

    Episodes start at (0, 0) (``start="corner"``) or uniformly over non-goal
    cells (``start="uniform"``).  With probability ``slip`` the move goes in a uniformly random direction.
    Moves into walls leave the agent in place.  State index is y * width + x.
    """
    if width < 1 or height < 1:
        raise ValueError("grid dimensions must be positive")
    goal = (width - 1, height - 1) if goal is None else tuple(goal)
    gx, gy = goal
    if not (0 <= gx < width and 0 <= gy < height):
        raise ValueError(f"goal {goal} lies outside the {width}x{height} grid")
    if goal == (0, 0):
        raise ValueError("goal cannot coincide with the start cell")
    if not 0.0 <= slip <= 1.0:
        raise ValueError("slip must lie in [0, 1]")

    n = width * height
    g = gy * width + gx
    P = np.zeros((n, 4, n))
    R = np.zeros((n, 4))
    for s in range(n):
        if s == g:
            P[s, :, s] = 1.0
            continue
        x, y = s % width, s // width
        dest = []
        for dx, dy in MOVES:
            nx, ny = x + dx, y + dy
            dest.append(ny * width + nx if 0 <= nx < width and 0 <= ny < height else s)
        for a in range(4):
            P[s, a, dest[a]] += 1.0 - slip
            for d in dest:
                P[s, a, d] += slip / 4
        R[s] = step_penalty + goal_reward * P[s, :, g]
    if start == "corner":
        rho0 = np.zeros(n)
        rho0[0] = 1.0
    elif start == "uniform":
        rho0 = np.ones(n)
        rho0[g] = 0.0
        rho0 /= rho0.sum()
    else:
        raise ValueError(f"start must be 'corner' or 'uniform', got {start!r}")
    return Mdp(P, R, rho0, gamma)


def random_env(n_states: int, n_actions: int, concentration: float, gamma: float, rng) -> Mdp:
    if n_states < 1 or n_actions < 1 or concentration <= 0:
        raise ValueError("random MDP needs positive sizes and concentration")
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    R = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    rho0 = rng.dirichlet(np.ones(n_states))
    return Mdp(P, R, rho0, gamma)


def build(spec: EnvSpec) -> Mdp:
    p = spec.resolved_params()
    if spec.kind == "chain":
        return chain(int(p["length"]), float(p["slip"]), float(p["small_reward"]),
                     float(p["big_reward"]), spec.gamma)
    if spec.kind == "gridworld":
        return gridworld(int(p["width"]), int(p["height"]), p["goal"], float(p["step_penalty"]),
                         float(p["goal_reward"]), float(p["slip"]), spec.gamma, str(p["start"]))
    return random_env(int(p["n_states"]), int(p["n_actions"]), float(p["concentration"]),
                      spec.gamma, make_rng(spec.seed))


# ---------------------------------------------------------------------------
# trajectories

class Transition(NamedTuple):
    state: int
    action: int
    reward: float
    next_state: int
    done: bool
    behavior_prob: float


TRANSITION_FIELDS = Transition._fields


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Column storage of a fixed-length segment; iterating yields Transition rows."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    behavior_probs: np.ndarray

    def __post_init__(self):
        for name in ("states", "actions", "rewards", "next_states", "dones", "behavior_probs"):
            getattr(self, name).setflags(write=False)
        bp = self.behavior_probs
        if np.any(bp <= 0) or np.any(bp > 1):
            raise ValueError("behavior_prob must lie in (0, 1]")

    def __len__(self) -> int:
        return self.states.size

    def __getitem__(self, t: int) -> Transition:
        return Transition(int(self.states[t]), int(self.actions[t]), float(self.rewards[t]),
                          int(self.next_states[t]), bool(self.dones[t]), float(self.behavior_probs[t]))

    def __iter__(self) -> Iterator[Transition]:
        return (self[t] for t in range(len(self)))

    @classmethod
    def from_transitions(cls, rows) -> Trajectory:
        rows = [Transition(*r) for r in rows]
        if not rows:
            raise ValueError("empty trajectory")
        cols = list(zip(*rows))
        return cls(
            np.array(cols[0], dtype=np.int64), np.array(cols[1], dtype=np.int64),
            np.array(cols[2], dtype=float), np.array(cols[3], dtype=np.int64),
            np.array(cols[4], dtype=bool), np.array(cols[5], dtype=float),
        )

    def to_jsonl(self) -> str:
        """One JSON object per line, keys in Transition field order."""
        return "".join(json.dumps(t._asdict()) + "\n" for t in self)

    @classmethod
    def from_jsonl(cls, text: str) -> Trajectory:
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        return cls.from_transitions([tuple(r[k] for k in TRANSITION_FIELDS) for r in rows])

    def episode_returns(self) -> list[float]:
        """Undiscounted returns of episodes that finished inside the segment."""
        out, acc = [], 0.0
        for r, d in zip(self.rewards.tolist(), self.dones.tolist()):
            acc += r
            if d:
                out.append(acc)
                acc = 0.0
        return out


def _sample(cum: np.ndarray, u: float) -> int:
    i = int(np.searchsorted(cum, u, side="right"))
    return min(i, cum.size - 1)


def rollout(mdp: Mdp, policy: PolicyTable, horizon: int, rng_seed, start_state: int | None = None) -> Trajectory:
    """Sample ``horizon`` consecutive transitions.

    Entering an absorbing zero-reward state ends the episode (done=True) and the
    next transition restarts from rho0.  Continuing tasks are simply truncated.
    """
    policy.check_compatible(mdp)
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    rng = make_rng(rng_seed)
    P_cum = np.cumsum(mdp.transition, axis=2)
    pi_cum = np.cumsum(policy.probs, axis=1)
    mu_cum = np.cumsum(mdp.rho0)
    terminal = mdp.terminal_states()
    probs = policy.probs
    R = mdp.reward

    u = rng.random((horizon, 3))
    states = np.empty(horizon, dtype=np.int64)
    actions = np.empty(horizon, dtype=np.int64)
    nexts = np.empty(horizon, dtype=np.int64)
    dones = np.zeros(horizon, dtype=bool)
    bprob = np.empty(horizon)
    rewards = np.empty(horizon)

    s = _sample(mu_cum, u[0, 0]) if start_state is None else int(start_state)
    for t in range(horizon):
        a = _sample(pi_cum[s], u[t, 1])
        # zero-probability actions can't be drawn except through cumsum rounding
        while probs[s, a] <= 0.0:
            a -= 1
        s2 = _sample(P_cum[s, a], u[t, 2])
        states[t], actions[t], nexts[t] = s, a, s2
        bprob[t] = probs[s, a]
        rewards[t] = R[s, a]
        if terminal[s2] or terminal[s]:
            dones[t] = True
            s = _sample(mu_cum, u[t + 1, 0]) if t + 1 < horizon else s2
        else:
            s = s2
    return Trajectory(states, actions, rewards, nexts, dones, bprob)


def discounted_episode_returns(mdp: Mdp, policy: PolicyTable, n_episodes: int, rng_seed,
                               tol: float = 1e-10) -> np.ndarray:
    """Monte-Carlo discounted returns, each episode cut once gamma^t drops below ``tol``.

    Episodes run in lock-step as a vectorized batch.
    """
    policy.check_compatible(mdp)
    rng = make_rng(rng_seed)
    n_s, n_a = mdp.n_states, mdp.n_actions
    P_cum = np.cumsum(mdp.transition, axis=2).reshape(n_s * n_a, n_s)
    pi_cum = np.cumsum(policy.probs, axis=1)
    length = int(np.ceil(np.log(tol) / np.log(mdp.gamma)))

    def draw(cum_rows, u):
        idx = (cum_rows <= u[:, None]).sum(axis=1)
        return np.minimum(idx, cum_rows.shape[1] - 1)

    s = draw(np.broadcast_to(np.cumsum(mdp.rho0), (n_episodes, n_s)), rng.random(n_episodes))
    total = np.zeros(n_episodes)
    disc = 1.0
    for _ in range(length):
        a = draw(pi_cum[s], rng.random(n_episodes))
        total += disc * mdp.reward[s, a]
        s = draw(P_cum[s * n_a + a], rng.random(n_episodes))
        disc *= mdp.gamma
    return total
