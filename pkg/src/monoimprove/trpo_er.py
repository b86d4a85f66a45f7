"""Trust-region policy optimization with experience replay, tabular edition.

Each epoch:
    1. roll out the current softmax policy for a fixed-length segment,
    2. append the segment to a FIFO replay buffer,
    3. draw past segments from the buffer as off-policy data,
    4. maximize the alpha-mixed importance-weighted surrogate subject to the
       on-policy mean-KL trust region, via conjugate gradient + backtracking.

With alpha = 1 no replay data is touched and the update is plain TRPO.
When the MDP is known, every update can be audited against the exact
KL-penalized lower bound.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import deque
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import bounds
from .environments import Trajectory, make_rng, rollout
from .mdp import Mdp, PolicyTable, solve_values



class NonFiniteGradient(FloatingPointError):
    pass


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class SoftmaxPolicy:
    logits: np.ndarray

    def __post_init__(self):
        arr = np.array(self.logits, dtype=float, copy=True)
        if arr.ndim != 2 or not np.all(np.isfinite(arr)):
            raise ValueError("logits must be a finite (S, A) matrix")
        arr.setflags(write=False)
        object.__setattr__(self, "logits", arr)

    @classmethod
    def zeros(cls, n_states: int, n_actions: int) -> SoftmaxPolicy:
        return cls(np.zeros((n_states, n_actions)))

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    def table(self) -> PolicyTable:
        return PolicyTable(self.probs)


# ---------------------------------------------------------------------------
# replay

@dataclass(frozen=True, eq=False)
class StoredTrajectory:
    trajectory: Trajectory
    policy_probs: np.ndarray  # snapshot of the generating policy


class ReplayBuffer:
    """FIFO store of whole trajectories with their generating-policy snapshots."""

    def __init__(self, capacity: int = 100):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque[StoredTrajectory] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> StoredTrajectory:
        return self._items[i]

    def append(self, traj: Trajectory, policy_probs) -> None:
        probs = np.array(policy_probs, dtype=float, copy=True)
        probs.setflags(write=False)
        self._items.append(StoredTrajectory(traj, probs))

    def draw(self, count: int, rng: np.random.Generator) -> list[StoredTrajectory]:
        """Uniform sample without replacement; fewer than ``count`` if the buffer is short."""
        k = min(count, len(self._items))
        if k == 0:
            return []
        idx = rng.choice(len(self._items), size=k, replace=False)
        return [self._items[i] for i in idx]

    def dump(self) -> str:
        lines = []
        for item in self._items:
            t = item.trajectory
            lines.append(json.dumps({
                "policy": item.policy_probs.tolist(),
                "transitions": [list(tr) for tr in t],
            }))
        return "".join(line + "\n" for line in lines)

    @classmethod
    def restore(cls, text: str, capacity: int = 100) -> ReplayBuffer:
        buf = cls(capacity)
        for line in text.splitlines():
            if line.strip():
                d = json.loads(line)
                buf.append(Trajectory.from_transitions(d["transitions"]), d["policy"])
        return buf


# ---------------------------------------------------------------------------
# advantages and value fit

def gae_advantages(traj: Trajectory, v_hat, gamma: float, lam: float) -> np.ndarray:
    """Generalized advantage estimates, cut at episode ends and at the segment end.

    delta_t = r_t + gamma * v(s_{t+1}) * (1 - done_t) - v(s_t)
    A_t     = delta_t + gamma * lam * (1 - done_t) * A_{t+1}
    """
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    v = np.asarray(v_hat, dtype=float)
    notdone = 1.0 - traj.dones.astype(float)
    deltas = traj.rewards + gamma * v[traj.next_states] * notdone - v[traj.states]
    decay = (gamma * lam * notdone).tolist()
    d = deltas.tolist()
    out = [0.0] * len(d)
    acc = 0.0
    for t in range(len(d) - 1, -1, -1):
        acc = d[t] + decay[t] * acc
        out[t] = acc
    return np.array(out)


def lambda_returns(traj: Trajectory, v_hat, gamma: float, lam: float) -> np.ndarray:
    return gae_advantages(traj, v_hat, gamma, lam) + np.asarray(v_hat, dtype=float)[traj.states]


def fit_values(v_hat: np.ndarray, states: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-state mean of the targets; unvisited states keep their old estimate."""
    n = v_hat.size
    counts = np.bincount(states, minlength=n)
    sums = np.bincount(states, weights=targets, minlength=n)
    out = np.array(v_hat, dtype=float, copy=True)
    seen = counts > 0
    out[seen] = sums[seen] / counts[seen]
    return out


# ---------------------------------------------------------------------------
# surrogate

@dataclass(frozen=True, eq=False)
class SampleBatch:
    """Flat (state, action, generating prob, advantage) samples."""

    states: np.ndarray
    actions: np.ndarray
    probs_old: np.ndarray
    advantages: np.ndarray

    def __len__(self) -> int:
        return self.states.size

    @classmethod
    def empty(cls) -> SampleBatch:
        z = np.zeros(0)
        return cls(z.astype(np.int64), z.astype(np.int64), z, z)

    @classmethod
    def concat(cls, parts: list[SampleBatch]) -> SampleBatch:
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(cls)))


def _check_batches(on_batch, off_batch, alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha > 0.0 and len(on_batch) == 0:
        raise ValueError("on-policy batch is empty")
    if alpha < 1.0 and len(off_batch) == 0:
        raise ValueError("off-policy batch is empty but alpha < 1")
    for b in (on_batch, off_batch):
        if len(b) and np.any(b.probs_old <= 0):
            raise ValueError("stored behavior probability <= 0; replay data is corrupt")


def _terms(alpha, on_batch, off_batch):
    if alpha == 1.0:
        return [(1.0, on_batch)]
    if alpha == 0.0:
        return [(1.0, off_batch)]
    return [(alpha, on_batch), (1.0 - alpha, off_batch)]


def surrogate_loss(theta_prime: np.ndarray, on_batch: SampleBatch, off_batch: SampleBatch, alpha: float) -> float:
    """alpha * mean_on[(pi'/pi) A] + (1 - alpha) * mean_off[(pi'/beta) A]"""
    _check_batches(on_batch, off_batch, alpha)
    probs = softmax(np.asarray(theta_prime, dtype=float))
    total = 0.0
    for c, b in _terms(alpha, on_batch, off_batch):
        ratio = probs[b.states, b.actions] / b.probs_old
        total += c * float(np.mean(ratio * b.advantages))
    return total


def surrogate_gradient(theta_prime: np.ndarray, on_batch, off_batch, alpha: float) -> np.ndarray:
    _check_batches(on_batch, off_batch, alpha)
    probs = softmax(np.asarray(theta_prime, dtype=float))
    grad = np.zeros_like(probs)
    for c, b in _terms(alpha, on_batch, off_batch):
        p_taken = probs[b.states, b.actions]
        coef = c * b.advantages * p_taken / b.probs_old / len(b)
        # d pi(a|s) / d theta[s, :] = pi(a|s) * (onehot(a) - pi(.|s))
        np.add.at(grad, (b.states, b.actions), coef)
        np.add.at(grad, b.states, -coef[:, None] * probs[b.states])
    return grad


def state_weights(states: np.ndarray, n_states: int) -> np.ndarray:
    return np.bincount(states, minlength=n_states) / states.size


def mean_kl(theta: np.ndarray, theta_prime: np.ndarray, weights: np.ndarray) -> float:
    """sum_s w(s) KL(softmax(theta[s]) || softmax(theta'[s]))"""
    p = softmax(theta)
    logp = theta - theta.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    logq = theta_prime - theta_prime.max(axis=1, keepdims=True)
    logq = logq - np.log(np.exp(logq).sum(axis=1, keepdims=True))
    kl = np.sum(p * (logp - logq), axis=1)
    return float(np.dot(weights, np.maximum(kl, 0.0)))


def fisher_vector_product(theta: np.ndarray, weights: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Hessian of mean_kl(theta, .) at theta' = theta: blocks w(s) (diag(p) - p p^T)."""
    p = softmax(theta)
    w = np.asarray(weights)[:, None]

    def fvp(v: np.ndarray) -> np.ndarray:
        v = v.reshape(p.shape)
        return w * (p * v - p * np.sum(p * v, axis=1, keepdims=True))

    return fvp


# ---------------------------------------------------------------------------
# natural-gradient step

def conjugate_gradient(Avp: Callable, b: np.ndarray, iters: int = 10, tol: float = 1e-10) -> np.ndarray:
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rr = float(np.vdot(r, r))
    for _ in range(iters):
        if rr < tol:
            break
        Ap = Avp(p)
        alpha = rr / float(np.vdot(p, Ap))
        x += alpha * p
        r -= alpha * Ap
        rr_new = float(np.vdot(r, r))
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


@dataclass
class StepInfo:
    accepted: bool = False
    backtracks: int = 0
    kl: float = 0.0
    improvement: float = 0.0


def natural_step(theta: np.ndarray, loss_gradient: np.ndarray, kl_hessian_vector_product: Callable,
                 delta: float, surrogate: Optional[Callable] = None, kl: Optional[Callable] = None,
                 cg_iters: int = 10, damping: float = 0.0, backtrack: float = 0.5,
                 max_backtracks: int = 10, info: Optional[StepInfo] = None) -> np.ndarray:
    """Trust-region natural-gradient ascent step.

    Solves (F + damping I) x = g by conjugate gradient, scales x to the KL
    ellipsoid x^T F x = 2 delta, then backtracks until ``kl(theta') <= delta``
    and ``surrogate(theta') >= surrogate(theta)``.  Without the two callables the
    full scaled step is returned unchecked.  On exhaustion theta is returned.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    theta = np.asarray(theta, dtype=float)
    g = np.asarray(loss_gradient, dtype=float)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("surrogate gradient has non-finite entries")
    info = info if info is not None else StepInfo()
    if not np.any(g):
        return theta.copy()

    def Fv(v):
        return kl_hessian_vector_product(v) + damping * v

    x = conjugate_gradient(Fv, g, iters=cg_iters)
    xFx = float(np.vdot(x, Fv(x)))
    if not xFx > 0 or not math.isfinite(xFx):
        return theta.copy()
    full = math.sqrt(2.0 * delta / xFx) * x

    if surrogate is None or kl is None:
        info.accepted = True
        return theta + full

    base = surrogate(theta)
    frac = 1.0
    for n in range(max_backtracks):
        cand = theta + frac * full
        d_kl = kl(cand)
        gain = surrogate(cand) - base
        if math.isfinite(d_kl) and d_kl <= delta and gain >= 0.0:
            info.accepted, info.backtracks, info.kl, info.improvement = True, n, d_kl, gain
            return cand
        frac *= backtrack
    info.backtracks = max_backtracks
    return theta.copy()


# ---------------------------------------------------------------------------
# training loop

@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    gamma: float = 0.99
    lam: float = 0.98
    delta: float = 0.01
    traj_len: int = 1000
    buffer_cap: int = 100
    draw_count: int = 10
    cg_iters: int = 10
    cg_damping: float = 1e-2
    backtrack: float = 0.5
    max_backtracks: int = 10
    normalize_advantages: bool = True
    audit: bool = False


@dataclass
class TrainerState:
    mdp: Mdp
    policy: SoftmaxPolicy
    v_hat: np.ndarray
    buffer: ReplayBuffer
    rollout_rng: np.random.Generator
    replay_rng: np.random.Generator
    epoch: int = 0

    @classmethod
    def initial(cls, mdp: Mdp, config: TrainConfig, seed) -> TrainerState:
        """``seed`` is an int or a SeedSequence; rollout and replay get separate streams."""
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
        roll_ss, replay_ss = ss.spawn(2)
        return cls(
            mdp=mdp,
            policy=SoftmaxPolicy.zeros(mdp.n_states, mdp.n_actions),
            v_hat=np.zeros(mdp.n_states),
            buffer=ReplayBuffer(config.buffer_cap),
            rollout_rng=make_rng(roll_ss),
            replay_rng=make_rng(replay_ss),
        )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_return: float
    eta_exact: Optional[float]
    surrogate_before: float
    surrogate_after: float
    kl: float
    alpha: float
    bound_audit: Optional[float]
    accepted: bool = False
    audit_ok: Optional[bool] = None


EPOCH_COLUMNS = ("epoch", "mean_return", "eta_exact", "surrogate_before", "surrogate_after",
                 "kl", "alpha", "bound_audit")


def _normalize(adv: np.ndarray) -> np.ndarray:
    if adv.size < 2:
        return adv - adv.mean()
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def _batch(trajs: list[Trajectory], v_hat, config: TrainConfig) -> SampleBatch:
    parts = []
    for t in trajs:
        adv = gae_advantages(t, v_hat, config.gamma, config.lam)
        parts.append(SampleBatch(t.states, t.actions, t.behavior_probs, adv))
    b = SampleBatch.concat(parts)
    if config.normalize_advantages and len(b):
        b = SampleBatch(b.states, b.actions, b.probs_old, _normalize(b.advantages))
    return b


def replay_behavior(mdp: Mdp, drawn: list[StoredTrajectory]) -> PolicyTable:
    """Single policy matching the state-action mix of the drawn snapshots.

    beta(a|s) = sum_j rho_j(s) beta_j(a|s) / sum_j rho_j(s); any beta keeps the
    exact bound valid, this one describes the replayed data best.
    """
    num = np.zeros((mdp.n_states, mdp.n_actions))
    den = np.zeros(mdp.n_states)
    for item in drawn:
        pt = PolicyTable(item.policy_probs)
        rho = solve_values(mdp, pt).rho
        num += rho[:, None] * pt.probs
        den += rho
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(den[:, None] > 0, num / den[:, None], 1.0 / mdp.n_actions)
    return PolicyTable(probs / probs.sum(axis=1, keepdims=True))


def train_epoch(state: TrainerState, config: TrainConfig) -> EpochRecord:
    mdp = state.mdp
    theta = state.policy.logits
    pi_old = state.policy.table()

    traj = rollout(mdp, pi_old, config.traj_len, state.rollout_rng)
    state.buffer.append(traj, pi_old.probs)
    drawn = state.buffer.draw(config.draw_count, state.replay_rng) if config.alpha < 1.0 else []

    on_batch = _batch([traj], state.v_hat, config)
    off_batch = _batch([d.trajectory for d in drawn], state.v_hat, config)

    weights = state_weights(traj.states, mdp.n_states)

    def surr(th):
        return surrogate_loss(th, on_batch, off_batch, config.alpha)

    def kl(th):
        return mean_kl(theta, th, weights)

    before = surr(theta)
    grad = surrogate_gradient(theta, on_batch, off_batch, config.alpha)
    info = StepInfo()
    new_theta = natural_step(
        theta, grad, fisher_vector_product(theta, weights), config.delta,
        surrogate=surr, kl=kl, cg_iters=config.cg_iters, damping=config.cg_damping,
        backtrack=config.backtrack, max_backtracks=config.max_backtracks, info=info,
    )
    after = surr(new_theta)
    step_kl = kl(new_theta)
    state.policy = SoftmaxPolicy(new_theta)
    pi_new = state.policy.table()

    targets = lambda_returns(traj, state.v_hat, config.gamma, config.lam)
    state.v_hat = fit_values(state.v_hat, traj.states, targets)

    returns = traj.episode_returns()
    mean_return = float(np.mean(returns)) if returns else float(traj.rewards.sum())

    eta_new = solve_values(mdp, pi_new).eta
    audit_value, audit_ok = None, None
    if config.audit:
        beta = replay_behavior(mdp, drawn) if drawn else pi_old
        report = bounds.bound_report(mdp, pi_old, pi_new, beta, config.alpha)
        audit_value = report.cor5_lower
        audit_ok = bool(report.verdicts["cor5"] and report.verdicts["thm1"])
        if audit_value >= 0.0 and report.true_gap < -bounds.CERT_TOL:
            audit_ok = False

    record = EpochRecord(
        epoch=state.epoch, mean_return=mean_return, eta_exact=eta_new,
        surrogate_before=before, surrogate_after=after, kl=step_kl, alpha=config.alpha,
        bound_audit=audit_value, accepted=info.accepted, audit_ok=audit_ok,
    )
    state.epoch += 1
    return record


def train(mdp: Mdp, config: TrainConfig, epochs: int, seed) -> list[EpochRecord]:
    state = TrainerState.initial(mdp, config, seed)
    return [train_epoch(state, config) for _ in range(epochs)]


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def records_to_csv(records: list[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPOCH_COLUMNS)
    for r in records:
        w.writerow([r.epoch, _fmt(r.mean_return), _fmt(r.eta_exact), _fmt(r.surrogate_before),
                    _fmt(r.surrogate_after), _fmt(r.kl), _fmt(r.alpha), _fmt(r.bound_audit)])
    return buf.getvalue()
