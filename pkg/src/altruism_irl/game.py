"""Rewardless Markov games, entropy-regularised evaluation and QRE solving.

Joint actions are flattened lexicographically over ``A**n`` with seat 0 the
slowest-varying axis.  Transitions are stored either as a dense array of shape
``(S, A**n, S)`` or as a sparse matrix of shape ``(S * A**n, S)`` (used by the
deterministic kitchen environments).

Policies are plain arrays of shape ``(n, S, A)``; reward tables are arrays of
shape ``(n, S, A**n)``.
"""

from __future__ import annotations

import json
import logging
import string
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import logsumexp, softmax

logger = logging.getLogger(__name__)

DENSE_SOLVE_LIMIT = 2048


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver exceeds its iteration budget."""


@dataclass
class RewardlessGame:
    num_states: int
    num_actions: int
    num_players: int
    transition: object
    discount: float
    initial_dist: np.ndarray
    # seat_views[j, s]: the state as seen by the occupant of seat j, so that an
    # agent's intrinsic table r is read as r[seat_views[j]] in seat j
    seat_views: Optional[np.ndarray] = None

    def __post_init__(self):
        S, A, n = self.num_states, self.num_actions, self.num_players
        if min(S, A, n) < 1:
            raise ValueError("num_states, num_actions and num_players must be positive")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)
        if self.initial_dist.shape != (S,):
            raise ValueError("initial_dist has the wrong shape")
        if np.any(self.initial_dist < 0) or abs(self.initial_dist.sum() - 1.0) > 1e-12:
            raise ValueError("initial_dist must be a probability vector")
        J = A**n
        if sp.issparse(self.transition):
            self.transition = sp.csr_matrix(self.transition, dtype=float)
            if self.transition.shape != (S * J, S):
                raise ValueError(f"sparse transition must have shape {(S * J, S)}")
            rows = np.asarray(self.transition.sum(axis=1)).ravel()
            if self.transition.nnz and self.transition.data.min() < 0:
                raise ValueError("negative transition probability")
        else:
            self.transition = np.asarray(self.transition, dtype=float)
            if self.transition.shape != (S, J, S):
                raise ValueError(f"transition must have shape {(S, J, S)}")
            if np.any(self.transition < 0):
                raise ValueError("negative transition probability")
            rows = self.transition.sum(axis=-1)
        if np.max(np.abs(rows - 1.0)) > 1e-12:
            raise ValueError("transition rows must sum to 1")
        if self.seat_views is None:
            self.seat_views = np.tile(np.arange(S), (n, 1))
        self.seat_views = np.asarray(self.seat_views, dtype=np.int64)
        if self.seat_views.shape != (n, S):
            raise ValueError("seat_views must have shape (num_players, num_states)")
        for view in self.seat_views:
            if not np.array_equal(np.sort(view), np.arange(S)):
                raise ValueError("each seat view must be a permutation of the states")

    @property
    def has_seat_views(self) -> bool:
        return not np.array_equal(self.seat_views, np.tile(np.arange(self.num_states), (self.num_players, 1)))

    @property
    def num_joint_actions(self) -> int:
        return self.num_actions**self.num_players

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.transition)

    def joint_shape(self) -> tuple:
        return (self.num_actions,) * self.num_players

    def dense_transition(self) -> np.ndarray:
        if self.is_sparse:
            return self.transition.toarray().reshape(
                self.num_states, self.num_joint_actions, self.num_states
            )
        return self.transition

    def to_json(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "num_players": self.num_players,
            "discount": self.discount,
            "initial_dist": self.initial_dist.tolist(),
            "transition": self.dense_transition().tolist(),
            "seat_views": self.seat_views.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RewardlessGame":
        return cls(
            num_states=int(doc["num_states"]),
            num_actions=int(doc["num_actions"]),
            num_players=int(doc["num_players"]),
            transition=np.asarray(doc["transition"], dtype=float),
            discount=float(doc["discount"]),
            initial_dist=np.asarray(doc["initial_dist"], dtype=float),
            seat_views=doc.get("seat_views"),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "RewardlessGame":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass
class ValueBundle:
    """Per-seat regularised values of a joint policy."""

    values: np.ndarray  # (n, S)
    q_values: np.ndarray  # (n, S, J)
    expected_q: np.ndarray  # (n, S, A)
    beta: float


@dataclass
class QreResult:
    policy: np.ndarray
    residual: float
    iterations: int
    converged: bool


@dataclass
class SolverConfig:
    damping: float = 0.5
    max_iters: int = 5000
    tolerance: float = 1e-12
    adaptive: bool = True

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")


# ---------------------------------------------------------------------------
# policy helpers


def uniform_policy(num_players: int, num_states: int, num_actions: int) -> np.ndarray:
    return np.full((num_players, num_states, num_actions), 1.0 / num_actions)


def check_policy(policy, game: RewardlessGame, seats: Optional[int] = None) -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    n = game.num_players if seats is None else seats
    if policy.shape != (n, game.num_states, game.num_actions):
        raise ValueError(
            f"policy shape {policy.shape} does not match "
            f"{(n, game.num_states, game.num_actions)}"
        )
    if np.any(policy < 0) or np.max(np.abs(policy.sum(-1) - 1.0)) > 1e-10:
        raise ValueError("policy rows must be probability vectors")
    return policy


def entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy along the last axis, with 0 log 0 = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(-1)


def joint_action_probs(policies: Sequence[np.ndarray]) -> np.ndarray:
    """Product distribution over joint actions, shape (S, A**k) for k policies."""
    out = policies[0]
    for pol in policies[1:]:
        out = (out[:, :, None] * pol[:, None, :]).reshape(out.shape[0], -1)
    return out


def _letters(k: int) -> str:
    return string.ascii_lowercase[1 : k + 1]


def _contract_rows(game: RewardlessGame, weights: np.ndarray) -> np.ndarray:
    """sum_j weights[s, j] T(. | s, j) as an (S, S) array (dense or sparse)."""
    S, J = game.num_states, game.num_joint_actions
    if game.is_sparse:
        mix = sp.csr_matrix(
            (weights.ravel(), (np.repeat(np.arange(S), J), np.arange(S * J))),
            shape=(S, S * J),
        )
        return (mix @ game.transition).tocsr()
    return np.einsum("sj,sjt->st", weights, game.transition)


def induced_transition(game: RewardlessGame, policy: np.ndarray, seat: int) -> np.ndarray:
    """Own-action transition matrices of ``seat`` against the other seats.

    ``policy`` holds one row-stochastic (S, A) matrix per seat; the entry for
    ``seat`` itself is ignored.  Returns an array of shape (A, S, S) (a list of
    sparse matrices for sparse games).
    """
    n, S, A = game.num_players, game.num_states, game.num_actions
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (n, S, A):
        raise ValueError(f"policy shape {policy.shape} does not match game seats {(n, S, A)}")
    if not 0 <= seat < n:
        raise ValueError(f"seat {seat} out of range for {n} players")
    others = [policy[k] for k in range(n) if k != seat]
    if game.is_sparse:
        out = []
        for a in range(A):
            own = np.zeros((S, A))
            own[:, a] = 1.0
            factors = others[:seat] + [own] + others[seat:]
            out.append(_contract_rows(game, joint_action_probs(factors)))
        return out
    letters = _letters(n)
    T = game.transition.reshape((S,) + game.joint_shape() + (S,))
    operands = [T]
    subs = ["s" + letters + "z"]
    for k in range(n):
        if k != seat:
            operands.append(policy[k])
            subs.append("s" + letters[k])
    expr = ",".join(subs) + "->" + letters[seat] + "sz"
    return np.einsum(expr, *operands, optimize=True)


def _mix_actions(induced, probs: np.ndarray):
    """sum_a probs[s, a] M_a[s, :] for induced transitions."""
    if isinstance(induced, list):
        out = sp.diags(probs[:, 0]) @ induced[0]
        for a in range(1, len(induced)):
            out = out + sp.diags(probs[:, a]) @ induced[a]
        return out.tocsr()
    return np.einsum("sa,ast->st", probs, induced)


def _propagate(induced, values: np.ndarray) -> np.ndarray:
    """(A, S) array of sum_s' M_a[s, s'] values[s']."""
    if isinstance(induced, list):
        return np.stack([m @ values for m in induced])
    return induced @ values


def _solve(matrix, rhs: np.ndarray, discount: float, transpose: bool = False) -> np.ndarray:
    """Solve (I - discount * P) x = rhs (or the transposed system)."""
    S = matrix.shape[0]
    if sp.issparse(matrix):
        P = matrix.T if transpose else matrix
        system = (sp.identity(S, format="csc") - discount * P).tocsc()
        return np.asarray(spla.splu(system).solve(np.asarray(rhs, dtype=float)))
    P = matrix.T if transpose else matrix
    if S <= DENSE_SOLVE_LIMIT:
        return np.linalg.solve(np.eye(S) - discount * P, rhs)
    x = np.array(rhs, dtype=float)
    for _ in range(100000):
        nxt = rhs + discount * (P @ x)
        if np.max(np.abs(nxt - x)) < 1e-10:
            return nxt
        x = nxt
    raise ConvergenceError("iterative policy evaluation did not converge")


# ---------------------------------------------------------------------------
# evaluation on seat-expected rewards


def expected_reward(game: RewardlessGame, reward: np.ndarray, policy: np.ndarray) -> np.ndarray:
    """R̄_i(s, a): reward of seat i for own action a, averaged over the others."""
    n, S, A = game.num_players, game.num_states, game.num_actions
    reward = np.asarray(reward, dtype=float)
    if reward.shape != (n, S, game.num_joint_actions):
        raise ValueError(f"reward shape {reward.shape} != {(n, S, game.num_joint_actions)}")
    letters = _letters(n)
    out = np.empty((n, S, A))
    for i in range(n):
        R = reward[i].reshape((S,) + game.joint_shape())
        operands = [R]
        subs = ["s" + letters]
        for k in range(n):
            if k != i:
                operands.append(policy[k])
                subs.append("s" + letters[k])
        out[i] = np.einsum(",".join(subs) + "->s" + letters[i], *operands, optimize=True)
    return out


@dataclass
class SeatEvaluation:
    """Values, expected Q-values and soft responses of every seat under one policy."""

    induced: list
    chain: object
    values: np.ndarray  # (n, S)
    expected_q: np.ndarray  # (n, S, A)
    response: np.ndarray  # (n, S, A)


def evaluate_seats(
    game: RewardlessGame, seat_reward: np.ndarray, policy: np.ndarray, beta: float, induced=None
) -> SeatEvaluation:
    """Evaluate every seat given seat-expected rewards R̄ of shape (n, S, A)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    n = game.num_players
    gamma = game.discount
    if induced is None:
        induced = [induced_transition(game, policy, i) for i in range(n)]
    chain = _mix_actions(induced[0], policy[0])
    rhs = np.einsum("nsa,nsa->ns", policy, seat_reward) + entropy(policy) / beta
    values = _solve(chain, rhs.T, gamma).T
    qbar = np.stack(
        [seat_reward[i] + gamma * _propagate(induced[i], values[i]).T for i in range(n)]
    )
    return SeatEvaluation(induced, chain, values, qbar, softmax(beta * qbar, axis=-1))


def soft_policy_evaluation(
    game: RewardlessGame, reward: np.ndarray, policy: np.ndarray, beta: float
) -> ValueBundle:
    """Regularised values V_i, joint Q_i and expected Q̄_i of a fixed joint policy."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    policy = check_policy(policy, game)
    reward = np.asarray(reward, dtype=float)
    ev = evaluate_seats(game, expected_reward(game, reward, policy), policy, beta)
    S, J = game.num_states, game.num_joint_actions
    if game.is_sparse:
        nxt = np.stack([(game.transition @ v).reshape(S, J) for v in ev.values])
    else:
        nxt = np.einsum("sjt,nt->nsj", game.transition, ev.values)
    q = reward + game.discount * nxt
    return ValueBundle(ev.values, q, ev.expected_q, beta)


# ---------------------------------------------------------------------------
# best responses


def soft_value_iteration(
    induced, seat_reward: np.ndarray, discount: float, beta: float,
    tol: float = 1e-10, max_iters: int = 100000, init: Optional[np.ndarray] = None,
):
    """Soft Bellman optimality iteration on a single-agent MDP.

    ``induced`` is the (A, S, S) own-action transition stack and ``seat_reward``
    the (S, A) reward.  Returns (policy, V*, Q*).
    """
    S = seat_reward.shape[0]
    v = np.zeros(S) if init is None else np.array(init, dtype=float)
    for _ in range(max_iters):
        q = seat_reward + discount * _propagate(induced, v).T
        nxt = logsumexp(beta * q, axis=1) / beta
        if np.max(np.abs(nxt - v)) < tol:
            v = nxt
            break
        v = nxt
    else:
        raise ConvergenceError("soft value iteration did not converge")
    q = seat_reward + discount * _propagate(induced, v).T
    return softmax(beta * q, axis=1), v, q


def soft_best_response(
    game: RewardlessGame, reward: np.ndarray, policy: np.ndarray, seat: int, beta: float,
    tol: float = 1e-10,
):
    """Soft best response of ``seat`` to the other seats of ``policy``.

    Returns (policy matrix (S, A), optimal regularised values V* (S,)).
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    policy = np.asarray(policy, dtype=float)
    induced = induced_transition(game, policy, seat)
    rbar = expected_reward(game, reward, policy)[seat]
    pi, v, _ = soft_value_iteration(induced, rbar, game.discount, beta, tol=tol)
    return pi, v


# ---------------------------------------------------------------------------
# QRE


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """KL(p || q) along the last axis; inf where q = 0 < p."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(-1)


def stability_residual(policy: np.ndarray, response: np.ndarray) -> float:
    return float(np.max(kl_rows(policy, response).sum(-1)))


def solve_qre_seat_rewards(
    game: RewardlessGame, seat_reward_fn, beta: float, config: Optional[SolverConfig] = None,
    init: Optional[np.ndarray] = None,
) -> QreResult:
    """Damped simultaneous soft-response iteration.

    ``seat_reward_fn(policy)`` returns the seat-expected rewards (n, S, A) for a
    joint policy; it lets structured rewards skip the joint-action tensor.
    """
    cfg = config or SolverConfig()
    n, S, A = game.num_players, game.num_states, game.num_actions
    policy = uniform_policy(n, S, A) if init is None else np.array(init, dtype=float)
    log_pi = np.log(policy)
    delta = cfg.damping
    best = (np.inf, policy)
    prev = np.inf
    for it in range(cfg.max_iters):
        ev = evaluate_seats(game, seat_reward_fn(policy), policy, beta)
        res = stability_residual(policy, ev.response)
        if res < best[0]:
            best = (res, policy)
        if res < cfg.tolerance:
            return QreResult(policy, res, it, True)
        if cfg.adaptive and res > prev and delta > 1e-3:
            delta *= 0.5
        prev = res
        log_pi = (1 - delta) * log_pi + delta * np.log(ev.response)
        log_pi -= logsumexp(log_pi, axis=-1, keepdims=True)
        policy = np.exp(log_pi)
    logger.warning("QRE solver stopped at residual %.3e after %d iterations", best[0], cfg.max_iters)
    return QreResult(best[1], best[0], cfg.max_iters, False)


def solve_qre(
    game: RewardlessGame, reward: np.ndarray, beta: float, config: Optional[SolverConfig] = None,
    init: Optional[np.ndarray] = None,
) -> QreResult:
    """Quantal response equilibrium of ``game`` under joint reward tables ``reward``."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    reward = np.asarray(reward, dtype=float)
    return solve_qre_seat_rewards(
        game, lambda pol: expected_reward(game, reward, pol), beta, config, init
    )


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class Trajectory:
    states: np.ndarray  # (L,)
    actions: np.ndarray  # (L, n)

    def __len__(self):
        return len(self.states)

    @property
    def steps(self):
        return [(int(s), tuple(int(x) for x in a)) for s, a in zip(self.states, self.actions)]


def _categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[:, None] >= cdf).sum(-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def flatten_joint(actions: np.ndarray, num_actions: int) -> np.ndarray:
    """Lexicographic joint-action index of action tuples (..., n)."""
    idx = np.zeros(actions.shape[:-1], dtype=np.int64)
    for k in range(actions.shape[-1]):
        idx = idx * num_actions + actions[..., k]
    return idx


def sample_trajectories(
    game: RewardlessGame, policy: np.ndarray, length: int, count: int, seed
) -> list:
    """Sample ``count`` trajectories in lockstep; deterministic given ``seed``."""
    if length < 1:
        raise ValueError("length must be at least 1")
    policy = check_policy(policy, game)
    rng = np.random.default_rng(seed)
    n, S, A = game.num_players, game.num_states, game.num_actions
    states = np.empty((count, length), dtype=np.int64)
    actions = np.empty((count, length, n), dtype=np.int64)
    s = _categorical(rng, np.broadcast_to(game.initial_dist, (count, S)))
    for t in range(length):
        states[:, t] = s
        for i in range(n):
            actions[:, t, i] = _categorical(rng, policy[i][s])
        j = flatten_joint(actions[:, t], A)
        if game.is_sparse:
            rows = game.transition[s * game.num_joint_actions + j].toarray()
        else:
            rows = game.transition[s, j]
        s = _categorical(rng, rows)
    return [Trajectory(states[k], actions[k]) for k in range(count)]


def sample_trajectory(game: RewardlessGame, policy: np.ndarray, length: int, seed) -> Trajectory:
    return sample_trajectories(game, policy, length, 1, seed)[0]
