"""Suboptimality gaps of a joint policy under a candidate reward.

Two gaps are provided:

* the policy stability gap (PSG): the largest state-summed KL divergence
  between a seat's policy and its soft response to the others;
* the QRE imitation gap (QIG): the largest state-summed improvement in
  regularised value available from a unilateral soft best response.

Both vanish exactly at the quantal response equilibrium.  Gradients with
respect to the agents' unconstrained reward parameters are exact: the PSG
is differentiated through the (reward-affine) policy evaluation, the QIG by
the envelope theorem with the best response held fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from scipy.special import logsumexp

from .game import (
    RewardlessGame,
    _mix_actions,
    _solve,
    entropy,
    evaluate_seats,
    expected_reward,
    induced_transition,
    kl_rows,
    soft_value_iteration,
)
from .rewards import RewardParams, seat_expected_reward, seat_expected_reward_vjp, stack_members, unview

PSG = "psg"
QIG = "qig"
TIE_TOL = 1e-10


@dataclass
class GapConfig:
    kind: str = PSG
    concentration: float = 500.0

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in (PSG, QIG):
            raise ValueError(f"unknown gap kind {self.kind!r}")
        if self.concentration <= 0:
            raise ValueError("concentration must be positive")

    @classmethod
    def default(cls, kind: str) -> "GapConfig":
        return cls(kind, 500.0 if kind.lower() == PSG else 50000.0)


def soft_response(
    game: RewardlessGame, reward: np.ndarray, policy: np.ndarray, beta: float, seat: int
) -> np.ndarray:
    """Boltzmann policy of ``seat``'s expected Q-values under ``policy``."""
    ev = evaluate_seats(game, expected_reward(game, reward, policy), policy, beta)
    return ev.response[seat]


# ---------------------------------------------------------------------------
# per-seat gaps on seat-expected rewards


def psg_seats(game, seat_reward, policy, beta, with_grad=False, induced=None):
    """Per-seat PSG terms and, optionally, their gradients w.r.t. R̄ (n, S, A)."""
    ev = evaluate_seats(game, seat_reward, policy, beta, induced=induced)
    gaps = kl_rows(policy, ev.response).sum(-1)
    if not with_grad:
        return gaps, None
    n = game.num_players
    gamma = game.discount
    # dKL/dQ̄ = beta (sigma - pi); Q̄ feeds V through the transposed chain
    g = beta * (ev.response - policy)
    grads = np.empty_like(g)
    for i in range(n):
        ind = ev.induced[i]
        if isinstance(ind, list):
            u = gamma * sum(ind[a].T @ g[i][:, a] for a in range(len(ind)))
        else:
            u = gamma * np.einsum("sa,ast->t", g[i], ind)
        w = _solve(ev.chain, u, gamma, transpose=True)
        grads[i] = g[i] + w[:, None] * policy[i]
    return gaps, grads


def qig_seats(game, seat_reward, policy, beta, with_grad=False, induced=None, tol=1e-12):
    """Per-seat QIG terms and, optionally, their envelope gradients w.r.t. R̄."""
    ev = evaluate_seats(game, seat_reward, policy, beta, induced=induced)
    n, S = game.num_players, game.num_states
    gamma = game.discount
    gaps = np.empty(n)
    grads = np.empty_like(seat_reward) if with_grad else None
    for i in range(n):
        br, v_star, _ = soft_value_iteration(
            ev.induced[i], seat_reward[i], gamma, beta, tol=tol, init=ev.values[i]
        )
        gaps[i] = float(np.sum(v_star - ev.values[i]))
        if with_grad:
            ones = np.ones(S)
            d_star = _solve(_mix_actions(ev.induced[i], br), ones, gamma, transpose=True)
            d_pi = _solve(ev.chain, ones, gamma, transpose=True)
            grads[i] = d_star[:, None] * br - d_pi[:, None] * policy[i]
    return gaps, grads


def _finite_max(gaps: np.ndarray) -> float:
    value = float(np.max(gaps))
    return math.inf if not np.isfinite(value) else value


def psg(game: RewardlessGame, reward: np.ndarray, policy: np.ndarray, beta: float) -> float:
    """Policy stability gap; ``math.inf`` when a soft response has no support."""
    policy = np.asarray(policy, dtype=float)
    gaps, _ = psg_seats(game, expected_reward(game, reward, policy), policy, beta)
    return _finite_max(gaps)


def qig(game: RewardlessGame, reward: np.ndarray, policy: np.ndarray, beta: float) -> float:
    """QRE imitation gap."""
    policy = np.asarray(policy, dtype=float)
    gaps, _ = qig_seats(game, expected_reward(game, reward, policy), policy, beta)
    return float(np.max(gaps))


# ---------------------------------------------------------------------------
# gradients w.r.t. unconstrained reward parameters


@dataclass
class GapEvaluation:
    value: float
    seat_gaps: np.ndarray
    grad_psi_r: np.ndarray  # (m, S, A), zero outside the group
    grad_psi_lambda: np.ndarray  # (m,)


def group_gap(
    game: RewardlessGame,
    cfg: GapConfig,
    params: RewardParams,
    group: Sequence[int],
    policy: np.ndarray,
    beta: float,
    with_grad: bool = True,
    induced=None,
) -> GapEvaluation:
    """c * gap of ``policy`` under the group's composed rewards, with gradient.

    The max over seats is differentiated through the maximising seat; seats
    whose gaps tie within 1e-10 have their gradients averaged.
    """
    members = list(group)
    views = game.seat_views if game.has_seat_views else None
    intrinsic, altruism, dr, dl = stack_members(params, members, views)
    rbar = seat_expected_reward(intrinsic, altruism, policy)
    fn = psg_seats if cfg.kind == PSG else qig_seats
    gaps, seat_grads = fn(game, rbar, policy, beta, with_grad=with_grad, induced=induced)
    c = cfg.concentration
    value = c * _finite_max(gaps)
    g_r = np.zeros_like(params.psi_r)
    g_l = np.zeros_like(params.psi_lambda)
    if with_grad and np.isfinite(value):
        top = np.flatnonzero(gaps >= np.max(gaps) - TIE_TOL)
        sel = np.zeros_like(seat_grads)
        sel[top] = seat_grads[top] / len(top)
        gr, gl = seat_expected_reward_vjp(sel, intrinsic, altruism, policy)
        g_r[members] = unview(c * gr * dr, views)
        if len(members) > 1:
            g_l[members] = c * gl * dl
    return GapEvaluation(value, c * gaps, g_r, g_l)


def gap_gradient(
    game: RewardlessGame,
    cfg: GapConfig,
    params: RewardParams,
    group: Sequence[int],
    policy: np.ndarray,
    beta: float,
):
    """Gradient of c * gap w.r.t. (psi_r, psi_lambda) of all agents."""
    ev = group_gap(game, cfg, params, group, policy, beta)
    return ev.grad_psi_r, ev.grad_psi_lambda


# ---------------------------------------------------------------------------
# batched evaluation at a fixed policy


def gap_batch(game: RewardlessGame, kind: str, seat_rewards: np.ndarray, policy: np.ndarray, beta: float,
              induced=None, tol: float = 1e-10) -> np.ndarray:
    """Gaps of one policy under a batch of seat-expected rewards (B, n, S, A).

    The induced chain is fixed by the policy, so the policy-evaluation
    inverse is shared across the batch.  Returns (B,) max-over-seat gaps.
    """
    n, S = game.num_players, game.num_states
    gamma = game.discount
    if induced is None:
        induced = [induced_transition(game, policy, i) for i in range(n)]
    dense = [np.stack([m.toarray() for m in ind]) if isinstance(ind, list) else ind for ind in induced]
    chain = np.einsum("sa,ast->st", policy[0], dense[0])
    inv = np.linalg.inv(np.eye(S) - gamma * chain)
    ent = entropy(policy) / beta  # (n, S)
    rhs = np.einsum("nsa,bnsa->bns", policy, seat_rewards) + ent
    values = np.einsum("st,bnt->bns", inv, rhs)
    out = np.empty((seat_rewards.shape[0], n))
    for i in range(n):
        if kind == PSG:
            q = seat_rewards[:, i] + gamma * np.einsum("ast,bt->bsa", dense[i], values[:, i])
            log_sigma = beta * q - logsumexp(beta * q, axis=-1, keepdims=True)
            with np.errstate(divide="ignore", invalid="ignore"):
                terms = np.where(policy[i] > 0, policy[i] * (np.log(policy[i]) - log_sigma), 0.0)
            out[:, i] = terms.sum((-1, -2))
        else:
            v = values[:, i].copy()
            for _ in range(100000):
                q = seat_rewards[:, i] + gamma * np.einsum("ast,bt->bsa", dense[i], v)
                nxt = logsumexp(beta * q, axis=-1) / beta
                done = np.max(np.abs(nxt - v)) < tol
                v = nxt
                if done:
                    break
            out[:, i] = (v - values[:, i]).sum(-1)
    return out.max(-1)
