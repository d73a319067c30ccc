"""Altruism-structured rewards.

An agent's effective reward inside a group is its intrinsic reward for its own
action plus its altruism level times the mean intrinsic reward of the other
members.  Agents are parametrised by unconstrained logits that pass through an
offset sigmoid, which keeps SGLD updates unconstrained.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

PSI_CLIP = 9.0


@dataclass(frozen=True)
class Bounds:
    r_min: float = 0.0
    r_max: float = 1.0
    lambda_min: float = -5.0
    lambda_max: float = 5.0

    @property
    def r_width(self) -> float:
        return self.r_max - self.r_min

    @property
    def lambda_width(self) -> float:
        return self.lambda_max - self.lambda_min


@dataclass
class AgentRewardParams:
    psi_r: np.ndarray
    psi_lambda: float
    bounds: Bounds = field(default_factory=Bounds)

    def to_json(self) -> dict:
        return {"psi_lambda": float(self.psi_lambda), "psi_r": np.asarray(self.psi_r).tolist()}


@dataclass
class AltruismProfile:
    intrinsic: np.ndarray
    altruism: float

    def to_json(self, agent_id: int) -> dict:
        return {
            "agent_id": int(agent_id),
            "lambda": float(self.altruism),
            "intrinsic": np.asarray(self.intrinsic).tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AltruismProfile":
        return cls(np.asarray(doc["intrinsic"], dtype=float), float(doc["lambda"]))


def materialize(params: AgentRewardParams) -> AltruismProfile:
    b = params.bounds
    r = expit(np.asarray(params.psi_r, dtype=float)) * b.r_width + b.r_min
    lam = float(expit(params.psi_lambda) * b.lambda_width + b.lambda_min)
    return AltruismProfile(r, lam)


def _logit(p):
    return np.log(p) - np.log1p(-p)


def parametrize(profile: AltruismProfile, bounds: Bounds = Bounds()) -> AgentRewardParams:
    """Inverse of :func:`materialize`, clipped to the admissible logit range."""
    eps = 1e-12
    pr = np.clip((np.asarray(profile.intrinsic) - bounds.r_min) / bounds.r_width, eps, 1 - eps)
    pl = np.clip((profile.altruism - bounds.lambda_min) / bounds.lambda_width, eps, 1 - eps)
    return AgentRewardParams(
        np.clip(_logit(pr), -PSI_CLIP, PSI_CLIP), float(np.clip(_logit(pl), -PSI_CLIP, PSI_CLIP)), bounds
    )


def validate_group(members: Sequence[int], num_agents: int, size: int | None = None) -> tuple:
    members = tuple(int(k) for k in members)
    if len(set(members)) != len(members):
        raise ValueError(f"group {members} has repeated agents")
    if any(k < 0 or k >= num_agents for k in members):
        raise ValueError(f"group {members} references agents outside 0..{num_agents - 1}")
    if size is not None and len(members) != size:
        raise ValueError(f"group {members} does not have size {size}")
    return tuple(sorted(members))


def joint_axes(num_states: int, num_actions: int, n: int, seat: int) -> list:
    """Reshape target that broadcasts an (S, A) table of ``seat`` over joint actions."""
    shape = [1] * (n + 1)
    shape[0] = num_states
    shape[seat + 1] = num_actions
    return shape


def compose_group_reward(
    profiles: Mapping[int, AltruismProfile], group: Iterable[int], seat_views=None
) -> np.ndarray:
    """Effective reward tensors, shape (n, S, A**n), seats in sorted member order.

    ``seat_views`` (n, S) re-indexes each member's intrinsic table into the
    frame of the seat it occupies (identity when omitted).
    """
    members = tuple(sorted(group))
    n = len(members)
    if n < 2:
        raise ValueError("groups need at least two members to compose altruistic rewards")
    missing = [k for k in members if k not in profiles]
    if missing:
        raise KeyError(f"no profile for agents {missing}")
    S, A = np.asarray(profiles[members[0]].intrinsic).shape
    tables = [np.asarray(profiles[k].intrinsic, dtype=float) for k in members]
    if seat_views is not None:
        tables = [t[seat_views[j]] for j, t in enumerate(tables)]
    own = [
        np.broadcast_to(
            tables[seat].reshape(joint_axes(S, A, n, seat)),
            (S,) + (A,) * n,
        )
        for seat in range(n)
    ]
    out = np.empty((n, S) + (A,) * n)
    for i, k in enumerate(members):
        others = sum(own[j] for j in range(n) if j != i)
        out[i] = own[i] + profiles[k].altruism / (n - 1) * others
    return out.reshape(n, S, A**n)


# ---------------------------------------------------------------------------
# structured (seat-expected) form used by the samplers


def seat_expected_reward(intrinsic: np.ndarray, altruism: np.ndarray, policy: np.ndarray) -> np.ndarray:
    """R̄_i(s, a) = r_i(s, a) + λ_i / (n-1) Σ_{k≠i} E_{π_k}[r_k(s, ·)].

    ``intrinsic`` has shape (n, S, A) in seat order, ``altruism`` shape (n,).
    Singleton groups reduce to the intrinsic reward.
    """
    n = intrinsic.shape[0]
    if n == 1:
        return np.array(intrinsic, dtype=float)
    rho = np.einsum("nsa,nsa->ns", policy, intrinsic)
    others = (rho.sum(0, keepdims=True) - rho) / (n - 1)
    return intrinsic + altruism[:, None, None] * others[:, :, None]


def seat_expected_reward_vjp(
    grad_rbar: np.ndarray, intrinsic: np.ndarray, altruism: np.ndarray, policy: np.ndarray
):
    """Pull a gradient w.r.t. R̄ (n, S, A) back to (intrinsic, altruism)."""
    n = intrinsic.shape[0]
    if n == 1:
        return np.array(grad_rbar), np.zeros(1)
    rho = np.einsum("nsa,nsa->ns", policy, intrinsic)
    others = (rho.sum(0, keepdims=True) - rho) / (n - 1)
    row = grad_rbar.sum(-1)  # (n, S)
    g_lambda = np.einsum("ns,ns->n", row, others)
    e = altruism[:, None] * row / (n - 1)
    g_rho = e.sum(0, keepdims=True) - e
    g_r = grad_rbar + g_rho[:, :, None] * policy
    return g_r, g_lambda


@dataclass
class RewardParams:
    """Unconstrained parameters of all m agents, stacked along the first axis."""

    psi_r: np.ndarray  # (m, S, A)
    psi_lambda: np.ndarray  # (m,)
    bounds: Bounds = field(default_factory=Bounds)

    def __post_init__(self):
        self.psi_r = np.asarray(self.psi_r, dtype=float)
        self.psi_lambda = np.asarray(self.psi_lambda, dtype=float).reshape(-1)
        if self.psi_r.shape[0] != self.psi_lambda.shape[0]:
            raise ValueError("psi_r and psi_lambda disagree on the number of agents")

    @property
    def num_agents(self) -> int:
        return self.psi_lambda.shape[0]

    def agent(self, k: int) -> AgentRewardParams:
        return AgentRewardParams(self.psi_r[k], float(self.psi_lambda[k]), self.bounds)

    def profiles(self) -> Dict[int, AltruismProfile]:
        return {k: materialize(self.agent(k)) for k in range(self.num_agents)}

    def flat(self) -> np.ndarray:
        return np.concatenate([self.psi_r.ravel(), self.psi_lambda])

    def with_flat(self, vec: np.ndarray) -> "RewardParams":
        size = self.psi_r.size
        return RewardParams(vec[:size].reshape(self.psi_r.shape), vec[size:].copy(), self.bounds)

    def copy(self) -> "RewardParams":
        return RewardParams(self.psi_r.copy(), self.psi_lambda.copy(), self.bounds)

    @classmethod
    def from_profiles(cls, profiles: Sequence[AltruismProfile], bounds: Bounds = Bounds()):
        agents = [parametrize(p, bounds) for p in profiles]
        return cls(np.stack([a.psi_r for a in agents]), np.array([a.psi_lambda for a in agents]), bounds)

    def to_json(self) -> dict:
        return {str(k): self.agent(k).to_json() for k in range(self.num_agents)}


def stack_members(params: RewardParams, members: Sequence[int], seat_views=None):
    """Seat-frame intrinsic (n,S,A) and altruism (n,) of ``members`` plus sigmoid slopes."""
    idx = list(members)
    b = params.bounds
    psi = params.psi_r[idx]
    if seat_views is not None:
        psi = np.stack([psi[j][seat_views[j]] for j in range(len(idx))])
    sr, sl = expit(psi), expit(params.psi_lambda[idx])
    intrinsic = sr * b.r_width + b.r_min
    altruism = sl * b.lambda_width + b.lambda_min
    dr = sr * (1 - sr) * b.r_width
    dl = sl * (1 - sl) * b.lambda_width
    return intrinsic, altruism, dr, dl


def unview(seat_grad: np.ndarray, seat_views=None) -> np.ndarray:
    """Map per-seat gradients (n, S, A) back to each agent's own state frame."""
    if seat_views is None:
        return seat_grad
    out = np.empty_like(seat_grad)
    for j in range(seat_grad.shape[0]):
        out[j][seat_views[j]] = seat_grad[j]
    return out
