"""Bayesian reward inference: priors, preconditioned SGLD and the two samplers.

* :func:`policy_posterior_chain` samples per-group policies from their
  demonstrations (the first PORP step);
* :func:`porp_reward_chain` samples all agents' reward parameters under the
  gap-based pseudo-likelihood exp(-c * gap) averaged over policy samples;
* :func:`drp_chain` samples them under the QRE likelihood of the
  demonstrations, differentiating through an unrolled equilibrium solver.

Randomness inside the reward chains is keyed per (group, step) and per
(agent, step) from a master seed, so chains do not depend on the order in
which groups are processed and agent relabelings map to relabeled chains.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, softmax

from .game import RewardlessGame, SolverConfig, Trajectory, induced_transition, solve_qre_seat_rewards
from .gaps import GapConfig, group_gap
from .rewards import (
    PSI_CLIP,
    AltruismProfile,
    Bounds,
    RewardParams,
    seat_expected_reward,
    stack_members,
)

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


class ChainError(RuntimeError):
    """Raised when a chain cannot continue; carries the failing step index."""

    def __init__(self, step: int, cause: str):
        super().__init__(f"chain aborted at step {step}: {cause}")
        self.step = step
        self.cause = cause


# ---------------------------------------------------------------------------
# priors


@dataclass
class PriorConfig:
    reward_sigma: float = 1 / 6
    policy_sigma: Optional[float] = None  # None: flat prior on policy logits
    bounds: Bounds = field(default_factory=Bounds)
    beta_rate: float = 10.0
    beta_min: float = 0.05

    def __post_init__(self):
        if isinstance(self.bounds, dict):
            self.bounds = Bounds(**self.bounds)
        if self.reward_sigma <= 0 or (self.policy_sigma is not None and self.policy_sigma <= 0):
            raise ValueError("prior standard deviations must be positive")
        if self.beta_rate <= 0 or self.beta_min <= 0:
            raise ValueError("beta_rate and beta_min must be positive")


def log_prior_reward(params: RewardParams, cfg: PriorConfig) -> float:
    """Gaussian on psi_r, uniform on lambda (with the sigmoid Jacobian)."""
    sig = cfg.reward_sigma
    psi_r, psi_l = params.psi_r, params.psi_lambda
    b = params.bounds
    gauss = -0.5 * np.sum((psi_r / sig) ** 2) - psi_r.size * (math.log(sig) + 0.5 * LOG_2PI)
    uniform = -psi_l.size * math.log(b.lambda_width)
    # log |d lambda / d psi| = log w + log s + log(1 - s)
    jac = psi_l.size * math.log(b.lambda_width) + np.sum(-np.logaddexp(0, -psi_l) - np.logaddexp(0, psi_l))
    return float(gauss + uniform + jac)


def grad_log_prior_reward(params: RewardParams, cfg: PriorConfig) -> Tuple[np.ndarray, np.ndarray]:
    return -params.psi_r / cfg.reward_sigma**2, 1 - 2 * expit(params.psi_lambda)


def sample_beta(cfg: PriorConfig, rng: np.random.Generator, size=None):
    """Exp(beta_rate) conditioned on beta >= beta_min (memoryless shift)."""
    return cfg.beta_min + rng.exponential(1 / cfg.beta_rate, size=size)


# ---------------------------------------------------------------------------
# SGLD


@dataclass
class SgldSchedule:
    epsilon_0: float = 0.1
    alpha: float = 0.05
    iterations: int = 1000
    warmup: int = 500
    momentum: float = 0.99
    precondition_epsilon: float = 1e-8

    def __post_init__(self):
        if self.epsilon_0 <= 0 or self.alpha < 0:
            raise ValueError("need epsilon_0 > 0 and alpha >= 0")
        if self.iterations > 0 and not 0 <= self.warmup < self.iterations:
            raise ValueError("warmup must lie in [0, iterations)")

    def step_size(self, t: int) -> float:
        return self.epsilon_0 / (1 + t) ** self.alpha


class Sgld:
    """RMSProp-preconditioned Langevin kernel.

    ``v`` starts at the first squared gradient (floored at its mean over all
    coordinates) rather than zero, so neither a zero start nor a coordinate
    whose first gradient happens to vanish produces a huge first step.  An
    all-zero first gradient starts from the identity preconditioner.
    """

    def __init__(self, schedule: SgldSchedule, clip: Optional[float] = None):
        self.schedule = schedule
        self.clip = clip
        self.v = None

    def step(self, x: np.ndarray, grad: np.ndarray, t: int, noise: Optional[np.ndarray]) -> np.ndarray:
        """One update; ``noise`` holds standard normals (None disables it)."""
        if not np.all(np.isfinite(grad)):
            raise ChainError(t, "non-finite gradient")
        sch = self.schedule
        g2 = grad * grad
        if self.v is None:
            floor = math.fsum(g2.ravel()) / max(g2.size, 1)
            self.v = np.maximum(g2, floor) if floor > 0 else np.ones_like(g2)
        else:
            self.v = sch.momentum * self.v + (1 - sch.momentum) * g2
        precond = 1 / (np.sqrt(self.v) + sch.precondition_epsilon)
        eps = sch.step_size(t)
        out = x + 0.5 * eps * precond * grad
        if noise is not None:
            out = out + np.sqrt(eps * precond) * noise
        if self.clip is not None:
            out = np.clip(out, -self.clip, self.clip)
        return out


def sgld_step(x, grad, schedule: SgldSchedule, t: int, rng, state: Optional[Sgld] = None, clip=None):
    """Functional wrapper around :class:`Sgld` (``rng=None`` turns noise off)."""
    kernel = state or Sgld(schedule, clip)
    noise = None if rng is None else rng.standard_normal(np.shape(x))
    return kernel.step(np.asarray(x, dtype=float), np.asarray(grad, dtype=float), t, noise), kernel


# ---------------------------------------------------------------------------
# demonstrations


def action_counts(trajectories: Sequence[Trajectory], num_players: int, num_states: int, num_actions: int):
    """Counts (n, S, A) of each seat's actions per visited state."""
    counts = np.zeros((num_players, num_states, num_actions))
    for traj in trajectories:
        for i in range(num_players):
            np.add.at(counts[i], (traj.states, traj.actions[:, i]), 1.0)
    return counts


# ---------------------------------------------------------------------------
# policy posterior


@dataclass
class PolicyChainSamples:
    group: tuple
    logits: np.ndarray  # (N, n, S, A)

    @property
    def policies(self) -> np.ndarray:
        return softmax(self.logits, axis=-1)

    def __len__(self):
        return self.logits.shape[0]

    def mean_policy(self) -> np.ndarray:
        return self.policies.mean(0)


def policy_posterior_chain(
    trajectories: Sequence[Trajectory],
    shape: Tuple[int, int, int],
    prior: PriorConfig,
    schedule: SgldSchedule,
    seed,
    group: tuple = (),
    thin: int = 1,
) -> PolicyChainSamples:
    """SGLD on policy logits under the factorised softmax likelihood."""
    if not trajectories:
        raise ValueError("policy posterior needs at least one trajectory")
    n, S, A = shape
    counts = action_counts(trajectories, n, S, A)
    visits = counts.sum(-1, keepdims=True)
    # without a prior, rows of unvisited states carry no signal; they stay uniform
    frozen = visits == 0 if prior.policy_sigma is None else np.zeros_like(visits, dtype=bool)
    live = ~np.broadcast_to(frozen, shape)
    rng = np.random.default_rng(seed)
    kernel = Sgld(schedule)
    theta = np.zeros(shape)
    kept = []
    for t in range(schedule.iterations):
        grad = counts - visits * softmax(theta, axis=-1)
        if prior.policy_sigma is not None:
            grad = grad - theta / prior.policy_sigma**2
        noise = rng.standard_normal(shape)
        if np.all(live):
            theta = kernel.step(theta, grad, t, noise)
        else:
            theta = theta.copy()
            theta[live] = kernel.step(theta[live], grad[live], t, noise[live])
        if t >= schedule.warmup and (t - schedule.warmup) % thin == 0:
            kept.append(theta.copy())
    logits = np.stack(kept) if kept else np.zeros((0,) + shape)
    return PolicyChainSamples(tuple(group), logits)


# ---------------------------------------------------------------------------
# reward chains


@dataclass
class RewardChainSamples:
    psi_r: np.ndarray  # (N, m, S, A)
    psi_lambda: np.ndarray  # (N, m)
    steps: np.ndarray  # (N,)
    betas: np.ndarray  # (N, num_groups)
    diagnostics: np.ndarray  # (N, num_groups): c * gap (PORP) or log-likelihood (DRP)
    log_post: np.ndarray  # (N,) unnormalised log posterior at each draw
    groups: List[tuple]
    bounds: Bounds = field(default_factory=Bounds)
    kind: str = "porp"

    def __len__(self):
        return self.psi_lambda.shape[0]

    def draw(self, k: int) -> RewardParams:
        return RewardParams(self.psi_r[k], self.psi_lambda[k], self.bounds)

    def records(self):
        label = "gap" if self.kind == "porp" else "loglik"
        for k in range(len(self)):
            yield {
                "step": int(self.steps[k]),
                "beta_samples": self.betas[k].tolist(),
                "psi": self.draw(k).to_json(),
                "diagnostics": {
                    label: {",".join(map(str, g)): float(v) for g, v in zip(self.groups, self.diagnostics[k])},
                    "log_posterior": float(self.log_post[k]),
                },
            }

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")


def _empty_chain(m, S, A, groups, bounds, kind):
    z = np.zeros((0, len(groups)))
    return RewardChainSamples(
        np.zeros((0, m, S, A)), np.zeros((0, m)), np.zeros(0, dtype=int), z, z.copy(), np.zeros(0),
        list(groups), bounds, kind,
    )


def _key(labels: Sequence[int]) -> List[int]:
    return [int(x) for x in labels]


class _Recorder:
    def __init__(self, schedule):
        self.schedule = schedule
        self.rows = []

    def __call__(self, t, params, betas, diag, log_post):
        if t >= self.schedule.warmup:
            self.rows.append((t, params.psi_r.copy(), params.psi_lambda.copy(), betas, diag, log_post))

    def chain(self, m, S, A, groups, bounds, kind):
        if not self.rows:
            return _empty_chain(m, S, A, groups, bounds, kind)
        t, r, lam, b, d, lp = zip(*self.rows)
        return RewardChainSamples(
            np.stack(r), np.stack(lam), np.array(t), np.array(b), np.array(d), np.array(lp),
            list(groups), bounds, kind,
        )


def _agent_noise(seed: int, agent_keys, t: int, S: int, A: int):
    """Standard normals for every agent's (psi_r, psi_lambda), keyed by (agent, step)."""
    zr, zl = [], []
    for key in agent_keys:
        rng = np.random.default_rng([seed, 1, int(key), t])
        zr.append(rng.standard_normal((S, A)))
        zl.append(rng.standard_normal())
    return np.concatenate([np.stack(zr).ravel(), np.array(zl)])


def _group_rng(seed: int, member_keys, t: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0, t] + sorted(_key(member_keys)))


def _initial_params(num_agents, S, A, bounds, init) -> RewardParams:
    if init is not None:
        return init.copy()
    return RewardParams(np.zeros((num_agents, S, A)), np.zeros(num_agents), bounds)


def _group_order(groups, agent_keys):
    """Process groups in an order determined by agent keys, not indices."""
    return sorted(range(len(groups)), key=lambda g: sorted(agent_keys[k] for k in groups[g]))


def porp_reward_chain(
    game: RewardlessGame,
    policy_samples: Dict[tuple, np.ndarray],
    gap_cfg: GapConfig,
    prior: PriorConfig,
    schedule: SgldSchedule,
    num_agents: int,
    seed: int,
    init: Optional[RewardParams] = None,
    agent_keys: Optional[Sequence[int]] = None,
) -> RewardChainSamples:
    """SGLD on all agents' reward parameters under the PORP pseudo-likelihood.

    ``policy_samples`` maps each group (sorted member tuple) to an array of
    joint policies (N, n, S, A).  Agents are shared across groups.
    """
    groups = [tuple(g) for g in policy_samples]
    for g in groups:
        if len(policy_samples[g]) == 0:
            raise ValueError(f"group {g} has no policy samples")
    S, A = game.num_states, game.num_actions
    keys = list(range(num_agents)) if agent_keys is None else _key(agent_keys)
    params = _initial_params(num_agents, S, A, prior.bounds, init)
    kernel = Sgld(schedule, clip=PSI_CLIP)
    record = _Recorder(schedule)
    order = _group_order(groups, keys)
    induced_cache: Dict[Tuple[int, int], list] = {}
    for t in range(schedule.iterations):
        g_r, g_l = grad_log_prior_reward(params, prior)
        betas = np.zeros(len(groups))
        diag = np.zeros(len(groups))
        for gi in order:
            g = groups[gi]
            rng = _group_rng(seed, [keys[k] for k in g], t)
            pool = policy_samples[g]
            idx = int(rng.integers(len(pool)))
            beta = float(sample_beta(prior, rng))
            policy = pool[idx]
            if (gi, idx) not in induced_cache:
                induced_cache[(gi, idx)] = [
                    induced_transition(game, policy, i) for i in range(game.num_players)
                ]
            try:
                ev = group_gap(game, gap_cfg, params, g, policy, beta, induced=induced_cache[(gi, idx)])
            except Exception as exc:  # solver failures surface with the step index
                raise ChainError(t, f"group {g}: {exc}") from exc
            if not np.isfinite(ev.value):
                raise ChainError(t, f"group {g}: gap is not finite")
            g_r = g_r - ev.grad_psi_r
            g_l = g_l - ev.grad_psi_lambda
            betas[gi], diag[gi] = beta, ev.value
        log_post = log_prior_reward(params, prior) - float(diag.sum())
        record(t, params, betas, diag, log_post)
        noise = _agent_noise(seed, keys, t, S, A)
        flat = kernel.step(params.flat(), np.concatenate([g_r.ravel(), g_l]), t, noise)
        params = params.with_flat(flat)
    return record.chain(num_agents, S, A, groups, prior.bounds, "porp")


# ---------------------------------------------------------------------------
# DRP: QRE likelihood differentiated through an unrolled solver


@dataclass
class DrpConfig:
    unroll: int = 50
    damping: float = 0.5
    solver: SolverConfig = field(default_factory=SolverConfig)


class _TorchGame:
    """Dense torch view of a game for the unrolled soft-response map."""

    def __init__(self, game: RewardlessGame):
        import torch

        self.torch = torch
        self.game = game
        n, S, A = game.num_players, game.num_states, game.num_actions
        self.T = torch.as_tensor(game.dense_transition().reshape((S,) + (A,) * n + (S,)))
        self.eye = torch.eye(S, dtype=torch.float64)

    def induced(self, policy, seat):
        torch = self.torch
        n = self.game.num_players
        letters = "bcdefghijk"[:n]
        ops, subs = [self.T], ["s" + letters + "z"]
        for k in range(n):
            if k != seat:
                ops.append(policy[k])
                subs.append("s" + letters[k])
        return torch.einsum(",".join(subs) + "->" + letters[seat] + "sz", *ops)

    def response(self, policy, seat_reward, beta):
        torch = self.torch
        gamma = self.game.discount
        n = self.game.num_players
        induced = [self.induced(policy, i) for i in range(n)]
        chain = torch.einsum("sa,ast->st", policy[0], induced[0])
        ent = -(policy * torch.log(policy)).sum(-1)
        rhs = (policy * seat_reward).sum(-1) + ent / beta  # (n, S)
        values = torch.linalg.solve(self.eye - gamma * chain, rhs.T).T
        qbar = torch.stack(
            [seat_reward[i] + gamma * (induced[i] @ values[i]).T for i in range(n)]
        )
        return torch.log_softmax(beta * qbar, dim=-1)


def _torch_seat_reward(torch, psi_r, psi_l, bounds, views):
    r = torch.sigmoid(psi_r) * bounds.r_width + bounds.r_min
    if views is not None:
        r = torch.stack([r[j][torch.as_tensor(views[j])] for j in range(r.shape[0])])
    lam = torch.sigmoid(psi_l) * bounds.lambda_width + bounds.lambda_min
    return r, lam


def _torch_rbar(torch, r, lam, policy):
    n = r.shape[0]
    if n == 1:
        return r
    rho = (policy * r).sum(-1)
    others = (rho.sum(0, keepdim=True) - rho) / (n - 1)
    return r + lam[:, None, None] * others[:, :, None]


def qre_loglik(
    game: RewardlessGame,
    params: RewardParams,
    group: Sequence[int],
    counts: np.ndarray,
    beta: float,
    cfg: Optional[DrpConfig] = None,
    warm: Optional[np.ndarray] = None,
    tgame: Optional[_TorchGame] = None,
    with_grad: bool = True,
):
    """Demonstration log-likelihood under the group's QRE and its gradient.

    Returns (loglik, grad_psi_r (m,S,A), grad_psi_lambda (m,), equilibrium).
    The gradient flows through ``cfg.unroll`` damped soft-response steps that
    start at the converged equilibrium.
    """
    import torch

    cfg = cfg or DrpConfig()
    members = list(group)
    views = game.seat_views if game.has_seat_views else None
    intrinsic, altruism, _, _ = stack_members(params, members, views)
    res = solve_qre_seat_rewards(
        game, lambda pol: seat_expected_reward(intrinsic, altruism, pol), beta, cfg.solver, warm
    )
    if not res.converged:
        retry = SolverConfig(cfg.solver.damping / 4, cfg.solver.max_iters * 2, cfg.solver.tolerance, True)
        res = solve_qre_seat_rewards(
            game, lambda pol: seat_expected_reward(intrinsic, altruism, pol), beta, retry, res.policy
        )
        if not res.converged:
            raise RuntimeError(f"QRE did not converge for group {tuple(group)} (residual {res.residual:.2e})")
    counts_t = torch.as_tensor(counts)
    if not with_grad:
        ll = float((counts * np.log(res.policy)).sum())
        return ll, None, None, res.policy
    tgame = tgame or _TorchGame(game)
    psi_r = torch.tensor(params.psi_r[members], requires_grad=True)
    psi_l = torch.tensor(params.psi_lambda[members], requires_grad=True)
    r, lam = _torch_seat_reward(torch, psi_r, psi_l, params.bounds, views)
    log_pi = torch.as_tensor(np.log(res.policy))
    delta = cfg.damping
    for _ in range(cfg.unroll):
        pi = torch.exp(log_pi)
        log_sigma = tgame.response(pi, _torch_rbar(torch, r, lam, pi), beta)
        log_pi = (1 - delta) * log_pi + delta * log_sigma
        log_pi = log_pi - torch.logsumexp(log_pi, dim=-1, keepdim=True)
    ll = (counts_t * log_pi).sum()
    ll.backward()
    g_r = np.zeros_like(params.psi_r)
    g_l = np.zeros_like(params.psi_lambda)
    g_r[members] = psi_r.grad.numpy()
    if psi_l.grad is not None:
        g_l[members] = psi_l.grad.numpy()
    return float(ll.detach()), g_r, g_l, res.policy


def drp_chain(
    game: RewardlessGame,
    demos: Dict[tuple, Sequence[Trajectory]],
    prior: PriorConfig,
    schedule: SgldSchedule,
    num_agents: int,
    seed: int,
    cfg: Optional[DrpConfig] = None,
    init: Optional[RewardParams] = None,
    agent_keys: Optional[Sequence[int]] = None,
) -> RewardChainSamples:
    """SGLD on reward parameters under the QRE likelihood of the demonstrations."""
    cfg = cfg or DrpConfig()
    groups = [tuple(g) for g in demos]
    if not groups or not any(len(v) for v in demos.values()):
        raise ValueError("DRP needs demonstrations")
    n, S, A = game.num_players, game.num_states, game.num_actions
    keys = list(range(num_agents)) if agent_keys is None else _key(agent_keys)
    counts = {g: action_counts(demos[g], n, S, A) for g in groups}
    params = _initial_params(num_agents, S, A, prior.bounds, init)
    kernel = Sgld(schedule, clip=PSI_CLIP)
    record = _Recorder(schedule)
    order = _group_order(groups, keys)
    warm: Dict[tuple, np.ndarray] = {}
    tgame = _TorchGame(game) if schedule.iterations else None
    for t in range(schedule.iterations):
        g_r, g_l = grad_log_prior_reward(params, prior)
        betas = np.zeros(len(groups))
        diag = np.zeros(len(groups))
        for gi in order:
            g = groups[gi]
            rng = _group_rng(seed, [keys[k] for k in g], t)
            beta = float(sample_beta(prior, rng))
            try:
                ll, gr, gl, eq = qre_loglik(game, params, g, counts[g], beta, cfg, warm.get(g), tgame)
            except Exception as exc:
                raise ChainError(t, f"group {g}: {exc}") from exc
            warm[g] = eq
            g_r = g_r + gr
            g_l = g_l + gl
            betas[gi], diag[gi] = beta, ll
        log_post = log_prior_reward(params, prior) + float(diag.sum())
        record(t, params, betas, diag, log_post)
        noise = _agent_noise(seed, keys, t, S, A)
        flat = kernel.step(params.flat(), np.concatenate([g_r.ravel(), g_l]), t, noise)
        params = params.with_flat(flat)
    return record.chain(num_agents, S, A, groups, prior.bounds, "drp")


# ---------------------------------------------------------------------------
# point estimates


def posterior_point_estimate(chain: RewardChainSamples, mode: str = "mean") -> Dict[int, AltruismProfile]:
    """Profiles from the chain mean of psi (``mean``) or the best draw (``map``)."""
    if len(chain) == 0:
        raise ValueError("empty chain")
    if mode == "mean":
        params = RewardParams(chain.psi_r.mean(0), chain.psi_lambda.mean(0), chain.bounds)
    elif mode == "map":
        params = chain.draw(int(np.argmax(chain.log_post)))
    else:
        raise ValueError(f"unknown point estimate {mode!r}")
    return params.profiles()
