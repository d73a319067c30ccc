"""Identifiability checks, partition-constant study and evaluation metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import truncnorm

from .game import (
    RewardlessGame,
    SolverConfig,
    evaluate_seats,
    induced_transition,
    kl_rows,
    solve_qre_seat_rewards,
)
from .gaps import GapConfig, gap_batch
from .rewards import AltruismProfile, Bounds, seat_expected_reward

# ---------------------------------------------------------------------------
# rank condition


@dataclass
class RankReport:
    agent: int
    groups: List[list]
    stacked_rank: int
    required: int
    satisfied: bool
    singular_values: List[float]
    margin: float  # sigma_{required} - sigma_{required + 1}

    def to_json(self) -> dict:
        return asdict(self)


def _dense_induced(game, policy, seat):
    ind = induced_transition(game, policy, seat)
    return np.stack([m.toarray() for m in ind]) if isinstance(ind, list) else ind


def rank_matrix(game: RewardlessGame, policy_g: np.ndarray, policy_h: np.ndarray, seat: int) -> np.ndarray:
    """Stacked blocks (I - gamma T_a^g | I - gamma T_a^h) over own actions a."""
    S = game.num_states
    gamma = game.discount
    eye = np.eye(S)
    tg = _dense_induced(game, policy_g, seat)
    th = _dense_induced(game, policy_h, seat)
    return np.concatenate(
        [np.hstack([eye - gamma * tg[a], eye - gamma * th[a]]) for a in range(game.num_actions)]
    )


def numerical_rank(matrix: np.ndarray):
    sv = np.linalg.svd(matrix, compute_uv=False)
    tol = max(matrix.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    return int(np.sum(sv > tol)), sv


def check_rank_condition(
    game: RewardlessGame,
    policy_g: np.ndarray,
    policy_h: np.ndarray,
    seat: int,
    agent: int = 0,
    groups: Sequence[Sequence[int]] = ((), ()),
) -> RankReport:
    """Whether agent ``seat``'s opponents in two groups pin values down to constants.

    ``policy_g`` and ``policy_h`` are joint policies (n, S, A) of the two
    groups with the agent in ``seat``; only the other seats' rows are used.
    """
    n, S, A = game.num_players, game.num_states, game.num_actions
    for p in (policy_g, policy_h):
        if np.shape(p) != (n, S, A):
            raise ValueError(f"policy shape {np.shape(p)} != {(n, S, A)}")
    matrix = rank_matrix(game, policy_g, policy_h, seat)
    rank, sv = numerical_rank(matrix)
    required = 2 * S - 1
    padded = np.concatenate([sv, [0.0]])
    margin = float(padded[required - 1] - padded[required]) if required <= sv.size else 0.0
    return RankReport(
        int(agent), [list(g) for g in groups], rank, required, rank == required, sv.tolist(), margin
    )


# ---------------------------------------------------------------------------
# partition constant of the PORP pseudo-likelihood


@dataclass
class PartitionEstimate:
    value: float
    log_value: float
    ess: float  # effective sample size of the self-normalised weights
    n_samples: int


def _truncnorm(center, sigma, low, high):
    a = (low - center) / sigma
    b = (high - center) / sigma
    return truncnorm(a, b, loc=center, scale=sigma)


def estimate_partition(
    game: RewardlessGame,
    truth: Mapping[int, AltruismProfile],
    group: Sequence[int],
    policy: np.ndarray,
    gap_cfg: GapConfig,
    beta: float,
    n_samples: int = 20000,
    proposal_sigma2: float = 0.16,
    bounds: Bounds = Bounds(),
    rng=None,
    batch: int = 2000,
    defensive: float = 0.1,
) -> PartitionEstimate:
    """Importance-sampling estimate of the integral of exp(-c gap) over reward space.

    Proposals are truncated normals centred on the true (r, lambda) with
    variance ``proposal_sigma2``, mixed with the uniform prior at weight
    ``defensive`` so that the weights ``w = 1 / q`` stay bounded.  The
    estimator is self-normalised, ``volume * sum(w exp(-c gap)) / sum(w)``,
    which returns the prior volume exactly when c = 0.
    """
    if not 0 < defensive <= 1:
        raise ValueError("defensive mixture weight must lie in (0, 1]")
    rng = np.random.default_rng(rng)
    members = list(group)
    n = len(members)
    views = game.seat_views if game.has_seat_views else None
    sigma = math.sqrt(proposal_sigma2)
    r_true = np.stack([np.asarray(truth[k].intrinsic, dtype=float) for k in members])
    l_true = np.array([truth[k].altruism for k in members])
    dist_r = _truncnorm(r_true, sigma, bounds.r_min, bounds.r_max)
    dist_l = _truncnorm(l_true, sigma, bounds.lambda_min, bounds.lambda_max)
    log_vol = r_true.size * math.log(bounds.r_width) + n * math.log(bounds.lambda_width)
    induced = [induced_transition(game, policy, i) for i in range(game.num_players)]
    log_w, log_f = [], []
    done = 0
    while done < n_samples:
        b = min(batch, n_samples - done)
        uniform = rng.random(b) < defensive
        r = dist_r.rvs(size=(b,) + r_true.shape, random_state=rng)
        lam = dist_l.rvs(size=(b, n), random_state=rng)
        r_u = rng.uniform(bounds.r_min, bounds.r_max, size=r.shape)
        l_u = rng.uniform(bounds.lambda_min, bounds.lambda_max, size=lam.shape)
        r = np.where(uniform[:, None, None, None], r_u, r)
        lam = np.where(uniform[:, None], l_u, lam)
        log_tn = dist_r.logpdf(r).reshape(b, -1).sum(-1) + dist_l.logpdf(lam).sum(-1)
        log_q = np.logaddexp(math.log(defensive) - log_vol, math.log1p(-defensive) + log_tn) \
            if defensive < 1 else np.full(b, -log_vol)
        seat_r = r if views is None else np.stack([r[:, j][:, views[j]] for j in range(n)], axis=1)
        rho = np.einsum("nsa,bnsa->bns", policy, seat_r)
        others = (rho.sum(1, keepdims=True) - rho) / (n - 1)
        rbar = seat_r + lam[:, :, None, None] * others[..., None]
        gaps = gap_batch(game, gap_cfg.kind, rbar, policy, beta, induced=induced)
        log_w.append(-log_q)
        log_f.append(-gap_cfg.concentration * gaps)
        done += b
    log_w = np.concatenate(log_w)
    log_f = np.concatenate(log_f)
    log_z = log_vol + logsumexp(log_w + log_f) - logsumexp(log_w)
    w = np.exp(log_w - log_w.max())
    ess = float(w.sum() ** 2 / np.sum(w**2))
    return PartitionEstimate(float(np.exp(log_z)), float(log_z), ess, n_samples)


# ---------------------------------------------------------------------------
# error metrics


def lambda_baseline(truth: np.ndarray, bounds: Bounds) -> np.ndarray:
    """E[(U - lambda)^2] for U uniform on the altruism bounds."""
    mid = 0.5 * (bounds.lambda_min + bounds.lambda_max)
    return bounds.lambda_width**2 / 12 + (mid - truth) ** 2


def lambda_error(estimate: Sequence[float], truth: Sequence[float], bounds: Bounds = Bounds()) -> float:
    est, tru = np.asarray(estimate, dtype=float), np.asarray(truth, dtype=float)
    if est.size == 0 or est.shape != tru.shape:
        raise ValueError("lambda_error needs equal-length nonempty inputs")
    return float(np.mean((est - tru) ** 2) / np.mean(lambda_baseline(tru, bounds)))


def reward_baseline(truth: np.ndarray, bounds: Bounds) -> np.ndarray:
    """E[(U - r)^2] for U uniform on the reward bounds."""
    lo, hi = bounds.r_min, bounds.r_max
    return (hi**3 - lo**3) / (3 * (hi - lo)) - truth * (hi + lo) + truth**2


def _align(est: np.ndarray, tru: np.ndarray) -> np.ndarray:
    axes = tuple(range(1, est.ndim))
    return est + (tru - est).mean(axis=axes, keepdims=True)


def reward_error(estimate, truth, bounds: Bounds = Bounds(), align: str = "mean_shift") -> float:
    """Rescaled MSE of stacked reward tables (m, S, A); ``mean_shift`` removes per-agent offsets."""
    est, tru = np.asarray(estimate, dtype=float), np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {tru.shape}")
    if align == "mean_shift":
        est = _align(est, tru)
    elif align != "raw":
        raise ValueError(f"unknown alignment {align!r}")
    return float(np.mean((est - tru) ** 2) / np.mean(reward_baseline(tru, bounds)))


def policy_kl(oracle: np.ndarray, candidate: np.ndarray) -> float:
    """Mean over (seats and) states of KL(oracle || candidate); inf on support violation."""
    oracle, candidate = np.asarray(oracle, dtype=float), np.asarray(candidate, dtype=float)
    if oracle.shape != candidate.shape:
        raise ValueError("policy shapes differ")
    return float(np.mean(kl_rows(oracle, candidate)))


@dataclass
class ErrorReport:
    lambda_mse_rescaled: Dict[str, float]
    reward_mse_rescaled: Dict[str, Dict[str, float]]
    baseline_definition: str = (
        "uniform guess over the parameter bounds against the fixed truth: "
        "E[(U-x)^2] = (b-a)^2/12 + ((a+b)/2 - x)^2"
    )

    def to_json(self) -> dict:
        return asdict(self)


def error_report(estimate: Mapping[int, AltruismProfile], truth: Sequence[AltruismProfile],
                 bounds: Bounds = Bounds()) -> ErrorReport:
    agents = range(len(truth))
    l_est = np.array([estimate[k].altruism for k in agents])
    l_tru = np.array([truth[k].altruism for k in agents])
    r_est = np.stack([estimate[k].intrinsic for k in agents])
    r_tru = np.stack([truth[k].intrinsic for k in agents])
    lam = {str(k): lambda_error(l_est[[k]], l_tru[[k]], bounds) for k in agents}
    lam["mean"] = lambda_error(l_est, l_tru, bounds)
    rew = {}
    for align in ("raw", "mean_shift"):
        per = {str(k): reward_error(r_est[[k]], r_tru[[k]], bounds, align) for k in agents}
        per["mean"] = reward_error(r_est, r_tru, bounds, align)
        rew[align] = per
    return ErrorReport(lam, rew)


# ---------------------------------------------------------------------------
# altruism imitation


@dataclass
class Synthesis:
    policy: np.ndarray  # (2, S, A): AI in seat 0, chef in seat 1
    chef_value: float
    converged: bool


def synthesize_partner(
    game: RewardlessGame,
    ai_intrinsic: np.ndarray,
    chef_estimate: np.ndarray,
    target_lambda: float,
    chef_truth: AltruismProfile,
    beta: float,
    solver: Optional[SolverConfig] = None,
    init: Optional[np.ndarray] = None,
) -> Synthesis:
    """QRE of an AI partner (seat 0) with tunable altruism and an egoistic chef (seat 1).

    The AI optimises ``ai_intrinsic + target_lambda * chef_estimate``; the chef
    optimises its true intrinsic reward.  Tables are in each agent's own frame.
    """
    if game.num_players != 2:
        raise ValueError("partner synthesis needs a 2-player game")
    views = game.seat_views if game.has_seat_views else None

    def seat_view(table, seat):
        table = np.asarray(table, dtype=float)
        return table if views is None else table[views[seat]]

    ai = seat_view(ai_intrinsic, 0)
    chef_hat = seat_view(chef_estimate, 1)
    chef = seat_view(chef_truth.intrinsic, 1)

    def seat_reward(pol):
        altruistic = seat_expected_reward(np.stack([ai, chef_hat]), np.array([target_lambda, 0.0]), pol)
        return np.stack([altruistic[0], chef])

    res = solve_qre_seat_rewards(game, seat_reward, beta, solver, init)
    ev = evaluate_seats(game, seat_reward(res.policy), res.policy, beta)
    return Synthesis(res.policy, float(game.initial_dist @ ev.values[1]), res.converged)


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def write_csv(rows: List[dict], path) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
