"""Config-driven experiment pipelines (environment, demos, inference, reports).

Every stage reads and writes plain files in one output directory so stages
can be re-run independently; all randomness comes from named substreams of
a single master seed.
"""

from __future__ import annotations

import copy
import itertools
import json
import logging
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy.stats import spearmanr

from .diagnostics import (
    check_rank_condition,
    error_report,
    estimate_partition,
    policy_kl,
    synthesize_partner,
    write_csv,
    write_json,
)
from .environments import (
    COMPACT_LAYOUT,
    REFERENCE_LAYOUT,
    RandomMgConfig,
    build_kitchen,
    chef_intrinsic_reward,
    generate_random_mg,
    parse_layout,
)
from .game import RewardlessGame, SolverConfig, Trajectory, sample_trajectories, solve_qre_seat_rewards
from .gaps import GapConfig
from .inference import (
    DrpConfig,
    PriorConfig,
    SgldSchedule,
    drp_chain,
    policy_posterior_chain,
    porp_reward_chain,
    posterior_point_estimate,
)
from .rewards import AltruismProfile, Bounds, seat_expected_reward, validate_group

logger = logging.getLogger(__name__)

METHODS = ("drp", "porp_psg", "porp_qig")
LAYOUTS = {"reference": REFERENCE_LAYOUT, "compact": COMPACT_LAYOUT}
CHEF_KINDS = ("deliver", "both", "cook")


def _random_mg_defaults() -> dict:
    return {
        "environment": {
            "kind": "random_mg",
            "num_states": 8,
            "num_actions": 3,
            "num_players": 2,
            "dirichlet_alpha": 0.3,
            "reward_sparsity": None,
            "discount": 0.9,
        },
        "agents": {"count": 4, "lambda_range": [-5.0, 5.0], "profiles": None},
        "groups": "all",
        "demos": {"trajectories": 200, "length": 1000, "beta": 0.1},
        "method": "porp_psg",
        "point_estimate": "mean",
        "prior": {"reward_sigma": None, "policy_sigma": None, "beta_rate": 10.0, "beta_min": 0.05,
                  "bounds": {"r_min": 0.0, "r_max": 1.0, "lambda_min": -5.0, "lambda_max": 5.0}},
        "policy_sgld": {"epsilon_0": 0.2, "alpha": 0.0, "iterations": 1500, "warmup": 500},
        "reward_sgld": {"epsilon_0": 1.5, "alpha": 0.5, "iterations": 2000, "warmup": 1000},
        "drp_sgld": {"epsilon_0": 0.1, "alpha": 0.05, "iterations": 1000, "warmup": 500},
        "drp": {"unroll": 50, "damping": 0.5},
        "gap": {"psg": 500.0, "qig": 50000.0},
        "solver": {"damping": 0.5, "max_iters": 5000, "tolerance": 1e-12, "adaptive": True},
        "imitate": {"ai_agent": 0, "chef_agent": 1, "targets": [-1.0, -0.5, 0.0, 0.5, 1.0, 2.0]},
        "z_study": {"policies": 50, "n_samples": 20000, "proposal_sigma2": 0.16, "gap_kind": "psg"},
        "seed": 0,
    }


def _kitchen_overrides() -> dict:
    return {
        "environment": {"kind": "kitchen", "layout": "compact", "discount": 0.9},
        "agents": {"count": 3, "lambda_range": [-0.25, 0.0], "profiles": None, "chefs": list(CHEF_KINDS)},
        "demos": {"trajectories": 1000, "length": 1000, "beta": 0.05},
        "prior": {"beta_min": 0.03, "policy_sigma": 1 / 40},
        "reward_sgld": {"epsilon_0": 5.0},
    }


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class ExperimentConfig:
    """Thin wrapper over a canonical JSON document with every default filled in."""

    doc: dict

    @classmethod
    def from_dict(cls, doc: Optional[dict] = None) -> "ExperimentConfig":
        doc = doc or {}
        kind = doc.get("environment", {}).get("kind", "random_mg")
        if kind not in ("random_mg", "kitchen"):
            raise ValueError(f"unknown environment kind {kind!r}")
        base = _random_mg_defaults()
        if kind == "kitchen":
            base = _merge(base, _kitchen_overrides())
            base["environment"] = {k: base["environment"][k] for k in ("kind", "layout", "discount")}
        merged = _merge(base, doc)
        if merged["method"] not in METHODS:
            raise ValueError(f"unknown method {merged['method']!r}; expected one of {METHODS}")
        prior = merged["prior"]
        if prior["reward_sigma"] is None:
            prior["reward_sigma"] = 1 / 40 if merged["method"] == "drp" else 1 / 6
        return cls(merged)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_json(self) -> dict:
        return copy.deepcopy(self.doc)

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        doc = self.to_json()
        for key, value in kwargs.items():
            if value is not None:
                doc[key] = value
        if "method" in kwargs and kwargs["method"] is not None:
            doc["prior"]["reward_sigma"] = None
        return ExperimentConfig.from_dict(doc)

    def __getitem__(self, key):
        return self.doc[key]

    @property
    def kind(self) -> str:
        return self.doc["environment"]["kind"]

    @property
    def bounds(self) -> Bounds:
        return Bounds(**self.doc["prior"]["bounds"])

    def prior(self) -> PriorConfig:
        p = self.doc["prior"]
        return PriorConfig(p["reward_sigma"], p["policy_sigma"], self.bounds, p["beta_rate"], p["beta_min"])

    def schedule(self, name: str) -> SgldSchedule:
        return SgldSchedule(**self.doc[name])

    def solver(self) -> SolverConfig:
        return SolverConfig(**self.doc["solver"])

    def gap(self, kind: str) -> GapConfig:
        return GapConfig(kind, self.doc["gap"][kind])

    def seed(self, stream: str, *extra: int) -> List[int]:
        """Named substream of the master seed."""
        return [int(self.doc["seed"]), zlib.crc32(stream.encode())] + [int(x) for x in extra]


# ---------------------------------------------------------------------------
# groups and budgets


def resolve_groups(selector, num_agents: int, size: int) -> List[tuple]:
    if isinstance(selector, str):
        every = list(itertools.combinations(range(num_agents), size))
        if selector == "all":
            return every
        if selector.startswith("first:"):
            return every[: int(selector.split(":", 1)[1])]
        raise ValueError(f"unknown group selector {selector!r}")
    return [validate_group(g, num_agents, size) for g in selector]


def split_budget(total: int, num_groups: int) -> List[int]:
    """Even split; counts differ by at most one, earlier groups get the remainder."""
    if num_groups < 1:
        raise ValueError("need at least one group")
    base, extra = divmod(int(total), num_groups)
    return [base + (1 if g < extra else 0) for g in range(num_groups)]


# ---------------------------------------------------------------------------
# environment


@dataclass
class Environment:
    game: RewardlessGame
    profiles: List[AltruismProfile]
    groups: List[tuple]
    codec: object = None


def build_environment(cfg: ExperimentConfig) -> Environment:
    env = cfg["environment"]
    agents = cfg["agents"]
    codec = None
    if cfg.kind == "random_mg":
        mg = RandomMgConfig(
            num_states=env["num_states"], num_actions=env["num_actions"], num_players=env["num_players"],
            num_agents=agents["count"], dirichlet_alpha=env["dirichlet_alpha"],
            reward_sparsity=env["reward_sparsity"], discount=env["discount"],
            lambda_range=tuple(agents["lambda_range"]), seed=cfg.seed("env"),
        )
        game, profiles = generate_random_mg(mg)
        n = game.num_players
    else:
        layout = env["layout"]
        text = LAYOUTS[layout] if layout in LAYOUTS else Path(layout).read_text()
        game, codec = build_kitchen(parse_layout(text), env["discount"])
        rng = np.random.default_rng(cfg.seed("env"))
        lo, hi = agents["lambda_range"]
        kinds = agents.get("chefs", list(CHEF_KINDS))[: agents["count"]]
        lams = rng.uniform(lo, hi, size=len(kinds))
        profiles = [AltruismProfile(chef_intrinsic_reward(codec, k), float(l)) for k, l in zip(kinds, lams)]
        n = 2
    if agents.get("profiles"):
        with open(agents["profiles"]) as fh:
            profiles = [AltruismProfile.from_json(d) for d in json.load(fh)]
    groups = resolve_groups(cfg["groups"], len(profiles), n)
    return Environment(game, profiles, groups, codec)


def _profiles_json(profiles) -> list:
    return [p.to_json(k) for k, p in enumerate(profiles)]


def load_profiles(path) -> List[AltruismProfile]:
    with open(path) as fh:
        return [AltruismProfile.from_json(d) for d in json.load(fh)]


def cmd_gen_env(cfg: ExperimentConfig, out: Path) -> Environment:
    out.mkdir(parents=True, exist_ok=True)
    env = build_environment(cfg)
    env.game.save(out / "game.json")
    write_json(_profiles_json(env.profiles), out / "profiles.json")
    manifest = {
        "config": cfg.to_json(),
        "num_states": env.game.num_states,
        "num_actions": env.game.num_actions,
        "num_players": env.game.num_players,
        "groups": [list(g) for g in env.groups],
        "seeds": {"env": cfg.seed("env")},
    }
    write_json(manifest, out / "manifest.json")
    if env.codec is not None:
        env.codec.dump_manifest(out / "kitchen_states.json")
    return env


def load_environment(cfg: ExperimentConfig, out: Path) -> Environment:
    game = RewardlessGame.load(out / "game.json")
    profiles = load_profiles(out / "profiles.json")
    with open(out / "manifest.json") as fh:
        groups = [tuple(g) for g in json.load(fh)["groups"]]
    return Environment(game, profiles, groups)


# ---------------------------------------------------------------------------
# demonstrations


def group_seat_reward(game: RewardlessGame, profiles, group):
    """Seat-expected reward function of a group's true altruism-structured rewards."""
    views = game.seat_views if game.has_seat_views else None
    members = list(group)
    tables = [np.asarray(profiles[k].intrinsic, dtype=float) for k in members]
    if views is not None:
        tables = [t[views[j]] for j, t in enumerate(tables)]
    intrinsic = np.stack(tables)
    altruism = np.array([profiles[k].altruism for k in members])
    return lambda pol: seat_expected_reward(intrinsic, altruism, pol)


def true_equilibria(env: Environment, beta: float, solver: SolverConfig) -> Dict[tuple, np.ndarray]:
    out = {}
    for g in env.groups:
        res = solve_qre_seat_rewards(env.game, group_seat_reward(env.game, env.profiles, g), beta, solver)
        if not res.converged:
            raise RuntimeError(f"QRE failed for group {list(g)} (residual {res.residual:.2e})")
        out[g] = res.policy
    return out


def generate_demos(cfg: ExperimentConfig, env: Environment) -> Dict[tuple, List[Trajectory]]:
    d = cfg["demos"]
    eq = true_equilibria(env, d["beta"], cfg.solver())
    counts = split_budget(d["trajectories"], len(env.groups))
    return {
        g: sample_trajectories(env.game, eq[g], d["length"], counts[gi], cfg.seed("demos", gi))
        for gi, g in enumerate(env.groups)
    }


def write_demos(demos: Dict[tuple, List[Trajectory]], path: Path) -> None:
    with open(path, "w") as fh:
        for g, trajs in demos.items():
            for k, tr in enumerate(trajs):
                rec = {"group": list(g), "trajectory_index": k,
                       "steps": [[s, list(a)] for s, a in tr.steps]}
                fh.write(json.dumps(rec) + "\n")


def read_demos(path: Path) -> Dict[tuple, List[Trajectory]]:
    demos: Dict[tuple, List[Trajectory]] = {}
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            steps = rec["steps"]
            tr = Trajectory(np.array([s for s, _ in steps], dtype=np.int64),
                            np.array([a for _, a in steps], dtype=np.int64))
            demos.setdefault(tuple(rec["group"]), []).append(tr)
    return demos


def cmd_gen_demos(cfg: ExperimentConfig, out: Path) -> Dict[tuple, List[Trajectory]]:
    env = load_environment(cfg, out)
    demos = generate_demos(cfg, env)
    write_demos(demos, out / "demos.jsonl")
    return demos


# ---------------------------------------------------------------------------
# inference


def policy_samples(cfg: ExperimentConfig, game: RewardlessGame, demos) -> Dict[tuple, np.ndarray]:
    shape = (game.num_players, game.num_states, game.num_actions)
    out = {}
    for gi, (g, trajs) in enumerate(demos.items()):
        chain = policy_posterior_chain(
            trajs, shape, cfg.prior(), cfg.schedule("policy_sgld"), cfg.seed("policy", gi), g
        )
        out[g] = chain.policies
    return out


@dataclass
class InferenceResult:
    chain: object
    estimate: Dict[int, AltruismProfile]
    seconds: float
    policy_samples: Optional[Dict[tuple, np.ndarray]] = None


def run_inference(cfg: ExperimentConfig, game: RewardlessGame, demos, num_agents: int) -> InferenceResult:
    start = time.perf_counter()
    method = cfg["method"]
    seed = int(np.random.SeedSequence(cfg.seed("chain")).generate_state(1)[0])
    samples = None
    if method == "drp":
        d = cfg["drp"]
        chain = drp_chain(
            game, demos, cfg.prior(), cfg.schedule("drp_sgld"), num_agents, seed,
            DrpConfig(d["unroll"], d["damping"], cfg.solver()),
        )
    else:
        samples = policy_samples(cfg, game, demos)
        kind = method.split("_", 1)[1]
        chain = porp_reward_chain(
            game, samples, cfg.gap(kind), cfg.prior(), cfg.schedule("reward_sgld"), num_agents, seed
        )
    estimate = posterior_point_estimate(chain, cfg["point_estimate"])
    return InferenceResult(chain, estimate, time.perf_counter() - start, samples)


def cmd_infer(cfg: ExperimentConfig, out: Path) -> InferenceResult:
    env = load_environment(cfg, out)
    demos = read_demos(out / "demos.jsonl")
    res = run_inference(cfg, env.game, demos, len(env.profiles))
    method = cfg["method"]
    res.chain.write_jsonl(out / f"chain_{method}.jsonl")
    est = {"method": method, "point_estimate": cfg["point_estimate"],
           "profiles": _profiles_json([res.estimate[k] for k in sorted(res.estimate)])}
    write_json(est, out / f"estimate_{method}.json")
    # wall-clock is the only run-to-run varying output, kept in its own file
    write_json({"method": method, "seconds": res.seconds, "draws": len(res.chain)},
               out / f"timing_{method}.json")
    return res


def load_estimate(out: Path, method: str) -> List[AltruismProfile]:
    with open(out / f"estimate_{method}.json") as fh:
        return [AltruismProfile.from_json(d) for d in json.load(fh)["profiles"]]


# ---------------------------------------------------------------------------
# reports


def cmd_evaluate(cfg: ExperimentConfig, out: Path, estimate=None, truth=None) -> dict:
    truth = truth if truth is not None else load_profiles(out / "profiles.json")
    estimate = estimate if estimate is not None else load_estimate(out, cfg["method"])
    report = error_report(dict(enumerate(estimate)), truth, cfg.bounds).to_json()
    report["method"] = cfg["method"]
    write_json(report, out / f"errors_{cfg['method']}.json")
    return report


def rank_reports(env: Environment, beta: float, solver: SolverConfig) -> List[dict]:
    eq = {}
    for gi, g in enumerate(env.groups):
        eq[gi] = solve_qre_seat_rewards(
            env.game, group_seat_reward(env.game, env.profiles, g), beta, solver
        ).policy
    reports = []
    for agent in range(len(env.profiles)):
        holding = [gi for gi, g in enumerate(env.groups) if agent in g]
        for a, b in itertools.combinations(holding, 2):
            ga, gb = env.groups[a], env.groups[b]
            # agent must sit in the same seat frame in both groups
            rep = check_rank_condition(
                env.game, eq[a], _reseat(eq[b], gb.index(agent), ga.index(agent)),
                ga.index(agent), agent, (ga, gb),
            )
            reports.append(rep.to_json())
    return reports


def _reseat(policy: np.ndarray, src: int, dst: int) -> np.ndarray:
    if src == dst:
        return policy
    order = list(range(policy.shape[0]))
    order[src], order[dst] = order[dst], order[src]
    return policy[order]


def cmd_rank_check(cfg: ExperimentConfig, out: Path) -> List[dict]:
    env = load_environment(cfg, out)
    if not isinstance(cfg["groups"], str):
        env.groups = [tuple(sorted(g)) for g in cfg["groups"]]
    reports = rank_reports(env, cfg["demos"]["beta"], cfg.solver())
    write_json(reports, out / "rank.json")
    return reports


def cmd_z_study(cfg: ExperimentConfig, out: Path) -> List[dict]:
    env = load_environment(cfg, out)
    demos = read_demos(out / "demos.jsonl")
    z = cfg["z_study"]
    g = env.groups[0]
    shape = (env.game.num_players, env.game.num_states, env.game.num_actions)
    chain = policy_posterior_chain(
        demos[g], shape, cfg.prior(), cfg.schedule("policy_sgld"), cfg.seed("policy", 0), g
    )
    picks = np.linspace(0, len(chain) - 1, z["policies"]).round().astype(int)
    gap_cfg = cfg.gap(z["gap_kind"])
    rows = []
    for k, idx in enumerate(picks):
        # common proposal draws across policies
        est = estimate_partition(
            env.game, dict(enumerate(env.profiles)), g, chain.policies[idx], gap_cfg, cfg["demos"]["beta"],
            z["n_samples"], z["proposal_sigma2"], cfg.bounds, rng=cfg.seed("z_study"),
        )
        rows.append({"policy_index": int(idx), "Z_estimate": est.value, "gap_kind": gap_cfg.kind})
    write_csv(rows, out / "z_study.csv")
    values = np.array([r["Z_estimate"] for r in rows])
    summary = {"group": list(g), "max_over_min": float(values.max() / values.min()),
               "num_policies": len(rows)}
    write_json(summary, out / "z_study.json")
    return rows


def imitation_rows(cfg: ExperimentConfig, env: Environment, estimate, label: str) -> List[dict]:
    im = cfg["imitate"]
    ai, chef = im["ai_agent"], im["chef_agent"]
    beta = cfg["demos"]["beta"]
    truth = env.profiles
    rows = []
    for target in im["targets"]:
        oracle = synthesize_partner(env.game, truth[ai].intrinsic, truth[chef].intrinsic, target,
                                    truth[chef], beta, cfg.solver())
        cand = synthesize_partner(env.game, estimate[ai].intrinsic, estimate[chef].intrinsic, target,
                                  truth[chef], beta, cfg.solver())
        rows.append({"target_lambda": float(target), "chef_value": cand.chef_value,
                     "oracle_chef_value": oracle.chef_value,
                     "kl_to_oracle": policy_kl(oracle.policy, cand.policy), "method": label})
    return rows


def imitation_summary(rows: List[dict]) -> dict:
    targets = [r["target_lambda"] for r in rows]
    values = [r["chef_value"] for r in rows]
    rho = spearmanr(targets, values).statistic if len(set(values)) > 1 else 0.0
    return {"spearman": float(rho), "mean_kl": float(np.mean([r["kl_to_oracle"] for r in rows]))}


def cmd_imitate(cfg: ExperimentConfig, out: Path) -> List[dict]:
    env = load_environment(cfg, out)
    rows = imitation_rows(cfg, env, env.profiles, "oracle")
    path = out / f"estimate_{cfg['method']}.json"
    if path.exists():
        rows += imitation_rows(cfg, env, load_estimate(out, cfg["method"]), cfg["method"])
    write_csv(rows, out / "imitation.csv")
    return rows
