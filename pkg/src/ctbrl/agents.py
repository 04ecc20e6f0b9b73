"""Episodic agents and experiment protocols.

Four agents share the harness: the tree agent (posterior-sampled piecewise
model plus policy iteration each episode), its global-linear special case (a
tree capped at the root), and epsilon-greedy LSPI in online and offline
variants.  Online runs act with the current policy while feeding every
transition to the learner; offline runs train once on uniform-policy rollouts
and evaluate a frozen policy.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adp import (
    ADPConfig,
    EpsilonGreedyPolicy,
    GreedyQPolicy,
    UniformPolicy,
    approximate_policy_iteration,
    default_basis,
    lstdq_lspi,
)
from .context_tree import GeneralizedContextTree
from .environments import EnvSpec, run_episode
from .errors import NumericalError

__all__ = [
    "AgentConfig",
    "EpisodeStats",
    "RunResult",
    "ctbrl_online",
    "ctbrl_offline",
    "lbrl_online",
    "lbrl_offline",
    "lspi_online",
    "lspi_offline",
    "run_agent",
    "first_sustained",
]

AGENT_KINDS = ("ctbrl", "lbrl", "lspi_online", "lspi_offline")


@dataclass
class AgentConfig:
    env: EnvSpec
    adp: ADPConfig
    prior_scale: float = 1.0
    prior_input_scale: float = 1.0
    zoom: float = 2.0
    depth_cap: Optional[int] = None
    dof_mode: str = "paper"
    epsilon_decay: float = 0.997
    eval_episodes: int = 10
    rollout_horizon: int = 40
    record_transitions: bool = False
    keep_checkpoint: bool = False

    def __post_init__(self):
        if not 0.0 < self.epsilon_decay <= 1.0:
            raise ValueError("epsilon_decay must lie in (0, 1]")


@dataclass(frozen=True)
class EpisodeStats:
    steps: int
    discounted_return: float


@dataclass
class RunResult:
    episodes: list
    wall: dict
    n_model_samples: int = 0
    n_adp_calls: int = 0
    warnings: list = field(default_factory=list)
    transitions: Optional[list] = None
    checkpoint: Optional[dict] = None

    @property
    def steps(self) -> list:
        return [e.steps for e in self.episodes]


def first_sustained(steps: list, target: int, window: int) -> Optional[int]:
    """1-based index of the first episode opening a window of full-length runs."""
    run = 0
    for i, s in enumerate(steps):
        run = run + 1 if s >= target else 0
        if run >= window:
            return i - window + 2
    return None


def _make_tree(cfg: AgentConfig, depth_cap: Optional[int]) -> GeneralizedContextTree:
    from .bayes_linear import MNIWPosterior

    env = cfg.env
    prior = MNIWPosterior.default_prior(
        env.state_dim, env.state_dim + 1,
        scale=cfg.prior_scale, input_scale=cfg.prior_input_scale,
    )
    return GeneralizedContextTree(
        n_actions=env.n_actions,
        state_dim=env.state_dim,
        prior=prior,
        zoom=cfg.zoom,
        depth_cap=depth_cap,
        dof_mode=cfg.dof_mode,
        state_scale=env.model_scale,
    )


def _plan_from_posterior(tree, cfg: AgentConfig, basis, rng, prev_omega, result: RunResult, episode: int):
    """Thompson step: one model draw, one policy-iteration call, with fallback."""
    env = cfg.env
    t0 = time.perf_counter()
    mdp = tree.sample_mdp(
        env.reward, env.gamma, rng,
        terminal_fn=env.is_terminal, state_box=env.state_box, state_reward=env.state_reward,
    )
    result.n_model_samples += 1
    try:
        policy = approximate_policy_iteration(mdp, basis, cfg.adp, rng, init_omega=prev_omega)
        result.n_adp_calls += 1
        result.wall["plan_s"] = result.wall.get("plan_s", 0.0) + time.perf_counter() - t0
        return policy, policy.omega
    except NumericalError as exc:
        result.n_adp_calls += 1
        result.warnings.append(f"episode {episode}: planning failed ({exc}); keeping previous policy")
        result.wall["plan_s"] = result.wall.get("plan_s", 0.0) + time.perf_counter() - t0
        return None, prev_omega


def _tree_online(cfg: AgentConfig, n_episodes: int, rng, depth_cap, stop_when_sustained=None) -> RunResult:
    env = cfg.env
    tree = _make_tree(cfg, depth_cap)
    basis = default_basis(env)
    result = RunResult(episodes=[], wall={})
    if cfg.record_transitions:
        result.transitions = []

    policy = UniformPolicy(env.n_actions)
    prev_omega = None
    t_start = time.perf_counter()
    for episode in range(1, n_episodes + 1):
        def observe(s, a, s_next):
            tree.observe(s, a, s_next)
            if result.transitions is not None:
                result.transitions.append((s, a, s_next))

        log = run_episode(env, policy, env.horizon, rng, observer=observe, record=False)
        result.episodes.append(EpisodeStats(log.steps, log.discounted_return))
        new_policy, prev_omega = _plan_from_posterior(tree, cfg, basis, rng, prev_omega, result, episode)
        if new_policy is not None:
            policy = new_policy
        if stop_when_sustained is not None:
            target, window = stop_when_sustained
            if first_sustained(result.steps, target, window) is not None:
                break
    result.wall["total_s"] = time.perf_counter() - t_start
    if cfg.keep_checkpoint:
        result.checkpoint = tree.to_checkpoint()
    return result


def _tree_offline(cfg: AgentConfig, k_rollouts: int, rng, depth_cap) -> RunResult:
    env = cfg.env
    tree = _make_tree(cfg, depth_cap)
    basis = default_basis(env)
    result = RunResult(episodes=[], wall={})
    if cfg.record_transitions:
        result.transitions = []

    t0 = time.perf_counter()
    uniform = UniformPolicy(env.n_actions)
    for _ in range(k_rollouts):
        def observe(s, a, s_next):
            tree.observe(s, a, s_next)
            if result.transitions is not None:
                result.transitions.append((s, a, s_next))

        run_episode(env, uniform, cfg.rollout_horizon, rng, observer=observe, record=False)
    result.wall["train_s"] = time.perf_counter() - t0

    policy, _ = _plan_from_posterior(tree, cfg, basis, rng, None, result, episode=0)
    if policy is None:
        policy = uniform

    t0 = time.perf_counter()
    for _ in range(cfg.eval_episodes):
        log = run_episode(env, policy, env.horizon, rng, record=False)
        result.episodes.append(EpisodeStats(log.steps, log.discounted_return))
    result.wall["eval_s"] = time.perf_counter() - t0
    if cfg.keep_checkpoint:
        result.checkpoint = tree.to_checkpoint()
    return result


def ctbrl_online(cfg: AgentConfig, n_episodes: int, rng, stop_when_sustained=None) -> RunResult:
    """Posterior-sampling tree agent, acting greedily between episode boundaries."""
    return _tree_online(cfg, n_episodes, rng, cfg.depth_cap, stop_when_sustained)


def lbrl_online(cfg: AgentConfig, n_episodes: int, rng, stop_when_sustained=None) -> RunResult:
    """Single global linear model per action: the tree agent capped at its root."""
    return _tree_online(cfg, n_episodes, rng, 0, stop_when_sustained)


def ctbrl_offline(cfg: AgentConfig, k_rollouts: int, rng) -> RunResult:
    """Train on k uniform rollouts, then evaluate one Thompson-planned policy.

    With k = 0 the model is a pure prior draw; planning still returns a policy.
    """
    return _tree_offline(cfg, k_rollouts, rng, cfg.depth_cap)


def lbrl_offline(cfg: AgentConfig, k_rollouts: int, rng) -> RunResult:
    return _tree_offline(cfg, k_rollouts, rng, 0)


def lspi_online(cfg: AgentConfig, n_episodes: int, rng, stop_when_sustained=None) -> RunResult:
    """Epsilon-greedy LSPI: replay buffer grows forever, epsilon decays per episode."""
    env = cfg.env
    basis = default_basis(env)
    result = RunResult(episodes=[], wall={})
    buffer = []
    q_policy = None
    t_start = time.perf_counter()
    for episode in range(1, n_episodes + 1):
        epsilon = cfg.epsilon_decay ** (episode - 1)
        base = q_policy if q_policy is not None else UniformPolicy(env.n_actions)
        acting = EpsilonGreedyPolicy(base, env.n_actions, epsilon)
        log = run_episode(env, acting, env.horizon, rng, record=True)
        buffer.extend(log.transitions)
        result.episodes.append(EpisodeStats(log.steps, log.discounted_return))
        t0 = time.perf_counter()
        try:
            q_policy = lstdq_lspi(buffer, basis, env.n_actions, cfg.adp)
        except NumericalError as exc:
            result.warnings.append(f"episode {episode}: LSTDQ failed ({exc}); keeping previous policy")
        result.n_adp_calls += 1
        result.wall["plan_s"] = result.wall.get("plan_s", 0.0) + time.perf_counter() - t0
        if stop_when_sustained is not None:
            target, window = stop_when_sustained
            if first_sustained(result.steps, target, window) is not None:
                break
    result.wall["total_s"] = time.perf_counter() - t_start
    return result


def lspi_offline(cfg: AgentConfig, k_rollouts: int, rng) -> RunResult:
    """LSPI on a fixed batch of uniform-policy rollouts."""
    env = cfg.env
    basis = default_basis(env)
    result = RunResult(episodes=[], wall={})
    data = []
    t0 = time.perf_counter()
    uniform = UniformPolicy(env.n_actions)
    for _ in range(k_rollouts):
        data.extend(run_episode(env, uniform, cfg.rollout_horizon, rng).transitions)
    result.wall["train_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if data:
        try:
            policy = lstdq_lspi(data, basis, env.n_actions, cfg.adp)
        except NumericalError as exc:
            result.warnings.append(f"LSTDQ failed ({exc}); evaluating uniform policy")
            policy = uniform
    else:
        policy = GreedyQPolicy(np.zeros((env.n_actions, basis.dim)), basis)
    result.n_adp_calls += 1
    result.wall["plan_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    for _ in range(cfg.eval_episodes):
        log = run_episode(env, policy, env.horizon, rng, record=False)
        result.episodes.append(EpisodeStats(log.steps, log.discounted_return))
    result.wall["eval_s"] = time.perf_counter() - t0
    return result


def run_agent(kind: str, protocol: str, cfg: AgentConfig, x: int, rng) -> RunResult:
    """Dispatch one (agent, protocol) run; x is episodes online or rollouts offline."""
    table = {
        ("ctbrl", "online"): ctbrl_online,
        ("ctbrl", "offline"): ctbrl_offline,
        ("lbrl", "online"): lbrl_online,
        ("lbrl", "offline"): lbrl_offline,
        ("lspi_online", "online"): lspi_online,
        ("lspi_offline", "offline"): lspi_offline,
        ("lspi", "online"): lspi_online,
        ("lspi", "offline"): lspi_offline,
    }
    try:
        fn = table[(kind, protocol)]
    except KeyError:
        raise ValueError(f"no agent {kind!r} for protocol {protocol!r}")
    return fn(cfg, x, rng)
