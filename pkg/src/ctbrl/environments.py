"""Episodic benchmark simulators: mountain car and inverted pendulum.

Both are continuous-state, three-action, episodic domains.  Step functions are
pure in (state, action, generator draw), so episodes replay bit-exactly from a
seed.  Each environment also exposes the pieces planners need: a state-only
reward, a termination predicate, the state box used for uniform sampling, and
the discount factor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["Transition", "EpisodeLog", "EnvSpec", "mountain_car", "pendulum", "run_episode"]


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    terminal: bool


@dataclass
class EpisodeLog:
    transitions: list
    steps: int
    discounted_return: float


@dataclass(frozen=True)
class EnvSpec:
    """Bundle of dynamics and planner-facing structure for one domain."""

    name: str
    state_dim: int
    n_actions: int
    gamma: float
    horizon: int
    state_box: np.ndarray  # (state_dim, 2) low/high, also the sampling box for planners
    step: Callable  # (s, a, rng) -> Transition
    sample_start: Callable  # (rng) -> state
    state_reward: Callable  # (s) -> float, the planner's rho
    is_terminal: Callable  # (s) -> bool
    model_scale: np.ndarray = None  # per-dimension magnitudes for dynamics learners

    def reward(self, s, a, s_next) -> float:
        return self.state_reward(np.asarray(s_next, dtype=float))


# -- mountain car -------------------------------------------------------------

_MC_BOX = np.array([[-1.2, 0.5], [-0.07, 0.07]])


def _mc_terminal(s) -> bool:
    return s[0] >= 0.5


def _mc_reward(s) -> float:
    return 0.0 if _mc_terminal(s) else -1.0


def _mc_step(s, a: int, rng=None) -> Transition:
    """Classic underpowered-car dynamics; the throttle u is a - 1."""
    position, velocity = float(s[0]), float(s[1])
    u = a - 1
    velocity = velocity + 0.001 * u - 0.0025 * np.cos(3.0 * position)
    velocity = min(max(velocity, -0.07), 0.07)
    position = position + velocity
    if position <= -1.2:
        position, velocity = -1.2, 0.0
    if position >= 0.5:
        position = 0.5
        s_next = np.array([position, velocity])
        return Transition(np.asarray(s, dtype=float), a, 0.0, s_next, True)
    s_next = np.array([position, velocity])
    return Transition(np.asarray(s, dtype=float), a, -1.0, s_next, False)


def _mc_start(rng: np.random.Generator) -> np.ndarray:
    return np.array([rng.uniform(-1.2, 0.5), rng.uniform(-0.07, 0.07)])


def mountain_car() -> EnvSpec:
    return EnvSpec(
        name="mountain_car",
        state_dim=2,
        n_actions=3,
        gamma=0.999,
        horizon=1000,
        state_box=_MC_BOX.copy(),
        step=_mc_step,
        sample_start=_mc_start,
        state_reward=_mc_reward,
        is_terminal=_mc_terminal,
        model_scale=np.array([1.0, 0.07]),
    )


# -- inverted pendulum --------------------------------------------------------

_PEND_GRAVITY = 9.8
_PEND_MASS = 2.0
_CART_MASS = 8.0
_PEND_LENGTH = 0.5
_PEND_ALPHA = 1.0 / (_PEND_MASS + _CART_MASS)
_PEND_DT = 0.1
# Planner working region.  Velocities reach past +-7 while falling, but the
# controllable regime lives inside +-1; the equidistant value-function grid
# needs its centers there to resolve it.
_PEND_BOX = np.array([[-np.pi / 2, np.pi / 2], [-1.0, 1.0]])


def pendulum_dynamics(s: np.ndarray, force: float) -> np.ndarray:
    """One explicit-Euler step of the cart-mounted pendulum, no noise."""
    angle, ang_vel = float(s[0]), float(s[1])
    accel = (
        _PEND_GRAVITY * np.sin(angle)
        - _PEND_ALPHA * _PEND_MASS * _PEND_LENGTH * ang_vel**2 * np.sin(2.0 * angle) / 2.0
        - _PEND_ALPHA * np.cos(angle) * force
    ) / (4.0 * _PEND_LENGTH / 3.0 - _PEND_ALPHA * _PEND_MASS * _PEND_LENGTH * np.cos(angle) ** 2)
    return np.array([angle + _PEND_DT * ang_vel, ang_vel + _PEND_DT * accel])


def _pend_terminal(s) -> bool:
    return abs(s[0]) > np.pi / 2


def _pend_reward(s) -> float:
    return -1.0 if _pend_terminal(s) else 0.0


def _pend_step(s, a: int, rng: np.random.Generator) -> Transition:
    """Forces are -50, 0, +50 Newtons plus uniform noise on [-10, 10]."""
    force = 50.0 * (a - 1) + rng.uniform(-10.0, 10.0)
    s_next = pendulum_dynamics(s, force)
    r = _pend_reward(s_next)
    return Transition(np.asarray(s, dtype=float), a, r, s_next, r < 0.0)


def _pend_start(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-0.1, 0.1, size=2)


def pendulum() -> EnvSpec:
    return EnvSpec(
        name="pendulum",
        state_dim=2,
        n_actions=3,
        gamma=0.95,
        horizon=3000,
        state_box=_PEND_BOX.copy(),
        step=_pend_step,
        sample_start=_pend_start,
        state_reward=_pend_reward,
        is_terminal=_pend_terminal,
        model_scale=np.array([np.pi / 2, 6.0]),
    )


ENVIRONMENTS = {"mountain_car": mountain_car, "pendulum": pendulum}


def make_env(name: str) -> EnvSpec:
    try:
        return ENVIRONMENTS[name]()
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")


# -- rollout helper -----------------------------------------------------------

def run_episode(env: EnvSpec, policy, horizon: int, rng: np.random.Generator,
                observer: Callable | None = None, record: bool = True) -> EpisodeLog:
    """Run one episode and log it.

    ``policy`` must expose ``action(s, rng) -> int``.  ``observer``, when
    given, receives every (s, a, s_next) before the next step; agents use it
    to feed their models.  The discounted return uses the environment's gamma.
    """
    if horizon > env.horizon:
        raise ValueError(f"horizon {horizon} exceeds the {env.name} cap of {env.horizon}")
    s = env.sample_start(rng)
    transitions = []
    discounted = 0.0
    steps = 0
    for t in range(horizon):
        a = int(policy.action(s, rng))
        if not 0 <= a < env.n_actions:
            raise ValueError(f"policy returned invalid action {a}")
        tr = env.step(s, a, rng)
        if observer is not None:
            observer(tr.s, tr.a, tr.s_next)
        if record:
            transitions.append(tr)
        discounted += env.gamma**t * tr.r
        steps += 1
        s = tr.s_next
        if tr.terminal:
            break
    return EpisodeLog(transitions=transitions, steps=steps, discounted_return=discounted)
