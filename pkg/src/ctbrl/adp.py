"""Value-function machinery on radial-basis features.

Contains LSTD policy evaluation against a sampled model, Monte-Carlo action
values, approximate policy iteration, and LSTDQ-based policy iteration on a
fixed transition buffer (the model-free baseline).  All linear solves carry a
ridge term and raise :class:`NumericalError` on failure.

Planners treat episodic termination as absorption: a terminal next state
contributes its immediate state reward and no continuation value, which is how
fall penalties and goal rewards enter the Bellman targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

__all__ = [
    "ADPConfig",
    "RBFBasis",
    "UniformPolicy",
    "GreedyModelPolicy",
    "GreedyQPolicy",
    "EpsilonGreedyPolicy",
    "lstd_evaluate",
    "approximate_q",
    "approximate_policy_iteration",
    "lstdq_lspi",
]


@dataclass
class ADPConfig:
    """Knobs for policy evaluation and iteration.

    n_states uniform states are drawn per planning problem, k_lstd model
    samples estimate each expectation, and the m-by-m solves are regularised
    by ridge.  Iteration stops after api_iterations sweeps or when the weight
    vector moves less than tol.
    """

    gamma: float
    n_states: int = 3000
    api_iterations: int = 25
    k_lstd: int = 1
    ridge: float = 1e-6
    tol: float = 1e-6

    def __post_init__(self):
        if self.k_lstd < 1:
            raise ValueError("k_lstd must be at least 1")
        if min(self.n_states, self.api_iterations) < 1 or self.ridge <= 0:
            raise ValueError("n_states, api_iterations and ridge must be positive")


class RBFBasis:
    """Gaussian bumps on an equidistant grid over the normalised state box.

    States are mapped to [0, 1]^d through the box before featurisation; the
    bandwidth equals the spacing between adjacent centers.  An optional
    constant feature is appended last.
    """

    def __init__(self, centers: np.ndarray, bandwidth: float, state_box: np.ndarray, constant: bool = False):
        self.centers = np.asarray(centers, dtype=float)
        self.bandwidth = float(bandwidth)
        self.state_box = np.asarray(state_box, dtype=float)
        self.constant = constant

    @classmethod
    def grid(cls, state_box, per_dim: int, constant: bool = False) -> "RBFBasis":
        state_box = np.asarray(state_box, dtype=float)
        d = state_box.shape[0]
        axes = [np.linspace(0.0, 1.0, per_dim)] * d
        mesh = np.meshgrid(*axes, indexing="ij")
        centers = np.stack([m.ravel() for m in mesh], axis=1)
        return cls(centers, bandwidth=1.0 / (per_dim - 1), state_box=state_box, constant=constant)

    @property
    def dim(self) -> int:
        return self.centers.shape[0] + int(self.constant)

    def features_batch(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        lo, hi = self.state_box[:, 0], self.state_box[:, 1]
        unit = (states - lo) / (hi - lo)
        sq = ((unit[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        phi = np.exp(-sq / (2.0 * self.bandwidth**2))
        if self.constant:
            phi = np.hstack([phi, np.ones((phi.shape[0], 1))])
        return phi

    def features(self, s) -> np.ndarray:
        return self.features_batch(np.asarray(s, dtype=float)[None, :])[0]

    def describe(self) -> dict:
        return {
            "centers": self.centers.tolist(),
            "bandwidth": self.bandwidth,
            "state_box": self.state_box.tolist(),
            "constant": self.constant,
        }

    @classmethod
    def from_description(cls, rec: dict) -> "RBFBasis":
        return cls(
            np.asarray(rec["centers"], dtype=float),
            rec["bandwidth"],
            np.asarray(rec["state_box"], dtype=float),
            rec["constant"],
        )


def default_basis(env) -> RBFBasis:
    """Per-domain value-function grids.

    The pendulum uses a 3x3 grid and the car a 4x4 grid, each with a constant
    feature.  State values here are discounted sums of rewards in {-1, 0};
    without the constant the basis cannot carry the negative level and policy
    evaluation collapses.
    """
    per_dim = 4 if env.name == "mountain_car" else 3
    return RBFBasis.grid(env.state_box, per_dim=per_dim, constant=True)


# -- policies -----------------------------------------------------------------

def _argmax_with_uniform_ties(values: np.ndarray, rng: np.random.Generator) -> int:
    best = np.flatnonzero(values == values.max())
    if best.size == 1:
        return int(best[0])
    return int(rng.choice(best))


def _argmax_rows_uniform(q: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row-wise argmax choosing uniformly among exact ties."""
    mask = q == q.max(axis=1, keepdims=True)
    scores = np.where(mask, rng.random(q.shape), -1.0)
    return np.argmax(scores, axis=1)


class UniformPolicy:
    def __init__(self, n_actions: int):
        self.n_actions = n_actions

    def action(self, s, rng) -> int:
        return int(rng.integers(self.n_actions))

    def actions_batch(self, states, rng) -> np.ndarray:
        return rng.integers(self.n_actions, size=len(states))


class GreedyModelPolicy:
    """Greedy in the Monte-Carlo action values of a sampled model."""

    def __init__(self, mdp, omega: np.ndarray, basis: RBFBasis, cfg: ADPConfig):
        self.mdp = mdp
        self.omega = np.asarray(omega, dtype=float)
        self.basis = basis
        self.cfg = cfg

    def action(self, s, rng) -> int:
        s = np.asarray(s, dtype=float).ravel()
        mdp = self.mdp
        if not hasattr(mdp, "parameters") or mdp.terminal_fn(s):
            q = np.array([approximate_q(mdp, self.omega, self.basis, s, a, self.cfg, rng)
                          for a in range(mdp.n_actions)])
            return _argmax_with_uniform_ties(q, rng)
        # Fast path for sampled models: the k noise variates are shared across
        # actions, so the comparison noise cancels where contexts coincide.
        k = self.cfg.k_lstd
        if getattr(mdp, "noise_free", False):
            noise = np.zeros((k, s.size))
        else:
            noise = rng.standard_normal((k, s.size))
        x = np.concatenate([s, [1.0]])
        rho = float(mdp.state_reward(s))
        q = np.empty(mdp.n_actions)
        for a in range(mdp.n_actions):
            design, chol = mdp.parameters(s, a)
            nxt = design @ x + noise @ chol.T
            term = np.array([bool(mdp.terminal_fn(row)) for row in nxt])
            vals = np.where(
                term,
                np.array([mdp.state_reward(row) for row in nxt]),
                self.basis.features_batch(nxt) @ self.omega,
            )
            q[a] = rho + self.cfg.gamma * float(vals.mean())
        return _argmax_with_uniform_ties(q, rng)

    def actions_batch(self, states, rng) -> np.ndarray:
        q = _q_matrix(self.mdp, self.omega, self.basis, states, self.cfg, rng)
        return _argmax_rows_uniform(q, rng)


class GreedyQPolicy:
    """Greedy in per-action linear action values (the LSTDQ policy)."""

    def __init__(self, weights: np.ndarray, basis: RBFBasis):
        self.weights = np.asarray(weights, dtype=float)  # (n_actions, dim)
        self.basis = basis

    @property
    def n_actions(self) -> int:
        return self.weights.shape[0]

    def action(self, s, rng) -> int:
        q = self.weights @ self.basis.features(s)
        return _argmax_with_uniform_ties(q, rng)

    def actions_batch(self, states, rng) -> np.ndarray:
        q = self.basis.features_batch(states) @ self.weights.T
        return _argmax_rows_uniform(q, rng)


class EpsilonGreedyPolicy:
    """Explores uniformly with probability epsilon, else defers to the base."""

    def __init__(self, base, n_actions: int, epsilon: float = 1.0):
        self.base = base
        self.n_actions = n_actions
        self.epsilon = epsilon

    def action(self, s, rng) -> int:
        if rng.random() < self.epsilon:
            return int(rng.integers(self.n_actions))
        return self.base.action(s, rng)


# -- policy evaluation ----------------------------------------------------------

def _solve_ridge(a_mat: np.ndarray, b: np.ndarray, ridge: float) -> np.ndarray:
    try:
        out = np.linalg.solve(a_mat + ridge * np.eye(a_mat.shape[0]), b)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular system in least-squares solve") from exc
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite weights from least-squares solve")
    return out


def _next_state_terms(mdp, states, actions, basis, cfg, rng):
    """Averaged next-state features and terminal rewards for each state.

    Returns (phi_next, extra_reward): phi_next rows average the features of
    non-terminal sampled successors; extra_reward rows average the state
    rewards of terminal successors.  Rows for terminal source states are zero.
    """
    n = len(states)
    phi_next = np.zeros((n, basis.dim))
    extra = np.zeros(n)
    live = ~np.array([bool(mdp.terminal_fn(s)) for s in states])
    if not live.any():
        return phi_next, extra, live
    idx = np.flatnonzero(live)
    for _ in range(cfg.k_lstd):
        nxt = np.empty((idx.size, states.shape[1]))
        for a in range(mdp.n_actions):
            rows = actions[idx] == a
            if rows.any():
                nxt[rows] = mdp.step_batch(states[idx[rows]], a, rng)
        term = np.array([bool(mdp.terminal_fn(s)) for s in nxt])
        if (~term).any():
            phi_next[idx[~term]] += basis.features_batch(nxt[~term])
        if term.any():
            extra[idx[term]] += np.array([mdp.state_reward(s) for s in nxt[term]])
    phi_next /= cfg.k_lstd
    extra /= cfg.k_lstd
    return phi_next, extra, live


def lstd_evaluate(mdp, policy, basis, cfg: ADPConfig, rng: np.random.Generator,
                  states: np.ndarray | None = None) -> np.ndarray:
    """LSTD weights of the policy's value function under the sampled model.

    Draws cfg.n_states states uniformly from the model's state box (unless a
    state set is supplied), takes the policy's action at each, samples
    cfg.k_lstd one-step transitions from the model, and solves the ridge-
    regularised normal equations of the empirical Bellman residual.
    """
    if states is None:
        box = mdp.state_box
        states = rng.uniform(box[:, 0], box[:, 1], size=(cfg.n_states, box.shape[0]))
    if hasattr(policy, "actions_batch"):
        actions = np.asarray(policy.actions_batch(states, rng))
    else:
        actions = np.array([policy.action(s, rng) for s in states])

    phi = basis.features_batch(states)
    rho = np.array([mdp.state_reward(s) for s in states])
    phi_next, extra_reward, live = _next_state_terms(mdp, states, actions, basis, cfg, rng)

    a_mat = phi.T @ (phi - cfg.gamma * phi_next)
    b = phi.T @ (rho + cfg.gamma * extra_reward)
    return _solve_ridge(a_mat, b, cfg.ridge)


def approximate_q(mdp, omega, basis, s, a: int, cfg: ADPConfig, rng: np.random.Generator) -> float:
    """Monte-Carlo action value: rho(s) + gamma * mean over k_lstd successor values."""
    s = np.asarray(s, dtype=float).ravel()
    rho = float(mdp.state_reward(s))
    if mdp.terminal_fn(s):
        return rho
    omega = np.asarray(omega, dtype=float)
    total = 0.0
    for _ in range(cfg.k_lstd):
        s_next, _ = mdp.step(s, a, rng)
        if mdp.terminal_fn(s_next):
            total += float(mdp.state_reward(s_next))
        else:
            total += float(omega @ basis.features(s_next))
    return rho + cfg.gamma * total / cfg.k_lstd


def _q_matrix(mdp, omega, basis, states, cfg, rng) -> np.ndarray:
    """Vectorised q values for every state (rows) and action (columns)."""
    states = np.asarray(states, dtype=float)
    n = len(states)
    q = np.zeros((n, mdp.n_actions))
    rho = np.array([mdp.state_reward(s) for s in states])
    live = ~np.array([bool(mdp.terminal_fn(s)) for s in states])
    idx = np.flatnonzero(live)
    q += rho[:, None]
    if idx.size == 0:
        return q
    supports_crn = hasattr(mdp, "parameters")
    acc = np.zeros((idx.size, mdp.n_actions))
    for _ in range(cfg.k_lstd):
        # One noise draw per round, shared across actions where possible.
        noise = rng.standard_normal((idx.size, states.shape[1])) if supports_crn else None
        for a in range(mdp.n_actions):
            if supports_crn:
                nxt = mdp.step_batch(states[idx], a, rng, noise=noise)
            else:
                nxt = mdp.step_batch(states[idx], a, rng)
            term = np.array([bool(mdp.terminal_fn(s)) for s in nxt])
            vals = np.where(
                term,
                np.array([mdp.state_reward(s) for s in nxt]),
                basis.features_batch(nxt) @ omega,
            )
            acc[:, a] += vals
    q[idx] += cfg.gamma * acc / cfg.k_lstd
    return q


def approximate_policy_iteration(mdp, basis, cfg: ADPConfig, rng: np.random.Generator,
                                 init_omega: np.ndarray | None = None) -> GreedyModelPolicy:
    """Alternate LSTD evaluation and greedy improvement on one sampled model.

    One uniform state set is drawn up front and reused for every sweep.  The
    first evaluated policy is uniform unless warm-start weights are given.
    Stops at cfg.api_iterations sweeps or when the weights reach a fixed point.
    """
    box = mdp.state_box
    states = rng.uniform(box[:, 0], box[:, 1], size=(cfg.n_states, box.shape[0]))
    if init_omega is None:
        policy = UniformPolicy(mdp.n_actions)
    else:
        policy = GreedyModelPolicy(mdp, init_omega, basis, cfg)
    omega = None
    for _ in range(cfg.api_iterations):
        new_omega = lstd_evaluate(mdp, policy, basis, cfg, rng, states=states)
        if omega is not None and float(np.max(np.abs(new_omega - omega))) < cfg.tol:
            omega = new_omega
            break
        omega = new_omega
        policy = GreedyModelPolicy(mdp, omega, basis, cfg)
    return GreedyModelPolicy(mdp, omega, basis, cfg)


# -- LSTDQ / LSPI on a fixed buffer ---------------------------------------------

def lstdq_lspi(data, basis: RBFBasis, n_actions: int, cfg: ADPConfig) -> GreedyQPolicy:
    """Least-squares policy iteration on recorded transitions.

    The basis is replicated per action; each sweep solves the LSTDQ system for
    the current greedy policy and stops on a weight fixed point.  Terminal
    transitions contribute no continuation term.
    """
    if len(data) == 0:
        raise ValueError("lstdq_lspi needs at least one transition")
    s = np.stack([tr.s for tr in data])
    a_idx = np.array([tr.a for tr in data])
    r = np.array([tr.r for tr in data])
    s_next = np.stack([tr.s_next for tr in data])
    term = np.array([tr.terminal for tr in data])

    phi = basis.features_batch(s)
    phi_next = basis.features_batch(s_next)
    m = basis.dim
    dim = n_actions * m

    gram = np.zeros((dim, dim))
    b = np.zeros(dim)
    for a in range(n_actions):
        rows = a_idx == a
        blk = slice(a * m, (a + 1) * m)
        gram[blk, blk] = phi[rows].T @ phi[rows]
        b[blk] = phi[rows].T @ r[rows]

    weights = np.zeros((n_actions, m))
    for _ in range(cfg.api_iterations):
        next_actions = np.argmax(phi_next @ weights.T, axis=1)
        a_mat = gram.copy()
        for a in range(n_actions):
            for a2 in range(n_actions):
                rows = (a_idx == a) & (next_actions == a2) & ~term
                if rows.any():
                    a_mat[a * m:(a + 1) * m, a2 * m:(a2 + 1) * m] -= (
                        cfg.gamma * phi[rows].T @ phi_next[rows]
                    )
        new_weights = _solve_ridge(a_mat, b, cfg.ridge).reshape(n_actions, m)
        if float(np.max(np.abs(new_weights - weights))) < cfg.tol:
            weights = new_weights
            break
        weights = new_weights
    return GreedyQPolicy(weights, basis)
