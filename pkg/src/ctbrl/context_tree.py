"""Context-tree density model over per-action cover trees.

Each cover-tree node carries a stopping weight and a linear-Gaussian
posterior.  A state's containing path defines a mixture over the node models:
walking from the deepest containing node toward the root, the walk stops at a
node with its weight as probability, and the root (weight pinned to 1) stops
it surely.  Observing a transition inserts the state, evaluates every path
model's predictive density, folds the densities into the per-node mixture
denominators in one sweep, and then applies the closed-form Bayes update to
every weight and model on the path.

Sampling a model draws a Bernoulli indicator per node with its weight as the
success probability; a state is served by the deepest indicator-on node of
its containing path, frozen at sampling time.  Parameter pairs are drawn
lazily, one per selected context, from per-context seeded streams so the
result does not depend on query order.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .bayes_linear import MNIWPosterior, augment
from .cover_tree import CoverTree
from .errors import EmptyTreeError, NumericalError

__all__ = ["ContextNode", "GeneralizedContextTree", "SampledMDP"]


class ContextNode:
    """Per-node inference state: stopping weight in [0, 1] plus the local model."""

    __slots__ = ("weight", "model")

    def __init__(self, weight: float, model: MNIWPosterior):
        self.weight = weight
        self.model = model


class GeneralizedContextTree:
    """One cover tree per action, with conjugate inference along containing paths.

    Parameters
    ----------
    n_actions, state_dim : problem shape; inputs are augmented internally.
    prior : shared node prior; defaults to the weakly informative unit prior.
    zoom, metric : cover-tree construction parameters.
    depth_cap : optional limit on node depth.  A cap of 0 keeps a single
        root-level model per action (the global-linear special case).
    dof_mode : Student-t degrees-of-freedom convention for node predictives.
    """

    def __init__(
        self,
        n_actions: int,
        state_dim: int,
        prior: Optional[MNIWPosterior] = None,
        zoom: float = 2.0,
        metric: Optional[Callable] = None,
        depth_cap: Optional[int] = None,
        dof_mode: str = "paper",
        state_scale=None,
    ):
        self.n_actions = n_actions
        self.state_dim = state_dim
        self.prior = prior if prior is not None else MNIWPosterior.default_prior(state_dim, state_dim + 1)
        if self.prior.mean_matrix.shape != (state_dim, state_dim + 1):
            raise ValueError("prior shape does not match state dimension")
        self.zoom = zoom
        self.depth_cap = depth_cap
        self.dof_mode = dof_mode
        # Per-dimension scale applied before the metric and the node models
        # see the data.  Working in units of comparable size keeps the shared
        # isotropic prior meaningful for every dimension; predictions and
        # densities are mapped back to raw units at the interface.
        if state_scale is None:
            self.state_scale = None
            self._density_jacobian = 1.0
        else:
            self.state_scale = np.asarray(state_scale, dtype=float).ravel()
            if self.state_scale.shape != (state_dim,) or not np.all(self.state_scale > 0):
                raise ValueError("state_scale must be a positive vector of the state dimension")
            self._density_jacobian = float(np.prod(self.state_scale))
        self.trees = [CoverTree(zoom=zoom, metric=metric) for _ in range(n_actions)]
        self.t = 0

    def _to_internal(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float).ravel()
        return s if self.state_scale is None else s / self.state_scale

    # -- inference ------------------------------------------------------------

    def _path_mixture(self, weights, densities):
        """Mixture denominators along a path, root first.

        The root entry is its own density; each deeper entry is
        w * density + (1 - w) * (value one step shallower).  The last entry is
        the marginal predictive of the transition.
        """
        out = []
        value = None
        for i, (w, p) in enumerate(zip(weights, densities)):
            value = p if i == 0 else w * p + (1.0 - w) * value
            out.append(value)
        return out

    def observe(self, s, a: int, s_next) -> float:
        """Fold one transition into the tree of action ``a``.

        Inserts ``s`` (unless the depth cap forbids it), updates every weight
        and model on the containing path, and returns the marginal predictive
        density the model assigned to ``s_next`` before the update.  Any
        numerical failure aborts with no partial writes.
        """
        s = self._to_internal(s)
        y = self._to_internal(s_next)
        x = augment(s)
        tree = self.trees[a]

        plan = None
        new_depth = None
        if tree.root is None:
            plan = tree.plan_insert(s)
            path_nodes = []
            new_depth = 0
        else:
            candidate = tree.plan_insert(s)
            new_depth = candidate.parent.depth + 1
            if self.depth_cap is not None and new_depth > self.depth_cap:
                path_nodes = tree.containing_path(s)
            else:
                plan = candidate
                path_nodes = candidate.path

        weights = [node.payload.weight for node in path_nodes]
        models = [node.payload.model for node in path_nodes]
        if plan is not None:
            weights.append(2.0 ** -new_depth)
            models.append(self.prior)

        densities = [m.predictive_density(x, y, self.dof_mode) for m in models]
        mixtures = self._path_mixture(weights, densities)
        if not all(np.isfinite(v) and v > 0.0 for v in mixtures):
            raise NumericalError("degenerate predictive mixture; update aborted")
        new_weights = [w * p / m for w, p, m in zip(weights, densities, mixtures)]
        new_models = [m.update(x, y) for m in models]

        for node, w_new, m_new in zip(path_nodes, new_weights, new_models):
            node.payload.weight = w_new
            node.payload.model = m_new
        if plan is not None:
            node = tree.apply_plan(plan)
            node.payload = ContextNode(new_weights[-1], new_models[-1])
        self.t += 1
        return mixtures[-1] / self._density_jacobian

    def _path(self, s, a: int):
        tree = self.trees[a]
        if tree.root is None:
            raise EmptyTreeError(f"action {a} has no observations")
        return tree.containing_path(self._to_internal(s))

    def stopping_distribution(self, s, a: int):
        """Pairs (node, probability) over the containing path, root first.

        The walk starts at the deepest path node; the probability of stopping
        at a node is its weight times the survival product of all deeper path
        nodes.  The root weight of 1 makes the probabilities sum to one.
        """
        path = self._path(s, a)
        survive = 1.0
        probs = []
        for node in reversed(path):
            w = node.payload.weight
            probs.append(w * survive)
            survive *= 1.0 - w
        return list(zip(path, reversed(probs)))

    def marginal_predictive(self, s, a: int, s_next) -> float:
        """Posterior predictive density of ``s_next`` after ``(s, a)``."""
        path = self._path(s, a)
        x = augment(self._to_internal(s))
        y = self._to_internal(s_next)
        weights = [n.payload.weight for n in path]
        densities = [n.payload.model.predictive_density(x, y, self.dof_mode) for n in path]
        return self._path_mixture(weights, densities)[-1] / self._density_jacobian

    def marginal_mean(self, s, a: int) -> np.ndarray:
        """Posterior mean of the next state: stopping-weighted node means."""
        x = augment(self._to_internal(s))
        out = np.zeros(self.state_dim)
        for node, prob in self.stopping_distribution(s, a):
            out += prob * node.payload.model.predictive_mean(x)
        return out if self.state_scale is None else out * self.state_scale

    # -- posterior sampling -----------------------------------------------------

    def sample_mdp(
        self,
        reward_fn: Callable,
        gamma: float,
        rng: np.random.Generator,
        terminal_fn: Optional[Callable] = None,
        state_box: Optional[np.ndarray] = None,
        state_reward: Optional[Callable] = None,
    ) -> "SampledMDP":
        """Draw one piecewise-linear MDP from the posterior.

        Indicator weights are drawn for every node; a query state is served by
        the deepest indicator-on node of its containing path (the root, whose
        weight is 1, always backstops the walk).  An action tree with no
        observations falls back to a single draw from the shared prior.
        """
        actions = []
        for a, tree in enumerate(self.trees):
            entropy = int(rng.integers(0, 2**63))
            if tree.root is None:
                actions.append(_ActionSample(None, 0, None, self.prior, entropy, scale=self.state_scale))
                continue
            cutoff = len(tree)
            weights = np.array([node.payload.weight for node in tree.nodes])
            fired = rng.random(cutoff) < weights
            models = {i: tree.nodes[i].payload.model for i in np.flatnonzero(fired)}
            actions.append(_ActionSample(tree, cutoff, fired, None, entropy, models, scale=self.state_scale))
        return SampledMDP(actions, reward_fn, gamma, terminal_fn, state_box, state_reward)

    # -- persistence ------------------------------------------------------------

    def to_checkpoint(self) -> dict:
        """Serialisable snapshot: cover structure plus (weight, posterior) per node."""
        payload = {
            "n_actions": self.n_actions,
            "state_dim": self.state_dim,
            "zoom": self.zoom,
            "depth_cap": self.depth_cap,
            "dof_mode": self.dof_mode,
            "state_scale": None if self.state_scale is None else self.state_scale.tolist(),
            "t": self.t,
            "prior": _model_record(self.prior),
            "trees": [],
        }
        for tree in self.trees:
            records = tree.to_records()
            for rec, node in zip(records, tree.nodes):
                rec["weight"] = node.payload.weight
                rec["model"] = _model_record(node.payload.model)
            payload["trees"].append(records)
        return payload

    @classmethod
    def from_checkpoint(cls, payload: dict) -> "GeneralizedContextTree":
        obj = cls(
            n_actions=payload["n_actions"],
            state_dim=payload["state_dim"],
            prior=_model_from_record(payload["prior"]),
            zoom=payload["zoom"],
            depth_cap=payload["depth_cap"],
            dof_mode=payload["dof_mode"],
            state_scale=payload.get("state_scale"),
        )
        obj.t = payload["t"]
        obj.trees = []
        for records in payload["trees"]:
            tree = CoverTree.from_records(records, zoom=payload["zoom"])
            for rec, node in zip(sorted(records, key=lambda r: r["order"]), tree.nodes):
                node.payload = ContextNode(rec["weight"], _model_from_record(rec["model"]))
            obj.trees.append(tree)
        return obj


def _model_record(model: MNIWPosterior) -> dict:
    return {
        "mean": model.mean_matrix.tolist(),
        "precision": model.input_precision.tolist(),
        "scale": model.wishart_scale.tolist(),
        "dof": model.dof,
        "obs_count": model.obs_count,
    }


def _model_from_record(rec: dict) -> MNIWPosterior:
    return MNIWPosterior(
        np.asarray(rec["mean"], dtype=float),
        np.asarray(rec["precision"], dtype=float),
        np.asarray(rec["scale"], dtype=float),
        float(rec["dof"]),
        int(rec["obs_count"]),
    )


class _ActionSample:
    """Frozen per-action slice of a sampled MDP."""

    __slots__ = ("tree", "cutoff", "fired", "prior", "entropy", "models", "scale",
                 "_params", "_resolved")

    def __init__(self, tree, cutoff, fired, prior, entropy, models=None, scale=None):
        self.tree = tree
        self.cutoff = cutoff
        self.fired = fired
        self.prior = prior
        self.entropy = entropy
        self.models = models or {}
        self.scale = scale
        self._params: dict = {}
        self._resolved: dict = {}

    def resolve(self, s: np.ndarray) -> int:
        """Order index of the deepest indicator-on path node, or -1 for the
        prior fallback of an empty tree.  Memoised: planners query the same
        state set across many policy-iteration sweeps."""
        if self.tree is None:
            return -1
        if self.scale is not None:
            s = s / self.scale
        key = s.tobytes()
        hit = self._resolved.get(key)
        if hit is not None:
            return hit
        path = self.tree.containing_path_frozen(s, self.cutoff)
        for node in reversed(path):
            if self.fired[node.order]:
                self._resolved[key] = node.order
                return node.order
        raise NumericalError("no selected context on path; root weight corrupted")

    def params(self, order: int):
        """Design matrix and covariance Cholesky for one selected context.

        Drawn on first use from a stream seeded by (sample entropy, context),
        so concurrent or reordered queries see identical parameters.  Values
        are expressed in raw state units whatever the model's internal scale.
        """
        hit = self._params.get(order)
        if hit is not None:
            return hit
        stream = np.random.default_rng(np.random.SeedSequence(self.entropy, spawn_key=(order + 1,)))
        model = self.prior if order < 0 else self.models[order]
        draw = model.sample(stream)
        design, chol = draw.design, np.linalg.cholesky(draw.covariance)
        if self.scale is not None:
            design = design * self.scale[:, None]
            design[:, :-1] /= self.scale[None, :]
            chol = chol * self.scale[:, None]
        pair = (design, chol)
        self._params[order] = pair
        return pair


class SampledMDP:
    """A concrete piecewise linear-Gaussian MDP, immutable after creation.

    ``step`` draws the next state from N(A x, V) for the context serving the
    queried state-action pair; the reward comes from the supplied handle.
    Setting ``noise_free`` (a test hook) suppresses the Gaussian noise.
    """

    def __init__(self, actions, reward_fn, gamma, terminal_fn=None, state_box=None, state_reward=None):
        self.actions = actions
        self.reward_fn = reward_fn
        self.gamma = gamma
        self.terminal_fn = terminal_fn
        self.state_box = None if state_box is None else np.asarray(state_box, dtype=float)
        self.state_reward = state_reward
        self.noise_free = False

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def context(self, s, a: int):
        """Hashable id of the context serving (s, a)."""
        s = np.asarray(s, dtype=float).ravel()
        return (a, self.actions[a].resolve(s))

    def context_set(self) -> set:
        """All selected contexts across the action trees."""
        out = set()
        for a, act in enumerate(self.actions):
            if act.tree is None:
                out.add((a, -1))
            else:
                out.update((a, int(i)) for i in np.flatnonzero(act.fired))
        return out

    def parameters(self, s, a: int):
        """(design, covariance Cholesky) pair used for (s, a)."""
        act = self.actions[a]
        return act.params(act.resolve(np.asarray(s, dtype=float).ravel()))

    def step(self, s, a: int, rng: np.random.Generator):
        """Sample (next state, reward); deterministic for a fixed generator."""
        s = np.asarray(s, dtype=float).ravel()
        design, chol = self.parameters(s, a)
        mean = design @ augment(s)
        if self.noise_free:
            s_next = mean
        else:
            s_next = mean + chol @ rng.standard_normal(mean.size)
        return s_next, float(self.reward_fn(s, a, s_next))

    def resolve_batch(self, states: np.ndarray, a: int) -> np.ndarray:
        act = self.actions[a]
        return np.array([act.resolve(s) for s in states], dtype=int)

    def step_batch(self, states: np.ndarray, a: int, rng: np.random.Generator,
                   orders: Optional[np.ndarray] = None,
                   noise: Optional[np.ndarray] = None) -> np.ndarray:
        """Vectorised next-state draws for one action across many states.

        Noise variates are drawn once up front so the output is independent of
        how states group into contexts.  Callers may supply the standard-normal
        variates to share them across actions (common random numbers).
        """
        states = np.asarray(states, dtype=float)
        n, d = states.shape
        if orders is None:
            orders = self.resolve_batch(states, a)
        if self.noise_free:
            noise = np.zeros((n, d))
        elif noise is None:
            noise = rng.standard_normal((n, d))
        x = np.hstack([states, np.ones((n, 1))])
        out = np.empty((n, d))
        act = self.actions[a]
        for order in np.unique(orders):
            design, chol = act.params(int(order))
            rows = orders == order
            out[rows] = x[rows] @ design.T + noise[rows] @ chol.T
        return out
