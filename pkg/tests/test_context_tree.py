import numpy as np
import pytest

from ctbrl.bayes_linear import augment
from ctbrl.context_tree import GeneralizedContextTree
from ctbrl.errors import EmptyTreeError, NumericalError


def no_reward(s, a, s_next):
    return 0.0


CHAIN_LIMIT = 0.4 / 0.75  # accumulation point of the chain below


def make_chain_tree(n_links, seed=0, state_dim=1):
    """Observe points that geometrically approach a limit so every insertion
    deepens one chain; the residual tail stays inside each ancestor ball."""
    rng = np.random.default_rng(seed)
    tree = GeneralizedContextTree(n_actions=1, state_dim=state_dim)
    point = np.zeros(state_dim)
    step = 0.4
    for _ in range(n_links):
        tree.observe(point, 0, rng.normal(size=state_dim))
        point = point + step
        step *= 0.25
    return tree


class TestObserve:
    def test_first_observation_builds_root(self):
        tree = GeneralizedContextTree(n_actions=2, state_dim=2)
        tree.observe([0.1, 0.2], 0, [0.3, 0.4])
        root = tree.trees[0].root
        assert root is not None
        assert root.payload.weight == 1.0
        assert root.payload.model.obs_count == 1
        assert tree.trees[1].root is None
        assert tree.t == 1

    def test_weights_stay_in_unit_interval(self):
        rng = np.random.default_rng(1)
        tree = GeneralizedContextTree(n_actions=2, state_dim=2)
        for _ in range(10_000):
            s = rng.uniform(-1, 1, size=2)
            a = int(rng.integers(2))
            tree.observe(s, a, s + 0.05 * rng.standard_normal(2))
        for cover in tree.trees:
            for node in cover.nodes:
                assert 0.0 <= node.payload.weight <= 1.0
            assert cover.root.payload.weight == 1.0

    def test_two_node_path_weight_is_bayes_rule(self):
        rng = np.random.default_rng(2)
        tree = GeneralizedContextTree(n_actions=1, state_dim=1)
        tree.observe([0.0], 0, rng.normal(size=1))

        s, y = np.array([0.4]), rng.normal(size=1)
        x = augment(s)
        p_root = tree.trees[0].root.payload.model.predictive_density(x, y)
        p_leaf = tree.prior.predictive_density(x, y)
        w = 0.5  # depth-1 initial weight
        expected = w * p_leaf / (w * p_leaf + (1 - w) * p_root)

        tree.observe(s, 0, y)
        leaf = tree.trees[0].nodes[1]
        assert abs(leaf.payload.weight - expected) < 1e-12

    def test_three_node_path_weights_are_bayes_rule(self):
        rng = np.random.default_rng(3)
        tree = make_chain_tree(2, seed=3)
        cover = tree.trees[0]
        s, y = np.array([0.5]), rng.normal(size=1)  # next link of the chain
        x = augment(s)

        nodes = [cover.nodes[0], cover.nodes[1]]
        weights = [n.payload.weight for n in nodes] + [0.25]
        dens = [n.payload.model.predictive_density(x, y) for n in nodes]
        dens.append(tree.prior.predictive_density(x, y))
        mix = [dens[0]]
        for w, p in zip(weights[1:], dens[1:]):
            mix.append(w * p + (1 - w) * mix[-1])
        expected = [w * p / m for w, p, m in zip(weights, dens, mix)]

        returned = tree.observe(s, 0, y)
        got = [n.payload.weight for n in cover.nodes[:3]]
        assert np.allclose(got, expected, atol=1e-12, rtol=0)
        assert abs(returned - mix[-1]) < 1e-12

    def test_numerical_failure_leaves_tree_untouched(self):
        tree = GeneralizedContextTree(n_actions=1, state_dim=1)
        tree.observe([0.0], 0, [0.1])
        before = tree.to_checkpoint()
        with pytest.raises(NumericalError), np.errstate(over="ignore"):
            tree.observe([0.05], 0, [1e300])
        assert tree.to_checkpoint() == before

    def test_depth_cap_zero_keeps_single_node(self):
        rng = np.random.default_rng(4)
        tree = GeneralizedContextTree(n_actions=1, state_dim=1, depth_cap=0)
        for _ in range(50):
            tree.observe(rng.uniform(-1, 1, size=1), 0, rng.normal(size=1))
        assert len(tree.trees[0]) == 1
        assert tree.trees[0].root.payload.model.obs_count == 50


class TestStoppingDistribution:
    def test_root_only(self):
        tree = GeneralizedContextTree(n_actions=1, state_dim=1)
        tree.observe([0.0], 0, [0.0])
        dist = tree.stopping_distribution([0.2], 0)
        assert len(dist) == 1
        assert dist[0][1] == 1.0

    def test_two_node_chain_hand_values(self):
        tree = make_chain_tree(2, seed=5)
        cover = tree.trees[0]
        cover.nodes[1].payload.weight = 0.25
        dist = dict((n.order, p) for n, p in tree.stopping_distribution([0.4], 0))
        assert abs(dist[1] - 0.25) < 1e-15
        assert abs(dist[0] - 0.75) < 1e-15

    def test_sums_to_one_on_random_trees(self):
        rng = np.random.default_rng(6)
        tree = GeneralizedContextTree(n_actions=2, state_dim=2)
        for _ in range(500):
            s = rng.uniform(0, 1, size=2)
            tree.observe(s, int(rng.integers(2)), s + 0.1 * rng.standard_normal(2))
        for _ in range(100):
            q = rng.uniform(0, 1, size=2)
            a = int(rng.integers(2))
            total = sum(p for _, p in tree.stopping_distribution(q, a))
            assert abs(total - 1.0) < 1e-12

    def test_empty_tree_raises(self):
        tree = GeneralizedContextTree(n_actions=1, state_dim=1)
        with pytest.raises(EmptyTreeError):
            tree.stopping_distribution([0.0], 0)


class TestMarginalPredictive:
    def test_root_only_equals_node_density(self):
        tree = GeneralizedContextTree(n_actions=1, state_dim=1)
        tree.observe([0.0], 0, [0.2])
        s, y = np.array([0.1]), np.array([0.3])
        direct = tree.trees[0].root.payload.model.predictive_density(augment(s), y)
        assert tree.marginal_predictive(s, 0, y) == direct

    def test_recursive_equals_flat_mixture_deep_paths(self):
        rng = np.random.default_rng(7)
        tree = make_chain_tree(7, seed=7)
        # Perturb weights away from their updated values to stress the sweep.
        for node in tree.trees[0].nodes[1:]:
            node.payload.weight = rng.uniform(0.05, 0.95)
        for _ in range(25):
            q = CHAIN_LIMIT + rng.uniform(-1e-5, 1e-5, size=1)
            y = rng.normal(size=1)
            path = tree.trees[0].containing_path(q)
            assert len(path) >= 6
            flat = sum(
                p * n.payload.model.predictive_density(augment(q), y)
                for n, p in tree.stopping_distribution(q, 0)
            )
            recursive = tree.marginal_predictive(q, 0, y)
            assert abs(recursive - flat) < 1e-12

    def test_mixture_bounded_by_components(self):
        rng = np.random.default_rng(8)
        tree = make_chain_tree(5, seed=8)
        for _ in range(20):
            q = rng.uniform(0.0, 0.7, size=1)
            y = rng.normal(size=1)
            dens = [
                n.payload.model.predictive_density(augment(q), y)
                for n in tree.trees[0].containing_path(q)
            ]
            val = tree.marginal_predictive(q, 0, y)
            assert min(dens) - 1e-15 <= val <= max(dens) + 1e-15

    def test_online_likelihood_matches_replay(self):
        rng = np.random.default_rng(9)
        transitions = []
        s = rng.uniform(-1, 1, size=2)
        for _ in range(200):
            a = int(rng.integers(3))
            s_next = s + 0.1 * rng.standard_normal(2)
            transitions.append((s, a, s_next))
            s = s_next

        def log_likelihood():
            tree = GeneralizedContextTree(n_actions=3, state_dim=2)
            return sum(np.log(tree.observe(*tr)) for tr in transitions)

        first, second = log_likelihood(), log_likelihood()
        assert abs(first - second) < 1e-10


class TestSampleMDP:
    def test_only_root_selected_when_others_never_fire(self):
        rng = np.random.default_rng(10)
        tree = make_chain_tree(5, seed=10)
        for node in tree.trees[0].nodes[1:]:
            node.payload.weight = 0.0
        mdp = tree.sample_mdp(no_reward, 0.95, rng)
        assert mdp.context_set() == {(0, 0)}
        assert mdp.context([0.55], 0) == (0, 0)

    def test_all_weights_one_selects_deepest_path_nodes(self):
        rng = np.random.default_rng(11)
        tree = make_chain_tree(5, seed=11)
        for node in tree.trees[0].nodes:
            node.payload.weight = 1.0
        mdp = tree.sample_mdp(no_reward, 0.95, rng)
        for q in ([0.0], [0.41], [0.57]):
            path = tree.trees[0].containing_path(q)
            assert mdp.context(q, 0) == (0, path[-1].order)

    def test_cut_frequency_is_binomial(self):
        tree = make_chain_tree(3, seed=12)
        cover = tree.trees[0]
        cover.nodes[1].payload.weight = 0.3
        cover.nodes[2].payload.weight = 0.6
        query = cover.nodes[2].point

        rng = np.random.default_rng(13)
        reached = chosen = 0
        for _ in range(10_000):
            mdp = tree.sample_mdp(no_reward, 0.95, rng)
            _, order = mdp.context(query, 0)
            if order != 2:  # the deeper node did not fire, so the walk reached node 1
                reached += 1
                chosen += order == 1
        rate = chosen / reached
        sigma = np.sqrt(0.3 * 0.7 / reached)
        assert abs(rate - 0.3) < 3 * sigma

    def test_empty_tree_falls_back_to_prior_draw(self):
        tree = GeneralizedContextTree(n_actions=2, state_dim=2)
        mdp = tree.sample_mdp(no_reward, 0.9, np.random.default_rng(14))
        s_next, reward = mdp.step([0.1, 0.2], 1, np.random.default_rng(15))
        assert s_next.shape == (2,)
        assert reward == 0.0
        assert mdp.context([0.1, 0.2], 1) == (1, -1)


class TestMDPStep:
    def test_noise_free_step_is_exact_linear_map(self):
        rng = np.random.default_rng(16)
        tree = make_chain_tree(4, seed=16)
        mdp = tree.sample_mdp(no_reward, 0.95, rng)
        mdp.noise_free = True
        s = np.array([0.3])
        design, _ = mdp.parameters(s, 0)
        s_next, _ = mdp.step(s, 0, rng)
        assert np.array_equal(s_next, design @ augment(s))

    def test_step_mean_concentrates_on_design_row(self):
        rng = np.random.default_rng(17)
        tree = make_chain_tree(4, seed=17)
        mdp = tree.sample_mdp(no_reward, 0.95, rng)
        s = np.array([0.3])
        design, _ = mdp.parameters(s, 0)
        target = design @ augment(s)

        n = 100_000
        states = np.tile(s, (n, 1))
        orders = np.full(n, mdp.context(s, 0)[1])
        draws = mdp.step_batch(states, 0, np.random.default_rng(18), orders=orders)
        se = draws.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(draws.mean(axis=0) - target) < 3 * se)

    def test_context_matches_path_scan_oracle(self):
        rng = np.random.default_rng(19)
        tree = GeneralizedContextTree(n_actions=2, state_dim=2)
        for _ in range(300):
            s = rng.uniform(0, 1, size=2)
            tree.observe(s, int(rng.integers(2)), s + 0.1 * rng.standard_normal(2))
        mdp = tree.sample_mdp(no_reward, 0.95, rng)
        for _ in range(50):
            q = rng.uniform(0, 1, size=2)
            a = int(rng.integers(2))
            deepest = None
            for node in tree.trees[a].containing_path(q):
                if mdp.actions[a].fired[node.order]:
                    deepest = node.order
            assert mdp.context(q, a) == (a, deepest)

    def test_step_deterministic_given_seed(self):
        tree = make_chain_tree(4, seed=20)
        mdp = tree.sample_mdp(no_reward, 0.95, np.random.default_rng(21))
        a = mdp.step([0.2], 0, np.random.default_rng(5))
        b = mdp.step([0.2], 0, np.random.default_rng(5))
        assert np.array_equal(a[0], b[0])

    def test_sample_is_frozen_against_later_learning(self):
        rng = np.random.default_rng(22)
        tree = make_chain_tree(4, seed=22)
        mdp = tree.sample_mdp(no_reward, 0.95, rng)
        before = mdp.step([0.3], 0, np.random.default_rng(7))
        for _ in range(100):
            tree.observe(rng.uniform(0, 0.6, size=1), 0, rng.normal(size=1))
        after = mdp.step([0.3], 0, np.random.default_rng(7))
        assert np.array_equal(before[0], after[0])


class TestCheckpoint:
    def test_round_trip_preserves_inference(self):
        rng = np.random.default_rng(23)
        tree = GeneralizedContextTree(n_actions=2, state_dim=2)
        for _ in range(200):
            s = rng.uniform(0, 1, size=2)
            tree.observe(s, int(rng.integers(2)), s + 0.1 * rng.standard_normal(2))
        clone = GeneralizedContextTree.from_checkpoint(tree.to_checkpoint())
        for _ in range(20):
            q = rng.uniform(0, 1, size=2)
            y = rng.uniform(0, 1, size=2)
            a = int(rng.integers(2))
            assert clone.marginal_predictive(q, a, y) == tree.marginal_predictive(q, a, y)

    def test_checkpoint_is_json_serialisable(self):
        import json

        tree = make_chain_tree(3, seed=24)
        json.dumps(tree.to_checkpoint())
