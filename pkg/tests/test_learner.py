"""Tests for the grouped learner, its losses and the decentralized controller"""
import pytest
import numpy as np
from scipy import stats

import learner as learner_module
from autodiff import Tensor, no_grad, parameter
from combat_env import CombatEnv
from checkpoint_manager import CheckpointManager
from config import AlgorithmVariant
from exceptions import CheckpointError, ContractViolation, UsageError
from learner import (MIX_ADDITIVE, MIX_INDEPENDENT, MIX_MONOTONIC, AgentController, GreedyPolicy, GroupNets, Learner,
                     Unroll, epsilon_greedy, group_td_loss, igmi_loss, masked_td_loss, target_max_values)
from layers import GaussianDistribution
from maps import load_map
from networks import AgentNetwork, AgentOutput, InferenceNetwork
from replay_buffer import Episode, EpisodeBatch


def make_learner(map_config, config, algo, **overrides):
    return Learner(map_config, config.model_copy(update={"algo": AlgorithmVariant(algo), **overrides}),
                   np.random.default_rng(0), noise_rng=np.random.default_rng(1))


def chain_episode(states, actions, rewards, terminated, avail=None, n_states=3, n_actions=3) -> Episode:
    """Episode whose observations and states are one-hot state IDs, shared by every agent"""
    states = np.asarray(states)
    actions = np.asarray(actions, dtype=np.int64)
    n_agents = actions.shape[1]
    encoded = np.eye(n_states)[states]
    if avail is None:
        avail = np.ones((len(states), n_agents, n_actions), dtype=np.int64)
    return Episode(
        observations=np.repeat(encoded[:, None], n_agents, axis=1),
        states=encoded,
        avail_actions=np.asarray(avail, dtype=np.int64),
        actions=actions,
        rewards=np.asarray(rewards, dtype=np.float64),
        terminated=np.asarray(terminated, dtype=np.float64),
    )


def tabular_forward(table):
    """Agent step whose Q values are rows of ``table`` picked by the one-hot observation"""
    table = table if isinstance(table, Tensor) else Tensor(table)

    def forward(net, obs, last_action, hidden, noise=None):
        encoded = Tensor(np.asarray(obs))
        latent = Tensor(np.zeros((encoded.shape[0], net.latent_dim)))
        return AgentOutput(encoded @ table, hidden, GaussianDistribution(latent, latent), latent)
    return forward


@pytest.fixture
def tabular_agent(rng):
    return AgentNetwork(obs_dim=3, n_actions=3, rng=rng, hidden_dim=2, latent_dim=2)


def random_unroll(rng, batch_size, steps, members, hidden_dim=4, latent_dim=2) -> Unroll:
    shape = (batch_size, steps, members)
    return Unroll(
        q_values=Tensor(np.zeros(shape + (3,))),
        hiddens=parameter(rng.normal(size=shape + (hidden_dim,))),
        latent_mean=parameter(rng.normal(size=shape + (latent_dim,))),
        latent_log_std=parameter(rng.uniform(-0.5, 0.5, size=shape + (latent_dim,))),
        latent_samples=parameter(rng.normal(size=shape + (latent_dim,))),
    )


def closed_form_igmi(batch, online_m, online_n, inference) -> float:
    """Mean over filled steps of KL(prior || posterior), written out in numpy"""
    B, T = batch.rewards.shape
    hidden = online_m.hiddens.data[:, :T].mean(axis=2)
    prior_mean = online_m.latent_mean.data[:, :T].mean(axis=2)
    prior_log_std = online_m.latent_log_std.data[:, :T].mean(axis=2)
    partner = online_n.latent_samples.data[:, :T].mean(axis=2)
    L = prior_mean.shape[-1]
    with no_grad():
        posterior = inference(partner.reshape(B * T, L), hidden.reshape(B * T, -1))
    post_mean = posterior.mean.data.reshape(B, T, L)
    post_log_std = posterior.log_std.data.reshape(B, T, L)
    kl = (post_log_std - prior_log_std
          + (np.exp(2 * prior_log_std) + (prior_mean - post_mean) ** 2) / (2 * np.exp(2 * post_log_std))
          - 0.5).sum(axis=-1)
    return float((kl * batch.filled).sum() / batch.filled.sum())


class TestVariants:
    """Test how each algorithm variant lays out its groups"""

    def test_ghq_groups_by_ideal_object(self, tiny_learner):
        assert tiny_learner.assignment.n_groups == 2
        assert tiny_learner.mixing == MIX_MONOTONIC
        assert tiny_learner.use_mi
        assert all(g.inference is not None for g in tiny_learner.groups)
        assert [g.agent.n_actions for g in tiny_learner.groups] == [
            tiny_learner.assignment.action_dim(0), tiny_learner.assignment.action_dim(1)]

    def test_ghq_without_mi_has_no_inference_nets(self, mmm_map, tiny_config):
        learner = make_learner(mmm_map, tiny_config, "ghq-nomi")
        assert learner.assignment.n_groups == 2
        assert not learner.use_mi
        assert all(g.inference is None for g in learner.groups)

    @pytest.mark.parametrize("algo,mixing,has_mixer", [
        ("iql", MIX_INDEPENDENT, False),
        ("vdn", MIX_ADDITIVE, False),
        ("qmix", MIX_MONOTONIC, True),
    ])
    def test_baselines_share_one_group(self, mmm_map, tiny_config, algo, mixing, has_mixer):
        learner = make_learner(mmm_map, tiny_config, algo)
        assert learner.assignment.n_groups == 1
        assert learner.groups[0].members == list(range(mmm_map.n_allies))
        assert learner.groups[0].agent.n_actions == learner.padded_actions
        assert learner.mixing == mixing
        assert (learner.groups[0].mixer is not None) == has_mixer

    def test_single_group_map_disables_mi(self, homogeneous_map, tiny_config, mocker):
        warning = mocker.patch.object(learner_module.logger, "warning")
        learner = make_learner(homogeneous_map, tiny_config, "ghq")
        assert learner.assignment.n_groups == 1
        assert not learner.use_mi
        warning.assert_called_once()
        assert "single group" in warning.call_args[0][0]

    def test_split_by_kind(self, mmm_map, tiny_config):
        learner = make_learner(mmm_map, tiny_config, "ghq", split_by_kind=True)
        assert learner.assignment.n_groups == 3


class TestLosses:
    """Test TD and MI loss terms"""

    def test_total_loss_finite(self, tiny_learner, sample_batch):
        breakdown = tiny_learner.total_loss(sample_batch)
        assert np.isfinite(breakdown.total.item())
        assert len(breakdown.td) == 2
        assert len(breakdown.mi) == 2
        assert all(v >= 0 for v in breakdown.td + breakdown.mi)

    def test_loss_labels(self, tiny_learner, sample_batch):
        labels = tiny_learner.group_labels
        row = tiny_learner.total_loss(sample_batch).as_dict(labels)
        assert f"td[{labels[0]}]" in row and f"mi[{labels[1]}]" in row
        assert "total" in row

    def test_no_mi_terms_without_mi(self, mmm_map, tiny_config, sample_batch):
        learner = make_learner(mmm_map, tiny_config, "ghq-nomi")
        assert learner.total_loss(sample_batch).mi == []

    def test_zero_mi_weight_skips_mi(self, mmm_map, tiny_config, sample_batch):
        learner = make_learner(mmm_map, tiny_config, "ghq", lambda_mi=0.0)
        breakdown = learner.total_loss(sample_batch)
        assert breakdown.mi == []
        assert breakdown.total.item() == pytest.approx(sum(breakdown.td))

    @pytest.mark.parametrize("algo", ["iql", "vdn", "qmix"])
    def test_baseline_losses_finite(self, mmm_map, tiny_config, sample_batch, algo):
        learner = make_learner(mmm_map, tiny_config, algo)
        breakdown = learner.total_loss(sample_batch)
        assert len(breakdown.td) == 1
        assert np.isfinite(breakdown.total.item())

    def test_group_td_loss_only_touches_own_group(self, mmm_map, tiny_config, sample_batch):
        learner = make_learner(mmm_map, tiny_config, "ghq-nomi")
        loss = group_td_loss(sample_batch, learner.groups[0], learner.targets[0], tiny_config.gamma)
        loss.backward()
        assert any(p.grad is not None and np.any(p.grad != 0) for p in learner.group_parameters(0))
        assert all(p.grad is None or not np.any(p.grad) for p in learner.group_parameters(1))

    def test_masked_td_loss_ignores_padding(self):
        q = parameter(np.array([[1.0, 5.0]]))
        loss = masked_td_loss(q, np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]))
        assert loss.item() == pytest.approx(1.0)

    def test_masked_td_loss_empty_mask(self):
        with pytest.raises(UsageError):
            masked_td_loss(parameter(np.ones((1, 2))), np.zeros((1, 2)), np.zeros((1, 2)))

    def test_target_max_respects_masks(self):
        q = np.array([[[[1.0, 9.0]], [[3.0, 7.0]]]])
        avail = np.array([[[[1, 1]], [[1, 0]]]])
        np.testing.assert_array_equal(target_max_values(q, avail), [[[3.0]]])


class TestTDLossOracle:
    """Test group TD losses against hand-computed values on tabular Q functions"""

    TABLE = np.array([[1.0, 2.0, 0.5], [0.0, 3.0, -1.0], [0.0, 0.0, 0.0]])

    def test_single_transition(self, monkeypatch, tabular_agent):
        monkeypatch.setattr(learner_module, "agent_forward", tabular_forward(self.TABLE))
        group = GroupNets([0], tabular_agent)
        batch = EpisodeBatch.from_episodes([chain_episode([0, 1], [[2]], [1.0], [0.0])])
        loss = group_td_loss(batch, group, group.target_copy(), 0.9, MIX_INDEPENDENT)
        assert loss.item() == pytest.approx((1.0 + 0.9 * 3.0 - 0.5) ** 2)

    def test_terminal_transition_drops_bootstrap(self, monkeypatch, tabular_agent):
        monkeypatch.setattr(learner_module, "agent_forward", tabular_forward(self.TABLE))
        group = GroupNets([0], tabular_agent)
        batch = EpisodeBatch.from_episodes([chain_episode([0, 1], [[2]], [1.0], [1.0])])
        loss = group_td_loss(batch, group, group.target_copy(), 0.9, MIX_INDEPENDENT)
        assert loss.item() == pytest.approx((1.0 - 0.5) ** 2)

    def test_bootstrap_respects_next_masks(self, monkeypatch, tabular_agent):
        monkeypatch.setattr(learner_module, "agent_forward", tabular_forward(self.TABLE))
        group = GroupNets([0], tabular_agent)
        avail = np.array([[[1, 1, 1]], [[1, 0, 1]]])
        batch = EpisodeBatch.from_episodes([chain_episode([0, 1], [[2]], [1.0], [0.0], avail=avail)])
        loss = group_td_loss(batch, group, group.target_copy(), 0.9, MIX_INDEPENDENT)
        assert loss.item() == pytest.approx((1.0 + 0.9 * 0.0 - 0.5) ** 2)

    def test_zero_loss_at_greedy_zero_values(self, monkeypatch, tabular_agent):
        table = np.array([[0.0, -1.0, -2.0], [0.0, -3.0, -1.0], [0.0, 0.0, 0.0]])
        monkeypatch.setattr(learner_module, "agent_forward", tabular_forward(table))
        group = GroupNets([0], tabular_agent)
        batch = EpisodeBatch.from_episodes([chain_episode([0, 1, 2], [[0], [0]], [0.0, 0.0], [0.0, 1.0])])
        for mixing in (MIX_INDEPENDENT, MIX_ADDITIVE):
            assert group_td_loss(batch, group, group.target_copy(), 0.0, mixing).item() == 0.0

    def test_additive_mixing_sums_agent_values(self, monkeypatch, tabular_agent):
        table = np.array([[1.0, 2.0, 0.5], [1.0, 2.0, 0.5], [0.0, 0.0, 0.0]])
        monkeypatch.setattr(learner_module, "agent_forward", tabular_forward(table))
        group = GroupNets([0, 1], tabular_agent)
        avail = np.ones((2, 2, 3), dtype=np.int64)
        avail[1, 1] = [0, 0, 1]
        batch = EpisodeBatch.from_episodes([chain_episode([0, 1], [[0, 1]], [0.5], [0.0], avail=avail)])

        additive = group_td_loss(batch, group, group.target_copy(), 0.5, MIX_ADDITIVE)
        assert additive.item() == pytest.approx((0.5 + 0.5 * (2.0 + 0.5) - (1.0 + 2.0)) ** 2)
        independent = group_td_loss(batch, group, group.target_copy(), 0.5, MIX_INDEPENDENT)
        per_agent = [(0.5 + 0.5 * 2.0 - 1.0) ** 2, (0.5 + 0.5 * 0.5 - 2.0) ** 2]
        assert independent.item() == pytest.approx(np.mean(per_agent))

    def test_fitted_chain_has_zero_loss(self, monkeypatch, tabular_agent):
        gamma = 0.9
        fitted = 1.0 + gamma * 2.0
        group = GroupNets([0], tabular_agent)
        batch = EpisodeBatch.from_episodes([chain_episode([0, 1, 2], [[1], [1]], [1.0, 2.0], [0.0, 1.0])])
        monkeypatch.setattr(learner_module, "agent_forward",
                            tabular_forward(np.array([[fitted] * 3, [2.0] * 3, [0.0] * 3])))
        loss = group_td_loss(batch, group, group.target_copy(), gamma, MIX_INDEPENDENT)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

        monkeypatch.setattr(learner_module, "agent_forward",
                            tabular_forward(np.array([[fitted] * 3, [2.5] * 3, [0.0] * 3])))
        loss = group_td_loss(batch, group, group.target_copy(), gamma, MIX_INDEPENDENT)
        assert loss.item() == pytest.approx(((1.0 + gamma * 2.5 - fitted) ** 2 + (2.0 - 2.5) ** 2) / 2)

    def test_chain_training_reaches_fixed_point(self, monkeypatch, tabular_agent):
        table = parameter(np.zeros((3, 3)))
        monkeypatch.setattr(learner_module, "agent_forward", tabular_forward(table))
        group = GroupNets([0], tabular_agent)
        batch = EpisodeBatch.from_episodes([chain_episode([0, 1, 2], [[1], [1]], [1.0, 2.0], [0.0, 1.0])])
        for _ in range(200):
            table.grad = None
            loss = group_td_loss(batch, group, group, 0.9, MIX_INDEPENDENT)
            loss.backward()
            table.data -= 0.5 * table.grad
        assert table.data[1, 1] == pytest.approx(2.0, abs=1e-9)
        assert table.data[0, 1] == pytest.approx(1.0 + 0.9 * 2.0, abs=1e-9)
        assert loss.item() < 1e-12


class TestMILoss:
    """Test the inter-group MI loss against a closed-form KL"""

    @pytest.fixture
    def mi_batch(self):
        return EpisodeBatch.from_episodes([
            chain_episode([0, 1, 2], [[1], [1]], [0.0, 0.0], [0.0, 1.0]),
            chain_episode([0, 1, 1, 2], [[1], [1], [1]], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
        ])

    def test_zero_when_posterior_matches_prior(self, rng, mi_batch):
        mean, log_std = np.array([0.3, -1.2]), np.array([-0.3, 0.4])
        inference = InferenceNetwork(latent_dim=2, hidden_dim=4, rng=rng).fill_(0.0)
        inference.head.mean_head.bias.data[...] = mean
        inference.head.log_std_head.bias.data[...] = log_std
        online_m = random_unroll(rng, 2, 4, 2)
        online_m.latent_mean = parameter(np.broadcast_to(mean, online_m.latent_mean.shape).copy())
        online_m.latent_log_std = parameter(np.broadcast_to(log_std, online_m.latent_log_std.shape).copy())
        loss = igmi_loss(mi_batch, online_m, random_unroll(rng, 2, 4, 3), inference)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_matches_closed_form(self, rng, mi_batch):
        for _ in range(5):
            inference = InferenceNetwork(latent_dim=2, hidden_dim=4, rng=rng)
            online_m, online_n = random_unroll(rng, 2, 4, 2), random_unroll(rng, 2, 4, 3)
            loss = igmi_loss(mi_batch, online_m, online_n, inference).item()
            assert loss >= 0.0
            assert loss == pytest.approx(closed_form_igmi(mi_batch, online_m, online_n, inference), rel=1e-10)

    def test_padding_steps_ignored(self, rng, mi_batch):
        inference = InferenceNetwork(latent_dim=2, hidden_dim=4, rng=rng)
        online_m, online_n = random_unroll(rng, 2, 4, 2), random_unroll(rng, 2, 4, 3)
        before = igmi_loss(mi_batch, online_m, online_n, inference).item()
        online_m.latent_mean.data[0, 2] += 50.0
        assert igmi_loss(mi_batch, online_m, online_n, inference).item() == pytest.approx(before)

    def test_partner_latent_detached(self, tiny_learner, sample_batch):
        online = tiny_learner.unroll_all(sample_batch)
        tiny_learner.optimizer.zero_grad()
        igmi_loss(sample_batch, online[0], online[1], tiny_learner.groups[0].inference).backward()

        def touched(params):
            return any(np.any(p.grad != 0) for p in params)

        assert touched(tiny_learner.group_parameters(0, ("inference",)))
        assert touched(tiny_learner.group_parameters(0, ("agent",)))
        assert not touched(tiny_learner.group_parameters(0, ("mixer",)))
        assert not touched(tiny_learner.group_parameters(1))

    def test_partner_terms_averaged(self, mmm_map, tiny_config, sample_batch):
        learner = make_learner(mmm_map, tiny_config, "ghq", split_by_kind=True)
        learner.noise_rng = np.random.default_rng(9)
        breakdown = learner.total_loss(sample_batch)
        learner.noise_rng = np.random.default_rng(9)
        online = learner.unroll_all(sample_batch)
        for m, group in enumerate(learner.groups):
            pairs = [igmi_loss(sample_batch, online[m], online[n], group.inference).item()
                     for n in range(len(learner.groups)) if n != m]
            assert breakdown.mi[m] == pytest.approx(np.mean(pairs))
        expected = tiny_config.lambda_td * sum(breakdown.td) + tiny_config.lambda_mi * sum(breakdown.mi)
        assert breakdown.total.item() == pytest.approx(expected)


class TestTraining:
    """Test parameter updates and targets"""

    def test_train_changes_parameters(self, tiny_learner, sample_batch):
        before = tiny_learner.state_dict()
        losses, grad_norm = tiny_learner.train(sample_batch)
        after = tiny_learner.state_dict()
        assert grad_norm > 0
        assert tiny_learner.train_steps == 1
        assert any(not np.array_equal(before[k], after[k]) for k in before)

    def test_targets_lag_until_update(self, tiny_learner, sample_batch):
        target_before = tiny_learner.targets[0].agent.state_dict()
        tiny_learner.train(sample_batch)
        target_after = tiny_learner.targets[0].agent.state_dict()
        for name in target_before:
            np.testing.assert_array_equal(target_before[name], target_after[name])
        tiny_learner.update_targets()
        online = tiny_learner.groups[0].agent.state_dict()
        for name, value in tiny_learner.targets[0].agent.state_dict().items():
            np.testing.assert_array_equal(value, online[name])

    def test_decay_lr(self, tiny_learner, tiny_config):
        assert tiny_learner.decay_lr(0.5) == pytest.approx(tiny_config.lr * 0.5)


class TestCheckpoints:
    """Test saving and restoring learner parameters"""

    def test_round_trip_bit_exact(self, tiny_learner, mmm_map, sample_batch, temp_run_dir):
        tiny_learner.train(sample_batch)
        manager = CheckpointManager(temp_run_dir)
        path = manager.save_checkpoint(tiny_learner.state_dict(), tiny_learner.checkpoint_meta())
        restored = Learner.from_checkpoint(path, mmm_map)
        original, loaded = tiny_learner.state_dict(), restored.state_dict()
        assert set(original) == set(loaded)
        for name in original:
            np.testing.assert_array_equal(original[name], loaded[name])
        assert restored.variant is tiny_learner.variant

    def test_restored_policy_acts_identically(self, tiny_learner, mmm_map, temp_run_dir):
        path = CheckpointManager(temp_run_dir).save_checkpoint(tiny_learner.state_dict(),
                                                               tiny_learner.checkpoint_meta())
        restored = Learner.from_checkpoint(path, mmm_map)
        env = CombatEnv(mmm_map)
        _, obs, _ = env.reset(3)
        masks = env.available_actions()
        a = GreedyPolicy(tiny_learner).act(obs, masks)
        b = GreedyPolicy(restored).act(obs, masks)
        np.testing.assert_array_equal(a, b)

    def test_wrong_map_rejected(self, tiny_learner, temp_run_dir):
        path = CheckpointManager(temp_run_dir).save_checkpoint(tiny_learner.state_dict(),
                                                               tiny_learner.checkpoint_meta())
        with pytest.raises(CheckpointError):
            Learner.from_checkpoint(path, load_map("6m2m_15m"))

    def test_missing_parameters_rejected(self, tiny_learner):
        state = tiny_learner.state_dict()
        state.pop(next(iter(state)))
        with pytest.raises(CheckpointError):
            tiny_learner.load_state_dict(state)

    def test_shape_mismatch_rejected(self, tiny_learner):
        state = tiny_learner.state_dict()
        name = next(iter(state))
        state[name] = np.zeros(state[name].shape + (1,))
        with pytest.raises(CheckpointError):
            tiny_learner.load_state_dict(state)


class TestActionSelection:
    """Test epsilon-greedy selection and the recurrent controller"""

    def test_greedy_when_epsilon_zero(self, rng):
        q = [np.array([0.0, 3.0, 1.0]), np.array([2.0, 1.0])]
        masks = [np.array([1, 1, 1]), np.array([0, 1])]
        np.testing.assert_array_equal(epsilon_greedy(q, masks, 0.0, rng), [1, 1])

    def test_random_actions_stay_available(self, rng):
        q = [np.zeros(4)]
        masks = [np.array([0, 1, 0, 1])]
        picks = {int(epsilon_greedy(q, masks, 1.0, rng)[0]) for _ in range(100)}
        assert picks == {1, 3}

    def test_full_exploration_is_uniform(self, tiny_learner, mmm_map):
        env = CombatEnv(mmm_map)
        _, obs, _ = env.reset(0)
        masks = env.available_actions()
        controller = AgentController(tiny_learner)
        rng = np.random.default_rng(42)
        picks = np.array([controller.select_actions(obs, masks, 1.0, rng) for _ in range(5000)])
        for i in range(mmm_map.n_allies):
            available = np.flatnonzero(masks[i])
            counts = np.bincount(picks[:, i], minlength=masks.shape[1])
            assert counts[available].sum() == len(picks)
            assert stats.chisquare(counts[available]).pvalue > 1e-4

    def test_no_available_action(self, rng):
        with pytest.raises(ContractViolation):
            epsilon_greedy([np.zeros(2)], [np.zeros(2)], 0.0, rng)

    def test_controller_actions_valid(self, tiny_learner, mmm_map, rng):
        env = CombatEnv(mmm_map)
        _, obs, _ = env.reset(0)
        controller = AgentController(tiny_learner)
        masks = env.available_actions()
        actions = controller.select_actions(obs, masks, 0.5, rng)
        assert len(actions) == mmm_map.n_allies
        assert all(masks[i, a] == 1 for i, a in enumerate(actions))
        assert controller.started

    def test_controller_reset_clears_history(self, tiny_learner, mmm_map, rng):
        env = CombatEnv(mmm_map)
        _, obs, _ = env.reset(0)
        controller = AgentController(tiny_learner)
        first = controller.q_values(obs)
        controller.select_actions(obs, env.available_actions(), 0.0, rng)
        controller.reset()
        again = controller.q_values(obs)
        for a, b in zip(first, again):
            np.testing.assert_array_equal(a, b)
