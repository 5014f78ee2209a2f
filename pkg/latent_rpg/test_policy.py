import math

import numpy as np
import pytest

from latent_rpg.core.envs import make_env
from latent_rpg.core.errors import PolicyError
from latent_rpg.core.graph import backward, const, mean, reduce_sum
from latent_rpg.core.policy import (
    LatentSpec,
    encoder_log_density,
    fixed_latent,
    make_encoder,
    make_policy,
    rollout,
    sample_action,
    sample_latent,
    to_env_action,
)

SMALL = dict(hidden=(16,), activation="tanh", final_scale=1.0)


def _policy(env_id="move2", kind="gaussian", size=3, seed=0, **kwargs):
    env = make_env(env_id)
    rng = np.random.default_rng(seed)
    spec = LatentSpec(kind, size, **kwargs)
    return env, make_policy(env.spec, spec, rng, squash=env.spec.bounded, **SMALL), rng


def test_latent_spec_validation_and_schedule():
    with pytest.raises(PolicyError):
        LatentSpec("mixture", 2)
    assert LatentSpec("gaussian", 2, resample_period=5).resample_steps(20) == [0, 5, 10, 15]
    assert LatentSpec("gaussian", 2).resample_steps(20) == [0]
    assert LatentSpec("none").feature_dim == 0


def test_squashed_policy_needs_bounded_actions():
    env = make_env("linear")
    with pytest.raises(PolicyError):
        make_policy(env.spec, LatentSpec("none"), np.random.default_rng(0), squash=True)


def test_actions_stay_inside_the_box():
    env, policy, rng = _policy()
    s = env.initial_state(256)
    z = sample_latent(s, policy, rng)
    a = to_env_action(sample_action(s, z, policy, rng).action, env.spec, True).value
    assert np.all(a >= env.spec.low) and np.all(a <= env.spec.high)


def test_categorical_log_density_matches_logits():
    env, policy, rng = _policy("bandit_b", kind="categorical", size=4)
    s = env.initial_state(64)
    draw = sample_latent(s, policy, rng, mode="score")
    logits = policy.latent_head(s).value
    log_probs = logits - np.log(np.sum(np.exp(logits), axis=1, keepdims=True))
    np.testing.assert_allclose(draw.log_density.value, log_probs[np.arange(64), draw.index])
    np.testing.assert_array_equal(draw.feature.value.sum(axis=1), np.ones(64))
    assert fixed_latent("categorical", np.eye(4)[[2]]).index[0] == 2


def test_greedy_gaussian_latent_is_the_mean():
    env, policy, rng = _policy()
    s = env.initial_state(2)
    z = sample_latent(s, policy, rng, greedy=True)
    mu, _ = policy.split_head(policy.latent_head(s), 3)
    np.testing.assert_allclose(z.draw.value, mu.value)


def test_tanh_normal_log_density_closed_form():
    env, policy, rng = _policy("bandit_b", kind="none")
    s = env.initial_state(1)
    z = sample_latent(s, policy, rng)
    _, log_sigma = policy.split_head(policy.action_head(s), 1)
    sigma = math.exp(log_sigma.value[0, 0])
    sample = sample_action(s, z, policy, rng, noise=np.array([[0.3]]))
    a = sample.action.value[0, 0]
    expected = (
        -0.5 * 0.3 ** 2 - math.log(sigma) - 0.5 * math.log(2 * math.pi) - math.log(1 - a ** 2 + 1e-6)
    )
    assert sample.log_density.value[0] == pytest.approx(expected)


def test_squashed_action_density_integrates_to_one():
    env, policy, rng = _policy("bandit_b", kind="none")
    eps = np.linspace(-12.0, 12.0, 200001)[:, None]
    s = env.initial_state(len(eps))
    z = sample_latent(s, policy, rng)
    sample = sample_action(s, z, policy, rng, noise=eps)
    pre = sample.pre_squash.value[:, 0]
    a = sample.action.value[:, 0]
    # back to pre-squash coordinates: da = (1 - a^2) du
    density = np.exp(sample.log_density.value) * (1.0 - a ** 2)
    total = float(np.sum(0.5 * (density[1:] + density[:-1]) * np.diff(pre)))
    assert total == pytest.approx(1.0, abs=1e-4)


def test_score_rollout_carries_no_reward_gradient():
    env, policy, rng = _policy()
    traj = rollout(env, policy, rng, batch=4, mode="score")
    grads = backward(mean(traj.total_reward()), wrt=policy.parameters())
    assert all(np.all(g == 0.0) for g in grads.values())


def test_pathwise_rollout_reward_depends_on_both_heads():
    env, policy, rng = _policy()
    traj = rollout(env, policy, rng, batch=8, mode="pathwise")
    grads = backward(mean(traj.total_reward()), wrt=policy.parameters())
    assert any(np.any(grads[p] != 0.0) for p in policy.action_parameters())
    assert any(np.any(grads[p] != 0.0) for p in policy.latent_parameters())


def test_hybrid_rollout_decoder_sees_detached_latent():
    env, policy, rng = _policy()
    traj = rollout(env, policy, rng, batch=8, mode="hybrid")
    grads = backward(mean(traj.total_reward()), wrt=policy.latent_parameters())
    assert all(np.all(g == 0.0) for g in grads.values())


def test_sequential_latents_follow_the_schedule():
    env, policy, rng = _policy("nav4", kind="categorical", size=4, resample_period=10)
    traj = rollout(env, policy, rng, batch=2, mode="hybrid")
    assert [z.timestep for z in traj.latents] == [0, 10, 20]
    assert traj.latent_of_step[9] == 0 and traj.latent_of_step[10] == 1


def test_encoder_density_and_kind_checks():
    env, policy, rng = _policy("bandit_b", kind="categorical", size=3)
    enc = make_encoder(env.spec, policy.latent, rng, hidden=(8,))
    s = env.initial_state(3)
    a = const(np.zeros((3, 1)))
    total = 0.0
    for k in range(3):
        z = fixed_latent("categorical", np.tile(np.eye(3)[k], (3, 1)))
        total += np.exp(encoder_log_density(z, s, a, enc).value[0])
    assert total == pytest.approx(1.0)

    gaussian = fixed_latent("gaussian", np.zeros((3, 3)))
    with pytest.raises(PolicyError):
        encoder_log_density(gaussian, s, a, enc)
    assert make_encoder(env.spec, LatentSpec("none"), rng) is None


def test_fixed_prior_has_no_latent_head():
    env, policy, rng = _policy(kind="gaussian", size=4, fixed_prior=True)
    assert policy.latent_parameters() == []
    z = sample_latent(env.initial_state(5000), policy, rng, mode="score")
    assert abs(float(np.mean(z.draw.value))) < 0.05
    assert float(np.std(z.draw.value)) == pytest.approx(1.0, abs=0.05)
    assert np.all(np.isfinite(reduce_sum(z.log_density).value))


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
