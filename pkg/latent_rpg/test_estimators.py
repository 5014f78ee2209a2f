import math

import numpy as np
import pytest

from latent_rpg.core.config import Config
from latent_rpg.core.envs import make_env
from latent_rpg.core.errors import OracleError, PolicyError
from latent_rpg.core.estimators import (
    ElboConfig,
    MixturePolicySpec,
    bias_report,
    check_regularity,
    estimate_gradient,
    expected_reward,
    grouped_gradient,
    hybrid_grad,
    oracle_grad,
    pathwise_grad,
    sample_estimator,
    score_grad,
)
from latent_rpg.core.graph import LOG_SIGMA_MIN, DenseNet, const, parameter
from latent_rpg.core.policy import LatentSpec, PolicyParams, make_policy, rollout


def _normal_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)


def test_score_estimator_on_linear_bandit():
    env = make_env("linear")
    spec = MixturePolicySpec([0.0], [0.2], [0.0], squash=False)
    mean, se = sample_estimator("score", env, spec, 20000, np.random.default_rng(0))
    # E[a] = mu, so d/dmu = 1 and d/dlog_sigma = 0
    assert abs(mean[1] - 1.0) < 4 * se[1]
    assert abs(mean[2]) < 4 * se[2]


def test_oracle_matches_closed_form_on_step_reward():
    env = make_env("step")
    spec = MixturePolicySpec([0.0], [0.3], [0.0], squash=False)
    oracle = oracle_grad(env, spec)
    truth = -_normal_pdf((0.0 - 0.3) / 1.0) / 1.0
    assert oracle.true_gradient[1] == pytest.approx(truth, abs=1e-7)
    assert oracle.boundary_term[1] == pytest.approx(truth, abs=1e-7)
    assert oracle.expected_reward == pytest.approx(0.5 * math.erfc(0.3 / math.sqrt(2)), abs=1e-7)


def test_pathwise_misses_the_jump_on_step_reward():
    env = make_env("step")
    spec = MixturePolicySpec([0.0], [0.3], [0.0], squash=False)
    rows = bias_report(env, spec, 5000, np.random.default_rng(1), kinds=("pathwise",))
    mu_row = next(r for r in rows if r.param == "mu[0]")
    assert mu_row.mean == 0.0
    assert abs(mu_row.z_score) > 5


def test_score_unbiased_on_bandit_b():
    env = make_env("bandit_b")
    spec = MixturePolicySpec([0.0, 0.0], [math.atanh(-0.8), math.atanh(0.3)], [math.log(0.15)] * 2)
    oracle = oracle_grad(env, spec)
    rows = bias_report(env, spec, 20000, np.random.default_rng(2), kinds=("score",), oracle=oracle)
    assert all(abs(r.z_score) < 4.5 for r in rows)


def test_pathwise_bias_matches_boundary_term_on_bandit_a():
    env = make_env("bandit_a")
    spec = MixturePolicySpec([0.0], [math.atanh(0.25)], [math.log(0.1)])
    oracle = oracle_grad(env, spec)
    assert abs(oracle.boundary_term[1]) > 1.0
    mean, se = sample_estimator("pathwise", env, spec, 20000, np.random.default_rng(3))
    bias = mean[1] - oracle.true_gradient[1]
    assert abs(bias) / se[1] > 5
    assert abs(bias - (-oracle.boundary_term[1])) < 4 * se[1]


def test_hybrid_unbiased_on_smooth_bandit():
    env = make_env("smooth_bandit")
    spec = MixturePolicySpec([0.3, -0.3], [math.atanh(-0.6), math.atanh(0.3)], [math.log(0.2)] * 2)
    rows = bias_report(env, spec, 20000, np.random.default_rng(4), kinds=("hybrid",))
    assert all(abs(r.z_score) < 4.5 for r in rows)


def test_oracle_is_finite_difference_of_expected_reward():
    env = make_env("bandit_b")
    spec = MixturePolicySpec([0.2, -0.1], [-1.0, 0.4], [math.log(0.3), math.log(0.2)])
    oracle = oracle_grad(env, spec)
    h = 1e-5
    mu_up = MixturePolicySpec(spec.logits, spec.mus + [[h], [0.0]], spec.log_sigmas)
    mu_down = MixturePolicySpec(spec.logits, spec.mus - [[h], [0.0]], spec.log_sigmas)
    numeric = (expected_reward(env, mu_up) - expected_reward(env, mu_down)) / (2 * h)
    assert oracle.true_gradient[2] == pytest.approx(numeric, abs=1e-5)


def test_oracle_rejects_inapplicable_envs():
    spec = MixturePolicySpec([0.0], [[0.0, 0.0]], [[0.0, 0.0]])
    with pytest.raises(OracleError):
        oracle_grad(make_env("move2"), spec)
    with pytest.raises(OracleError):
        oracle_grad(make_env("bandit_a"), MixturePolicySpec([0.0], [0.0], [0.0], squash=False))


def test_pathwise_needs_a_differentiable_env():
    env = make_env("maze")
    rng = np.random.default_rng(0)
    policy = make_policy(env.spec, LatentSpec("none"), rng, hidden=(4,))
    with pytest.raises(PolicyError):
        estimate_gradient("pathwise", env, policy, rng, 2)


def test_estimate_carries_variance_and_objective():
    env = make_env("bandit_b")
    rng = np.random.default_rng(5)
    policy = make_policy(env.spec, LatentSpec("gaussian", 2), rng, hidden=(8,))
    estimate, traj = estimate_gradient("hybrid", env, policy, rng, 64, config=ElboConfig(groups=8))
    assert estimate.sample_count == 64
    assert estimate.gradient.shape == estimate.per_sample_variance.shape
    assert np.all(estimate.per_sample_variance >= 0.0)
    assert estimate.objective == pytest.approx(float(np.mean(traj.returns())))


def test_regularity_finds_the_cliff():
    report = check_regularity(make_env("bandit_a"))
    assert any(abs(c[0] - 0.3) < 1e-3 for c in report.jump_candidates)
    assert report.reward_bound <= 1.5
    smooth = check_regularity(make_env("smooth_bandit"))
    assert smooth.jump_candidates == []


def test_quadrature_tolerance_default():
    assert Config.QUADRATURE_TOL == 1e-9


def test_score_function_has_zero_mean():
    env = make_env("bandit_b")
    rng = np.random.default_rng(6)
    policy = make_policy(env.spec, LatentSpec("gaussian", 2), rng, hidden=(4,), activation="tanh", final_scale=1.0)
    traj = rollout(env, policy, rng, batch=20000, mode="score")
    estimate = grouped_gradient(traj.joint_log_density(score=True), policy.parameters(), "score", groups=100)
    # weights on the all-zero bandit state get no gradient at all
    live = estimate.standard_error > 0
    assert np.count_nonzero(live) > 10
    z = estimate.gradient[live] / estimate.standard_error[live]
    assert np.mean(z ** 2) < 2.0
    assert np.max(np.abs(z)) < 5.0


def test_pathwise_has_zero_variance_on_an_affine_reward():
    env = make_env("linear")
    spec = MixturePolicySpec([0.0], [0.4], [math.log(0.7)], squash=False)
    mean, se = sample_estimator("pathwise", env, spec, 2000, np.random.default_rng(8))
    assert mean[1] == pytest.approx(1.0, abs=1e-12)
    assert se[1] < 1e-10


def test_hybrid_equals_pathwise_for_a_single_atom_latent():
    env = make_env("bandit_b")
    policy = make_policy(
        env.spec, LatentSpec("categorical", 1), np.random.default_rng(0), hidden=(8,), activation="tanh", final_scale=1.0
    )
    config = ElboConfig(alpha=0.05, groups=4)
    hybrid = hybrid_grad(rollout(env, policy, np.random.default_rng(7), batch=256, mode="hybrid"), policy, None, config)
    pathwise = pathwise_grad(rollout(env, policy, np.random.default_rng(7), batch=256, mode="pathwise"), policy, None, config)
    np.testing.assert_allclose(hybrid.gradient, pathwise.gradient, rtol=1e-10, atol=1e-12)


def test_hybrid_equals_score_when_the_latent_carries_all_randomness():
    # the action head is a fixed lookup from category to action at the sigma floor
    env = make_env("bandit_b")
    weight = np.zeros((2, 4))
    weight[0, 1:] = [math.atanh(-0.6), 0.0, math.atanh(0.3)]
    weight[1, 1:] = LOG_SIGMA_MIN
    latent_head = DenseNet([(parameter(np.array([[0.5], [-0.2], [0.1]])), parameter(np.array([0.3, -0.1, 0.2])))])
    action_head = DenseNet([(const(weight), const(np.zeros(2)))], activation="identity")
    policy = PolicyParams(LatentSpec("categorical", 3), latent_head, action_head, 1)
    config = ElboConfig(groups=4)
    hybrid = hybrid_grad(rollout(env, policy, np.random.default_rng(9), batch=512, mode="hybrid"), policy, None, config)
    score = score_grad(rollout(env, policy, np.random.default_rng(9), batch=512, mode="score"), policy, None, config)
    np.testing.assert_allclose(hybrid.gradient, score.gradient, rtol=1e-10, atol=1e-12)
    assert np.any(np.abs(score.gradient) > 1e-3)


def test_pathwise_variance_below_score_on_quadratic_bandits():
    env = make_env("quadratic")
    rng = np.random.default_rng(10)
    for _ in range(20):
        spec = MixturePolicySpec([0.0], [rng.uniform(-1.5, 1.5)], [math.log(rng.uniform(0.05, 0.5))])
        _, se_path = sample_estimator("pathwise", env, spec, 4000, rng, chunk=4000)
        _, se_score = sample_estimator("score", env, spec, 4000, rng, chunk=4000)
        # mu and log_sigma rows; the single logit has no gradient
        assert np.all(se_path[1:] <= se_score[1:])


def test_oracle_is_stable_under_refinement():
    cases = [
        ("bandit_a", MixturePolicySpec([0.0], [math.atanh(0.25)], [math.log(0.1)])),
        ("bandit_b", MixturePolicySpec([0.2, -0.1], [-1.0, 0.4], [math.log(0.3), math.log(0.2)])),
        ("smooth_bandit", MixturePolicySpec([0.0], [math.atanh(-0.4)], [math.log(0.25)])),
    ]
    for env_id, spec in cases:
        env = make_env(env_id)
        coarse = oracle_grad(env, spec, resolution=256)
        fine = oracle_grad(env, spec, resolution=512)
        assert coarse.converged and fine.converged
        np.testing.assert_allclose(fine.true_gradient, coarse.true_gradient, rtol=0.0, atol=1e-6)
        assert abs(fine.expected_reward - coarse.expected_reward) < 1e-6


# ---------------------------------------------------------------------------
# Full-size bias checks (RPG_RUN_SLOW=1)
# ---------------------------------------------------------------------------

slow = pytest.mark.skipif(not Config.RUN_SLOW, reason="set RPG_RUN_SLOW=1")
FULL_N = 100000


@slow
def test_score_matches_truth_at_full_size():
    env = make_env("linear")
    spec = MixturePolicySpec([0.0], [0.2], [0.0], squash=False)
    mean, se = sample_estimator("score", env, spec, FULL_N, np.random.default_rng(20))
    assert abs(mean[1] - 1.0) < 3 * se[1]

    env = make_env("bandit_b")
    spec = MixturePolicySpec([0.0, 0.0], [math.atanh(-0.8), math.atanh(0.3)], [math.log(0.15)] * 2)
    rows = bias_report(env, spec, FULL_N, np.random.default_rng(21), kinds=("score",))
    assert all(abs(r.z_score) < 3 for r in rows)


@slow
def test_first_order_bias_at_full_size():
    env = make_env("step")
    spec = MixturePolicySpec([0.0], [0.3], [0.0], squash=False)
    rows = bias_report(env, spec, FULL_N, np.random.default_rng(22), kinds=("pathwise",))
    mu_row = next(r for r in rows if r.param == "mu[0]")
    assert mu_row.mean == 0.0
    assert mu_row.oracle == pytest.approx(-_normal_pdf(-0.3), abs=1e-7)
    assert abs(mu_row.z_score) > 5

    env = make_env("bandit_a")
    spec = MixturePolicySpec([0.0], [math.atanh(0.25)], [math.log(0.1)])
    oracle = oracle_grad(env, spec)
    mean, se = sample_estimator("pathwise", env, spec, FULL_N, np.random.default_rng(23))
    bias = mean[1] - oracle.true_gradient[1]
    assert abs(bias) / se[1] > 5
    assert abs(bias + oracle.boundary_term[1]) < 3 * se[1]


@slow
def test_every_estimator_is_unbiased_on_the_smooth_bandit():
    env = make_env("smooth_bandit")
    spec = MixturePolicySpec([0.0], [math.atanh(-0.4)], [math.log(0.25)])
    rows = bias_report(env, spec, FULL_N, np.random.default_rng(24))
    assert {r.estimator for r in rows} == {"score", "pathwise", "hybrid"}
    assert all(abs(r.z_score) < 3 for r in rows)


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
