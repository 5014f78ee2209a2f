import math
from typing import List, Optional, Tuple

import numpy as np

from .base_agent import BaseAgent
from .evaluator_agent import evaluate
from ..core.config import TrainConfig
from ..core.elbo import action_prior_log_density, elbo_terms
from ..core.envs import Env, make_env
from ..core.errors import GraphError, PolicyError, TrainingDivergence
from ..core.estimators import ElboConfig, encoder_grad, estimate_gradient
from ..core.graph import Node, parameter
from ..core.optim import Adam
from ..core.policy import EncoderParams, LatentSpec, PolicyParams, make_encoder, make_policy
from ..core.records import RunRecord, RunRow

DECAY_START = 0.3


def latent_spec(config: TrainConfig) -> LatentSpec:
    block = config.latent
    return LatentSpec(block.kind, block.size, block.resample_period, block.fixed_prior)


def latent_entropy_coef(config: TrainConfig, alpha: float, progress: float) -> float:
    """alpha_z, linearly decayed to 0 over the last 70% of training when enabled."""
    base = alpha if config.objective.latent_entropy is None else config.objective.latent_entropy
    if not config.objective.latent_entropy_decay or progress <= DECAY_START:
        return base
    return base * max(0.0, 1.0 - (progress - DECAY_START) / (1.0 - DECAY_START))


class TemperatureTuner:
    """Dual update of log(alpha) toward a target per-step action entropy."""

    def __init__(self, alpha: float, target_entropy: float, learning_rate: float, enabled: bool):
        self.enabled = enabled and alpha > 0.0
        self.alpha = alpha
        self.target = target_entropy
        if self.enabled:
            self.log_alpha = parameter(math.log(alpha), "log_alpha")
            self.optimizer = Adam([self.log_alpha], lr=learning_rate, grad_clip=0.0, name="alpha")

    def update(self, entropy: float) -> float:
        if self.enabled:
            self.optimizer.step({self.log_alpha: np.array(entropy - self.target)})
            self.alpha = float(np.exp(self.log_alpha.value))
        return self.alpha


def step_entropy(log_densities: List[Node]) -> float:
    """Mean per-step action entropy estimate -E[log pi(a|s,z)]."""
    return -float(np.mean([lp.value for lp in log_densities]))


class DirectTrainerAgent(BaseAgent):
    """
    On-policy training on a differentiable env: rollout, estimator, ascent on the ELBO,
    maximum-likelihood encoder step, entropy-temperature dual update.
    """

    def __init__(self, config: TrainConfig):
        super().__init__(config)
        self.env: Optional[Env] = None
        self.policy: Optional[PolicyParams] = None
        self.encoder: Optional[EncoderParams] = None

    async def execute(self, input_data: Optional[TrainConfig] = None) -> RunRecord:
        return self.train(input_data or self.config)

    def named_parameters(self) -> List[Tuple[str, Node]]:
        named = self.policy.named_parameters() if self.policy else []
        if self.encoder is not None:
            named += self.encoder.net.named_parameters()
        return named

    def train(self, config: TrainConfig) -> RunRecord:
        run, obj, net = config.run, config.objective, config.network
        rng = np.random.default_rng(run.seed)
        env = make_env(run.env)
        if obj.estimator != "score" and not env.spec.differentiable:
            raise PolicyError(f"{env.name} is not differentiable; use the score estimator")
        spec = latent_spec(config)
        policy = make_policy(
            env.spec, spec, rng, net.hidden, net.activation, net.final_scale, net.init_log_std, squash=env.spec.bounded
        )
        encoder = make_encoder(env.spec, spec, rng, net.hidden, net.activation)
        self.env, self.policy, self.encoder = env, policy, encoder

        policy_opt = Adam(policy.parameters(), config.optim.learning_rate, grad_clip=config.optim.grad_clip,
                          maximize=True, name="policy")
        encoder_opt = None
        if encoder is not None:
            encoder_opt = Adam(encoder.parameters(), config.optim.encoder_learning_rate,
                               grad_clip=config.optim.grad_clip, maximize=True, name="encoder")
        target = -float(env.spec.action_dim) if obj.target_entropy is None else obj.target_entropy
        tuner = TemperatureTuner(obj.alpha, target, config.optim.alpha_learning_rate, obj.auto_alpha)
        prior = action_prior_log_density(policy, env.spec.low, env.spec.high)

        per_iteration = run.batch_size * env.spec.horizon
        iterations = max(1, run.total_steps // per_iteration)
        self.say(f"{obj.estimator} on {env.name}: {iterations} iterations of {run.batch_size} episodes")

        record = RunRecord()
        record.append(self._eval_row(config, 0, 0, None, None, 0.0))
        grad_norm = 0.0
        for it in range(1, iterations + 1):
            alpha = tuner.alpha
            elbo_config = ElboConfig(
                temperature=obj.temperature,
                alpha=alpha,
                beta=obj.beta,
                alpha_z=latent_entropy_coef(config, alpha, it / iterations),
                baseline=obj.baseline,
                prior_log_density=prior,
            )
            try:
                estimate, traj = estimate_gradient(obj.estimator, env, policy, rng, run.batch_size, encoder, elbo_config)
                if not math.isfinite(estimate.objective):
                    raise TrainingDivergence(f"iteration {it}: non-finite objective")
                grad_norm = policy_opt.step(estimate.as_grad_map(policy.parameters()))
                if encoder_opt is not None:
                    enc_estimate = encoder_grad(traj, encoder)
                    encoder_opt.step(enc_estimate.as_grad_map(encoder.parameters()))
            except GraphError as e:
                raise TrainingDivergence(f"iteration {it}: {e}") from e
            record.objective_curve.append(estimate.objective)
            tuner.update(step_entropy(traj.action_log_densities))

            if it % run.eval_every == 0 or it == iterations:
                row = self._eval_row(config, it, it * per_iteration, traj, elbo_config, grad_norm)
                record.append(row)
                self.say(f"step {it}: return {row.return_mean:.4f} ± {row.return_std:.4f}, alpha {alpha:.4g}")

        result = evaluate(policy, env, run.eval_episodes, np.random.default_rng([run.seed, 1]))
        record.mode_inventory = [
            {"center": c.center.tolist(), "count": c.count, "mean_return": c.mean_return} for c in result.modes
        ]
        self.say(f"✅ done: {len(result.modes)} mode(s), final return {record.final.return_mean:.4f}")
        return record

    def _eval_row(self, config: TrainConfig, step: int, env_steps: int, traj, elbo_config, grad_norm: float) -> RunRow:
        rng = np.random.default_rng([config.run.seed, 2, step])
        result = evaluate(self.policy, self.env, config.run.eval_episodes, rng)
        terms = {"reward_term": 0.0, "prior_term": 0.0, "cross_entropy_term": 0.0, "entropy_term": 0.0}
        if traj is not None:
            terms = elbo_terms(
                traj,
                self.encoder,
                elbo_config.temperature,
                elbo_config.alpha,
                elbo_config.beta,
                elbo_config.alpha_z,
                elbo_config.prior_log_density,
            ).summary()
        return RunRow(
            step=step,
            env_steps=env_steps,
            return_mean=result.return_mean,
            return_std=result.return_std,
            grad_norm=float(grad_norm),
            **terms,
        )


def train_direct(config: TrainConfig) -> RunRecord:
    return DirectTrainerAgent(config).train(config)
