import math
from dataclasses import replace
from typing import List, Optional, Set, Tuple

import numpy as np

from .base_agent import BaseAgent
from .direct_trainer_agent import TemperatureTuner, latent_entropy_coef, latent_spec
from .evaluator_agent import evaluate
from ..core.config import TrainConfig
from ..core.envs import Env, make_env, room_ids
from ..core.errors import ConfigError, GraphError, ReplayError, TrainingDivergence
from ..core.graph import Node, backward, const, mean
from ..core.optim import Adam
from ..core.policy import (
    EncoderParams,
    PolicyParams,
    encoder_log_density,
    fixed_latent,
    make_encoder,
    make_policy,
    sample_action,
    sample_latent,
    to_env_action,
)
from ..core.records import RunRecord, RunRow
from ..core.worldmodel import (
    LossWeights,
    ReplayBuffer,
    RndEstimator,
    Segment,
    ValueConfig,
    WorldModelParams,
    model_loss,
    relabel_intrinsic,
    value_estimate,
)


class ModelBasedAgent(BaseAgent):
    """
    Model-based training loop:
      act with z ~ pi(z|s1) and store transitions; fit the world model on replay segments;
      every `actor_every` model updates, ascend the imagined value for the action policy
      (pathwise through the model), take a score step for pi(z|s1) on V - alpha_z log pi(z|s1),
      fit the latent encoder, tune alpha and Polyak-average the Q targets.
    """

    def __init__(self, config: TrainConfig):
        super().__init__(config)
        self.env: Optional[Env] = None
        self.model: Optional[WorldModelParams] = None
        self.policy: Optional[PolicyParams] = None
        self.encoder: Optional[EncoderParams] = None
        self.rnd: Optional[RndEstimator] = None

    async def execute(self, input_data: Optional[TrainConfig] = None) -> RunRecord:
        return self.train(input_data or self.config)

    def named_parameters(self) -> List[Tuple[str, Node]]:
        named = []
        if self.policy is not None:
            named += self.policy.named_parameters()
        if self.encoder is not None:
            named += self.encoder.net.named_parameters()
        if self.model is not None:
            named += self.model.named_parameters()
        if self.rnd is not None:
            named += self.rnd.target.named_parameters() + self.rnd.predictor.named_parameters()
        return named

    def embed(self, obs: np.ndarray) -> Node:
        return const(self.model.encode(const(obs)).value)

    # -- setup -------------------------------------------------------------
    def _build(self, config: TrainConfig, rng: np.random.Generator):
        run, m, net = config.run, config.model, config.network
        env = make_env(run.env)
        if env.spec.horizon < m.horizon + 1:
            raise ConfigError(
                f"model-based training needs episodes of at least {m.horizon + 1} steps; {env.name} has {env.spec.horizon}"
            )
        if not env.spec.bounded:
            raise ConfigError(f"model-based training needs a bounded action box; {env.name} has none")
        spec = latent_spec(config)
        model = WorldModelParams.init(
            env.spec.state_dim, env.spec.action_dim, spec.feature_dim, rng, m.embed_dim, m.hidden, m.dynamics,
            net.activation,
        )
        embedded = replace(env.spec, state_dim=model.embed_dim)
        policy = make_policy(
            embedded, spec, rng, net.hidden, net.activation, net.final_scale, net.init_log_std, squash=True
        )
        encoder = make_encoder(embedded, spec, rng, net.hidden, net.activation)
        rnd = None
        if config.rnd.enabled:
            r = config.rnd
            rnd = RndEstimator(env.spec.state_dim, rng, r.levels, r.hidden, r.out_dim, r.coef, r.learning_rate)
        self.env, self.model, self.policy, self.encoder, self.rnd = env, model, policy, encoder, rnd

    # -- main loop ---------------------------------------------------------
    def train(self, config: TrainConfig) -> RunRecord:
        run, obj, m, opt = config.run, config.objective, config.model, config.optim
        rng = np.random.default_rng(run.seed)
        self._build(config, rng)
        env, model, policy, encoder = self.env, self.model, self.policy, self.encoder
        da = env.spec.action_dim

        capacity = min(m.buffer_size, max(run.total_steps, m.horizon + 1))
        buffer = ReplayBuffer(capacity, env.spec.state_dim, da, policy.latent.feature_dim)
        model_opt = Adam(model.parameters(), opt.learning_rate, grad_clip=opt.grad_clip, name="model")
        actor_opt = Adam(policy.action_parameters(), opt.learning_rate, grad_clip=opt.grad_clip, maximize=True,
                         name="actor")
        latent_opt = None
        if policy.latent_parameters():
            latent_opt = Adam(policy.latent_parameters(), opt.learning_rate, grad_clip=opt.grad_clip, maximize=True,
                              name="latent")
        encoder_opt = None
        if encoder is not None:
            encoder_opt = Adam(encoder.parameters(), opt.encoder_learning_rate, grad_clip=opt.grad_clip,
                               maximize=True, name="encoder")
        target = -float(da) if obj.target_entropy is None else obj.target_entropy
        tuner = TemperatureTuner(obj.alpha, target, opt.alpha_learning_rate, obj.auto_alpha)
        weights = LossWeights(m.dynamics_weight, m.reward_weight, m.value_weight)
        optimizers = (model_opt, actor_opt, latent_opt, encoder_opt)

        track_rooms = env.name == "maze"
        rooms: Set[int] = set()
        obs = env.initial_state(1).value
        if track_rooms:
            rooms.update(room_ids(obs).tolist())
        resample = set(policy.latent.resample_steps(env.spec.horizon))
        self.say(
            f"{env.name}: {run.total_steps} env steps, {m.seed_steps} seed steps, latent {policy.latent.kind}"
            + (", RND on" if self.rnd else "")
        )

        record = RunRecord()
        record.coverage_curve.append((0, len(rooms)))
        record.append(self._eval_row(config, 0, 0, len(rooms), {}))
        stats = {}
        model_updates = 0
        t, episode, s1, z = 0, 0, obs, None
        for step in range(1, run.total_steps + 1):
            if t == 0:
                s1 = obs
            if t == 0 or t in resample:
                z = sample_latent(self.embed(s1), policy, rng, mode="score", timestep=t)
            if step <= m.seed_steps:
                u = rng.uniform(-1.0, 1.0, size=(1, da))
            else:
                u = sample_action(self.embed(obs), z, policy, rng).action.value
            result = env.step(const(obs), to_env_action(const(u), env.spec, True), t)
            next_obs = result.next_state.value
            buffer.add(obs, u, result.reward.value, next_obs, z.feature.value, result.done, episode, t)
            if track_rooms:
                rooms.update(room_ids(next_obs).tolist())

            if result.done:
                obs, t, episode = env.initial_state(1).value, 0, episode + 1
            else:
                obs, t = next_obs, t + 1

            if step > m.seed_steps and step % m.update_every == 0:
                try:
                    segment = buffer.sample_segments(m.batch_size, m.horizon + 1, rng)
                except ReplayError:
                    segment = None
                if segment is not None:
                    model_updates += 1
                    self._update_model(segment, config, rng, tuner.alpha, weights, model_opt, buffer, stats)
                    if model_updates % m.actor_every == 0:
                        progress = step / run.total_steps
                        self._update_policy(segment, config, rng, tuner, progress, optimizers, stats)

            if step % run.eval_every == 0 or step == run.total_steps:
                record.coverage_curve.append((step, len(rooms)))
                row = self._eval_row(config, model_updates, step, len(rooms), stats)
                record.append(row)
                self.say(
                    f"step {step}: return {row.return_mean:.4f}, rooms {len(rooms)}, "
                    f"model loss {stats.get('model_loss', float('nan')):.4g}"
                )

        self.say(f"✅ done after {model_updates} model updates")
        return record

    # -- updates -----------------------------------------------------------
    def _value_config(self, config: TrainConfig, alpha: float) -> ValueConfig:
        return ValueConfig(gamma=config.objective.gamma, alpha=alpha, beta=config.objective.beta)

    def _update_model(self, segment: Segment, config, rng, alpha, weights, model_opt, buffer, stats):
        model, m = self.model, config.model
        if self.rnd is not None:
            stats["rnd_error"] = self.rnd.train(buffer.sample_observations(m.batch_size, rng))
            segment = relabel_intrinsic(segment, self.rnd)
        try:
            loss = model_loss(
                segment, model, self.policy, rng, weights, self._value_config(config, alpha), self.encoder,
                m.target_horizon,
            )
        except GraphError as e:
            raise TrainingDivergence(f"model loss: {e}") from e
        if not math.isfinite(float(loss.value)):
            raise TrainingDivergence("model loss is not finite")
        model_opt.step(backward(loss, wrt=model.parameters()))
        model.update_targets(m.polyak)
        stats["model_loss"] = float(loss.value)
        stats["reward_term"] = float(np.mean(segment.rewards))

    def _update_policy(self, segment: Segment, config, rng, tuner, progress, optimizers, stats):
        _, actor_opt, latent_opt, encoder_opt = optimizers
        model, policy, encoder, m = self.model, self.policy, self.encoder, config.model
        kind = policy.latent.kind
        vconfig = self._value_config(config, tuner.alpha)
        try:
            # action policy: pathwise through the learned model
            z0 = fixed_latent(kind, segment.z[:, 0])
            value = mean(value_estimate(segment.obs[:, 0], z0, model, policy, m.horizon, rng, vconfig, encoder))
            stats["grad_norm"] = actor_opt.step(backward(value, wrt=policy.action_parameters()))

            # latent policy: score gradient on V(s1, z) - alpha_z log pi(z|s1)
            if latent_opt is not None:
                s1 = self.embed(self.env.initial_state(m.batch_size).value)
                z = sample_latent(s1, policy, rng, mode="score")
                v = value_estimate(None, fixed_latent(kind, z.feature.value), model, policy, m.horizon, rng,
                                   vconfig, encoder, state=s1)
                alpha_z = latent_entropy_coef(config, tuner.alpha, progress)
                advantage = v.value - alpha_z * z.log_density.value
                advantage = advantage - np.mean(advantage)
                latent_opt.step(backward(mean(z.log_density * advantage), wrt=policy.latent_parameters()))

            # encoder: maximum likelihood of z given (s_t, a_t) along the segment
            cross_entropy = None
            if encoder_opt is not None:
                for t in range(segment.length):
                    term = encoder_log_density(
                        fixed_latent(kind, segment.z[:, t]), self.embed(segment.obs[:, t]),
                        const(segment.actions[:, t]), encoder,
                    )
                    cross_entropy = term if cross_entropy is None else cross_entropy + term
                cross_entropy = mean(cross_entropy) * (1.0 / segment.length)
                encoder_opt.step(backward(cross_entropy, wrt=encoder.parameters()))
                stats["cross_entropy_term"] = float(cross_entropy.value)

            sample = sample_action(self.embed(segment.obs[:, 0]), z0, policy, rng)
            entropy = -float(np.mean(sample.log_density.value))
        except GraphError as e:
            raise TrainingDivergence(f"policy update: {e}") from e
        stats["entropy_term"] = entropy
        tuner.update(entropy)

    def _eval_row(self, config: TrainConfig, step: int, env_steps: int, rooms: int, stats: dict) -> RunRow:
        rng = np.random.default_rng([config.run.seed, 2, env_steps])
        result = evaluate(self.policy, self.env, config.run.eval_episodes, rng, embed=self.embed)
        return RunRow(
            step=step,
            env_steps=env_steps,
            return_mean=result.return_mean,
            return_std=result.return_std,
            coverage=rooms,
            reward_term=stats.get("reward_term", 0.0),
            cross_entropy_term=stats.get("cross_entropy_term", 0.0),
            entropy_term=stats.get("entropy_term", 0.0),
            grad_norm=float(stats.get("grad_norm", 0.0)),
        )


def train_model_based(config: TrainConfig) -> RunRecord:
    return ModelBasedAgent(config).train(config)
