"""
WorldModel - learned latent dynamics, reward and Q heads, replay storage and the
object-centric RND novelty bonus used by the model-based trainer.

Inside the model the policy acts on embedded states s = f(o); the dynamics are z-free,
only the Q heads take z.
"""

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ReplayError
from .graph import DenseNet, GRUCell, Node, backward, concat, const, lift, maximum, mean, polyak_update, reduce_sum, square, stop_gradient
from .optim import Adam
from .policy import EncoderParams, LatentVariable, PolicyParams, encoder_log_density, fixed_latent, sample_action


# ---------------------------------------------------------------------------
# Positional encoding and RND
# ---------------------------------------------------------------------------

def positional_encode(x: np.ndarray, levels: int = 6) -> np.ndarray:
    """Each scalar becomes [sin(2^i x) for i=1..levels] + [cos(2^i x) for i=1..levels]."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ReplayError("positional_encode: non-finite coordinate")
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    freqs = 2.0 ** np.arange(1, levels + 1)
    scaled = x[:, :, None] * freqs  # (N, d, L)
    encoded = np.concatenate([np.sin(scaled), np.cos(scaled)], axis=-1).reshape(len(x), -1)
    return encoded[0] if squeeze else encoded


class RunningMeanStd:
    """Streaming mean/variance with the parallel (Chan et al.) merge of batch moments."""

    def __init__(self, epsilon: float = 1e-4):
        self.mean = 0.0
        self.var = 1.0
        self.count = epsilon

    def update(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if len(values) == 0:
            return
        batch_mean, batch_var, n = float(np.mean(values)), float(np.var(values)), len(values)
        delta = batch_mean - self.mean
        total = self.count + n
        self.mean += delta * n / total
        m2 = self.var * self.count + batch_var * n + delta ** 2 * self.count * n / total
        self.var = m2 / total
        self.count = total

    @property
    def std(self) -> float:
        return math.sqrt(self.var + 1e-8)

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values) - self.mean) / self.std


class RndEstimator:
    """Predictor regresses a frozen random target on positionally encoded observations."""

    def __init__(
        self,
        obs_dim: int,
        rng: np.random.Generator,
        levels: int = 6,
        hidden: int = 512,
        out_dim: int = 64,
        coef: float = 0.1,
        learning_rate: float = 3e-4,
    ):
        sizes = [2 * levels * obs_dim, hidden, hidden, out_dim]
        self.target = DenseNet.init(sizes, rng, "leaky_relu", name="rnd_target")
        self.predictor = DenseNet.init(sizes, rng, "leaky_relu", name="rnd_predictor")
        self.levels = levels
        self.coef = coef
        self.stats = RunningMeanStd()
        self.optimizer = Adam(self.predictor.parameters(), lr=learning_rate, grad_clip=0.0, name="rnd")

    def _error_node(self, obs: np.ndarray) -> Node:
        x = const(positional_encode(np.atleast_2d(obs), self.levels))
        target = stop_gradient(self.target(x))
        return reduce_sum(square(self.predictor(x) - target), axis=-1)

    def raw_error(self, obs: np.ndarray) -> np.ndarray:
        x = const(positional_encode(np.atleast_2d(obs), self.levels))
        diff = self.predictor(x).value - self.target(x).value
        return np.sum(diff * diff, axis=-1)

    def intrinsic_reward(self, obs: np.ndarray, update_stats: bool = False) -> np.ndarray:
        """coef * standardized prediction error."""
        error = self.raw_error(obs)
        if update_stats:
            self.stats.update(error)
        return self.coef * self.stats.normalize(error)

    def train(self, obs: np.ndarray) -> float:
        """One predictor step on a batch of observations; returns the mean raw error."""
        errors = self._error_node(obs)
        self.stats.update(errors.value)
        loss = mean(errors)
        self.optimizer.step(backward(loss, wrt=self.predictor.parameters()))
        return float(loss.value)

    def parameters(self) -> List[Node]:
        return self.predictor.parameters()


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------

@dataclass
class Segment:
    obs: np.ndarray  # (B, L, ds)
    actions: np.ndarray  # (B, L, da)
    rewards: np.ndarray  # (B, L) extrinsic
    next_obs: np.ndarray  # (B, L, ds)
    z: np.ndarray  # (B, L, dz)
    dones: np.ndarray  # (B, L)
    episodes: np.ndarray  # (B, L)
    steps: np.ndarray  # (B, L)
    intrinsic: np.ndarray  # (B, L)

    @property
    def length(self) -> int:
        return self.obs.shape[1]

    @property
    def batch(self) -> int:
        return self.obs.shape[0]

    def total_rewards(self) -> np.ndarray:
        return self.rewards + self.intrinsic

    def check_contiguous(self):
        same_episode = np.all(self.episodes == self.episodes[:, :1], axis=1)
        consecutive = np.all(np.diff(self.steps, axis=1) == 1, axis=1)
        if not np.all(same_episode & consecutive):
            raise ReplayError("segment straddles an episode boundary")


class ReplayBuffer:
    """FIFO ring of transitions tagged with (episode id, step index)."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int, latent_dim: int):
        if capacity < 1:
            raise ReplayError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.z = np.zeros((capacity, latent_dim))
        self.dones = np.zeros(capacity)
        self.episodes = np.full(capacity, -1, dtype=np.int64)
        self.steps = np.zeros(capacity, dtype=np.int64)
        self.intrinsic = np.zeros(capacity)
        self.ptr = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, action, reward, next_obs, z, done, episode, step):
        """Append a batch of transitions (rows are independent episodes)."""
        obs = np.atleast_2d(obs)
        n = len(obs)
        idx = (self.ptr + np.arange(n)) % self.capacity
        self.obs[idx] = obs
        self.actions[idx] = np.atleast_2d(action)
        self.rewards[idx] = np.broadcast_to(reward, (n,))
        self.next_obs[idx] = np.atleast_2d(next_obs)
        self.z[idx] = np.asarray(z).reshape(n, -1) if self.z.shape[1] else np.zeros((n, 0))
        self.dones[idx] = np.broadcast_to(np.asarray(done, dtype=np.float64), (n,))
        self.episodes[idx] = np.broadcast_to(episode, (n,))
        self.steps[idx] = np.broadcast_to(step, (n,))
        self.intrinsic[idx] = 0.0
        self.ptr = int((self.ptr + n) % self.capacity)
        self.size = min(self.size + n, self.capacity)

    def _physical(self, logical: np.ndarray) -> np.ndarray:
        oldest = (self.ptr - self.size) % self.capacity
        return (oldest + logical) % self.capacity

    def segment(self, starts: Sequence[int], length: int) -> Segment:
        """Segments at logical positions (0 = oldest); cross-episode segments are rejected."""
        starts = np.asarray(starts, dtype=np.int64)
        if np.any(starts < 0) or np.any(starts + length > self.size):
            raise ReplayError("segment out of range")
        idx = self._physical(starts[:, None] + np.arange(length)[None, :])
        seg = Segment(
            obs=self.obs[idx],
            actions=self.actions[idx],
            rewards=self.rewards[idx],
            next_obs=self.next_obs[idx],
            z=self.z[idx],
            dones=self.dones[idx],
            episodes=self.episodes[idx],
            steps=self.steps[idx],
            intrinsic=self.intrinsic[idx],
        )
        seg.check_contiguous()
        return seg

    def sample_segments(self, batch: int, length: int, rng: np.random.Generator, max_tries: int = 64) -> Segment:
        """Uniform contiguous single-episode segments, by rejection."""
        if self.size < length:
            raise ReplayError(f"buffer holds {self.size} transitions, need {length}")
        chosen: List[int] = []
        for _ in range(max_tries):
            candidates = rng.integers(0, self.size - length + 1, size=2 * batch)
            idx = self._physical(candidates[:, None] + np.arange(length)[None, :])
            eps = self.episodes[idx]
            ok = np.all(eps == eps[:, :1], axis=1) & np.all(np.diff(self.steps[idx], axis=1) == 1, axis=1)
            chosen.extend(candidates[ok][: batch - len(chosen)].tolist())
            if len(chosen) >= batch:
                return self.segment(chosen, length)
        raise ReplayError(f"could not find {batch} single-episode segments of length {length}")

    def sample_observations(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ReplayError("empty buffer")
        return self.next_obs[self._physical(rng.integers(0, self.size, size=batch))]

    def observations(self) -> np.ndarray:
        return self.next_obs[self._physical(np.arange(self.size))]


def relabel_intrinsic(segment: Segment, rnd: RndEstimator) -> Segment:
    """Recompute each transition's novelty bonus with the current predictor."""
    flat = segment.next_obs.reshape(-1, segment.next_obs.shape[-1])
    bonus = rnd.intrinsic_reward(flat).reshape(segment.rewards.shape)
    return replace(segment, intrinsic=bonus)


# ---------------------------------------------------------------------------
# World model
# ---------------------------------------------------------------------------

class WorldModelParams:
    """
    encoder f(o) -> s (None means s = o), dynamics h(s, a) -> s' (GRU cell or DenseNet),
    reward head R(s, a), twin Q heads Q(s, a, z) with Polyak-averaged target copies.
    """

    def __init__(
        self,
        encoder: Optional[DenseNet],
        dynamics,
        reward: DenseNet,
        q1: DenseNet,
        q2: DenseNet,
        embed_dim: int,
        latent_dim: int,
    ):
        self.encoder = encoder
        self.dynamics = dynamics
        self.reward = reward
        self.q1, self.q2 = q1, q2
        self.q1_target = q1.copy("q1_target")
        self.q2_target = q2.copy("q2_target")
        self.embed_dim = embed_dim
        self.latent_dim = latent_dim

    @classmethod
    def init(
        cls,
        obs_dim: int,
        action_dim: int,
        latent_dim: int,
        rng: np.random.Generator,
        embed_dim: int = 100,
        hidden: int = 256,
        dynamics: str = "gru",
        activation: str = "elu",
        identity_encoder: bool = False,
    ) -> "WorldModelParams":
        if identity_encoder:
            encoder, embed_dim = None, obs_dim
        else:
            encoder = DenseNet.init([obs_dim, hidden, embed_dim], rng, activation, name="wm_encoder")
        if dynamics == "gru":
            dyn = GRUCell(action_dim, embed_dim, rng, name="wm_dynamics")
        else:
            dyn = DenseNet.init([embed_dim + action_dim, hidden, embed_dim], rng, activation, name="wm_dynamics")
        reward = DenseNet.init([embed_dim + action_dim, hidden, 1], rng, activation, name="wm_reward")
        q_in = embed_dim + action_dim + latent_dim
        q1 = DenseNet.init([q_in, hidden, 1], rng, activation, name="q1")
        q2 = DenseNet.init([q_in, hidden, 1], rng, activation, name="q2")
        return cls(encoder, dyn, reward, q1, q2, embed_dim, latent_dim)

    # -- components -------------------------------------------------------
    def encode(self, obs) -> Node:
        obs = lift(obs)
        return obs if self.encoder is None else self.encoder(obs)

    def next_state(self, s: Node, a: Node) -> Node:
        if isinstance(self.dynamics, GRUCell):
            return self.dynamics(a, s)
        return self.dynamics(concat([s, a]))

    def predict_reward(self, s: Node, a: Node) -> Node:
        return self.reward(concat([s, a]))[:, 0]

    def q_value(self, s: Node, a: Node, z_feature: Node, target: bool = False) -> Node:
        heads = (self.q1_target, self.q2_target) if target else (self.q1, self.q2)
        x = concat([s, a, z_feature]) if self.latent_dim else concat([s, a])
        q1, q2 = heads[0](x)[:, 0], heads[1](x)[:, 0]
        return -maximum(-q1, -q2)

    def parameters(self) -> List[Node]:
        params = []
        if self.encoder is not None:
            params += self.encoder.parameters()
        params += self.dynamics.parameters() + self.reward.parameters()
        return params + self.q1.parameters() + self.q2.parameters()

    def named_parameters(self) -> List[Tuple[str, Node]]:
        named = []
        for net in (self.encoder, self.dynamics, self.reward, self.q1, self.q2, self.q1_target, self.q2_target):
            if net is not None:
                named += net.named_parameters()
        return named

    def update_targets(self, tau: float):
        polyak_update(self.q1_target.parameters(), self.q1.parameters(), tau)
        polyak_update(self.q2_target.parameters(), self.q2.parameters(), tau)


@dataclass
class ValueConfig:
    gamma: float = 0.99
    alpha: float = 0.0
    beta: float = 0.0


def entropy_consistency(
    log_pi: Node, z: LatentVariable, s: Node, u: Node, enc: Optional[EncoderParams], config: ValueConfig
) -> Node:
    """r'_t = -alpha * log pi(a_t|s_t,z) + beta * log p_phi(z|s_t,a_t)."""
    bonus = -config.alpha * log_pi
    if config.beta and z.kind != "none" and enc is not None:
        bonus = bonus + config.beta * encoder_log_density(z, s, u, enc)
    return bonus


def value_estimate(
    obs,
    z: LatentVariable,
    model: WorldModelParams,
    policy: PolicyParams,
    K: int,
    rng: np.random.Generator,
    config: ValueConfig = None,
    enc: Optional[EncoderParams] = None,
    state: Optional[Node] = None,
    noise: Optional[Sequence[np.ndarray]] = None,
    target: bool = False,
    max_horizon: Optional[int] = None,
) -> Node:
    """
    gamma^K (Q(s_K, a_K, z) + r'_K) + sum_{t<K} gamma^t (R(s_t, a_t) + r'_t), imagined in the
    learned model from s_0 = f(obs) (or `state`), with actions drawn from the policy.
    """
    config = config or ValueConfig()
    if K < 0 or (max_horizon is not None and K > max_horizon):
        raise ReplayError(f"value horizon {K} outside [0, {max_horizon}]")
    s = model.encode(obs) if state is None else state
    total = None
    discount = 1.0
    for t in range(K + 1):
        eps = None if noise is None else noise[t]
        sample = sample_action(s, z, policy, rng, noise=eps)
        u = sample.action
        r_prime = entropy_consistency(sample.log_density, z, s, u, enc, config)
        if t < K:
            term = (model.predict_reward(s, u) + r_prime) * discount
        else:
            term = (model.q_value(s, u, z.feature, target=target) + r_prime) * discount
        total = term if total is None else total + term
        if t < K:
            s = model.next_state(s, u)
            discount *= config.gamma
    return total


@dataclass
class LossWeights:
    dynamics: float = 1000.0
    reward: float = 0.5
    value: float = 0.5


def model_loss(
    segment: Segment,
    model: WorldModelParams,
    policy: PolicyParams,
    rng: np.random.Generator,
    weights: LossWeights = None,
    config: ValueConfig = None,
    enc: Optional[EncoderParams] = None,
    target_horizon: int = 0,
) -> Node:
    """
    Sum over the segment of
        L1 |h(s_t, a_t) - ng(f(o_{t+1}))|^2 + L2 (R(s_t, a_t) - r_t)^2
        + L3 (Q(s_t, a_t, z) - ng(r_t + gamma (1 - done_t) V(o_{t+1}, z)))^2,
    batch-averaged. s_0 = f(o_0) and later states are rolled through the learned dynamics.
    """
    weights = weights or LossWeights()
    config = config or ValueConfig()
    segment.check_contiguous()
    kind = policy.latent.kind
    s = model.encode(const(segment.obs[:, 0]))
    total = None
    for t in range(segment.length):
        a = const(segment.actions[:, t])
        z = fixed_latent(kind, segment.z[:, t])
        r_gt = segment.total_rewards()[:, t]

        target_state = stop_gradient(model.encode(const(segment.next_obs[:, t])))
        s_next = model.next_state(s, a)
        dyn = reduce_sum(square(s_next - target_state), axis=-1)

        rew = square(model.predict_reward(s, a) - r_gt)

        v_next = value_estimate(
            segment.next_obs[:, t], z, model, policy, target_horizon, rng, config, enc, target=True
        )
        q_target = stop_gradient(v_next * (config.gamma * (1.0 - segment.dones[:, t])) + r_gt)
        val = square(model.q_value(s, a, z.feature) - q_target)

        term = weights.dynamics * dyn + weights.reward * rew + weights.value * val
        total = term if total is None else total + term
        s = s_next
    return mean(total)
