"""
Policy - reparameterized latent-variable policies.

A latent head pi(z|s1) (categorical logits or Gaussian mean/log-std), an action head
pi(a|s,z) producing a Tanh-Normal action, a sequential resampling schedule for z, and the
auxiliary encoder p_phi(z|s,a).

Rollout modes control which paths carry derivatives:
  score     actions and latents are detached; rewards are constants in theta
  pathwise  z (Gaussian) and actions are reparameterized end to end
  hybrid    the decoder sees ng(z); actions are reparameterized
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import PolicyError
from .graph import (
    LOG_SIGMA_MIN,
    DenseNet,
    Node,
    clamp,
    concat,
    const,
    exp,
    gaussian_logpdf,
    lift,
    log,
    log_softmax,
    reduce_sum,
    square,
    stop_gradient,
    take_rows,
    tanh,
)
from .envs import Env, EnvSpec

SQUASH_EPS = 1e-6
LOG_STD_MAX = 2.0
ENCODER_STD = 0.38
MODES = ("score", "pathwise", "hybrid")


@dataclass(frozen=True)
class LatentSpec:
    kind: str = "gaussian"  # categorical | gaussian | none
    size: int = 12
    resample_period: int = 0  # 0: one latent per episode
    fixed_prior: bool = False

    def __post_init__(self):
        if self.kind not in ("categorical", "gaussian", "none"):
            raise PolicyError(f"unknown latent kind '{self.kind}'")
        if self.size < 1:
            raise PolicyError(f"latent size must be >= 1, got {self.size}")
        if self.resample_period < 0:
            raise PolicyError(f"resample_period must be >= 1 (or 0 for once per episode), got {self.resample_period}")

    @property
    def feature_dim(self) -> int:
        return 0 if self.kind == "none" else self.size

    def resample_steps(self, horizon: int) -> List[int]:
        if self.kind == "none":
            return [0]
        period = self.resample_period or horizon
        return list(range(0, horizon, period))


@dataclass
class LatentVariable:
    kind: str
    draw: Node  # (B, size): one-hot rows or reparameterized Gaussian draw
    feature: Node  # what the action head consumes
    log_density: Node  # log pi(ng(z)|s1), differentiable in the head only
    log_density_path: Node  # log pi(z|s1) along the reparameterized draw
    index: Optional[np.ndarray] = None
    noise: Optional[np.ndarray] = None
    timestep: int = 0

    @property
    def batch(self) -> int:
        return self.draw.shape[0]


@dataclass
class ActionSample:
    action: Node  # squashed action in (-1, 1), or raw Gaussian sample when unsquashed
    pre_squash: Node
    log_density: Node  # reparameterized form
    log_density_score: Node  # evaluated at ng(a)
    noise: np.ndarray


class PolicyParams:
    """Latent head plus action head; the action head maps concat(s, z) to (mu, log_sigma)."""

    def __init__(
        self,
        latent: LatentSpec,
        latent_head: Optional[DenseNet],
        action_head: DenseNet,
        action_dim: int,
        squash: bool = True,
        init_log_std: float = 0.0,
        log_std_bounds: Tuple[float, float] = (LOG_SIGMA_MIN, LOG_STD_MAX),
    ):
        if latent.kind != "none" and not latent.fixed_prior and latent_head is None:
            raise PolicyError("a learned latent needs a latent head")
        if latent_head is not None:
            expected = latent.size if latent.kind == "categorical" else 2 * latent.size
            if latent_head.out_dim != expected:
                raise PolicyError(f"latent head outputs {latent_head.out_dim}, expected {expected}")
        if action_head.out_dim != 2 * action_dim:
            raise PolicyError(f"action head outputs {action_head.out_dim}, expected {2 * action_dim}")
        self.latent = latent
        self.latent_head = latent_head if not latent.fixed_prior else None
        self.action_head = action_head
        self.action_dim = action_dim
        self.squash = squash
        self.init_log_std = init_log_std
        self.log_std_bounds = log_std_bounds

    def latent_parameters(self) -> List[Node]:
        return self.latent_head.parameters() if self.latent_head is not None else []

    def action_parameters(self) -> List[Node]:
        return self.action_head.parameters()

    def parameters(self) -> List[Node]:
        return self.latent_parameters() + self.action_parameters()

    def named_parameters(self) -> List[Tuple[str, Node]]:
        named = self.action_head.named_parameters()
        if self.latent_head is not None:
            named = self.latent_head.named_parameters() + named
        return named

    def split_head(self, out: Node, size: int) -> Tuple[Node, Node]:
        lo, hi = self.log_std_bounds
        return out[:, :size], clamp(out[:, size:] + self.init_log_std, lo, hi)


@dataclass
class EncoderParams:
    kind: str
    net: DenseNet
    fixed_std: float = ENCODER_STD

    def __post_init__(self):
        if self.fixed_std <= 0.0:
            raise PolicyError(f"encoder fixed_std must be > 0, got {self.fixed_std}")

    def parameters(self) -> List[Node]:
        return self.net.parameters()


@dataclass
class Trajectory:
    states: List[Node]
    actions: List[Node]  # env-scale actions
    policy_actions: List[Node]  # squashed actions in (-1, 1)
    rewards: List[Node]
    latents: List[LatentVariable]
    latent_of_step: List[int]
    action_log_densities: List[Node]
    action_log_densities_score: List[Node]
    dones: List[bool] = field(default_factory=list)
    mode: str = "hybrid"
    differentiable: bool = True

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def batch(self) -> int:
        return self.states[0].shape[0]

    def latent_at(self, t: int) -> LatentVariable:
        return self.latents[self.latent_of_step[t]]

    def total_reward(self) -> Node:
        total = self.rewards[0]
        for r in self.rewards[1:]:
            total = total + r
        return total

    def returns(self) -> np.ndarray:
        return np.sum([r.value for r in self.rewards], axis=0)

    def joint_log_density(self, score: bool = True) -> Node:
        """log pi(z|s1) summed over latent draws plus sum_t log pi(a_t|s_t,z)."""
        total = const(np.zeros(self.batch))
        for z in self.latents:
            total = total + (z.log_density if score else z.log_density_path)
        pieces = self.action_log_densities_score if score else self.action_log_densities
        for lp in pieces:
            total = total + lp
        return total


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def make_policy(
    env_spec: EnvSpec,
    latent: LatentSpec,
    rng: np.random.Generator,
    hidden: Sequence[int] = (256, 256),
    activation: str = "elu",
    final_scale: float = 0.01,
    init_log_std: float = 0.0,
    squash: bool = True,
) -> PolicyParams:
    if squash and not env_spec.bounded:
        raise PolicyError(f"{env_spec.name}: a squashed policy needs a bounded action box")
    latent_head = None
    if latent.kind != "none" and not latent.fixed_prior:
        out = latent.size if latent.kind == "categorical" else 2 * latent.size
        latent_head = DenseNet.init(
            [env_spec.state_dim, *hidden, out], rng, activation, final_scale, name="latent_head"
        )
    action_head = DenseNet.init(
        [env_spec.state_dim + latent.feature_dim, *hidden, 2 * env_spec.action_dim],
        rng,
        activation,
        final_scale,
        name="action_head",
    )
    return PolicyParams(latent, latent_head, action_head, env_spec.action_dim, squash, init_log_std)


def make_encoder(
    env_spec: EnvSpec,
    latent: LatentSpec,
    rng: np.random.Generator,
    hidden: Sequence[int] = (256, 256),
    activation: str = "elu",
    fixed_std: float = ENCODER_STD,
) -> Optional[EncoderParams]:
    if latent.kind == "none":
        return None
    net = DenseNet.init(
        [env_spec.state_dim + env_spec.action_dim, *hidden, latent.size], rng, activation, name="encoder"
    )
    return EncoderParams(latent.kind, net, fixed_std)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _check_mode(mode: str):
    if mode not in MODES:
        raise PolicyError(f"unknown rollout mode '{mode}'")


def sample_latent(
    s1: Node,
    params: PolicyParams,
    rng: np.random.Generator,
    mode: str = "hybrid",
    greedy: bool = False,
    timestep: int = 0,
) -> LatentVariable:
    """Draw z ~ pi(z|s1) for every row of the batch."""
    _check_mode(mode)
    s1 = lift(s1)
    batch = s1.shape[0]
    spec = params.latent

    if spec.kind == "none":
        empty = const(np.zeros((batch, 0)))
        zero = const(np.zeros(batch))
        return LatentVariable("none", empty, empty, zero, zero, timestep=timestep)

    if spec.kind == "categorical":
        if params.latent_head is None:
            logp = const(np.full((batch, spec.size), -math.log(spec.size)))
        else:
            logp = log_softmax(params.latent_head(s1))
        if greedy:
            index = np.argmax(logp.value, axis=-1)
        else:
            probs = np.exp(logp.value)
            u = rng.random(batch)
            index = np.minimum((np.cumsum(probs, axis=-1) < u[:, None]).sum(axis=-1), spec.size - 1)
        onehot = const(np.eye(spec.size)[index])
        lp = take_rows(logp, index)
        return LatentVariable("categorical", onehot, onehot, lp, lp, index=index, timestep=timestep)

    if params.latent_head is None:
        mu = const(np.zeros((batch, spec.size)))
        log_sigma = const(np.zeros((batch, spec.size)))
    else:
        mu, log_sigma = params.split_head(params.latent_head(s1), spec.size)
    eps = np.zeros((batch, spec.size)) if greedy else rng.standard_normal((batch, spec.size))
    if mode == "pathwise":
        draw = mu + exp(log_sigma) * eps
    else:
        draw = stop_gradient(mu + exp(log_sigma) * eps)
    feature = draw
    log_density = gaussian_logpdf(stop_gradient(draw), mu, log_sigma)
    log_density_path = gaussian_logpdf(draw, mu, log_sigma)
    return LatentVariable("gaussian", draw, feature, log_density, log_density_path, noise=eps, timestep=timestep)


def fixed_latent(kind: str, feature: np.ndarray, timestep: int = 0) -> LatentVariable:
    """A constant latent from stored features; its log-densities are zero."""
    feature = np.asarray(feature, dtype=np.float64)
    node = const(feature)
    zero = const(np.zeros(len(feature)))
    index = np.argmax(feature, axis=-1) if kind == "categorical" else None
    return LatentVariable(kind, node, node, zero, zero, index=index, timestep=timestep)


def squash_correction(u: Node) -> Node:
    """sum_d log(1 - u_d^2 + delta)."""
    return reduce_sum(log(1.0 - square(u) + SQUASH_EPS), axis=-1)


def sample_action(
    s: Node,
    z: LatentVariable,
    params: PolicyParams,
    rng: np.random.Generator,
    greedy: bool = False,
    noise: Optional[np.ndarray] = None,
) -> ActionSample:
    """a = tanh(mu(s,z) + sigma(s,z) * eps) with its Tanh-Normal log-density."""
    s = lift(s)
    inputs = concat([s, z.feature]) if z.kind != "none" else s
    mu, log_sigma = params.split_head(params.action_head(inputs), params.action_dim)
    if noise is not None:
        eps = np.asarray(noise, dtype=np.float64).reshape(mu.shape)
    else:
        eps = np.zeros(mu.shape) if greedy else rng.standard_normal(mu.shape)
    pre = mu + exp(log_sigma) * eps

    log_density = gaussian_logpdf(pre, mu, log_sigma)
    log_density_score = gaussian_logpdf(stop_gradient(pre), mu, log_sigma)
    if not params.squash:
        return ActionSample(pre, pre, log_density, log_density_score, eps)

    action = tanh(pre)
    log_density = log_density - squash_correction(action)
    log_density_score = log_density_score - squash_correction(stop_gradient(action))
    return ActionSample(action, pre, log_density, log_density_score, eps)


def to_env_action(u: Node, env_spec: EnvSpec, squash: bool) -> Node:
    """Map a squashed action in (-1, 1) to the env's action box."""
    if not squash:
        return u
    mid = 0.5 * (env_spec.low + env_spec.high)
    half = 0.5 * (env_spec.high - env_spec.low)
    return u * half + mid


def rollout(
    env: Env,
    params: PolicyParams,
    rng: np.random.Generator,
    batch: int = 1,
    mode: str = "hybrid",
    greedy: bool = False,
) -> Trajectory:
    """Run `batch` episodes in lockstep, resampling z from pi(z|s1) on the latent schedule."""
    _check_mode(mode)
    horizon = env.spec.horizon
    resample = set(params.latent.resample_steps(horizon))

    state = env.initial_state(batch)
    s1 = state
    traj = Trajectory(
        states=[state], actions=[], policy_actions=[], rewards=[], latents=[], latent_of_step=[],
        action_log_densities=[], action_log_densities_score=[], mode=mode,
        differentiable=env.spec.differentiable,
    )
    z = None
    for t in range(horizon):
        if z is None or t in resample:
            z = sample_latent(s1, params, rng, mode=mode, greedy=greedy, timestep=t)
            traj.latents.append(z)
        sample = sample_action(state, z, params, rng, greedy=greedy)
        u = stop_gradient(sample.action) if mode == "score" else sample.action
        action = to_env_action(u, env.spec, params.squash)
        result = env.step(state, action, t)

        traj.latent_of_step.append(len(traj.latents) - 1)
        traj.policy_actions.append(u)
        traj.actions.append(action)
        traj.rewards.append(result.reward)
        traj.action_log_densities.append(sample.log_density)
        traj.action_log_densities_score.append(sample.log_density_score)
        traj.dones.append(result.done)
        state = result.next_state
        traj.states.append(state)
        if result.done:
            break
    return traj


def encoder_log_density(z: LatentVariable, s: Node, a: Node, enc: Optional[EncoderParams]) -> Node:
    """log p_phi(z|s, a) per row."""
    if z.kind == "none" or enc is None:
        if z.kind != "none":
            raise PolicyError(f"{z.kind} latent needs an encoder")
        return const(np.zeros(lift(s).shape[0]))
    if enc.kind != z.kind:
        raise PolicyError(f"encoder kind '{enc.kind}' does not match latent kind '{z.kind}'")
    out = enc.net(concat([lift(s), lift(a)]))
    if z.kind == "categorical":
        return take_rows(log_softmax(out), z.index)
    log_std = np.full(out.shape, math.log(enc.fixed_std))
    return gaussian_logpdf(z.feature, out, log_std)
