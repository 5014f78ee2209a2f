from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .base_agent import BaseAgent
from ..core.envs import Env
from ..core.errors import EvaluationError
from ..core.graph import Node, const, stop_gradient
from ..core.policy import PolicyParams, fixed_latent, sample_action, sample_latent, to_env_action

COLLAPSE_FRACTION = 0.1


@dataclass
class ModeCluster:
    center: np.ndarray
    count: int
    mean_return: float


@dataclass
class EvalResult:
    return_mean: float
    return_std: float
    greedy_mean: float
    greedy_std: float
    modes: List[ModeCluster] = field(default_factory=list)
    mode_distance: float = 0.0
    collapse_threshold: float = 0.0

    @property
    def collapsed(self) -> bool:
        return self.mode_distance < self.collapse_threshold


def _episodes(
    env: Env,
    policy: PolicyParams,
    rng: np.random.Generator,
    batch: int,
    greedy_latent: bool,
    greedy_action: bool,
    embed: Optional[Callable[[np.ndarray], Node]] = None,
    latent_features: Optional[np.ndarray] = None,
):
    """
    Roll `batch` episodes without recording gradients; returns (returns, terminal outcomes).
    The outcome is the action for one-step envs and the final state otherwise.
    """
    embed = embed or (lambda obs: const(obs))
    horizon = env.spec.horizon
    resample = set(policy.latent.resample_steps(horizon))
    state = env.initial_state(batch)
    s1 = embed(state.value)
    returns = np.zeros(batch)
    z, action = None, None
    for t in range(horizon):
        if latent_features is not None:
            if z is None:
                z = fixed_latent(policy.latent.kind, latent_features)
        elif z is None or t in resample:
            z = sample_latent(s1, policy, rng, mode="score", greedy=greedy_latent, timestep=t)
        sample = sample_action(embed(state.value), z, policy, rng, greedy=greedy_action)
        action = to_env_action(stop_gradient(sample.action), env.spec, policy.squash)
        result = env.step(state, action, t)
        returns += result.reward.value
        state = const(result.next_state.value)
        if result.done:
            break
    outcome = action.value if horizon == 1 else state.value
    return returns, outcome


def _per_latent_features(policy: PolicyParams, s1: Node, rng: np.random.Generator, count: int) -> np.ndarray:
    """One latent per row: every category in turn, or draws from pi(z|s1)."""
    kind = policy.latent.kind
    if kind == "categorical":
        return np.eye(policy.latent.size)[np.arange(count) % policy.latent.size]
    if kind == "gaussian":
        return sample_latent(s1, policy, rng, mode="score").feature.value
    return np.zeros((count, 0))


def _cluster(outcomes: np.ndarray, returns: np.ndarray, radius: float) -> List[ModeCluster]:
    """Leader clustering: each outcome joins the first center within `radius`."""
    members: List[List[int]] = []
    centers: List[np.ndarray] = []
    for i, point in enumerate(outcomes):
        for k, center in enumerate(centers):
            if np.linalg.norm(point - center) <= radius:
                members[k].append(i)
                break
        else:
            centers.append(point.copy())
            members.append([i])
    clusters = [
        ModeCluster(center=outcomes[idx].mean(axis=0), count=len(idx), mean_return=float(returns[idx].mean()))
        for idx in members
    ]
    return sorted(clusters, key=lambda c: -c.count)


def mode_distance(outcomes: np.ndarray) -> float:
    """Largest pairwise distance between per-latent outcomes."""
    if len(outcomes) < 2:
        return 0.0
    diff = outcomes[:, None, :] - outcomes[None, :, :]
    return float(np.max(np.sqrt(np.sum(diff * diff, axis=-1))))


def evaluate(
    policy: PolicyParams,
    env: Env,
    episodes: int,
    rng: np.random.Generator,
    embed: Optional[Callable[[np.ndarray], Node]] = None,
) -> EvalResult:
    """Sampled protocol, greedy protocol, and a per-latent mode inventory."""
    if episodes < 1:
        raise EvaluationError(f"episodes must be >= 1, got {episodes}")
    sampled, _ = _episodes(env, policy, rng, episodes, greedy_latent=False, greedy_action=False, embed=embed)
    greedy, _ = _episodes(env, policy, rng, episodes, greedy_latent=True, greedy_action=True, embed=embed)

    s1 = (embed or const)(env.initial_state(episodes).value)
    features = _per_latent_features(policy, s1, rng, episodes)
    per_z_returns, outcomes = _episodes(
        env, policy, rng, episodes, greedy_latent=True, greedy_action=True, embed=embed, latent_features=features
    )
    outcomes = outcomes.reshape(episodes, -1)
    scale = 1.0
    if env.spec.horizon == 1 and env.spec.bounded:
        scale = env.spec.action_range
    elif env.spec.horizon > 1 and env.spec.state_bounds is not None:
        lo, hi = env.spec.state_bounds
        scale = float(hi - lo)
    threshold = COLLAPSE_FRACTION * scale
    return EvalResult(
        return_mean=float(np.mean(sampled)),
        return_std=float(np.std(sampled)),
        greedy_mean=float(np.mean(greedy)),
        greedy_std=float(np.std(greedy)),
        modes=_cluster(outcomes, per_z_returns, threshold),
        mode_distance=mode_distance(outcomes),
        collapse_threshold=threshold,
    )


class EvaluatorAgent(BaseAgent):
    async def execute(self, input_data: dict) -> EvalResult:
        """
        input_data: policy, env, episodes, seed and an optional embed function.
        """
        rng = np.random.default_rng(input_data.get("seed", 0))
        result = evaluate(
            input_data["policy"], input_data["env"], input_data["episodes"], rng, input_data.get("embed")
        )
        self.say(
            f"return {result.return_mean:.4f} ± {result.return_std:.4f} (greedy {result.greedy_mean:.4f}), "
            f"{len(result.modes)} mode(s)"
        )
        if result.collapsed and self.config.latent.kind != "none":
            self.say("⚠️ latent modes collapsed")
        return result
