"""
ELBO - the variational objective over latent-conditioned trajectories.

    ELBO = E[ R/T + log p(tau) + sum_t log p_phi(z|s_t,a_t) - log pi(z, tau) ]

plus the per-step augmented reward used by the model-based trainer, an exactly
enumerable discrete toy for checking ELBO <= log p(O), and a mutual-information
estimate between z and a for categorical latents on one-step envs.
"""

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import PolicyError
from .graph import Node, const, lift
from .policy import EncoderParams, PolicyParams, Trajectory, encoder_log_density


@dataclass
class ElboTerms:
    reward_term: Node
    prior_term: Node
    cross_entropy_term: Node
    action_entropy: Node
    latent_entropy: Node
    temperature: float = 1.0
    alpha: float = 0.0
    beta: float = 0.0
    alpha_z: Optional[float] = None

    @property
    def entropy_term(self) -> Node:
        return self.action_entropy + self.latent_entropy

    @property
    def total(self) -> Node:
        """Per-row ELBO sample: reward + prior + beta*CE + alpha*H_a + alpha_z*H_z."""
        alpha_z = self.alpha if self.alpha_z is None else self.alpha_z
        return (
            self.reward_term
            + self.prior_term
            + self.beta * self.cross_entropy_term
            + self.alpha * self.action_entropy
            + alpha_z * self.latent_entropy
        )

    def summary(self) -> dict:
        """Batch means of each term, for logging."""
        return {
            "reward_term": float(np.mean(self.reward_term.value)),
            "prior_term": float(np.mean(self.prior_term.value)),
            "cross_entropy_term": float(np.mean(self.cross_entropy_term.value)),
            "entropy_term": float(np.mean(self.entropy_term.value)),
        }


def action_prior_log_density(params: PolicyParams, action_low: np.ndarray, action_high: np.ndarray) -> float:
    """Uniform action prior, in the space the policy density lives in."""
    if params.squash:
        return -params.action_dim * math.log(2.0)
    width = np.asarray(action_high) - np.asarray(action_low)
    if not np.all(np.isfinite(width)):
        return 0.0
    return -float(np.sum(np.log(width)))


def elbo_terms(
    traj: Trajectory,
    enc: Optional[EncoderParams],
    temperature: float = 1.0,
    alpha: float = 0.0,
    beta: float = 0.0,
    alpha_z: Optional[float] = None,
    prior_log_density: float = 0.0,
) -> ElboTerms:
    if temperature <= 0.0:
        raise PolicyError(f"temperature must be > 0, got {temperature}")
    batch = traj.batch
    reward_term = traj.total_reward() * (1.0 / temperature)
    prior_term = const(np.full(batch, traj.length * prior_log_density))

    cross_entropy = const(np.zeros(batch))
    action_entropy = const(np.zeros(batch))
    for t in range(traj.length):
        z = traj.latent_at(t)
        if z.kind != "none" and enc is not None:
            cross_entropy = cross_entropy + encoder_log_density(z, traj.states[t], traj.policy_actions[t], enc)
        action_entropy = action_entropy - traj.action_log_densities[t]
    latent_entropy = const(np.zeros(batch))
    for z in traj.latents:
        latent_entropy = latent_entropy - z.log_density_path

    return ElboTerms(
        reward_term=reward_term,
        prior_term=prior_term,
        cross_entropy_term=cross_entropy,
        action_entropy=action_entropy,
        latent_entropy=latent_entropy,
        temperature=temperature,
        alpha=alpha,
        beta=beta,
        alpha_z=alpha_z,
    )


def augmented_step_reward(r_t, log_pi_a, log_enc, alpha: float, beta: float, temperature: float = 1.0) -> Node:
    """r_t/T - alpha*log pi(a_t|s_t,z) + beta*log p_phi(z|s_t,a_t)."""
    return lift(r_t) * (1.0 / temperature) - alpha * lift(log_pi_a) + beta * lift(log_enc)


# ---------------------------------------------------------------------------
# Enumerable discrete toy
# ---------------------------------------------------------------------------

def _log_softmax(x: np.ndarray) -> np.ndarray:
    shift = x - np.max(x, axis=-1, keepdims=True)
    return shift - np.log(np.sum(np.exp(shift), axis=-1, keepdims=True))


class DiscreteToyMDP:
    """
    2 states, 2 actions, 2 latents, horizon 2, deterministic s_{t+1} = a_t from s_1 = 0.

    pi(z) = softmax(latent_logits), pi(a|s,z) = softmax(action_logits[s, z]),
    p_phi(z|s,a) = softmax(encoder_logits[s, a]); uniform action prior.
    """

    N_STATES = 2
    N_ACTIONS = 2
    N_LATENTS = 2
    HORIZON = 2

    def __init__(self, rewards, latent_logits, action_logits, encoder_logits, temperature: float = 1.0):
        self.rewards = np.asarray(rewards, dtype=np.float64).reshape(2, 2)
        self.latent_logits = np.asarray(latent_logits, dtype=np.float64).reshape(2)
        self.action_logits = np.asarray(action_logits, dtype=np.float64).reshape(2, 2, 2)
        self.encoder_logits = np.asarray(encoder_logits, dtype=np.float64).reshape(2, 2, 2)
        self.temperature = temperature

    @classmethod
    def random(cls, rng: np.random.Generator, scale: float = 2.0, temperature: float = 1.0) -> "DiscreteToyMDP":
        return cls(
            rewards=rng.uniform(-1.0, 1.0, (2, 2)),
            latent_logits=rng.normal(0.0, scale, 2),
            action_logits=rng.normal(0.0, scale, (2, 2, 2)),
            encoder_logits=rng.normal(0.0, scale, (2, 2, 2)),
            temperature=temperature,
        )

    def enumerate(self):
        """Yield (z, [(s_t, a_t)], log pi(z,tau), log p(tau), R, sum_t log p_phi)."""
        log_pz = _log_softmax(self.latent_logits)
        log_pa = _log_softmax(self.action_logits)
        log_enc = _log_softmax(self.encoder_logits)
        log_prior = -math.log(self.N_ACTIONS)
        for z in range(self.N_LATENTS):
            for actions in itertools.product(range(self.N_ACTIONS), repeat=self.HORIZON):
                s, steps = 0, []
                for a in actions:
                    steps.append((s, a))
                    s = a
                log_pi = log_pz[z] + sum(log_pa[s, z, a] for s, a in steps)
                reward = sum(self.rewards[s, a] for s, a in steps)
                enc = sum(log_enc[s, a, z] for s, a in steps)
                yield z, steps, log_pi, self.HORIZON * log_prior, reward, enc

    def elbo(self) -> float:
        return float(sum(
            math.exp(log_pi) * (reward / self.temperature + log_prior + enc - log_pi)
            for _, _, log_pi, log_prior, reward, enc in self.enumerate()
        ))

    def log_evidence(self) -> float:
        """log p(O) = log sum_tau p(tau) exp(R(tau)/T), enumerating tau once (z = 0 rows)."""
        terms = [
            log_prior + reward / self.temperature
            for z, _, _, log_prior, reward, _ in self.enumerate()
            if z == 0
        ]
        peak = max(terms)
        return peak + math.log(sum(math.exp(t - peak) for t in terms))

    def posterior_kl(self) -> float:
        """KL(pi(z,tau) || p(tau|O) prod_t p_phi(z|s_t,a_t)), by enumeration."""
        log_z = self.log_evidence()
        total = 0.0
        for _, _, log_pi, log_prior, reward, enc in self.enumerate():
            log_post = log_prior + reward / self.temperature - log_z + enc
            total += math.exp(log_pi) * (log_pi - log_post)
        return total


# ---------------------------------------------------------------------------
# Mutual information for categorical latents on one-step envs
# ---------------------------------------------------------------------------

def mutual_information(params: PolicyParams, state: np.ndarray, points: int = 4001) -> float:
    """
    I(z; a) in nats for a categorical latent and a 1-D action, by summing over z and
    trapezoid quadrature over the pre-squash action (the tanh map leaves I unchanged).
    """
    if params.latent.kind != "categorical":
        raise PolicyError("mutual information needs a categorical latent")
    if params.action_dim != 1:
        raise PolicyError("mutual information is implemented for 1-D actions")
    n = params.latent.size
    s = np.tile(np.asarray(state, dtype=np.float64).reshape(1, -1), (n, 1))
    if params.latent_head is None:
        log_pz = np.full(n, -math.log(n))
    else:
        log_pz = _log_softmax(params.latent_head(const(s[:1])).value)[0]
    out = params.action_head(const(np.concatenate([s, np.eye(n)], axis=-1)))
    mu, log_sigma = params.split_head(out, 1)
    mu, sigma = mu.value[:, 0], np.exp(log_sigma.value[:, 0])

    grid = np.linspace(np.min(mu - 8.0 * sigma), np.max(mu + 8.0 * sigma), points)
    dens = np.exp(-0.5 * ((grid[None, :] - mu[:, None]) / sigma[:, None]) ** 2) / (
        math.sqrt(2.0 * math.pi) * sigma[:, None]
    )
    pz = np.exp(log_pz)
    marginal = np.sum(pz[:, None] * dens, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dens > 0.0, np.log(dens) - np.log(np.maximum(marginal, 1e-300)), 0.0)
    integrand = np.sum(pz[:, None] * dens * ratio, axis=0)
    return max(float(np.sum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(grid))), 0.0)
