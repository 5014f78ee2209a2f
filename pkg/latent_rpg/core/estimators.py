"""
Estimators - score-function, pathwise and hybrid policy gradients, plus a quadrature
oracle for the true gradient of one-step envs and the regularity diagnostics that tell
when the pathwise estimator can be trusted.

Every estimator returns the batch mean of per-sample gradients of the ELBO sample R_elbo:

    score     (R_elbo - b) * grad log pi(z, tau)            rewards held constant
    pathwise  grad R_elbo(tau_theta(z))                     through reparameterized samples
    hybrid    (R_elbo - b) * grad log pi(z|s1) + grad R_elbo(tau_theta(z))
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .envs import Env
from .errors import OracleError, PolicyError
from .graph import DenseNet, Node, backward, concat, const, flatten_grads, parameter, reduce_sum
from .elbo import elbo_terms
from .policy import EncoderParams, LatentSpec, PolicyParams, Trajectory, encoder_log_density, rollout

KINDS = ("score", "pathwise", "hybrid")
QUADRATURE_TOL = 1e-9
REGULARITY_SCALES = (1e-2, 1e-3, 1e-4)


@dataclass
class ElboConfig:
    temperature: float = 1.0
    alpha: float = 0.0
    beta: float = 0.0
    alpha_z: Optional[float] = None
    baseline: bool = True
    prior_log_density: float = 0.0
    groups: int = 16


@dataclass
class GradEstimate:
    gradient: np.ndarray
    sample_count: int
    per_sample_variance: np.ndarray
    estimator_kind: str
    slices: Dict[str, Tuple[slice, Tuple[int, ...]]] = field(default_factory=dict)
    group_means: Optional[np.ndarray] = None
    group_sizes: Optional[np.ndarray] = None
    objective: float = float("nan")

    @property
    def standard_error(self) -> np.ndarray:
        return np.sqrt(self.per_sample_variance / max(self.sample_count, 1))

    def grad_of(self, name: str) -> np.ndarray:
        where, shape = self.slices[name]
        return self.gradient[where].reshape(shape)

    def as_grad_map(self, params: Sequence[Node]) -> Dict[Node, np.ndarray]:
        out, offset = {}, 0
        for p in params:
            size = p.value.size
            out[p] = self.gradient[offset:offset + size].reshape(p.shape)
            offset += size
        return out


def _slices(params: Sequence[Node]) -> Dict[str, Tuple[slice, Tuple[int, ...]]]:
    out, offset = {}, 0
    for i, p in enumerate(params):
        name = p.name or f"param{i}"
        out[name] = (slice(offset, offset + p.value.size), p.shape)
        offset += p.value.size
    return out


def grouped_gradient(surrogate: Node, params: Sequence[Node], kind: str, groups: int = 16) -> GradEstimate:
    """
    Batch mean of d(surrogate_i)/d(params) with batch-means variance.

    Rows are dealt round-robin into G = min(groups, B) groups; one backward pass per group
    gives the group mean, and the per-sample variance is sum_g n_g (m_g - m)^2 / (G - 1).
    """
    batch = surrogate.shape[0]
    n_groups = max(1, min(groups, batch))
    assignment = np.arange(batch) % n_groups
    means, sizes = [], []
    for g in range(n_groups):
        mask = (assignment == g).astype(np.float64)
        size = int(mask.sum())
        root = reduce_sum(surrogate * (mask / size))
        means.append(flatten_grads(backward(root, wrt=params), params))
        sizes.append(size)
    means = np.stack(means)
    sizes = np.asarray(sizes, dtype=np.float64)
    gradient = np.sum(sizes[:, None] * means, axis=0) / batch
    if n_groups > 1:
        variance = np.sum(sizes[:, None] * (means - gradient) ** 2, axis=0) / (n_groups - 1)
    else:
        variance = np.zeros_like(gradient)
    if not np.all(np.isfinite(gradient)):
        raise PolicyError(f"{kind} estimator produced a non-finite gradient")
    return GradEstimate(
        gradient=gradient,
        sample_count=batch,
        per_sample_variance=variance,
        estimator_kind=kind,
        slices=_slices(params),
        group_means=means,
        group_sizes=sizes,
    )


def _as_list(batch: Union[Trajectory, Sequence[Trajectory]]) -> List[Trajectory]:
    batch = [batch] if isinstance(batch, Trajectory) else list(batch)
    if not batch:
        raise PolicyError("estimator needs a nonempty batch")
    return batch


def _elbo_samples(batch: List[Trajectory], enc: Optional[EncoderParams], config: ElboConfig):
    totals, terms = [], []
    for traj in batch:
        t = elbo_terms(
            traj, enc, config.temperature, config.alpha, config.beta, config.alpha_z, config.prior_log_density
        )
        terms.append(t)
        totals.append(t.total)
    total = totals[0] if len(totals) == 1 else concat(totals, axis=0)
    return total, terms


def _cat(nodes: List[Node]) -> Node:
    return nodes[0] if len(nodes) == 1 else concat(nodes, axis=0)


def _advantage(total: Node, config: ElboConfig) -> np.ndarray:
    values = total.value
    return values - np.mean(values) if config.baseline else values


def _check_pathwise(batch: List[Trajectory], mode: str):
    for traj in batch:
        if not traj.differentiable:
            raise PolicyError("pathwise gradients need a differentiable env")
        if traj.mode != mode:
            raise PolicyError(f"trajectory rolled out in '{traj.mode}' mode, expected '{mode}'")


def score_grad(batch, params: PolicyParams, enc: Optional[EncoderParams] = None, config: ElboConfig = None) -> GradEstimate:
    config = config or ElboConfig()
    batch = _as_list(batch)
    total, _ = _elbo_samples(batch, enc, config)
    log_pi = _cat([traj.joint_log_density(score=True) for traj in batch])
    surrogate = log_pi * _advantage(total, config)
    estimate = grouped_gradient(surrogate, params.parameters(), "score", config.groups)
    estimate.objective = float(np.mean(total.value))
    return estimate


def pathwise_grad(batch, params: PolicyParams, enc: Optional[EncoderParams] = None, config: ElboConfig = None) -> GradEstimate:
    config = config or ElboConfig()
    batch = _as_list(batch)
    _check_pathwise(batch, "pathwise")
    total, _ = _elbo_samples(batch, enc, config)
    estimate = grouped_gradient(total, params.parameters(), "pathwise", config.groups)
    estimate.objective = float(np.mean(total.value))
    return estimate


def hybrid_grad(batch, params: PolicyParams, enc: Optional[EncoderParams] = None, config: ElboConfig = None) -> GradEstimate:
    config = config or ElboConfig()
    batch = _as_list(batch)
    _check_pathwise(batch, "hybrid")
    total, _ = _elbo_samples(batch, enc, config)
    log_pz = None
    for traj in batch:
        rows = const(np.zeros(traj.batch))
        for z in traj.latents:
            rows = rows + z.log_density
        log_pz = rows if log_pz is None else concat([log_pz, rows], axis=0)
    surrogate = log_pz * _advantage(total, config) + total
    estimate = grouped_gradient(surrogate, params.parameters(), "hybrid", config.groups)
    estimate.objective = float(np.mean(total.value))
    return estimate


ESTIMATORS = {"score": score_grad, "pathwise": pathwise_grad, "hybrid": hybrid_grad}


def estimate_gradient(
    kind: str,
    env: Env,
    params: PolicyParams,
    rng: np.random.Generator,
    batch: int,
    enc: Optional[EncoderParams] = None,
    config: ElboConfig = None,
) -> Tuple[GradEstimate, Trajectory]:
    """Roll out in the mode `kind` needs and apply the matching estimator."""
    if kind not in ESTIMATORS:
        raise PolicyError(f"unknown estimator '{kind}'")
    traj = rollout(env, params, rng, batch=batch, mode=kind)
    return ESTIMATORS[kind](traj, params, enc, config), traj


def encoder_grad(batch, enc: EncoderParams, groups: int = 1) -> GradEstimate:
    """Gradient of the mean cross-entropy term with respect to the encoder."""
    batch = _as_list(batch)
    rows = []
    for traj in batch:
        ce = const(np.zeros(traj.batch))
        for t in range(traj.length):
            ce = ce + encoder_log_density(traj.latent_at(t), traj.states[t], traj.policy_actions[t], enc)
        rows.append(ce)
    surrogate = _cat(rows)
    estimate = grouped_gradient(surrogate, enc.parameters(), "encoder", groups)
    estimate.objective = float(np.mean(surrogate.value))
    return estimate


# ---------------------------------------------------------------------------
# Mixture policies with an analytic density
# ---------------------------------------------------------------------------

@dataclass
class MixturePolicySpec:
    """
    pi(a) = sum_k w_k N(x; mu_k, sigma_k) with a = tanh(x) (squash) or a = x.

    Gradient vectors are ordered [logits (K), mus (K*d), log_sigmas (K*d)].
    """

    logits: np.ndarray
    mus: np.ndarray
    log_sigmas: np.ndarray
    squash: bool = True

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64).reshape(-1)
        k = len(self.logits)
        self.mus = np.asarray(self.mus, dtype=np.float64).reshape(k, -1)
        self.log_sigmas = np.asarray(self.log_sigmas, dtype=np.float64).reshape(self.mus.shape)

    @property
    def components(self) -> int:
        return len(self.logits)

    @property
    def action_dim(self) -> int:
        return self.mus.shape[1]

    @property
    def weights(self) -> np.ndarray:
        w = np.exp(self.logits - np.max(self.logits))
        return w / np.sum(w)

    def param_names(self) -> List[str]:
        k, d = self.mus.shape
        suffix = (lambda i, j: f"[{i}]") if d == 1 else (lambda i, j: f"[{i},{j}]")
        names = [f"logit[{i}]" for i in range(k)]
        names += [f"mu{suffix(i, j)}" for i in range(k) for j in range(d)]
        names += [f"log_sigma{suffix(i, j)}" for i in range(k) for j in range(d)]
        return names

    def to_policy(self) -> PolicyParams:
        """Tabular PolicyParams whose leaves are exactly these parameters (state must be 0)."""
        k, d = self.mus.shape
        latent_head = DenseNet(
            [(parameter(np.zeros((k, 1)), "latent_head.0.weight"), parameter(self.logits.copy(), "latent_head.0.bias"))],
            activation="identity",
            name="latent_head",
        )
        weight = np.zeros((2 * d, 1 + k))
        weight[:d, 1:] = self.mus.T
        weight[d:, 1:] = self.log_sigmas.T
        action_head = DenseNet(
            [(parameter(weight, "action_head.0.weight"), parameter(np.zeros(2 * d), "action_head.0.bias"))],
            activation="identity",
            name="action_head",
        )
        return PolicyParams(LatentSpec("categorical", k), latent_head, action_head, d, squash=self.squash)

    def oracle_vector(self, flat: np.ndarray, slices: Dict[str, Tuple[slice, Tuple[int, ...]]]) -> np.ndarray:
        """Reorder a flat gradient of to_policy()'s leaves into [logits, mus, log_sigmas]."""
        k, d = self.mus.shape
        flat = np.asarray(flat)
        where, _ = slices["latent_head.0.bias"]
        logits = flat[..., where]
        where, shape = slices["action_head.0.weight"]
        weight = flat[..., where].reshape(flat.shape[:-1] + shape)
        mus = np.swapaxes(weight[..., :d, 1:], -1, -2).reshape(flat.shape[:-1] + (k * d,))
        sigmas = np.swapaxes(weight[..., d:, 1:], -1, -2).reshape(flat.shape[:-1] + (k * d,))
        return np.concatenate([logits, mus, sigmas], axis=-1)

    def to_action(self, x: np.ndarray, env: Env) -> np.ndarray:
        if not self.squash:
            return x
        mid = 0.5 * (env.spec.low + env.spec.high)
        half = 0.5 * (env.spec.high - env.spec.low)
        return mid + half * np.tanh(x)

    def to_pre_squash(self, a: float, dim: int, env: Env) -> float:
        if not self.squash:
            return a
        mid = 0.5 * (env.spec.low[dim] + env.spec.high[dim])
        half = 0.5 * (env.spec.high[dim] - env.spec.low[dim])
        u = (a - mid) / half
        if abs(u) >= 1.0:
            return math.copysign(math.inf, u)
        return math.atanh(u)

    def component_densities(self, x: np.ndarray) -> np.ndarray:
        """N(x; mu_k, sigma_k) per component, x of shape (N, d) -> (K, N)."""
        sig = np.exp(self.log_sigmas)
        z = (x[None, :, :] - self.mus[:, None, :]) / sig[:, None, :]
        log_n = -0.5 * np.sum(z * z, axis=-1) - np.sum(self.log_sigmas, axis=-1)[:, None] - 0.5 * self.action_dim * math.log(2 * math.pi)
        return np.exp(log_n)

    def density_gradients(self, x: np.ndarray) -> np.ndarray:
        """d pi(x)/d theta for every parameter, shape (P, N)."""
        w = self.weights
        dens = self.component_densities(x)
        mix = np.sum(w[:, None] * dens, axis=0)
        sig = np.exp(self.log_sigmas)
        z = (x[None, :, :] - self.mus[:, None, :]) / sig[:, None, :]
        d_logits = w[:, None] * (dens - mix[None, :])
        d_mu = (w[:, None, None] * dens[:, :, None] * z / sig[:, None, :]).transpose(0, 2, 1)
        d_ls = (w[:, None, None] * dens[:, :, None] * (z * z - 1.0)).transpose(0, 2, 1)
        k, d = self.mus.shape
        return np.concatenate([d_logits, d_mu.reshape(k * d, -1), d_ls.reshape(k * d, -1)], axis=0)

    def support(self, width: float = 12.0) -> Tuple[np.ndarray, np.ndarray]:
        sig = np.exp(self.log_sigmas)
        return np.min(self.mus - width * sig, axis=0), np.max(self.mus + width * sig, axis=0)


@dataclass
class OracleResult:
    true_gradient: np.ndarray
    quadrature_resolution: int
    boundary_term: np.ndarray
    pathwise_expectation: np.ndarray
    expected_reward: float
    converged: bool
    param_names: List[str] = field(default_factory=list)


def _trapezoid(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    return np.sum(0.5 * (values[..., 1:] + values[..., :-1]) * np.diff(grid), axis=-1)


def _segment_integral(fn, lo: float, hi: float, intervals: int, tol: float, max_intervals: int):
    """
    Integrate fn (grid -> (P, N) values) over [lo, hi] by trapezoid with interval doubling.
    Returns (Richardson-corrected integral, final interval count, converged).
    """
    n = intervals
    grid = np.linspace(lo, hi, n + 1)
    previous = _trapezoid(fn(grid), grid)
    while True:
        n *= 2
        grid = np.linspace(lo, hi, n + 1)
        current = _trapezoid(fn(grid), grid)
        error = np.max(np.abs(current - previous)) / 3.0
        if error < tol:
            return current + (current - previous) / 3.0, n, True
        if n >= max_intervals:
            return current, n, False
        previous = current


def _check_oracle(env: Env, spec: MixturePolicySpec):
    if env.spec.horizon != 1:
        raise OracleError(f"{env.name}: the quadrature oracle needs a one-step env")
    if spec.action_dim != env.spec.action_dim:
        raise OracleError(f"{env.name}: policy has {spec.action_dim} action dims, env has {env.spec.action_dim}")
    if spec.action_dim > 2:
        raise OracleError("the quadrature oracle supports at most 2 action dims")
    if spec.action_dim == 2 and env.jumps:
        raise OracleError(f"{env.name}: 2-D oracle supports jump-free rewards only")
    if not spec.squash and env.spec.bounded:
        raise OracleError(f"{env.name}: an unsquashed density puts mass outside the action box")


def _jump_splits(env: Env, spec: MixturePolicySpec, lo: float, hi: float) -> List[float]:
    cuts = [spec.to_pre_squash(c, 0, env) for c in env.jumps]
    return sorted(c for c in cuts if lo < c < hi)


def oracle_grad(
    env: Env,
    spec: MixturePolicySpec,
    resolution: int = 256,
    tol: float = QUADRATURE_TOL,
    max_intervals: int = 1 << 20,
) -> OracleResult:
    """
    Ground-truth gradient of E[R] by quadrature of R * d(pi)/d(theta) over the pre-squash
    action, split at declared jumps, plus the boundary term
        (R(c+) - R(c-)) * w_k * N(x_c; mu_k, sigma_k) * dx/d(theta) at x = x_c
    that separates the true gradient from the pathwise expectation.
    """
    _check_oracle(env, spec)
    n_params = len(spec.param_names())

    def integrand(x: np.ndarray) -> np.ndarray:
        reward = env.one_step_reward(spec.to_action(x, env))
        value = np.sum(spec.weights[:, None] * spec.component_densities(x), axis=0) * reward
        return np.vstack([spec.density_gradients(x) * reward[None, :], value[None, :]])

    if spec.action_dim == 1:
        lo, hi = spec.support()
        lo, hi = float(lo[0]), float(hi[0])
        cuts = [lo] + _jump_splits(env, spec, lo, hi) + [hi]
        total = np.zeros(n_params + 1)
        resolution_used, converged = 0, True
        for a, b in zip(cuts[:-1], cuts[1:]):
            part, n, ok = _segment_integral(lambda g: integrand(g.reshape(-1, 1)), a, b, resolution, tol, max_intervals)
            total += part
            resolution_used = max(resolution_used, n)
            converged &= ok
    else:
        total, resolution_used, converged = _grid_integral_2d(integrand, spec, resolution, tol)

    true_gradient, expected = total[:n_params], float(total[n_params])
    boundary = boundary_term(env, spec)
    pathwise = true_gradient - boundary
    pathwise[: spec.components] = 0.0
    return OracleResult(
        true_gradient=true_gradient,
        quadrature_resolution=resolution_used,
        boundary_term=boundary,
        pathwise_expectation=pathwise,
        expected_reward=expected,
        converged=converged,
        param_names=spec.param_names(),
    )


def _grid_integral_2d(integrand, spec: MixturePolicySpec, resolution: int, tol: float, max_side: int = 1024):
    lo, hi = spec.support(width=10.0)
    n = max(16, int(math.sqrt(resolution)))
    previous = None
    while True:
        gx = np.linspace(lo[0], hi[0], n + 1)
        gy = np.linspace(lo[1], hi[1], n + 1)
        xx, yy = np.meshgrid(gx, gy, indexing="ij")
        points = np.stack([xx.ravel(), yy.ravel()], axis=-1)
        values = integrand(points).reshape(-1, n + 1, n + 1)
        current = _trapezoid(_trapezoid(values, gy), gx)
        if previous is not None and np.max(np.abs(current - previous)) / 3.0 < tol:
            return current + (current - previous) / 3.0, (n + 1) ** 2, True
        if n >= max_side:
            return current, (n + 1) ** 2, False
        previous = current
        n *= 2


def boundary_term(env: Env, spec: MixturePolicySpec, offset: float = 1e-9) -> np.ndarray:
    """Flux of probability mass across each declared jump, weighted by the reward step."""
    k, d = spec.mus.shape
    out = np.zeros(k + 2 * k * d)
    if d != 1 or not env.jumps:
        return out
    sig = np.exp(spec.log_sigmas[:, 0])
    w = spec.weights
    for c in env.jumps:
        x_c = spec.to_pre_squash(c, 0, env)
        if not math.isfinite(x_c):
            continue
        below = spec.to_action(np.array([[x_c - offset * max(1.0, abs(x_c))]]), env)
        above = spec.to_action(np.array([[x_c + offset * max(1.0, abs(x_c))]]), env)
        jump = float(env.one_step_reward(above)[0] - env.one_step_reward(below)[0])
        dens = spec.component_densities(np.array([[x_c]]))[:, 0]
        out[k:k + k] += jump * w * dens
        out[2 * k:] += jump * w * dens * (x_c - spec.mus[:, 0])
    return out


def expected_reward(env: Env, spec: MixturePolicySpec, intervals: int = 1 << 14) -> float:
    """E[R] on a fixed grid (no adaptivity), split at jumps; smooth in the policy parameters."""
    _check_oracle(env, spec)
    lo, hi = spec.support()
    lo, hi = float(lo[0]), float(hi[0])
    cuts = [lo] + _jump_splits(env, spec, lo, hi) + [hi]
    total = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        grid = np.linspace(a, b, intervals + 1)
        x = grid.reshape(-1, 1)
        reward = env.one_step_reward(spec.to_action(x, env))
        values = np.sum(spec.weights[:, None] * spec.component_densities(x), axis=0) * reward
        total += float(_trapezoid(values, grid))
    return total


# ---------------------------------------------------------------------------
# Bias report
# ---------------------------------------------------------------------------

@dataclass
class BiasRow:
    estimator: str
    param: str
    mean: float
    se: float
    oracle: float
    bias: float
    z_score: float
    boundary: float

    def as_row(self) -> List:
        return [self.estimator, self.param, self.mean, self.se, self.oracle, self.bias, self.z_score, self.boundary]


BIAS_COLUMNS = ["estimator", "param", "mean", "se", "oracle", "bias", "z_score", "boundary"]


def sample_estimator(
    kind: str,
    env: Env,
    spec: MixturePolicySpec,
    samples: int,
    rng: np.random.Generator,
    chunk: int = 5000,
    groups_per_chunk: int = 50,
) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and standard error of an estimator over `samples` draws, in oracle parameter order."""
    params = spec.to_policy()
    config = ElboConfig(baseline=True)
    means, sizes = [], []
    remaining = samples
    while remaining > 0:
        n = min(chunk, remaining)
        config.groups = min(groups_per_chunk, n)
        estimate, _ = estimate_gradient(kind, env, params, rng, n, config=config)
        means.append(spec.oracle_vector(estimate.group_means, estimate.slices))
        sizes.append(estimate.group_sizes)
        remaining -= n
    means = np.concatenate(means, axis=0)
    sizes = np.concatenate(sizes)
    total = float(np.sum(sizes))
    mean = np.sum(sizes[:, None] * means, axis=0) / total
    if len(sizes) > 1:
        variance = np.sum(sizes[:, None] * (means - mean) ** 2, axis=0) / (len(sizes) - 1)
    else:
        variance = np.zeros_like(mean)
    return mean, np.sqrt(variance / total)


def bias_report(
    env: Env,
    spec: MixturePolicySpec,
    samples: int,
    rng: np.random.Generator,
    kinds: Sequence[str] = KINDS,
    oracle: Optional[OracleResult] = None,
) -> List[BiasRow]:
    """Estimator means +- s.e. against the quadrature oracle, one row per (estimator, parameter)."""
    oracle = oracle or oracle_grad(env, spec)
    names = spec.param_names()
    rows = []
    for kind in kinds:
        mean, se = sample_estimator(kind, env, spec, samples, rng)
        for i, name in enumerate(names):
            bias = float(mean[i] - oracle.true_gradient[i])
            if se[i] > 0.0:
                z = bias / float(se[i])
            else:
                z = 0.0 if abs(bias) < 1e-12 else math.copysign(math.inf, bias)
            rows.append(BiasRow(kind, name, float(mean[i]), float(se[i]), float(oracle.true_gradient[i]),
                                bias, z, float(oracle.boundary_term[i])))
    return rows


# ---------------------------------------------------------------------------
# Regularity diagnostics
# ---------------------------------------------------------------------------

@dataclass
class RegularityReport:
    reward_bound: float
    empirical_lipschitz: float
    jump_candidates: List[Tuple[float, ...]]
    ratio_by_scale: Dict[float, float] = field(default_factory=dict)


def _domain(env: Env, spec: Optional[MixturePolicySpec]) -> Tuple[np.ndarray, np.ndarray]:
    if env.spec.horizon == 1:
        if env.spec.bounded:
            return env.spec.low, env.spec.high
        if spec is None:
            raise OracleError(f"{env.name}: unbounded actions need a policy spec to set the sampling range")
        return spec.support(width=6.0)
    bound = env.spec.state_bounds or (-1.0, 1.0)
    return np.full(2, bound[0]), np.full(2, bound[1])


def _evaluator(env: Env):
    if env.spec.horizon == 1:
        return env.one_step_reward
    return env.landscape


def check_regularity(env: Env, spec: Optional[MixturePolicySpec] = None, budget: int = 10000) -> RegularityReport:
    """
    Sample the reward on a grid (actions for one-step envs, terminal states otherwise).

    Each grid cell is bisected toward its steeper half down to widths 1e-3 and 1e-4; a
    cell whose difference ratio grows more than 20x from 1e-2 to 1e-4 while the reward
    step stays above 1e-6 is reported as a jump candidate.
    """
    lo, hi = _domain(env, spec)
    dims = len(lo)
    fn = _evaluator(env)
    per_axis = int(budget) if dims == 1 else int(math.sqrt(budget))
    extent = float(np.max(hi - lo))
    cells = max(1, min(max(per_axis, 1), int(round(extent / REGULARITY_SCALES[0]))))
    width = extent / cells
    axes = [np.linspace(lo[i], hi[i], int(round((hi[i] - lo[i]) / width)) + 1) for i in range(dims)]

    # cell edges: (start point, direction)
    starts, directions = [], []
    if dims == 1:
        starts.append(axes[0][:-1, None])
        directions.append(np.tile([[1.0]], (len(axes[0]) - 1, 1)))
    else:
        for axis in range(2):
            grids = [ax if i != axis else ax[:-1] for i, ax in enumerate(axes)]
            mesh = np.stack(np.meshgrid(*grids, indexing="ij"), axis=-1).reshape(-1, 2)
            step = np.zeros(2)
            step[axis] = 1.0
            starts.append(mesh)
            directions.append(np.tile(step, (len(mesh), 1)))
    start = np.concatenate(starts)
    direction = np.concatenate(directions)

    values = fn(start)
    reward_bound = float(np.max(np.abs(values)))

    left = start.copy()
    span = np.full(len(start), width)
    ratios = {}
    deltas = {}
    for scale in REGULARITY_SCALES:
        while span[0] > scale * (1.0 + 1e-9):
            half = 0.5 * span
            mid = left + half[:, None] * direction
            right = left + span[:, None] * direction
            r_left, r_mid, r_right = fn(left), fn(mid), fn(right)
            go_right = np.abs(r_right - r_mid) > np.abs(r_mid - r_left)
            left = np.where(go_right[:, None], mid, left)
            span = half
        right = left + span[:, None] * direction
        delta = np.abs(fn(right) - fn(left))
        deltas[scale] = delta
        ratios[scale] = delta / span

    coarse, fine = ratios[REGULARITY_SCALES[0]], ratios[REGULARITY_SCALES[-1]]
    with np.errstate(divide="ignore", invalid="ignore"):
        growth = np.where(coarse > 0.0, fine / coarse, np.where(fine > 0.0, np.inf, 1.0))
    jumps = (growth > 20.0) & (deltas[REGULARITY_SCALES[-1]] > 1e-6)
    candidates = [tuple(float(v) for v in (left[i] + 0.5 * span[i] * direction[i])) for i in np.flatnonzero(jumps)]
    smooth = fine[~jumps]
    return RegularityReport(
        reward_bound=reward_bound,
        empirical_lipschitz=float(np.max(smooth)) if len(smooth) else 0.0,
        jump_candidates=candidates,
        ratio_by_scale={s: float(np.max(r[~jumps])) if np.any(~jumps) else 0.0 for s, r in ratios.items()},
    )
