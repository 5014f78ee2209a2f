"""
GradCheck - reverse-mode gradients against central differences.

Each case is a scalar function of some graph leaves. The check projects both gradients on
a random unit direction v:

    analytic = grad . v
    numeric  = (f(x + h v) - f(x - h v)) / 2h,   h = 1e-5

and reports rel_err = |analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR); the floor
only matters for gradients that are zero up to rounding.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from .elbo import augmented_step_reward, elbo_terms
from .envs import make_env
from .errors import RPGError
from .graph import (
    DenseNet,
    GRUCell,
    Node,
    backward,
    clamp,
    concat,
    const,
    elu,
    exp,
    flatten_grads,
    flatten_values,
    gaussian_logpdf,
    log,
    log_softmax,
    maximum,
    mean,
    parameter,
    record,
    reduce_sum,
    register_op,
    relu,
    reshape,
    sigmoid,
    sqrt,
    square,
    take_rows,
    tanh,
    unflatten,
    where,
)
from .policy import (
    LatentSpec,
    LatentVariable,
    encoder_log_density,
    fixed_latent,
    make_encoder,
    make_policy,
    rollout,
    sample_action,
    sample_latent,
    squash_correction,
)

STEP = 1e-5
TOLERANCE = 1e-4
GRAD_FLOOR = 1e-6
MODULES = ("graph", "policy", "elbo", "envs")


@dataclass
class GradCase:
    test_id: str
    params: List[Node]
    build: Callable[[], Node]


@dataclass
class CheckRow:
    test_id: str
    analytic: float
    numeric: float
    rel_err: float
    passed: bool

    def as_row(self) -> List:
        return [self.test_id, self.analytic, self.numeric, self.rel_err, self.passed]


def check_case(case: GradCase, rng: np.random.Generator, h: float = STEP, tol: float = TOLERANCE) -> CheckRow:
    params = case.params
    root = case.build()
    if root.value.size != 1:
        raise RPGError(f"{case.test_id}: case must build a scalar, got shape {root.shape}")
    grad = flatten_grads(backward(root, wrt=params), params)

    x0 = flatten_values(params)
    v = rng.standard_normal(x0.size)
    v /= np.linalg.norm(v)

    def at(x: np.ndarray) -> float:
        for p, value in zip(params, unflatten(x, params)):
            p.value = value.copy()
        return float(case.build().value)

    try:
        numeric = (at(x0 + h * v) - at(x0 - h * v)) / (2.0 * h)
    finally:
        for p, value in zip(params, unflatten(x0, params)):
            p.value = value.copy()
    analytic = float(grad @ v)
    rel_err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRAD_FLOOR)
    return CheckRow(case.test_id, analytic, numeric, rel_err, bool(rel_err < tol))


# ---------------------------------------------------------------------------
# Graph ops
# ---------------------------------------------------------------------------

def _leaf(rng, shape, lo=-1.0, hi=1.0, name="x") -> Node:
    return parameter(rng.uniform(lo, hi, size=shape), name)


def _away_from(rng, shape, kinks: Sequence[float], margin: float = 0.1, name="x") -> Node:
    """Leaf in (-1, 1) whose entries stay `margin` away from every kink."""
    values = rng.uniform(-1.0, 1.0, size=shape)
    for k in kinks:
        side = np.where(values >= k, 1.0, -1.0)
        values = np.where(np.abs(values - k) < margin, k + side * margin, values)
    return parameter(values, name)


def _weights(rng, shape) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=shape)


def _unary(tag: str, fn, rng, lo=-1.0, hi=1.0, kinks=()) -> GradCase:
    x = _away_from(rng, (3, 4), kinks) if kinks else _leaf(rng, (3, 4), lo, hi)
    sample = fn(x)
    w = _weights(rng, sample.shape)
    return GradCase(f"graph.{tag}", [x], lambda: reduce_sum(fn(x) * w))


def graph_cases(rng: np.random.Generator) -> List[GradCase]:
    cases = [
        _unary("neg", lambda x: -x, rng),
        _unary("square", square, rng),
        _unary("exp", exp, rng),
        _unary("log", log, rng, 0.5, 2.0),
        _unary("sqrt", sqrt, rng, 0.5, 2.0),
        _unary("tanh", tanh, rng, -2.0, 2.0),
        _unary("sigmoid", sigmoid, rng, -3.0, 3.0),
        _unary("elu", elu, rng, kinks=(0.0,)),
        _unary("relu", relu, rng, kinks=(0.0,)),
        _unary("leaky_relu", lambda x: record("leaky_relu", [x]), rng, kinks=(0.0,)),
        _unary("clamp", lambda x: clamp(x, -0.5, 0.5), rng, kinks=(-0.5, 0.5)),
        _unary("log_softmax", log_softmax, rng, -2.0, 2.0),
        _unary("reshape", lambda x: square(reshape(x, (4, 3))), rng),
        _unary("index.slice", lambda x: square(x[:, 1:3]), rng),
        _unary("index.fancy", lambda x: square(x[np.array([0, 2, 2])]), rng),
        _unary("sum.axis0", lambda x: square(reduce_sum(x, axis=0)), rng),
        _unary("sum.keepdims", lambda x: reduce_sum(x, axis=-1, keepdims=True) * x, rng),
        _unary("mean", lambda x: square(mean(x, axis=1)), rng),
    ]

    a, b = _leaf(rng, (3, 4), name="a"), _leaf(rng, (4,), name="b")
    w34 = _weights(rng, (3, 4))
    cases.append(GradCase("graph.add.broadcast", [a, b], lambda: reduce_sum((a + b) * w34)))
    cases.append(GradCase("graph.sub.broadcast", [a, b], lambda: reduce_sum((a - b) * w34)))
    cases.append(GradCase("graph.mul.broadcast", [a, b], lambda: reduce_sum(a * b * w34)))
    d = _leaf(rng, (4,), 0.5, 2.0, name="d")
    cases.append(GradCase("graph.div", [a, d], lambda: reduce_sum(a / d * w34)))

    p = _leaf(rng, (3, 4), name="p")
    gap = rng.uniform(0.1, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    q = parameter(p.value + gap, "q")
    cases.append(GradCase("graph.max", [p, q], lambda: reduce_sum(maximum(p, q) * w34)))

    x, W, bias = _leaf(rng, (5, 3), name="x"), _leaf(rng, (4, 3), name="W"), _leaf(rng, (4,), name="bias")
    w54 = _weights(rng, (5, 4))
    cases.append(GradCase("graph.affine.batch", [x, W, bias], lambda: reduce_sum(record("affine", [x, W, bias]) * w54)))
    xv = _leaf(rng, (3,), name="xv")
    w4 = _weights(rng, (4,))
    cases.append(GradCase("graph.affine.vector", [xv, W, bias], lambda: reduce_sum(record("affine", [xv, W, bias]) * w4)))

    logits = _leaf(rng, (5, 4), -2.0, 2.0, name="logits")
    idx = rng.integers(0, 4, size=5)
    cases.append(GradCase("graph.take_rows", [logits], lambda: reduce_sum(square(take_rows(logits, idx)))))
    c1, c2 = _leaf(rng, (5, 2), name="c1"), _leaf(rng, (5, 3), name="c2")
    w55 = _weights(rng, (5, 5))
    cases.append(GradCase("graph.concat.columns", [c1, c2], lambda: reduce_sum(square(concat([c1, c2])) * w55)))
    r1, r2 = _leaf(rng, (2, 4), name="r1"), _leaf(rng, (3, 4), name="r2")
    cases.append(GradCase("graph.concat.rows", [r1, r2], lambda: reduce_sum(square(concat([r1, r2], axis=0)) * w54)))

    xs, mu = _leaf(rng, (5, 3), name="xs"), _leaf(rng, (5, 3), name="mu")
    ls = _leaf(rng, (5, 3), -1.0, 0.5, name="ls")
    w5 = _weights(rng, (5,))
    cases.append(GradCase("graph.gaussian_logpdf", [xs, mu, ls], lambda: reduce_sum(gaussian_logpdf(xs, mu, ls) * w5)))
    mask = rng.random(5) < 0.5
    wa, wb = _leaf(rng, (5,), name="wa"), _leaf(rng, (5,), name="wb")
    cases.append(GradCase("graph.where", [wa, wb], lambda: reduce_sum(square(where(mask, wa, wb)) * w5)))

    for activation in ("tanh", "elu", "leaky_relu"):
        net = DenseNet.init([3, 6, 2], rng, activation, name=f"net_{activation}")
        inp = _leaf(rng, (5, 3), name="inp")
        w52 = _weights(rng, (5, 2))
        cases.append(GradCase(f"graph.densenet.{activation}", net.parameters() + [inp], _bind_net(net, inp, w52)))
    cell = GRUCell(2, 3, rng, name="gru")
    gx, gh = _leaf(rng, (4, 2), name="gx"), _leaf(rng, (4, 3), name="gh")
    w43 = _weights(rng, (4, 3))
    cases.append(GradCase("graph.gru", cell.parameters() + [gx, gh], lambda: reduce_sum(cell(gx, gh) * w43)))
    return cases


def _bind_net(net: DenseNet, inp: Node, w: np.ndarray) -> Callable[[], Node]:
    return lambda: reduce_sum(net(inp) * w)


# ---------------------------------------------------------------------------
# Policy log-densities
# ---------------------------------------------------------------------------

SMALL_NET = dict(hidden=(8,), activation="tanh", final_scale=1.0)


def policy_cases(rng: np.random.Generator) -> List[GradCase]:
    seed = int(rng.integers(1 << 30))
    move = make_env("move2").spec
    states = rng.uniform(-0.8, 0.8, size=(4, 2))
    cases = []

    for kind in ("gaussian", "categorical"):
        params = make_policy(move, LatentSpec(kind, 3), rng, **SMALL_NET)

        def reparam(params=params):
            z = sample_latent(states, params, np.random.default_rng(seed), mode="pathwise")
            sample = sample_action(states, z, params, np.random.default_rng(seed + 1))
            return mean(sample.log_density + z.log_density_path)

        cases.append(GradCase(f"policy.{kind}.reparameterized", params.parameters(), reparam))

        fixed = rng.uniform(-1.5, 1.5, size=(4, 2))
        z_fixed = sample_latent(states, params, np.random.default_rng(seed), mode="score")

        def score(params=params, z_fixed=z_fixed):
            z = _rebuild(z_fixed)
            mu, log_sigma = params.split_head(params.action_head(concat([const(states), z.feature])), 2)
            return mean(gaussian_logpdf(const(fixed), mu, log_sigma))

        cases.append(GradCase(f"policy.{kind}.score_density", params.action_parameters(), score))

    cat = make_policy(move, LatentSpec("categorical", 4), rng, **SMALL_NET)
    index = rng.integers(0, 4, size=4)
    cases.append(
        GradCase(
            "policy.categorical.latent_density",
            cat.latent_parameters(),
            lambda: mean(take_rows(log_softmax(cat.latent_head(const(states))), index)),
        )
    )

    actions = rng.uniform(-0.9, 0.9, size=(4, 2))
    for kind in ("gaussian", "categorical"):
        spec = LatentSpec(kind, 3)
        params = make_policy(move, spec, rng, **SMALL_NET)
        enc = make_encoder(move, spec, rng, hidden=(8,), activation="tanh")
        z = sample_latent(states, params, np.random.default_rng(seed), mode="score")
        cases.append(
            GradCase(
                f"policy.encoder.{kind}",
                enc.parameters(),
                _bind_encoder(z, states, actions, enc),
            )
        )

    u = _leaf(rng, (4, 2), -0.9, 0.9, name="u")
    cases.append(GradCase("policy.squash_correction", [u], lambda: mean(squash_correction(u))))
    return cases


def _rebuild(z: LatentVariable) -> LatentVariable:
    return fixed_latent(z.kind, z.feature.value)


def _bind_encoder(z, states, actions, enc) -> Callable[[], Node]:
    frozen = _rebuild(z)
    return lambda: mean(encoder_log_density(frozen, const(states), const(actions), enc))


# ---------------------------------------------------------------------------
# ELBO terms
# ---------------------------------------------------------------------------

def elbo_cases(rng: np.random.Generator) -> List[GradCase]:
    seed = int(rng.integers(1 << 30))
    cases = []
    for env_id, kind in (("smooth_bandit", "gaussian"), ("linear2d", "categorical"), ("move2", "gaussian")):
        env = make_env(env_id)
        spec = LatentSpec(kind, 3)
        params = make_policy(env.spec, spec, rng, **SMALL_NET)
        enc = make_encoder(env.spec, spec, rng, hidden=(8,), activation="tanh")

        def total(env=env, params=params, enc=enc):
            traj = rollout(env, params, np.random.default_rng(seed), batch=3, mode="pathwise")
            terms = elbo_terms(traj, enc, temperature=0.5, alpha=0.1, beta=0.05, alpha_z=0.2, prior_log_density=-0.7)
            return mean(terms.total)

        cases.append(GradCase(f"elbo.{env_id}.{kind}", params.parameters() + enc.parameters(), total))

    r, lp, le = _leaf(rng, (5,), name="r"), _leaf(rng, (5,), name="lp"), _leaf(rng, (5,), name="le")
    cases.append(
        GradCase("elbo.augmented_step_reward", [r, lp, le], lambda: mean(square(augmented_step_reward(r, lp, le, 0.2, 0.05, 0.5))))
    )
    return cases


# ---------------------------------------------------------------------------
# Env pathwise gradients
# ---------------------------------------------------------------------------

ONE_STEP_RANGES = {
    "smooth_bandit": (-1.0, 1.0),
    "quadratic": (-1.0, 1.0),
    "bandit_a": (-0.95, 0.25),
    "bandit_b": (-0.8, 0.95),
    "linear": (-3.0, 3.0),
}
MULTI_STEP = ("linear2d", "move2", "move3", "nav4")


def _multi_step_return(env, actions: List[Node]) -> Node:
    state = env.initial_state(actions[0].shape[0])
    total = None
    for t, a in enumerate(actions):
        result = env.step(state, a, t)
        total = result.reward if total is None else total + result.reward
        state = result.next_state
    return mean(total)


def env_cases(rng: np.random.Generator) -> List[GradCase]:
    cases = []
    for env_id, (lo, hi) in ONE_STEP_RANGES.items():
        env = make_env(env_id)
        a = _leaf(rng, (6, 1), lo, hi, name="a")
        state = env.initial_state(6)
        cases.append(GradCase(f"envs.{env_id}", [a], _bind_step(env, state, a)))

    for env_id in MULTI_STEP:
        env = make_env(env_id)
        bound = 0.9 * env.spec.high[0]
        actions = [_leaf(rng, (3, 2), -bound, bound, name=f"a{t}") for t in range(env.spec.horizon)]
        cases.append(GradCase(f"envs.{env_id}.trajectory", actions, _bind_trajectory(env, actions)))

    seed = int(rng.integers(1 << 30))
    env = make_env("move2")
    params = make_policy(env.spec, LatentSpec("gaussian", 2), rng, **SMALL_NET)
    cases.append(
        GradCase(
            "envs.move2.policy_pathwise",
            params.parameters(),
            lambda: mean(rollout(env, params, np.random.default_rng(seed), batch=3, mode="pathwise").total_reward()),
        )
    )
    return cases


def _bind_step(env, state, a) -> Callable[[], Node]:
    return lambda: mean(env.step(state, a, 0).reward)


def _bind_trajectory(env, actions) -> Callable[[], Node]:
    return lambda: _multi_step_return(env, actions)


GENERATORS: Dict[str, Callable[[np.random.Generator], List[GradCase]]] = {
    "graph": graph_cases,
    "policy": policy_cases,
    "elbo": elbo_cases,
    "envs": env_cases,
}


# ---------------------------------------------------------------------------
# Fault injection and driver
# ---------------------------------------------------------------------------

BROKEN_OP = "broken_square"


def broken_derivative_case(rng: np.random.Generator) -> GradCase:
    """A square op registered with its derivative off by a factor of two."""
    register_op(BROKEN_OP, lambda a: a * a, lambda g, o, a: (g * a,))
    x = _leaf(rng, (3,), 0.5, 1.5, name="x")
    return GradCase("fault.broken_square", [x], lambda: reduce_sum(record(BROKEN_OP, [x])))


def generate_cases(modules: Sequence[str], trials: int, seed: int = 0, inject_fault: bool = False) -> List[GradCase]:
    unknown = [m for m in modules if m not in GENERATORS]
    if unknown:
        raise RPGError(f"unknown gradcheck module(s): {', '.join(unknown)} (known: {', '.join(MODULES)})")
    if trials < 1:
        raise RPGError(f"trials must be >= 1, got {trials}")
    cases = []
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        for module in modules:
            for case in GENERATORS[module](rng):
                case.test_id = f"{case.test_id}#{trial}"
                cases.append(case)
    if inject_fault:
        cases.append(broken_derivative_case(np.random.default_rng(seed)))
    return cases


def run_gradcheck(
    modules: Sequence[str] = MODULES, trials: int = 5, seed: int = 0, inject_fault: bool = False
) -> List[CheckRow]:
    rng = np.random.default_rng(seed + 1)
    return [check_case(case, rng) for case in generate_cases(modules, trials, seed, inject_fault)]
