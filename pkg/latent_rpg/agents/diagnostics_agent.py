import math
import os
from typing import Any, Dict, List

import numpy as np

from .base_agent import BaseAgent
from ..core.envs import Env, make_env
from ..core.errors import ConfigError, EnvError, GradCheckFailed, OracleError
from ..core.estimators import BIAS_COLUMNS, KINDS, BiasRow, MixturePolicySpec, bias_report, oracle_grad
from ..core.gradcheck import MODULES, CheckRow, run_gradcheck
from ..core.records import GRADCHECK_COLUMNS, write_csv

# Action-space mixtures for the bias demonstration, centred where each reward is interesting.
DEMO_MIXTURES: Dict[str, Dict[str, Any]] = {
    "bandit_a": dict(logits=[0.0], mus=[math.atanh(0.25)], log_sigmas=[math.log(0.1)]),
    "bandit_b": dict(logits=[0.0, 0.0], mus=[math.atanh(-0.8), math.atanh(0.3)], log_sigmas=[math.log(0.15)] * 2),
    "smooth_bandit": dict(logits=[0.0], mus=[math.atanh(-0.4)], log_sigmas=[math.log(0.25)]),
    "step": dict(logits=[0.0], mus=[0.3], log_sigmas=[0.0]),
    "linear": dict(logits=[0.0], mus=[0.0], log_sigmas=[0.0]),
    "quadratic": dict(logits=[0.0], mus=[0.0], log_sigmas=[math.log(0.5)]),
}


def demo_mixture(env: Env) -> MixturePolicySpec:
    if env.name not in DEMO_MIXTURES:
        raise OracleError(f"{env.name}: no bias demonstration (one-step bandits only: {', '.join(DEMO_MIXTURES)})")
    return MixturePolicySpec(squash=env.spec.bounded, **DEMO_MIXTURES[env.name])


class DiagnosticsAgent(BaseAgent):
    """Gradient checks and estimator-bias tables, written as CSV."""

    async def execute(self, input_data: Dict[str, Any]) -> str:
        command = input_data["command"]
        if command == "gradcheck":
            return self.gradcheck(input_data)
        if command == "bias-demo":
            return self.bias_demo(input_data)
        raise ConfigError(f"unknown diagnostics command '{command}'")

    def gradcheck(self, options: Dict[str, Any]) -> str:
        modules = options.get("modules") or list(MODULES)
        trials = options.get("trials", 5)
        if trials < 1:
            raise ConfigError(f"--trials must be >= 1, got {trials}")
        unknown = [m for m in modules if m not in MODULES]
        if unknown:
            raise ConfigError(f"--module: unknown module(s) {', '.join(unknown)} (known: {', '.join(MODULES)})")
        self.say(f"checking {', '.join(modules)} over {trials} trial(s)")
        rows: List[CheckRow] = run_gradcheck(modules, trials, options.get("seed", 0), options.get("inject_fault", False))
        path = write_csv(os.path.join(options["out"], "gradcheck.csv"), GRADCHECK_COLUMNS, (r.as_row() for r in rows))

        failed = [r for r in rows if not r.passed]
        worst = max((r.rel_err for r in rows), default=0.0)
        if failed:
            raise GradCheckFailed(
                f"{len(failed)}/{len(rows)} case(s) failed, first: {failed[0].test_id} "
                f"(rel err {failed[0].rel_err:.3g}); see {path}"
            )
        self.say(f"✅ {len(rows)} case(s) passed, worst rel err {worst:.3g}")
        return path

    def bias_demo(self, options: Dict[str, Any]) -> str:
        samples = options.get("samples", 100000)
        if samples < 2:
            raise ConfigError(f"--samples must be >= 2, got {samples}")
        try:
            env = make_env(options["env"])
            spec = demo_mixture(env)
            oracle = oracle_grad(env, spec)
        except (EnvError, OracleError) as e:
            raise ConfigError(f"--env: {e}")

        rng = np.random.default_rng(options.get("seed", 0))
        self.say(f"{env.name}: {samples} samples per estimator, E[R] = {oracle.expected_reward:.6g}")
        rows: List[BiasRow] = bias_report(env, spec, samples, rng, KINDS, oracle)
        path = write_csv(os.path.join(options["out"], "bias.csv"), BIAS_COLUMNS, (r.as_row() for r in rows))

        for row in rows:
            if abs(row.z_score) > 3.0:
                self.say(f"⚠️ {row.estimator} {row.param}: bias {row.bias:.4g} (z = {row.z_score:.2f})")
        return path
