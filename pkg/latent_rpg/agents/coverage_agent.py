import os
from typing import Any, Dict

from .base_agent import BaseAgent
from .model_based_agent import ModelBasedAgent
from ..core.config import Config, TrainConfig, load_config
from ..core.errors import ConfigError
from ..core.records import RunRecord

POLICIES = ("rpg", "baseline")


def coverage_config(steps: int, policy: str, seed: int = 0, path: str = None) -> TrainConfig:
    """Maze run config for one arm of the coverage study; both arms keep RND on."""
    if policy not in POLICIES:
        raise ConfigError(f"--policy must be one of {', '.join(POLICIES)}, got '{policy}'")
    if steps < 0:
        raise ConfigError(f"--steps must be >= 0, got {steps}")
    config = load_config(path or os.path.join(Config.CONFIGS_DIR, "maze.json"))
    if config.run.env != "maze":
        raise ConfigError(f"coverage runs on the maze, config names '{config.run.env}'")
    config.run.mode = "model_based"
    config.run.total_steps = steps
    config.run.seed = seed
    config.latent.kind = "gaussian" if policy == "rpg" else "none"
    config.rnd.enabled = True
    return config.validate()


class CoverageAgent(BaseAgent):
    async def execute(self, input_data: Dict[str, Any]) -> str:
        config = coverage_config(
            input_data["steps"], input_data["policy"], input_data.get("seed", 0), input_data.get("config")
        )
        config.run.verbose = self.verbose
        self.say(f"{input_data['policy']} on the maze for {config.run.total_steps} steps")
        trainer = ModelBasedAgent(config)
        record: RunRecord = await trainer.execute(config)
        path = record.write_coverage_csv(os.path.join(input_data["out"], "coverage.csv"))
        rooms = record.coverage_curve[-1][1]
        self.say(f"✅ {rooms} room(s) covered")
        return path
