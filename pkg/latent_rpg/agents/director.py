import json
import os
from typing import Any, Dict

from .base_agent import BaseAgent
from .coverage_agent import CoverageAgent
from .diagnostics_agent import DiagnosticsAgent
from .direct_trainer_agent import DirectTrainerAgent
from .model_based_agent import ModelBasedAgent
from ..core.checkpoint import save_checkpoint
from ..core.config import TrainConfig, load_config
from ..core.errors import ConfigError
from ..core.records import RunRecord

COMMANDS = ("train", "gradcheck", "bias-demo", "coverage")


class Director(BaseAgent):
    """Runs one CLI command: picks the agent, hands it the options, and writes the artifacts."""

    def __init__(self, config: TrainConfig):
        super().__init__(config)
        self.diagnostics = DiagnosticsAgent(config)
        self.coverage = CoverageAgent(config)

    async def execute(self, input_data: Dict[str, Any]) -> str:
        command = input_data["command"]
        if command not in COMMANDS:
            raise ConfigError(f"unknown command '{command}' (known: {', '.join(COMMANDS)})")
        os.makedirs(input_data["out"], exist_ok=True)
        self.say(f"🎬 {command} -> {input_data['out']}")
        if command == "train":
            return await self.train(input_data)
        if command == "coverage":
            return await self.coverage.execute(input_data)
        return await self.diagnostics.execute(input_data)

    async def train(self, options: Dict[str, Any]) -> str:
        config = load_config(options["config"])
        if options.get("seed") is not None:
            config.run.seed = options["seed"]
        config.run.verbose = self.verbose

        trainer = ModelBasedAgent(config) if config.run.mode == "model_based" else DirectTrainerAgent(config)
        self.say(f"--- {config.run.mode} training on {config.run.env} (seed {config.run.seed}) ---")
        record: RunRecord = await trainer.execute(config)

        out = options["out"]
        path = record.write_csv(os.path.join(out, "run.csv"))
        save_checkpoint(os.path.join(out, "checkpoint"), trainer.named_parameters())
        if record.mode_inventory:
            with open(os.path.join(out, "modes.json"), "w", encoding="utf-8", newline="\n") as f:
                json.dump(record.mode_inventory, f, indent=2)
                f.write("\n")
        if record.coverage_curve:
            record.write_coverage_csv(os.path.join(out, "coverage.csv"))
        self.say(f"✅ {len(record.rows)} row(s), final return {record.final.return_mean:.4f}")
        return path
