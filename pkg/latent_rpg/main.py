import argparse
import asyncio
import sys
from typing import List, Optional

from latent_rpg.core.config import Config, TrainConfig
from latent_rpg.core.errors import ConfigError, GradCheckFailed, RPGError, TrainingDivergence
from latent_rpg.core.gradcheck import MODULES
from latent_rpg.agents.director import Director

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CHECK_FAILED = 1
EXIT_DIVERGED = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latent_rpg", description="Reparameterized latent-variable policy experiments")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a policy from a run config")
    train.add_argument("config", help="path to a JSON run config")
    train.add_argument("--seed", type=int, default=None, help="override run.seed")
    train.add_argument("--out", default=Config.OUTPUT_DIR)

    gradcheck = sub.add_parser("gradcheck", help="reverse-mode gradients against central differences")
    gradcheck.add_argument("--module", dest="modules", action="append", choices=MODULES)
    gradcheck.add_argument("--trials", type=int, default=5)
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--inject-fault", action="store_true", help="add a deliberately wrong derivative")
    gradcheck.add_argument("--out", default=Config.OUTPUT_DIR)

    bias = sub.add_parser("bias-demo", help="estimator means against the quadrature oracle")
    bias.add_argument("--env", required=True)
    bias.add_argument("--samples", type=int, default=100000)
    bias.add_argument("--seed", type=int, default=0)
    bias.add_argument("--out", default=Config.OUTPUT_DIR)

    coverage = sub.add_parser("coverage", help="maze rooms covered over time")
    coverage.add_argument("--steps", type=int, required=True)
    coverage.add_argument("--policy", choices=("rpg", "baseline"), default="rpg")
    coverage.add_argument("--seed", type=int, default=0)
    coverage.add_argument("--config", default=None, help="maze run config (defaults to configs/maze.json)")
    coverage.add_argument("--out", default=Config.OUTPUT_DIR)
    return parser


async def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    # Validate Config
    try:
        Config.validate()
    except ConfigError as e:
        print(f"Configuration Error: {e}")
        return EXIT_CONFIG

    config = TrainConfig()
    config.run.verbose = not args.quiet
    director = Director(config)

    try:
        path = await director.execute(vars(args))
    except ConfigError as e:
        print(f"Configuration Error: {e}")
        return EXIT_CONFIG
    except GradCheckFailed as e:
        print(f"❌ Gradient check failed: {e}")
        return EXIT_CHECK_FAILED
    except TrainingDivergence as e:
        print(f"❌ Training diverged: {e}")
        return EXIT_DIVERGED
    except RPGError as e:
        print(f"❌ {type(e).__name__}: {e}")
        return EXIT_DIVERGED

    if not args.quiet:
        print(f"Wrote {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(asyncio.run(main()))
