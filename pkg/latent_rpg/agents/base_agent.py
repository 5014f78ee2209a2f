from abc import ABC, abstractmethod
from typing import Any

from ..core.config import TrainConfig


class BaseAgent(ABC):
    def __init__(self, config: TrainConfig):
        self.config = config
        self.verbose = config.run.verbose

    def say(self, message: str):
        if self.verbose:
            print(f"{type(self).__name__}: {message}")

    @abstractmethod
    async def execute(self, input_data: Any) -> Any:
        """
        Execute the agent's main task.
        """
        pass
