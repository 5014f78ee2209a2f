from .base_agent import BaseAgent
from .director import Director
from .direct_trainer_agent import DirectTrainerAgent
from .model_based_agent import ModelBasedAgent
from .evaluator_agent import EvaluatorAgent
from .diagnostics_agent import DiagnosticsAgent
from .coverage_agent import CoverageAgent
