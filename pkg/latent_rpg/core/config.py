import json
import os
import re
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple, Union, get_args, get_origin

from dotenv import load_dotenv

from .errors import ConfigError

load_dotenv()


class Config:
    # Paths
    BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    CONFIGS_DIR = os.path.join(BASE_DIR, "configs")
    OUTPUT_DIR = os.getenv("RPG_OUTPUT_DIR", os.path.join(BASE_DIR, "output"))

    # Test gating
    RUN_SLOW = os.getenv("RPG_RUN_SLOW", "0") == "1"

    # Hyperparameter table defaults
    GAMMA = 0.99
    SEED_STEPS = 1000
    BUFFER_SIZE = 800000
    MODEL_HORIZON = 3
    INITIAL_ALPHA = 0.01
    BETA = 0.005
    RND_COEF = 0.1
    ENV_STEPS_PER_UPDATE = 5
    LEARNING_RATE = 3e-4
    BATCH_SIZE = 512
    POLYAK = 0.005
    ACTOR_UPDATE_EVERY = 2
    STATE_EMBED_DIM = 100
    GRAD_CLIP = 1.0
    ENCODING_LEVELS = 6
    LATENT_DIM = 12
    ENCODER_STD = 0.38
    HIDDEN = 256
    RND_HIDDEN = 512
    LOSS_WEIGHTS = (1000.0, 0.5, 0.5)

    # Numerical guards
    SIGMA_MIN = 1e-4
    SQUASH_EPS = 1e-6
    QUADRATURE_TOL = 1e-9

    @staticmethod
    def validate():
        """Rejects RPG_<SECTION>_<KEY> variables that name no config field."""
        known = {
            f"RPG_{section.upper()}_{name.upper()}"
            for section, cls in TrainConfig.section_types().items()
            for name in (f.name for f in fields(cls))
        }
        reserved = {"RPG_RUN_SLOW", "RPG_OUTPUT_DIR"}
        for key in os.environ:
            if key.startswith("RPG_") and key not in known and key not in reserved:
                raise ConfigError(f"environment override {key} names no config field")
        if not 0.0 < Config.GAMMA < 1.0:
            raise ConfigError(f"GAMMA must lie in (0, 1), got {Config.GAMMA}")


# ---------------------------------------------------------------------------
# Run configuration file
# ---------------------------------------------------------------------------

@dataclass
class RunSection:
    env: str = ""
    mode: str = "direct"  # direct | model_based
    seed: int = 0
    total_steps: int = 2000
    batch_size: int = 64
    eval_every: int = 100
    eval_episodes: int = 32
    verbose: bool = True


@dataclass
class LatentSection:
    kind: str = "gaussian"  # categorical | gaussian | none
    size: int = Config.LATENT_DIM
    resample_period: int = 0  # 0 means one latent per episode
    fixed_prior: bool = False


@dataclass
class ObjectiveSection:
    estimator: str = "hybrid"  # score | pathwise | hybrid
    temperature: float = 1.0
    alpha: float = Config.INITIAL_ALPHA
    auto_alpha: bool = True
    target_entropy: Optional[float] = None  # None means -|A|
    beta: float = Config.BETA
    gamma: float = Config.GAMMA
    latent_entropy: Optional[float] = None  # None means same as alpha
    latent_entropy_decay: bool = False
    baseline: bool = True


@dataclass
class OptimSection:
    learning_rate: float = Config.LEARNING_RATE
    encoder_learning_rate: float = Config.LEARNING_RATE
    alpha_learning_rate: float = Config.LEARNING_RATE
    grad_clip: float = Config.GRAD_CLIP


@dataclass
class NetworkSection:
    hidden: List[int] = field(default_factory=lambda: [Config.HIDDEN, Config.HIDDEN])
    activation: str = "elu"
    init_log_std: float = 0.0
    final_scale: float = 0.01


@dataclass
class ModelSection:
    embed_dim: int = Config.STATE_EMBED_DIM
    hidden: int = Config.HIDDEN
    dynamics: str = "gru"  # gru | mlp
    horizon: int = Config.MODEL_HORIZON
    target_horizon: int = 0
    seed_steps: int = Config.SEED_STEPS
    buffer_size: int = Config.BUFFER_SIZE
    update_every: int = Config.ENV_STEPS_PER_UPDATE
    actor_every: int = Config.ACTOR_UPDATE_EVERY
    batch_size: int = Config.BATCH_SIZE
    polyak: float = Config.POLYAK
    dynamics_weight: float = Config.LOSS_WEIGHTS[0]
    reward_weight: float = Config.LOSS_WEIGHTS[1]
    value_weight: float = Config.LOSS_WEIGHTS[2]


@dataclass
class RndSection:
    enabled: bool = False
    coef: float = Config.RND_COEF
    levels: int = Config.ENCODING_LEVELS
    hidden: int = Config.RND_HIDDEN
    out_dim: int = 64
    learning_rate: float = Config.LEARNING_RATE


@dataclass
class TrainConfig:
    run: RunSection = field(default_factory=RunSection)
    latent: LatentSection = field(default_factory=LatentSection)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    optim: OptimSection = field(default_factory=OptimSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    model: ModelSection = field(default_factory=ModelSection)
    rnd: RndSection = field(default_factory=RndSection)

    @staticmethod
    def section_types() -> Dict[str, type]:
        return {f.name: f.default_factory for f in fields(TrainConfig)}

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: Dict[str, Any], text: str = "") -> "TrainConfig":
        if not isinstance(data, dict):
            raise ConfigError("top level must be an object of sections", 1)
        sections = cls.section_types()
        built, lines = {}, {}
        for section, payload in data.items():
            if section not in sections:
                raise ConfigError(f"unknown section '{section}'", _key_line(text, None, section))
            if not isinstance(payload, dict):
                raise ConfigError(f"section '{section}' must be an object", _key_line(text, None, section))
            section_cls = sections[section]
            allowed = {f.name: f for f in fields(section_cls)}
            values = {}
            for key, value in payload.items():
                if key not in allowed:
                    raise ConfigError(f"unknown key '{section}.{key}'", _key_line(text, section, key))
                try:
                    values[key] = _coerce(value, allowed[key].type, from_text=False)
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"{section}.{key}: {e}", _key_line(text, section, key))
                lines[f"{section}.{key}"] = _key_line(text, section, key)
            built[section] = section_cls(**values)
        config = cls(**built)
        # file line of each "section.key", for validate()
        config.key_lines = lines
        if not config.run.env:
            line = _key_line(text, None, "run") if "run" in data else 1
            raise ConfigError("missing required key 'run.env'", line)
        return config

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed JSON: {e.msg}", e.lineno)
        return cls.from_dict(data, text)

    def apply_env_overrides(self) -> "TrainConfig":
        """Overlay RPG_<SECTION>_<KEY> environment variables onto this config."""
        for section in self.section_types():
            block = getattr(self, section)
            for f in fields(block):
                raw = os.getenv(f"RPG_{section.upper()}_{f.name.upper()}")
                if raw is None:
                    continue
                getattr(self, "key_lines", {}).pop(f"{section}.{f.name}", None)
                try:
                    setattr(block, f.name, _coerce(raw, f.type, from_text=True))
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"override RPG_{section.upper()}_{f.name.upper()}: {e}")
        return self

    def validate(self):
        from .envs import ENV_IDS

        checks: List[Tuple[bool, str, str]] = [
            (self.run.env in ENV_IDS, "run.env", f"unknown environment '{self.run.env}' (known: {', '.join(ENV_IDS)})"),
            (self.run.mode in ("direct", "model_based"), "run.mode", f"'{self.run.mode}'"),
            (self.run.total_steps >= 0, "run.total_steps", "must be >= 0"),
            (self.run.batch_size >= 1, "run.batch_size", "must be >= 1"),
            (self.run.eval_every >= 1, "run.eval_every", "must be >= 1"),
            (self.run.eval_episodes >= 1, "run.eval_episodes", "must be >= 1"),
            (self.latent.kind in ("categorical", "gaussian", "none"), "latent.kind", f"'{self.latent.kind}'"),
            (self.latent.size >= 1, "latent.size", "must be >= 1"),
            (self.latent.resample_period >= 0, "latent.resample_period", "must be >= 0"),
            (self.objective.estimator in ("score", "pathwise", "hybrid"), "objective.estimator", f"'{self.objective.estimator}'"),
            (self.objective.temperature > 0.0, "objective.temperature", "must be > 0"),
            (self.objective.alpha >= 0.0, "objective.alpha", "must be >= 0"),
            (self.objective.beta >= 0.0, "objective.beta", "must be >= 0"),
            (0.0 < self.objective.gamma < 1.0, "objective.gamma", "must lie in (0, 1)"),
            (self.optim.learning_rate > 0.0, "optim.learning_rate", "must be > 0"),
            (self.network.activation in ("tanh", "elu", "relu", "leaky_relu", "identity"), "network.activation", f"'{self.network.activation}'"),
            (self.model.dynamics in ("gru", "mlp"), "model.dynamics", f"'{self.model.dynamics}'"),
            (0 <= self.model.target_horizon <= self.model.horizon, "model.target_horizon", "must lie in [0, model.horizon]"),
            (self.model.update_every >= 1, "model.update_every", "must be >= 1"),
            (self.model.actor_every >= 1, "model.actor_every", "must be >= 1"),
            (0.0 < self.model.polyak <= 1.0, "model.polyak", "must lie in (0, 1]"),
        ]
        lines = getattr(self, "key_lines", {})
        for ok, key, message in checks:
            if not ok:
                raise ConfigError(f"{key}: {message}", lines.get(key))
        return self


def load_config(path: str) -> TrainConfig:
    """Read a run config file, apply environment overrides and validate it."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    return TrainConfig.from_json(text).apply_env_overrides().validate()


def _key_line(text: str, section: Optional[str], key: str) -> Optional[int]:
    if not text:
        return None
    start = 0
    if section is not None:
        header = re.search(r'"%s"\s*:' % re.escape(section), text)
        if header:
            start = header.end()
    match = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, start)
    if not match:
        return None
    return text.count("\n", 0, match.start()) + 1


def _coerce(value: Any, annotation: Any, from_text: bool) -> Any:
    origin = get_origin(annotation)
    if origin is Union:
        inner = [a for a in get_args(annotation) if a is not type(None)][0]
        if value is None or (from_text and str(value).lower() in ("none", "null", "")):
            return None
        return _coerce(value, inner, from_text)
    if origin in (list, List):
        (item,) = get_args(annotation)
        if from_text:
            value = [v for v in str(value).split(",") if v.strip()]
        if not isinstance(value, list):
            raise TypeError(f"expected a list, got {type(value).__name__}")
        return [_coerce(v, item, from_text) for v in value]
    if annotation is bool:
        if from_text:
            lowered = str(value).strip().lower()
            if lowered not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(f"expected a boolean, got '{value}'")
            return lowered in ("1", "true", "yes")
        if not isinstance(value, bool):
            raise TypeError(f"expected a boolean, got {type(value).__name__}")
        return value
    if annotation is int:
        if from_text:
            return int(str(value).strip())
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"expected an integer, got {type(value).__name__}")
        return value
    if annotation is float:
        if from_text:
            return float(str(value).strip())
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"expected a number, got {type(value).__name__}")
        return float(value)
    if annotation is str:
        if not from_text and not isinstance(value, str):
            raise TypeError(f"expected a string, got {type(value).__name__}")
        return str(value)
    return value
