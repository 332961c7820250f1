import os
import re
from pathlib import Path
from typing import Dict, Union

from dotenv import load_dotenv, dotenv_values
from pydantic import ValidationError as PydanticValidationError

from errors import ConfigError, NotFoundError
from models import TrainConfig

# Load environment variables
load_dotenv()


def _env_flag(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


class Settings:
    """Process-level settings read from the environment."""

    # Parallelism (0 = let numpy use every core)
    XMH_THREADS: int = int(os.getenv("XMH_THREADS", 0))

    # Console output
    XMH_VERBOSE: bool = _env_flag("XMH_VERBOSE", "true")
    XMH_LOG_EVERY: int = int(os.getenv("XMH_LOG_EVERY", 1))

    # Test switches
    XMH_RUN_SLOW: bool = _env_flag("XMH_RUN_SLOW", "false")

    XMH_DEFAULT_SEED: int = int(os.getenv("XMH_DEFAULT_SEED", 7))

    @property
    def thread_env(self) -> Dict[str, str]:
        """Environment overrides that cap BLAS/OpenMP threads."""
        if self.XMH_THREADS <= 0:
            return {}
        value = str(self.XMH_THREADS)
        return {
            "OMP_NUM_THREADS": value,
            "OPENBLAS_NUM_THREADS": value,
            "MKL_NUM_THREADS": value,
        }


def _key_lines(text: str) -> Dict[str, int]:
    """Map each key in a key = value file to its 1-based line number."""
    lines = {}
    for number, raw in enumerate(text.splitlines(), 1):
        match = re.match(r"^\s*(?:export\s+)?([A-Za-z_][A-Za-z0-9_.-]*)\s*=", raw)
        if match and match.group(1) not in lines:
            lines[match.group(1)] = number
    return lines


def load_train_config(path: Union[str, Path]) -> TrainConfig:
    """Parse a flat `key = value` training config file."""
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"Config file '{path}' not found")

    text = path.read_text(encoding="utf-8")
    line_of = _key_lines(text)
    raw = dotenv_values(path, interpolate=False)

    known = set(TrainConfig.model_fields)
    for key in raw:
        if key not in known:
            raise ConfigError("unknown config key", key=key, line=line_of.get(key))

    values = {}
    for key, value in raw.items():
        if value is None:
            raise ConfigError("missing '= value'", key=key, line=line_of.get(key))
        value = value.strip()
        # Empty value means "use the derived default"
        if value == "":
            continue
        values[key] = value

    try:
        return TrainConfig(**values)
    except PydanticValidationError as e:
        first = e.errors()[0]
        key = str(first["loc"][0]) if first["loc"] else None
        raise ConfigError(first["msg"], key=key, line=line_of.get(key)) from e


def dump_train_config(cfg: TrainConfig, path: Union[str, Path]) -> None:
    """Write a TrainConfig in the same format load_train_config reads."""
    lines = ["# training configuration"]
    for key, value in cfg.model_dump().items():
        lines.append(f"{key} = {'' if value is None else value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# Global settings instance
settings = Settings()
