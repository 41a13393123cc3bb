from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import yaml

from itd_tool.errors import ErrorKind, ItdError

SeedLike = Union[int, np.random.Generator, None]


def _parse_number(value: Union[str, float, int]) -> Optional[float]:
    """
    Parse a number given as int, float or string.

    Args:
        value: Can be:
            - int or float: returned as float
            - str: "12", "0.5", "-5", "inf"

    Returns:
        The parsed float, or None if invalid.
    """
    if isinstance(value, bool):
        return None  # Explicitly reject booleans, True would end up as 1.0

    if isinstance(value, (int, float)):
        return float(value)

    if isinstance(value, str):
        stripped = value.strip()
        try:
            return float(int(stripped))
        except ValueError:
            try:
                return float(stripped)
            except ValueError:
                return None

    return None


def _string_parse(value: str) -> Union[str, None]:
    if not isinstance(value, str):
        return None

    stripped = value.strip()
    return stripped if stripped else None


def _clamp(v: float, low: float, high: float) -> float:
    return max(low, min(v, high))


def _rng(seed: SeedLike) -> np.random.Generator:
    """A Generator for an integer seed; Generators pass through untouched."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _derive_seed(seed: int, *keys: int) -> int:
    """Stable child seed for (seed, keys), independent of call order."""
    state = np.random.SeedSequence([int(seed), *[int(k) for k in keys]]).generate_state(1)
    return int(state[0])


def load_config(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a YAML key-value configuration file. An empty file is an empty mapping."""
    path = Path(path)
    if not path.is_file():
        raise ItdError(ErrorKind.NOT_FOUND, str(path))
    with path.open("r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ItdError(ErrorKind.INVALID_INPUT, f"{path} must hold a key-value mapping")
    return data


def _check_keys(mapping: Dict[str, Any], allowed, what: str) -> None:
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ItdError(ErrorKind.INVALID_INPUT, f"unknown {what} keys: {', '.join(unknown)}")
