from __future__ import annotations
from enum import Enum
from typing import Any, Tuple


class ValueType(str, Enum):
    INT = "INT"
    FLOAT = "FLOAT"
    TEXT = "TEXT"
    BOOL = "BOOL"
    FLOATS = "FLOATS"  # comma separated list of floats
    TEXTS = "TEXTS"  # comma separated list of names


class Activation(str, Enum):
    SOFTPLUS = "softplus"
    RELU = "relu"
    LINEAR = "linear"
    SOFTMAX = "softmax"


class LossKind(str, Enum):
    MSE = "mse"
    CROSS_ENTROPY = "cross_entropy"


class Padding(str, Enum):
    VALID = "valid"
    SAME = "same"


class WindowFn(str, Enum):
    HANN = "hann"
    HAMMING = "hamming"
    RECT = "rect"


class NoiseColor(str, Enum):
    WHITE = "white"
    PINK = "pink"


class ScheduleKind(str, Enum):
    LINEAR = "linear"
    EXPONENTIAL = "exponential"


class Algo(str, Enum):
    DQN_LINEAR = "dqn-linear"
    DQN_EXP = "dqn-exp"
    PPO = "ppo"


def _split_list(value: Any) -> Tuple[str, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(str(v).strip() for v in value)
    return tuple(p.strip() for p in str(value).split(",") if p.strip())


def coerce_value(value_type: ValueType, value: Any) -> Any:
    """
    Convert user-provided values (JSON file, --set override) into the correct
    Python type based on the setting definition.
    """
    if value is None:
        return None

    if value_type == ValueType.INT:
        if isinstance(value, bool):
            raise ValueError("BOOL cannot be used where INT is expected")
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"Invalid INT value: {value}")
        return int(value)

    if value_type == ValueType.FLOAT:
        if isinstance(value, bool):
            raise ValueError("BOOL cannot be used where FLOAT is expected")
        return float(value)

    if value_type == ValueType.TEXT:
        return str(value)

    if value_type == ValueType.BOOL:
        if isinstance(value, bool):
            return value
        s = str(value).strip().lower()
        if s in ("true", "1", "yes"):
            return True
        if s in ("false", "0", "no"):
            return False
        raise ValueError(f"Invalid BOOL value: {value}")

    if value_type == ValueType.FLOATS:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return (float(value),)
        return tuple(float(v) for v in _split_list(value))

    if value_type == ValueType.TEXTS:
        return _split_list(value)

    raise ValueError(f"Unknown value type: {value_type}")
