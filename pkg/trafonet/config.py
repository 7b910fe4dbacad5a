from __future__ import annotations
import json
import logging
import os
import re
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple

from .errors import ConfigError
from .types import Activation, Algo, NoiseColor, ValueType, WindowFn, coerce_value

log = logging.getLogger(__name__)

CONFIG_ENV_VAR = "TRAFONET_CONFIG"


@dataclass(frozen=True)
class Setting:
    """
    A single configuration key:
    - name: key inside its section
    - value_type: how raw values are coerced
    - default: value when no source sets it (None allowed)
    - choices: allowed values for enum-like TEXT keys
    """
    name: str
    value_type: ValueType
    default: Any = None
    choices: Tuple[str, ...] = ()
    help: str = ""

    def coerce(self, section: str, value: Any) -> Any:
        try:
            out = coerce_value(self.value_type, value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{section}.{self.name}: {e}") from None
        if self.choices and out is not None:
            values = out if isinstance(out, tuple) else (out,)
            bad = [v for v in values if v not in self.choices]
            if bad:
                raise ConfigError(f"{section}.{self.name}: {bad[0]!r} not one of {', '.join(self.choices)}")
        return out

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["value_type"] = self.value_type.value
        return d


@dataclass
class Section:
    name: str
    settings: List[Setting]

    def setting_map(self) -> Dict[str, Setting]:
        return {s.name: s for s in self.settings}

    def defaults(self) -> Dict[str, Any]:
        return {s.name: s.default for s in self.settings}


def _s(name: str, value_type: ValueType, default: Any, help: str = "", choices: Iterable[str] = ()) -> Setting:
    return Setting(name, value_type, default, tuple(choices), help)


I, F, T, B = ValueType.INT, ValueType.FLOAT, ValueType.TEXT, ValueType.BOOL

SECTIONS: List[Section] = [
    Section("run", [
        _s("seed", I, 42, "global seed, fanned out to every component"),
        _s("out_dir", T, "runs", "output directory"),
        _s("parallel", B, False, "run benchmark algorithms in a process pool"),
    ]),
    Section("nn", [
        _s("learning_rate", F, 0.01),
        _s("momentum", F, 0.9),
        _s("batch_size", I, 32),
        _s("epochs", I, 12),
        _s("grad_step", F, 1e-6, "central-difference step for gradcheck"),
    ]),
    Section("dsp", [
        _s("window_len", I, 1024),
        _s("hop", I, 1024),
        _s("window_fn", T, "hann", choices=[w.value for w in WindowFn]),
        _s("n_mels", I, 64),
        _s("f_min", F, 20.0),
        _s("f_max", F, 16000.0),
    ]),
    Section("synth", [
        _s("sample_rate_hz", F, 48000.0),
        _s("segment_samples", I, 17408),
        _s("jitter", F, 0.2),
        _s("n_per_class", I, 100),
        _s("n_test_per_class", I, 50),
        _s("snr_levels", ValueType.FLOATS, (20.0, 10.0, 5.0, 0.0)),
        _s("augment_snr_levels", ValueType.FLOATS, (20.0, 10.0, 5.0), "SNRs of the denoised training copies; empty disables"),
        _s("noise_color", T, "white", choices=[c.value for c in NoiseColor]),
        _s("denoise_alpha", F, 1.5),
        _s("denoise_beta", F, 0.02),
    ]),
    Section("core", [
        _s("lambda_sat", F, 1.15),
        _s("l_mag", F, 500.0),
        _s("l_air", F, 0.3),
    ]),
    Section("env", [
        _s("flux_max", F, 0.8),
        _s("flux_limit", F, 0.9),
        _s("action_bins", I, 72),
        _s("gamma", F, 0.99),
        _s("seed", I, None, "null: derived from run.seed"),
    ]),
    Section("agent", [
        _s("steps", I, 50000),
        _s("hidden", I, 64),
        _s("dqn_lr", F, 0.01),
        _s("ppo_lr", F, 0.01),
        _s("momentum", F, 0.9),
        _s("replay_capacity", I, 10000),
        _s("batch", I, 64),
        _s("sync_every", I, 250),
        _s("eps0", F, 1.0),
        _s("eps_min", F, 0.05),
        _s("eps_horizon", I, 20000),
        _s("eps_tau", F, 5000.0),
        _s("clip_eps", F, 0.2),
        _s("epochs_per_iter", I, 8),
        _s("rollout_size", I, 256),
        _s("minibatch", I, 32),
        _s("entropy_coef", F, 0.05),
        _s("ppo_activation", T, "relu", "PPO hidden layers", choices=[Activation.RELU.value, Activation.SOFTPLUS.value]),
        _s("eval_episodes", I, 200),
        _s("oracle_grid_deg", F, 0.5),
    ]),
    Section("benchmark", [
        _s("algos", ValueType.TEXTS, tuple(a.value for a in Algo), choices=[a.value for a in Algo]),
    ]),
]

SECTION_MAP: Dict[str, Section] = {s.name: s for s in SECTIONS}


class RunConfig:
    """Resolved configuration: section -> key -> coerced value."""

    def __init__(self, values: Optional[Mapping[str, Mapping[str, Any]]] = None) -> None:
        self._values: Dict[str, Dict[str, Any]] = {s.name: s.defaults() for s in SECTIONS}
        if values:
            self.update(values)

    def __getitem__(self, section: str) -> Dict[str, Any]:
        if section not in self._values:
            raise ConfigError(f"Unknown config section: {section}")
        return self._values[section]

    def get(self, section: str, key: str) -> Any:
        sec = self[section]
        if key not in sec:
            raise ConfigError(f"Unknown config key: {section}.{key}")
        return sec[key]

    def set(self, section: str, key: str, value: Any) -> None:
        if section not in SECTION_MAP:
            raise ConfigError(f"Unknown config section: {section}")
        setting = SECTION_MAP[section].setting_map().get(key)
        if setting is None:
            raise ConfigError(f"Unknown config key: {section}.{key}")
        self._values[section][key] = setting.coerce(section, value)

    def update(self, values: Mapping[str, Any]) -> None:
        for section, keys in values.items():
            if not isinstance(keys, Mapping):
                raise ConfigError(f"config section {section!r} must be an object, got {type(keys).__name__}")
            for key, value in keys.items():
                self.set(section, key, value)

    @property
    def seed(self) -> int:
        return int(self.get("run", "seed"))

    @property
    def out_dir(self) -> Path:
        return Path(self.get("run", "out_dir"))

    def copy(self) -> "RunConfig":
        return RunConfig.from_dict(self.to_dict())

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {
            sec: {k: list(v) if isinstance(v, tuple) else v for k, v in keys.items()}
            for sec, keys in self._values.items()
        }

    @staticmethod
    def from_dict(d: Mapping[str, Any]) -> "RunConfig":
        return RunConfig(d)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, RunConfig) and self._values == other._values


# ----- Sources -----

def _parse_literal(tok: str) -> Any:
    tok = tok.strip()
    # quoted string
    if len(tok) >= 2 and tok[0] == tok[-1] and tok[0] in "\"'":
        return tok[1:-1]
    low = tok.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("null", "none"):
        return None
    if re.fullmatch(r"-?\d+", tok):
        return int(tok)
    try:
        return float(tok)
    except ValueError:
        pass
    # fallback: bare string (lists stay comma separated for coerce_value)
    return tok


def parse_override(item: str) -> Tuple[str, str, Any]:
    """'section.key=value' -> (section, key, literal)."""
    if "=" not in item:
        raise ConfigError(f"override must look like section.key=value, got {item!r}")
    path, raw = item.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"override key must be section.key, got {path.strip()!r}")
    return parts[0], parts[1], _parse_literal(raw)


def read_config_file(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def load_config(
    path: Optional[Path] = None,
    overrides: Iterable[str] = (),
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """
    Defaults, then $TRAFONET_CONFIG, then `path`, then section.key=value overrides.
    Unknown sections or keys raise ConfigError.
    """
    environ = os.environ if environ is None else environ
    cfg = RunConfig()
    env_path = environ.get(CONFIG_ENV_VAR)
    if env_path:
        log.debug("loading config from $%s=%s", CONFIG_ENV_VAR, env_path)
        cfg.update(read_config_file(Path(env_path)))
    if path is not None:
        log.debug("loading config from %s", path)
        cfg.update(read_config_file(Path(path)))
    for item in overrides:
        section, key, value = parse_override(item)
        cfg.set(section, key, value)
    return cfg
