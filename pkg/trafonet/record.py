from __future__ import annotations
import time
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .errors import ValidationError


@dataclass
class Summary:
    mean: float
    std: float
    min: float
    q25: float
    median: float
    q75: float
    max: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def summarize(values: Sequence[float]) -> Summary:
    """
    Population std; quantiles by linear interpolation between order statistics.
    """
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValidationError("cannot summarize an empty list")
    q25, median, q75 = np.quantile(arr, [0.25, 0.5, 0.75], method="linear")
    return Summary(
        mean=float(arr.mean()),
        std=float(arr.std(ddof=0)),
        min=float(arr.min()),
        q25=float(q25),
        median=float(median),
        q75=float(q75),
        max=float(arr.max()),
    )


@dataclass
class ExperimentRecord:
    """
    Serializable run log:
    - config: resolved config snapshot
    - metrics: named time series (per episode / epoch / iteration)
    - summary: final scalar results
    Wall-clock duration is informational and not part of the reproducible metrics.
    """
    name: str
    seed: int
    config: Dict[str, Any] = field(default_factory=dict)
    metrics: Dict[str, List[float]] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)
    status: str = "ok"
    error: Optional[str] = None
    version: str = __version__
    duration_s: float = 0.0
    _started: float = field(default_factory=time.perf_counter, repr=False, compare=False)

    def log(self, key: str, value: float) -> None:
        self.metrics.setdefault(key, []).append(float(value))

    def finish(self) -> "ExperimentRecord":
        self.duration_s = time.perf_counter() - self._started
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "seed": self.seed,
            "config": self.config,
            "metrics": self.metrics,
            "summary": self.summary,
            "status": self.status,
            "error": self.error,
            "version": self.version,
            "duration_s": self.duration_s,
        }

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "ExperimentRecord":
        return ExperimentRecord(
            name=d["name"],
            seed=int(d["seed"]),
            config=d.get("config", {}),
            metrics={k: [float(x) for x in v] for k, v in d.get("metrics", {}).items()},
            summary=d.get("summary", {}),
            status=d.get("status", "ok"),
            error=d.get("error"),
            version=d.get("version", __version__),
            duration_s=float(d.get("duration_s", 0.0)),
        )
