"""Experiment configuration: flat key-value file format, schema validation,
and documented defaults.

Config files hold one `key = value` pair per line; `#` starts a comment.
Unknown keys are rejected. Device profiles are selected with `profiles =
name1,name2,...` and individual fields overridden with dotted keys such as
`profile.hw_t1.train_time_mean = 490`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

from hetfed.federation import ASYNCHRONOUS, STALENESS_AGGREGATIONS, STALENESS_ROUNDS, SYNCHRONOUS
from hetfed.sim import DeviceProfile, default_profiles

PER_ROUND = "per_round"
PER_STEP = "per_step"

PROFILE_FIELDS = (
    "train_time_mean",
    "train_time_jitter",
    "exchange_latency_mean",
    "dropout_prob_per_round",
    "rejoin_delay",
)

SWEEPABLE_FIELDS = ("sigma", "alpha", "mode", "learning_rate", "batch_size", "local_epochs", "separation", "staleness_aware")


class ConfigError(ValueError):
    """A config file violated the documented schema."""


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    alpha: float = 0.4
    sigma: float = 1.0
    clip_norm: float = 1.0
    delta: float = 1e-5
    learning_rate: float = 0.02
    batch_size: int = 9
    local_epochs: int = 1
    classes: int = 4
    input_dim: int = 32
    hidden_dim: int = 64
    per_class: int = 100
    separation: float = 3.75
    train_fraction: float = 0.8
    seeds: tuple[int, ...] = tuple(range(10))
    seed: int = 0  # the seed of a single run; sweeps iterate over `seeds`
    target_accuracy: float = 0.75
    sustain_evaluations: int = 3
    max_aggregations: int = 5000
    max_virtual_time: float | None = None
    stop_on_target: bool = True
    composition_granularity: str = PER_ROUND
    staleness_metric: str = STALENESS_ROUNDS
    staleness_aware: bool = True
    nominal_round_seconds: float | None = None  # None: 1.15x the fastest tier's mean cycle
    lambda_max: int = 64
    max_consecutive_aborted_rounds: int = 1000
    profiles: tuple[DeviceProfile, ...] = field(default_factory=lambda: tuple(default_profiles()))

    def __post_init__(self):
        if self.mode not in (SYNCHRONOUS, ASYNCHRONOUS):
            raise ConfigError(f"mode must be '{SYNCHRONOUS}' or '{ASYNCHRONOUS}', got {self.mode!r}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError("alpha must lie in (0,1]")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.sigma == 0:
            warnings.warn("sigma=0: privacy accounting is disabled for this run", stacklevel=2)
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0,1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.classes < 2:
            raise ConfigError("classes must be >= 2")
        if self.input_dim < self.classes:
            raise ConfigError("input_dim must be >= classes")
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1")
        if self.per_class < 1:
            raise ConfigError("per_class must be >= 1")
        if self.separation <= 0:
            raise ConfigError("separation must be positive")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0,1)")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.target_accuracy <= 0 or self.target_accuracy > 1:
            raise ConfigError("target_accuracy must lie in (0,1]")
        if self.sustain_evaluations < 1:
            raise ConfigError("sustain_evaluations must be >= 1")
        if self.max_aggregations < 1:
            raise ConfigError("max_aggregations must be >= 1")
        if self.max_virtual_time is not None and self.max_virtual_time <= 0:
            raise ConfigError("max_virtual_time must be positive or none")
        if self.composition_granularity not in (PER_ROUND, PER_STEP):
            raise ConfigError(f"composition_granularity must be '{PER_ROUND}' or '{PER_STEP}'")
        if self.staleness_metric not in (STALENESS_ROUNDS, STALENESS_AGGREGATIONS):
            raise ConfigError(f"staleness_metric must be '{STALENESS_ROUNDS}' or '{STALENESS_AGGREGATIONS}'")
        if self.nominal_round_seconds is not None and self.nominal_round_seconds <= 0:
            raise ConfigError("nominal_round_seconds must be positive or auto")
        if self.lambda_max < 1:
            raise ConfigError("lambda_max must be >= 1")
        if not self.profiles:
            raise ConfigError("at least one device profile is required")

    def resolved_nominal_round_seconds(self) -> float:
        if self.nominal_round_seconds is not None:
            return self.nominal_round_seconds
        return 1.15 * min(p.mean_cycle for p in self.profiles)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed))

    def to_flat_dict(self) -> dict:
        """Scalar view used by manifests; inverse of the config file schema."""
        out = {
            "mode": self.mode,
            "alpha": self.alpha,
            "sigma": self.sigma,
            "clip_norm": self.clip_norm,
            "delta": self.delta,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "local_epochs": self.local_epochs,
            "classes": self.classes,
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "per_class": self.per_class,
            "separation": self.separation,
            "train_fraction": self.train_fraction,
            "seeds": list(self.seeds),
            "seed": self.seed,
            "target_accuracy": self.target_accuracy,
            "sustain_evaluations": self.sustain_evaluations,
            "max_aggregations": self.max_aggregations,
            "max_virtual_time": self.max_virtual_time,
            "stop_on_target": self.stop_on_target,
            "composition_granularity": self.composition_granularity,
            "staleness_metric": self.staleness_metric,
            "staleness_aware": self.staleness_aware,
            "nominal_round_seconds": self.nominal_round_seconds,
            "lambda_max": self.lambda_max,
            "max_consecutive_aborted_rounds": self.max_consecutive_aborted_rounds,
            "profiles": [
                {
                    "tier_name": p.tier_name,
                    "train_time_mean": p.train_time_mean,
                    "train_time_jitter": p.train_time_jitter,
                    "exchange_latency_mean": p.exchange_latency_mean,
                    "dropout_prob_per_round": p.dropout_prob_per_round,
                    "rejoin_delay": p.rejoin_delay,
                }
                for p in self.profiles
            ],
        }
        return out

    @classmethod
    def from_flat_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        profiles = tuple(DeviceProfile(**p) for p in data.pop("profiles"))
        data["seeds"] = tuple(int(s) for s in data.pop("seeds"))
        return cls(profiles=profiles, **data)


_BOOL_KEYS = {"stop_on_target", "staleness_aware"}
_INT_KEYS = {
    "batch_size", "local_epochs", "classes", "input_dim", "hidden_dim", "per_class",
    "sustain_evaluations", "max_aggregations", "lambda_max", "seed",
    "max_consecutive_aborted_rounds",
}
_FLOAT_KEYS = {
    "alpha", "sigma", "clip_norm", "delta", "learning_rate", "separation",
    "train_fraction", "target_accuracy",
}
_OPTIONAL_FLOAT_KEYS = {"max_virtual_time", "nominal_round_seconds"}
_STR_KEYS = {"mode", "composition_granularity", "staleness_metric"}


def _parse_bool(key: str, raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {raw!r}")


def parse_config_text(text: str, source: str = "<string>") -> ExperimentConfig:
    values: dict = {}
    profile_overrides: dict[str, dict[str, float]] = {}
    selected_profiles: list[str] | None = None

    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw_line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key == "profiles":
            selected_profiles = [name.strip() for name in raw.split(",") if name.strip()]
            continue
        if key.startswith("profile."):
            parts = key.split(".")
            if len(parts) != 3 or parts[2] not in PROFILE_FIELDS:
                raise ConfigError(
                    f"{source}:{lineno}: profile override must be profile.<tier>.<field> "
                    f"with field in {PROFILE_FIELDS}; got {key!r}"
                )
            try:
                profile_overrides.setdefault(parts[1], {})[parts[2]] = float(raw)
            except ValueError as err:
                raise ConfigError(f"{source}:{lineno}: {key}: expected a number, got {raw!r}") from err
            continue
        if key == "seeds":
            try:
                values["seeds"] = tuple(int(s) for s in raw.split(",") if s.strip())
            except ValueError as err:
                raise ConfigError(f"{source}:{lineno}: seeds: expected comma-separated integers") from err
            continue
        if key in _BOOL_KEYS:
            values[key] = _parse_bool(key, raw)
        elif key in _INT_KEYS:
            try:
                values[key] = int(raw)
            except ValueError as err:
                raise ConfigError(f"{source}:{lineno}: {key}: expected an integer, got {raw!r}") from err
        elif key in _FLOAT_KEYS:
            try:
                values[key] = float(raw)
            except ValueError as err:
                raise ConfigError(f"{source}:{lineno}: {key}: expected a number, got {raw!r}") from err
        elif key in _OPTIONAL_FLOAT_KEYS:
            if raw.lower() in ("none", "auto"):
                values[key] = None
            else:
                try:
                    values[key] = float(raw)
                except ValueError as err:
                    raise ConfigError(f"{source}:{lineno}: {key}: expected a number or 'none'") from err
        elif key in _STR_KEYS:
            values[key] = raw
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")

    if "mode" not in values:
        raise ConfigError(f"{source}: required key 'mode' is missing")

    base = {p.tier_name: p for p in default_profiles()}
    names = selected_profiles if selected_profiles is not None else list(base)
    resolved = []
    for name in names:
        if name not in base and name not in profile_overrides:
            raise ConfigError(f"{source}: unknown profile {name!r}")
        fields = {
            "tier_name": name,
            "train_time_mean": base[name].train_time_mean if name in base else None,
            "train_time_jitter": base[name].train_time_jitter if name in base else 0.0,
            "exchange_latency_mean": base[name].exchange_latency_mean if name in base else None,
            "dropout_prob_per_round": base[name].dropout_prob_per_round if name in base else 0.0,
            "rejoin_delay": base[name].rejoin_delay if name in base else None,
        }
        fields.update(profile_overrides.get(name, {}))
        missing = [k for k, v in fields.items() if v is None and k in ("train_time_mean", "exchange_latency_mean")]
        if missing:
            raise ConfigError(f"{source}: profile {name!r} is missing required fields {missing}")
        resolved.append(DeviceProfile(**fields))
    extraneous = set(profile_overrides) - set(names)
    if extraneous:
        raise ConfigError(f"{source}: overrides for unselected profiles {sorted(extraneous)}")

    first_seed = values.get("seeds", tuple(range(10)))[0]
    values.setdefault("seed", int(first_seed))
    return ExperimentConfig(profiles=tuple(resolved), **values)


def parse_config(path) -> ExperimentConfig:
    """Read, parse and validate a config file; unknown keys are rejected by name."""
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path))
