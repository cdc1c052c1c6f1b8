"""
Run configuration: dataclass tree loaded from YAML, environment overrides and
field-level validation.

Precedence, lowest first: dataclass defaults, YAML file, environment
(STABLEROM_OUTPUT_DIR, STABLEROM_THREADS), command-line flags.

Example file::

    method: gasnitrom
    r: 2
    seed: 0
    output_dir: runs/toy
    data:
      fom: "toy:nu=20"
      protocol: step
      t_end: 10
      samples: 100
    opinf:
      reg: 1.0e-7
      gas_reg: 1.0e-8
    train:
      horizons: [10]
      blocks: [[projection, 50], [tensors, 50], [joint, 100]]
      lbfgs: {memory: 10}
"""
import os
import logging
import dataclasses
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import yaml

from errors import ConfigError
from evaluation import TEST_PROTOCOLS
from rom import METHODS
from training import TrainConfig

logger = logging.getLogger(__name__)

ENV_OUTPUT_DIR = "STABLEROM_OUTPUT_DIR"
ENV_THREADS = "STABLEROM_THREADS"


@dataclass
class DataConfig:
    """Training data: an existing dataset directory or a generation recipe."""
    path: Optional[str] = None
    fom: Optional[str] = None
    protocol: str = "step"
    amplitudes: Optional[List[float]] = None
    t_end: float = 10.0
    samples: int = 100
    binary: bool = False
    preproject: Optional[int] = None


@dataclass
class OpInfConfig:
    reg: float = 1e-7
    gas_reg: float = 1e-8
    gas_iterations: int = 500
    init_route: str = "identity"


@dataclass
class EvalConfig:
    path: Optional[str] = None
    protocol: str = "step"
    amplitudes: Optional[List[float]] = None
    count: int = 100
    low: Optional[float] = None
    high: Optional[float] = None
    t_end: float = 30.0
    samples: int = 300
    frequency: float = 1.0
    seed: int = 0


@dataclass
class RunConfig:
    method: str = "gasnitrom"
    r: int = 2
    seed: int = 0
    output_dir: str = "runs"
    threads: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    opinf: OpInfConfig = field(default_factory=OpInfConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    test: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        """
        Raises:
            ConfigError: Naming the first invalid field.
        """
        if self.method not in METHODS:
            raise ConfigError("method", f"unknown method '{self.method}' (expected one of {METHODS})")
        if self.r < 1:
            raise ConfigError("r", f"must be >= 1, got {self.r}")
        if self.threads < 1:
            raise ConfigError("threads", f"must be >= 1, got {self.threads}")
        if self.method == "pod-galerkin" and not self.data.fom:
            raise ConfigError("data.fom", "pod-galerkin is intrusive and needs a full-order model")
        if self.data.protocol not in ("step", "impulse", "sinusoid"):
            raise ConfigError("data.protocol", f"unknown protocol '{self.data.protocol}'")
        if self.data.amplitudes is not None and len(self.data.amplitudes) == 0:
            raise ConfigError("data.amplitudes", "amplitude list is empty")
        if self.data.samples < 2:
            raise ConfigError("data.samples", f"must be >= 2, got {self.data.samples}")
        if self.data.t_end <= 0:
            raise ConfigError("data.t_end", f"must be positive, got {self.data.t_end}")
        if self.data.preproject is not None and self.data.preproject < self.r:
            raise ConfigError("data.preproject", f"must be >= r={self.r}")
        if self.opinf.reg < 0 or self.opinf.gas_reg < 0:
            raise ConfigError("opinf.reg", "regularization must be non-negative")
        if self.opinf.gas_iterations < 1:
            raise ConfigError("opinf.gas_iterations", f"must be positive, got {self.opinf.gas_iterations}")
        if self.opinf.init_route not in ("identity", "lyapunov"):
            raise ConfigError("opinf.init_route", f"unknown route '{self.opinf.init_route}'")
        if self.test.protocol not in TEST_PROTOCOLS:
            raise ConfigError("test.protocol", f"unknown protocol '{self.test.protocol}'")
        if self.test.amplitudes is not None and len(self.test.amplitudes) == 0:
            raise ConfigError("test.amplitudes", "amplitude list is empty")
        if self.test.count < 1:
            raise ConfigError("test.count", f"must be >= 1, got {self.test.count}")
        if self.test.samples < 2:
            raise ConfigError("test.samples", f"must be >= 2, got {self.test.samples}")
        if self.test.t_end <= 0:
            raise ConfigError("test.t_end", f"must be positive, got {self.test.t_end}")
        if self.test.frequency <= 0:
            raise ConfigError("test.frequency", f"must be positive, got {self.test.frequency}")
        self.train.threads = self.threads
        self.train.validate()


def _coerce(value: Any, default: Any, path: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(path, f"expected a number, got {value!r}") from None
    return value


def _blocks(value: Any, path: str):
    blocks = []
    for item in value or []:
        if isinstance(item, dict) and len(item) == 1:
            (name, iters), = item.items()
        elif isinstance(item, (list, tuple)) and len(item) == 2:
            name, iters = item
        else:
            raise ConfigError(path, f"expected [block, iterations], got {item!r}")
        if not isinstance(iters, int):
            raise ConfigError(path, f"iteration count for '{name}' must be an integer")
        blocks.append((str(name), iters))
    return blocks


def _build(cls, data: Optional[Dict[str, Any]], path: str = ""):
    """Instantiate a config dataclass from a (partial) mapping."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(path or "config", f"expected a mapping, got {type(data).__name__}")
    instance = cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(where, "unknown field")
        default = getattr(instance, key)
        if dataclasses.is_dataclass(default):
            value = _build(type(default), value, where)
        elif key == "blocks":
            value = _blocks(value, where)
        elif key in ("horizons", "amplitudes"):
            if value is not None:
                if not isinstance(value, list):
                    raise ConfigError(where, "expected a list of numbers")
                value = [_coerce(v, 0.0, where) for v in value]
        elif default is not None:
            value = _coerce(value, default, where)
        setattr(instance, key, value)
    return instance


def apply_environment(config: RunConfig, environ: Optional[Dict[str, str]] = None) -> RunConfig:
    environ = os.environ if environ is None else environ
    if environ.get(ENV_OUTPUT_DIR):
        config.output_dir = environ[ENV_OUTPUT_DIR]
    if environ.get(ENV_THREADS):
        try:
            config.threads = int(environ[ENV_THREADS])
        except ValueError:
            raise ConfigError(ENV_THREADS, f"not an integer: {environ[ENV_THREADS]!r}") from None
    return config


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """
    Apply dotted-path overrides such as ``{"train.step_factor": 20}``; None values are skipped.
    """
    for dotted, value in overrides.items():
        if value is None:
            continue
        *parents, leaf = dotted.split(".")
        target = config
        for part in parents:
            if not hasattr(target, part):
                raise ConfigError(dotted, "unknown field")
            target = getattr(target, part)
        if not hasattr(target, leaf):
            raise ConfigError(dotted, "unknown field")
        current = getattr(target, leaf)
        setattr(target, leaf, value if current is None else _coerce(value, current, dotted))
    return config


def load_run_config(
    path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
    environ: Optional[Dict[str, str]] = None,
) -> RunConfig:
    """
    Load, override and validate a run configuration.

    Args:
        path: YAML file, or None for defaults
        overrides: Dotted-path flag values (flags win)
        environ: Environment mapping (defaults to os.environ)

    Raises:
        FileNotFoundError: If ``path`` does not exist
        ConfigError: On malformed YAML or invalid fields
    """
    raw = None
    if path is not None:
        if not os.path.exists(path):
            raise FileNotFoundError(f"Config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            try:
                raw = yaml.safe_load(f)
            except yaml.YAMLError as exc:
                raise ConfigError("config", f"invalid YAML in {path}: {exc}") from exc
        logger.info(f"Loaded run configuration from {path}")

    config = _build(RunConfig, raw)
    apply_environment(config, environ)
    apply_overrides(config, overrides or {})
    config.validate()
    return config


def dump_run_config(config: RunConfig, path: str) -> None:
    """Write the effective configuration next to the run outputs."""
    data = dataclasses.asdict(config)
    data["train"]["blocks"] = [list(b) for b in config.train.blocks]
    data["train"]["horizons"] = [float(h) for h in config.train.horizons]
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(data, f, sort_keys=False)
