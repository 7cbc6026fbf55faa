"""Run configuration: INI-style sections ``sim``, ``sampling``, ``model``, ``nsdn``, ``train``.

Example::

    [sampling]
    strategy = ss-abc-fixed
    ratio = 1, 4, 20

    [train]
    epochs = 8
    lambdas = 1, 1, 1, 1, 1
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .funnel import ConfigError, FunnelConfig
from .gmm import DEFAULT_DIMS as GMM_DIMS
from .nsdn import DEFAULT_DIMS as NSDN_DIMS, SHARING_MODES
from .sampling import SamplingCounts, Strategy


@dataclass
class SamplingConfig:
    strategy: str = "ss-abc-fixed"
    ratio: tuple[int, ...] = (1, 4, 20)
    negatives: int = 25
    ab_ratio: tuple[int, ...] = (1, 4)

    def counts(self) -> SamplingCounts:
        return SamplingCounts(fixed=tuple(self.ratio), total=self.negatives, ab=tuple(self.ab_ratio))

    def validate(self) -> None:
        try:
            Strategy(self.strategy)
        except ValueError:
            raise ConfigError(f"sampling.strategy: unknown strategy {self.strategy!r}") from None
        if len(self.ratio) != 3 or min(self.ratio) < 0 or sum(self.ratio) == 0:
            raise ConfigError(f"sampling.ratio must be three non-negative counts, got {self.ratio}")
        if self.negatives <= 0:
            raise ConfigError(f"sampling.negatives must be positive, got {self.negatives}")
        if len(self.ab_ratio) != 2 or min(self.ab_ratio) < 0 or sum(self.ab_ratio) == 0:
            raise ConfigError(f"sampling.ab_ratio must be two non-negative counts, got {self.ab_ratio}")


@dataclass
class ModelConfig:
    dims: tuple[int, ...] = GMM_DIMS

    def validate(self) -> None:
        if not self.dims or min(self.dims) <= 0:
            raise ConfigError(f"model.dims must be positive widths, got {self.dims}")


@dataclass
class NsdnConfig:
    p_floor: float = 0.01
    w_max: float = 100.0
    sharing_mode: str = "fully-separate"
    dims: tuple[int, ...] = NSDN_DIMS

    def validate(self) -> None:
        if not 0 < self.p_floor <= 1:
            raise ConfigError(f"nsdn.p_floor must be in (0, 1], got {self.p_floor}")
        if self.w_max < 1:
            raise ConfigError(f"nsdn.w_max must be >= 1, got {self.w_max}")
        if self.sharing_mode not in SHARING_MODES:
            raise ConfigError(f"nsdn.sharing_mode must be one of {SHARING_MODES}, got {self.sharing_mode!r}")
        if not self.dims or min(self.dims) <= 0:
            raise ConfigError(f"nsdn.dims must be positive widths, got {self.dims}")


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 512
    epochs: int = 40
    seed: int = 0
    lambdas: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)
    patience: int = 3
    debias: bool = True
    warmup_epochs: int = 0
    val_fraction: float = 0.1
    val_k: int = 50
    divergence_factor: float = 10.0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if self.batch_size <= 0:
            raise ConfigError(f"train.batch_size must be positive, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"train.epochs must be >= 0, got {self.epochs}")
        if len(self.lambdas) != 5 or min(self.lambdas) < 0:
            raise ConfigError(f"train.lambdas must be five non-negative values, got {self.lambdas}")
        if self.patience < 1:
            raise ConfigError(f"train.patience must be >= 1, got {self.patience}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"train.val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.val_k <= 0:
            raise ConfigError(f"train.val_k must be positive, got {self.val_k}")


@dataclass
class EvalConfig:
    k: tuple[int, ...] = (100, 200)
    exclude_train_positives: bool = True


@dataclass
class RunConfig:
    sim: FunnelConfig = field(default_factory=FunnelConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    nsdn: NsdnConfig = field(default_factory=NsdnConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        self.sim.validate()
        self.sampling.validate()
        self.model.validate()
        self.nsdn.validate()
        self.train.validate()
        return self

    def to_flat(self) -> dict[str, object]:
        out = {}
        for sec in dataclasses.fields(self):
            for f in dataclasses.fields(getattr(self, sec.name)):
                value = getattr(getattr(self, sec.name), f.name)
                out[f"{sec.name}.{f.name}"] = list(value) if isinstance(value, tuple) else value
        return out

    def replace(self, **overrides) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"train.epochs": 2})``."""
        flat = {k: _format(v) for k, v in self.to_flat().items()}
        flat.update({k: _format(v) for k, v in overrides.items()})
        return from_flat(flat)


def _format(value) -> str:
    if isinstance(value, (list, tuple)):
        return ", ".join(str(v) for v in value)
    return str(value)


def _convert(key: str, raw: str, tp):
    raw = raw.strip()
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if typing.get_origin(tp) is tuple:
            (inner, _) = typing.get_args(tp)
            text = raw.strip("[]() ")
            return tuple(_convert(key, part, inner) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    raise ConfigError(f"{key}: unsupported type {tp}")


def from_flat(flat: dict[str, str]) -> RunConfig:
    cfg = RunConfig()
    hints = {sec.name: typing.get_type_hints(type(getattr(cfg, sec.name))) for sec in dataclasses.fields(cfg)}
    for key, raw in flat.items():
        section, _, name = key.partition(".")
        if section not in hints or name not in hints[section]:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(getattr(cfg, section), name, _convert(key, str(raw), hints[section][name]))
    return cfg


def parse_config_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    flat = {f"{sec}.{key}": value for sec in parser.sections() for key, value in parser.items(sec)}
    return from_flat(flat)


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig() if path is None else parse_config_text(Path(path).read_text(encoding="utf-8"))
    if overrides:
        cfg = cfg.replace(**overrides)
    return cfg.validate()


def write_config(cfg: RunConfig, path) -> Path:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for key, value in cfg.to_flat().items():
        section, _, name = key.partition(".")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, _format(value))
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
    return path
