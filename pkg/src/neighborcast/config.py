"""Declarative run configuration: one TOML document, flags win over file.

Every knob has a default matching the published settings (input length
2016, segment length 12, d=96, 4 transformer layers, K=50, tau=1,
alpha=0.2, Adam lr 0.001, batch 16). Unknown keys are rejected, and the
fully-resolved tree is echoed into the run directory so any run can be
replayed exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Any

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - version-dependent
    import tomli as tomllib

from .errors import ConfigError


@dataclass
class DataSection:
    dataset: str = ""
    format: str = ""                    # "" = infer from extension
    adjacency: str = ""
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    sample_rate_minutes: int = 5
    null_value: float = 0.0


@dataclass
class ModelSection:
    input_len: int = 2016
    seg_len: int = 12
    horizon: int = 12
    d_model: int = 96
    n_heads: int = 4
    n_transformer_layers: int = 4
    ffn_mult: int = 4
    short_layers: int = 4
    filter_len: int = 2
    dilations: tuple[int, ...] = (1, 2, 1, 2)
    diffusion_order: int = 2
    adaptive_dim: int = 10
    mode: str = "hybrid"
    key_tap: str = "fusion_output"
    dropout: float = 0.0


@dataclass
class TrainSection:
    lr: float = 0.001
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 15
    seed: int = 0
    grad_clip: float = 0.0        # 0 disables
    steps_per_epoch: int = 0      # 0 = full pass over the split
    val_max_windows: int = 0      # 0 = every validation window


@dataclass
class ForecastSection:
    k: int = 50
    tau: float = 1.0
    alpha: float = 0.2
    index: str = "exact"
    n_probe: int = 8
    batch_size: int = 64


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    forecast: ForecastSection = field(default_factory=ForecastSection)

    def resolved_toml(self) -> str:
        lines: list[str] = []
        for section_name in ("data", "model", "train", "forecast"):
            section = getattr(self, section_name)
            lines.append(f"[{section_name}]")
            for f in fields(section):
                lines.append(f"{f.name} = {_toml_value(getattr(section, f.name))}")
            lines.append("")
        return "\n".join(lines)


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_SECTIONS = {"data": DataSection, "model": ModelSection,
             "train": TrainSection, "forecast": ForecastSection}


def load_run_config(path: str | None = None,
                    overrides: dict[str, dict[str, Any]] | None = None
                    ) -> RunConfig:
    """Build a RunConfig from an optional TOML file plus flag overrides."""
    tree: dict[str, Any] = {}
    if path:
        try:
            with open(path, "rb") as f:
                tree = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    cfg = RunConfig()
    _merge(cfg, tree, origin=path or "<defaults>")
    if overrides:
        _merge(cfg, overrides, origin="<flags>")
    return cfg


def _merge(cfg: RunConfig, tree: dict[str, Any], origin: str) -> None:
    for section_name, content in tree.items():
        if section_name not in _SECTIONS:
            raise ConfigError(
                f"{origin}: unknown section [{section_name}] "
                f"(expected one of {sorted(_SECTIONS)})")
        if not isinstance(content, dict):
            raise ConfigError(f"{origin}: [{section_name}] must be a table")
        section = getattr(cfg, section_name)
        known = {f.name: f for f in fields(section)}
        for key, value in content.items():
            if key not in known:
                raise ConfigError(
                    f"{origin}: unknown key {section_name}.{key} "
                    f"(expected one of {sorted(known)})")
            current = getattr(section, key)
            if isinstance(current, tuple):
                if not isinstance(value, (list, tuple)):
                    raise ConfigError(
                        f"{origin}: {section_name}.{key} must be a list")
                value = tuple(value)
            elif isinstance(current, bool):
                if not isinstance(value, bool):
                    raise ConfigError(
                        f"{origin}: {section_name}.{key} must be a boolean")
            elif isinstance(current, float):
                if not isinstance(value, (int, float)) or isinstance(value, bool):
                    raise ConfigError(
                        f"{origin}: {section_name}.{key} must be a number")
                value = float(value)
            elif isinstance(current, int):
                if not isinstance(value, int) or isinstance(value, bool):
                    raise ConfigError(
                        f"{origin}: {section_name}.{key} must be an integer")
            elif isinstance(current, str):
                if not isinstance(value, str):
                    raise ConfigError(
                        f"{origin}: {section_name}.{key} must be a string")
            setattr(section, key, value)
