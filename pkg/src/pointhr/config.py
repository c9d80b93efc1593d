"""Model hyperparameters, the T/S/B/L presets and the ``key = value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

OPERATORS = ("va", "gva", "mlp")
DECODERS = ("sum", "pg", "pgr")
TASKS = ("seg", "cls")
SAMPLERS = ("grid", "fps")


class ConfigError(ValueError):
    """Raised for inconsistent or unparsable model configurations."""


@dataclass(frozen=True)
class ModelConfig:
    modules: tuple[int, int, int, int] = (1, 1, 5, 4)
    blocks: tuple[int, int, int, int] = (2, 2, 2, 2)
    channels: tuple[int, int, int, int] = (64, 32, 32, 32)
    stem_channels: int = 32
    neighbors: tuple[int, int, int, int] = (16, 16, 16, 16)
    # one group count per branch, shared by every stage that contains the branch
    groups: tuple[int, int, int, int] = (4, 8, 16, 32)
    grid_sizes: tuple[float, float, float, float] = (0.1, 0.2, 0.4, 0.8)
    operator: str = "gva"
    num_classes: int = 20
    decoder: str = "pgr"
    pos_encoding: bool = False
    raw_channels: int = 0
    task: str = "seg"
    sampler: str = "grid"
    fps_ratio: int = 6

    def __post_init__(self):
        for name in ("modules", "blocks", "channels", "neighbors", "groups", "grid_sizes"):
            value = tuple(getattr(self, name))
            if len(value) != 4:
                raise ConfigError(f"{name} needs 4 values, got {len(value)}")
            object.__setattr__(self, name, value)
        for name in ("modules", "blocks", "channels", "neighbors", "groups"):
            if any(int(v) != v or v < 1 for v in getattr(self, name)):
                raise ConfigError(f"{name} must be positive integers: {getattr(self, name)}")
        object.__setattr__(self, "grid_sizes", tuple(float(g) for g in self.grid_sizes))
        if any(not g > 0 for g in self.grid_sizes):
            raise ConfigError("grid_sizes must be positive")
        if any(b <= a for a, b in zip(self.grid_sizes, self.grid_sizes[1:])):
            raise ConfigError(f"grid_sizes must be strictly increasing: {self.grid_sizes}")
        if self.stem_channels < 1 or self.num_classes < 1 or self.raw_channels < 0:
            raise ConfigError("stem_channels and num_classes must be positive, raw_channels >= 0")
        if self.operator not in OPERATORS:
            raise ConfigError(f"unknown operator {self.operator!r}; expected one of {OPERATORS}")
        if self.decoder not in DECODERS:
            raise ConfigError(f"unknown decoder {self.decoder!r}; expected one of {DECODERS}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"unknown sampler {self.sampler!r}; expected one of {SAMPLERS}")
        if self.fps_ratio < 2:
            raise ConfigError("fps_ratio must be at least 2")
        if self.operator == "gva":
            for stage in range(1, 5):
                for branch in range(1, stage + 1):
                    width = self.width(stage, branch)
                    if width % self.groups[branch - 1]:
                        raise ConfigError(
                            f"groups[{branch - 1}]={self.groups[branch - 1]} does not divide "
                            f"stage {stage} branch {branch} width {width}")
            if self.stem_channels % self.groups[0]:
                raise ConfigError("groups[0] must divide stem_channels")

    def width(self, stage: int, branch: int) -> int:
        """Channel count of ``branch`` inside ``stage`` (both 1-based)."""
        return 2 ** (branch - 1) * self.channels[stage - 1]

    def decoder_width(self, scale: int) -> int:
        """Width of the decoder stream at ``scale`` (0 is the input resolution)."""
        return self.stem_channels if scale == 0 else self.width(4, scale)

    def knn_k(self, scale: int) -> int:
        # the stem scale borrows the first branch's neighbor count
        return self.neighbors[max(scale, 1) - 1]

    def block_groups(self, scale: int) -> int:
        return self.groups[max(scale, 1) - 1]

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


PRESETS: dict[str, ModelConfig] = {
    "T": ModelConfig(modules=(1, 1, 2, 1), channels=(64, 16, 16, 16)),
    "S": ModelConfig(modules=(1, 1, 3, 2), channels=(64, 16, 16, 16)),
    "B": ModelConfig(modules=(1, 1, 3, 2), channels=(64, 32, 32, 32)),
    "L": ModelConfig(modules=(1, 1, 5, 4), channels=(64, 32, 32, 32)),
}

# reported parameter counts for the presets, used by the scalability check
PRESET_PARAMS = {"T": 0.6e6, "S": 1.0e6, "B": 3.9e6, "L": 7.1e6}

_TUPLE_KEYS = {"modules": int, "blocks": int, "channels": int, "neighbors": int,
               "groups": int, "grid_sizes": float}
_SCALAR_KEYS = {"stem_channels": int, "num_classes": int, "raw_channels": int,
                "fps_ratio": int, "operator": str, "decoder": str, "task": str,
                "sampler": str, "pos_encoding": "bool"}


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_config(text: str, base: ModelConfig | None = None) -> ModelConfig:
    """Parse ``key = value`` lines on top of ``base`` (default: preset L).

    A ``preset = T`` line switches the base before the remaining keys apply.
    """
    values: dict[str, object] = {}
    preset = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            if key == "preset":
                preset = value.upper()
                if preset not in PRESETS:
                    raise ValueError(f"unknown preset {value!r}")
            elif key in _TUPLE_KEYS:
                cast = _TUPLE_KEYS[key]
                values[key] = tuple(cast(v) for v in value.replace(",", " ").split())
            elif key in _SCALAR_KEYS:
                cast = _SCALAR_KEYS[key]
                values[key] = _parse_bool(value) if cast == "bool" else cast(value)
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    if preset is not None:
        base = PRESETS[preset]
    return (base or PRESETS["L"]).replace(**values)


def format_config(config: ModelConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def load_config(name_or_path: str | Path) -> ModelConfig:
    """Resolve a preset name (T/S/B/L) or read a config file."""
    key = str(name_or_path)
    if key.upper() in PRESETS and not Path(key).exists():
        return PRESETS[key.upper()]
    return parse_config(Path(name_or_path).read_text())
