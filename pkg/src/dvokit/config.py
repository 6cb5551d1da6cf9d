"""Run configuration parsed from flat ``section.key = value`` text files.

Numeric and structural settings live in config files; command-line flags
are reserved for mode switches and paths.  Every key maps onto a field of
one of the library's settings types, defaults match those types' defaults,
unknown keys are rejected, and values are validated by the settings types
themselves (their ``__post_init__`` checks run at load time).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .ddvo import DdvoSettings
from .dvo import DvoSettings
from .errors import ConfigError
from .losses import LossWeights
from .synth import SceneSpec
from .training import TrainConfig

# TrainConfig fields that are themselves settings objects or are supplied
# elsewhere (mode comes from the command line).
_TRAIN_SKIP = ("mode", "weights", "ddvo", "dvo")
_SCENE_SKIP = ("intrinsics",)


@dataclass(frozen=True)
class CameraSettings:
    """Pinhole intrinsics for file-based commands.

    Zero values mean "derive from the image size" with the same rule the
    synthetic scenes use: fx = fy = width, principal point at the center.
    """

    fx: float = 0.0
    fy: float = 0.0
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self):
        if self.fx < 0.0 or self.fy < 0.0:
            raise ValueError("focal lengths cannot be negative")

    def resolve(self, width, height):
        from .geometry import CameraIntrinsics

        if self.fx == 0.0 or self.fy == 0.0:
            return CameraIntrinsics(
                float(width), float(width), (width - 1) / 2.0, (height - 1) / 2.0
            )
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy)


@dataclass(frozen=True)
class GradcheckSettings:
    """Sizes and tolerances of the finite-difference report."""

    instances: int = 10
    width: int = 16
    height: int = 16
    unroll_iters: int = 2
    solver_tol: float = 1e-3
    loss_tol: float = 1e-4

    def __post_init__(self):
        if self.instances < 1:
            raise ValueError("instances must be >= 1")
        if self.width < 16 or self.height < 16:
            raise ValueError("gradcheck rasters must be at least 16x16")
        if self.unroll_iters < 1:
            raise ValueError("unroll_iters must be >= 1")
        if self.solver_tol <= 0.0 or self.loss_tol <= 0.0:
            raise ValueError("tolerances must be positive")


@dataclass(frozen=True)
class RunConfig:
    """All file-configurable settings, one attribute per section."""

    dvo: DvoSettings = field(default_factory=DvoSettings)
    ddvo: DdvoSettings = field(default_factory=DdvoSettings)
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    camera: CameraSettings = field(default_factory=CameraSettings)
    gradcheck: GradcheckSettings = field(default_factory=GradcheckSettings)

    def train_config(self):
        """The TrainConfig with the nested settings sections wired in."""
        return replace(
            self.train, weights=self.weights, ddvo=self.ddvo, dvo=self.dvo
        )


def _section_fields(section):
    skip = ()
    if section == "train":
        skip = _TRAIN_SKIP
    elif section == "scene":
        skip = _SCENE_SKIP
    elif section == "ddvo":
        skip = ("init_pose",)
    return {f.name: f for f in fields(type(_DEFAULTS[section])) if f.name not in skip}


_DEFAULTS = {
    "dvo": DvoSettings(),
    "ddvo": DdvoSettings(),
    "weights": LossWeights(),
    "train": TrainConfig(),
    "scene": SceneSpec(),
    "camera": CameraSettings(),
    "gradcheck": GradcheckSettings(),
}

_TRUE = ("true", "on", "yes", "1")
_FALSE = ("false", "off", "no", "0")


def _convert(section, key, raw, current):
    """Parse ``raw`` to the type of the field's current value."""
    where = f"{section}.{key}"
    if raw == "none":
        return None
    if isinstance(current, bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}")
    if isinstance(current, str):
        return raw
    if isinstance(current, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        try:
            return tuple(float(p) for p in parts)
        except ValueError:
            raise ConfigError(f"{where}: expected numbers, got {raw!r}")
    # Remaining fields are floats (including optional floats defaulting
    # to None, handled by the "none" branch above).
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected a number, got {raw!r}")


def parse_config(text) -> RunConfig:
    """Parse ``section.key = value`` lines; '#' starts a comment."""
    overrides = {name: {} for name in _DEFAULTS}
    for lineno, line in enumerate(str(text).splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        lhs, raw = (part.strip() for part in stripped.split("=", 1))
        if "." not in lhs:
            raise ConfigError(f"line {lineno}: key {lhs!r} is missing its section")
        section, key = lhs.split(".", 1)
        if section not in _DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        known = _section_fields(section)
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {lhs!r}")
        current = getattr(_DEFAULTS[section], key)
        overrides[section][key] = _convert(section, key, raw, current)

    built = {}
    for section, defaults in _DEFAULTS.items():
        try:
            if section == "scene":
                # Rebuild from scratch so the derived intrinsics follow the
                # configured size instead of the default scene's.
                kwargs = {
                    f.name: getattr(defaults, f.name)
                    for f in fields(SceneSpec)
                    if f.name not in _SCENE_SKIP
                }
                kwargs.update(overrides[section])
                built[section] = SceneSpec(**kwargs)
            else:
                built[section] = replace(defaults, **overrides[section])
        except ValueError as exc:
            raise ConfigError(f"section {section!r}: {exc}")
    return RunConfig(**built)


def load_config(path) -> RunConfig:
    """Parse a configuration file; a missing path means all defaults."""
    if path is None:
        return RunConfig()
    with open(path, "r") as fh:
        return parse_config(fh.read())
