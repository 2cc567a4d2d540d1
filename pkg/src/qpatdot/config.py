"""Experiment configuration, presets and INI round-tripping."""
from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .objective import ObjectiveConfig
from .optimize import OptimizerSettings

DEFAULT_OMEGAS = (0.0, 2e-7, 4e-7, 5e-7, 7e-7)
PHANTOM_CHOICES = ("gaussian_mixture", "piecewise", "point_gaussians")
INIT_CHOICES = ("smoothed", "constant")
REFINE_GAMMA_CHOICES = ("initial", "stage3")


@dataclass
class ExperimentConfig:
    """Everything needed to generate data and run a reconstruction."""

    n: int = 81
    n_sources: int = 36
    omegas: tuple[float, ...] = DEFAULT_OMEGAS
    kappa: float = 0.0
    noise_level: float = 0.05
    seed: int = 0
    phantom: str = "gaussian_mixture"
    # replace the phantom's gamma by this constant (boundary-recovery twin)
    gamma_constant: float | None = None
    init: str = "smoothed"
    init_smoothing_std: float = 5.0  # grid cells; presets keep the physical width of 5 cells at n=81
    stage1_pair: tuple[int, int] = (0, 1)
    stage1_candidates: tuple[int, ...] | None = None  # None: every source
    # stage I estimates less certain than this keep the initial guess
    stage1_max_rel_se: float = 0.01
    refine_gamma: str = "stage3"
    refine_max_iter: int = 10
    smoothing_length: float = 0.0  # H1 preconditioner length; 0 disables it
    gamma_floor: float = 1e-4
    sigma_floor: float = 1e-4
    Gamma_floor: float = 1e-4
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)

    def __post_init__(self):
        self.omegas = tuple(float(w) for w in self.omegas)
        self.stage1_pair = tuple(int(j) for j in self.stage1_pair)
        if self.stage1_candidates is not None:
            self.stage1_candidates = tuple(int(j) for j in self.stage1_candidates)
        if self.n < 3:
            raise ValueError("need at least 3 nodes per side")
        if self.n_sources < 2:
            raise ValueError("boundary recovery needs at least two sources")
        if 0.0 not in self.omegas:
            raise ValueError("the frequency list must contain 0")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.noise_level < 0:
            raise ValueError("noise level must be >= 0")
        if self.phantom not in PHANTOM_CHOICES:
            raise ValueError(f"phantom must be one of {PHANTOM_CHOICES}")
        if self.init not in INIT_CHOICES:
            raise ValueError(f"init must be one of {INIT_CHOICES}")
        if self.refine_gamma not in REFINE_GAMMA_CHOICES:
            raise ValueError(f"refine_gamma must be one of {REFINE_GAMMA_CHOICES}")
        if len(self.stage1_pair) != 2 or len(set(self.stage1_pair)) != 2:
            raise ValueError("stage1_pair must name two distinct sources")
        if max(self.stage1_pair) >= self.n_sources or min(self.stage1_pair) < 0:
            raise ValueError("stage1_pair refers to a missing source")
        if not self.stage1_max_rel_se >= 0:
            raise ValueError("stage1_max_rel_se must be >= 0")
        if not self.init_smoothing_std > 0:
            raise ValueError("init_smoothing_std must be positive")
        if self.gamma_constant is not None and not self.gamma_constant > 0:
            raise ValueError("gamma_constant must be positive")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


PRESETS = {
    "small": dict(n=17, n_sources=4, omegas=DEFAULT_OMEGAS[:2], init_smoothing_std=1.0),
    "medium": dict(n=41, n_sources=8, omegas=DEFAULT_OMEGAS[:3], init_smoothing_std=2.5),
    "full": dict(n=81, n_sources=36, omegas=DEFAULT_OMEGAS),
}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ExperimentConfig(**{**PRESETS[name], **overrides})


# INI serialisation -------------------------------------------------------

_SECTIONS = {"experiment": None, "objective": "objective", "optimizer": "optimizer"}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


_TUPLE_ITEMS = {"omegas": float, "stage1_pair": int, "stage1_candidates": int}
_OPTIONAL_FLOATS = {"gamma_constant"}


def _parse(text: str, like, name: str, key: str):
    text = text.strip()
    if text.lower() == "none":
        return None
    if key in _TUPLE_ITEMS:
        items = [t for t in (s.strip() for s in text.split(",")) if t]
        return tuple(_TUPLE_ITEMS[key](t) for t in items)
    if key in _OPTIONAL_FLOATS:
        return float(text)
    if isinstance(like, bool):
        if text.lower() in ("true", "yes", "1", "on"):
            return True
        if text.lower() in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _apply(obj, items: dict, section: str):
    known = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, text in items.items():
        if key not in known or key in _SECTIONS.values():
            raise ValueError(f"unknown key {key!r} in [{section}]")
        try:
            changes[key] = _parse(text, getattr(obj, key), f"[{section}] {key}", key)
        except ValueError as exc:
            raise ValueError(f"[{section}] {key} = {text!r}: {exc}") from exc
    return dataclasses.replace(obj, **changes)


class ConfigError(ValueError):
    pass


def load_config(path: str | Path) -> ExperimentConfig:
    """Read an INI file (or the ``config`` entry of a run manifest).

    ``[experiment] preset`` selects the starting point; every other key
    overrides one field.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".json":
        try:
            text = json.loads(text)["config"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"{path}: not a run manifest with a 'config' entry") from exc
    try:
        return parse_config(text, str(path))
    except ConfigError:
        raise
    except (configparser.Error, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys such as gamma_floor and Gamma_floor differ by case
    parser.read_string(text, source)
    path = source
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ValueError(f"unknown section [{name}] in {path}")
    exp = dict(parser["experiment"]) if parser.has_section("experiment") else {}
    cfg = preset(exp.pop("preset", "full").strip())
    objective = cfg.objective
    optimizer = cfg.optimizer
    if parser.has_section("objective"):
        objective = _apply(objective, dict(parser["objective"]), "objective")
    if parser.has_section("optimizer"):
        optimizer = _apply(optimizer, dict(parser["optimizer"]), "optimizer")
    cfg = dataclasses.replace(cfg, objective=objective, optimizer=optimizer)
    return _apply(cfg, exp, "experiment")


def dump_config(cfg: ExperimentConfig) -> str:
    """INI text that :func:`load_config` reads back to an equal config."""
    sections = {
        "experiment": {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)
                       if f.name not in ("objective", "optimizer")},
        "objective": dataclasses.asdict(cfg.objective),
        "optimizer": dataclasses.asdict(cfg.optimizer),
    }
    lines = []
    for name, items in sections.items():
        lines.append(f"[{name}]")
        lines += [f"{k} = {_format(v)}" for k, v in items.items()]
        lines.append("")
    return "\n".join(lines)
