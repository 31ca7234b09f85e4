"""Pipeline configuration: one TOML table per stage, env overrides, flag overrides.

Precedence, lowest first: dataclass defaults, the TOML file, ``WEAKMIL_<SECTION>_<KEY>``
environment variables, command-line flags.  Unknown sections and keys are
rejected with the offending name in the message.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .exceptions import ConfigurationError
from .mil import LR_GRID, WD_GRID, MilHyper
from .preprocess import MicronsConfig, QcThresholds
from .ssl import AugmentationConfig, MoCoHyper
from .synthgen import SynthSpec

ENV_PREFIX = "WEAKMIL_"


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    out: str = "runs/desk"
    threads: int = 1

    def __post_init__(self):
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        if self.threads < 1:
            raise ConfigurationError("threads must be at least 1")


@dataclass(frozen=True)
class SamplingSettings:
    patches_per_slide: int = 50
    output_px: int = 224

    def __post_init__(self):
        if self.patches_per_slide < 1 or self.output_px < 1:
            raise ConfigurationError("patches_per_slide and output_px must be positive")


@dataclass(frozen=True)
class SearchSettings:
    enabled: bool = False
    learning_rates: tuple[float, ...] = LR_GRID
    weight_decays: tuple[float, ...] = WD_GRID

    def __post_init__(self):
        if not self.learning_rates or not self.weight_decays:
            raise ConfigurationError("search grids must be nonempty")


@dataclass(frozen=True)
class EvalSettings:
    folds: int = 4
    test_size: int | None = None
    stratified: bool = True
    threshold: float = 0.5

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigurationError("folds must be at least 2")
        if self.test_size is not None and self.test_size < 1:
            raise ConfigurationError("test_size must be positive")


@dataclass(frozen=True)
class HeatmapSettings:
    alpha: float = 0.5
    clip_low: float = 1.0
    clip_high: float = 99.0
    clip_min_n: int = 100

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in [0, 1]")
        if not 0.0 <= self.clip_low < self.clip_high <= 100.0:
            raise ConfigurationError("clip percentiles must satisfy 0 <= low < high <= 100")


# the desk geometry: 224 px patches cut at 1 um/px from 2240 px synthetic slides
DESK_MICRONS = MicronsConfig(patch_microns=224.0, microns_per_pixel=1.0)

SECTIONS = {
    "run": RunSettings,
    "synth": SynthSpec,
    "qc": QcThresholds,
    "microns": MicronsConfig,
    "sampling": SamplingSettings,
    "augment": AugmentationConfig,
    "ssl": MoCoHyper,
    "mil": MilHyper,
    "search": SearchSettings,
    "eval": EvalSettings,
    "heatmap": HeatmapSettings,
}
# keys fixed by other sections
EXCLUDED = {("synth", "seed")}
# integer keys where None means "use the default rule"
OPTIONAL_INT = {"test_size"}


@dataclass(frozen=True)
class PipelineConfig:
    run: RunSettings = RunSettings()
    synth: SynthSpec = SynthSpec()
    qc: QcThresholds = QcThresholds()
    microns: MicronsConfig = DESK_MICRONS
    sampling: SamplingSettings = SamplingSettings()
    augment: AugmentationConfig = AugmentationConfig()
    ssl: MoCoHyper = MoCoHyper()
    mil: MilHyper = MilHyper()
    search: SearchSettings = SearchSettings()
    eval: EvalSettings = EvalSettings()
    heatmap: HeatmapSettings = HeatmapSettings()

    def synth_spec(self) -> SynthSpec:
        return dataclasses.replace(self.synth, seed=self.run.seed)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            sec = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()
                         if (name, k) not in EXCLUDED}
        return out

    def digest(self) -> str:
        """SHA-256 of everything that can change results (the output directory cannot)."""
        d = self.to_dict()
        d["run"] = {k: v for k, v in d["run"].items() if k not in ("out", "threads")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def with_overrides(self, overrides: dict) -> "PipelineConfig":
        """``overrides`` maps section name to ``{key: value}``; values are coerced and validated."""
        changes = {}
        for section, values in overrides.items():
            if section not in SECTIONS:
                raise ConfigurationError(f"unknown config section [{section}]")
            if not isinstance(values, dict):
                raise ConfigurationError(f"[{section}] must be a table")
            cls = SECTIONS[section]
            current = getattr(self, section)
            kinds = _field_kinds(cls, section)
            coerced = {}
            for key, value in values.items():
                if key not in kinds:
                    raise ConfigurationError(f"unknown key {section}.{key}")
                coerced[key] = _coerce(value, current, key, f"{section}.{key}")
            try:
                changes[section] = dataclasses.replace(current, **coerced)
            except ConfigurationError as exc:
                raise ConfigurationError(f"[{section}] {exc}") from None
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"[{section}] {exc}") from None
        return dataclasses.replace(self, **changes)


def _field_kinds(cls, section: str) -> dict:
    return {f.name: f for f in dataclasses.fields(cls) if (section, f.name) not in EXCLUDED}


def _coerce(value, current, key: str, where: str):
    default = getattr(current, key)
    if key in OPTIONAL_INT:
        if value is None:
            return None
        default = 0
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{where} must be a list, got {value!r}")
        proto = default[0] if default else value[0] if value else 0
        kind = float if isinstance(proto, float) else int
        try:
            return tuple(kind(v) for v in value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"{where} has a non-numeric entry: {value!r}") from None
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{where} must be a string, got {value!r}")
        return value
    raise ConfigurationError(f"{where}: unsupported value {value!r}")


def parse_scalar(text: str):
    """Interpret an override string as a TOML value, falling back to a bare string."""
    if text.strip().lower() in ("none", "null"):
        return None
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def env_overrides(environ=None) -> dict:
    """Collect ``WEAKMIL_<SECTION>_<KEY>`` variables into a nested override dict."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section not in SECTIONS or not key:
            raise ConfigurationError(f"environment variable {name} does not name a config key")
        out.setdefault(section, {})[key] = parse_scalar(raw)
    return out


def read_toml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def load_config(path=None, environ=None, flags: dict | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        cfg = cfg.with_overrides(read_toml(path))
    cfg = cfg.with_overrides(env_overrides(environ))
    if flags:
        cfg = cfg.with_overrides(flags)
    return cfg


def dump_toml(cfg: PipelineConfig) -> str:
    """Render a config as TOML (the subset of types the sections use)."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        if isinstance(v, str):
            return json.dumps(v)
        return repr(v)

    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {fmt(v)}" for k, v in values.items() if v is not None)
        lines.append("")
    return "\n".join(lines)
