"""Run configuration: one human-readable key = value text file.

Grammar: one ``key = value`` assignment per line; blank lines and lines
starting with ``#`` are ignored. Values are typed by the key: integers,
floats, strings, space-separated numeric triples/lists, or
semicolon-separated triples for ellipsoid lists (e.g.
``phantom.sgm_centers = 14 -6 -12 ; -14 -6 -12``). Unknown keys are
rejected. Every field is validated against the owning module's invariants
before any work starts.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from voxelage.denoiser import UNetConfig
from voxelage.diffusion import TrainConfig
from voxelage.errors import DataError
from voxelage.phantom import AgingSpec, PhantomSpec


@dataclass
class RunConfig:
    out_dir: str = "runs/out"
    n_train: int = 200
    n_val: int = 20
    n_test: int = 50
    seed_train: int = 1001
    seed_val: int = 1002
    seed_test: int = 1003
    schedule_T: int = 1000
    schedule_beta_start: float = 1e-4
    schedule_beta_end: float = 0.02
    phantom: PhantomSpec = None
    aging: AgingSpec = None
    unet: UNetConfig = None
    train: TrainConfig = None

    def __post_init__(self):
        if self.phantom is None:
            self.phantom = PhantomSpec()
        if self.aging is None:
            self.aging = AgingSpec()
        if self.unet is None:
            self.unet = UNetConfig()
        if self.train is None:
            self.train = TrainConfig()
        if self.schedule_T < 1 or not 0 < self.schedule_beta_start <= self.schedule_beta_end < 1:
            raise DataError("invalid schedule parameters")
        for key in ("n_train", "n_val", "n_test"):
            if getattr(self, key) < 0:
                raise DataError(f"{key} must be non-negative")

    @property
    def schedule_params(self) -> tuple[int, float, float]:
        return (self.schedule_T, self.schedule_beta_start, self.schedule_beta_end)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return " ; ".join(" ".join(_fmt(v) for v in triple) for triple in value)
    if isinstance(value, tuple):
        return " ".join(_fmt(v) for v in value)
    return str(value)


_TOP_KEYS = (
    "out_dir", "n_train", "n_val", "n_test", "seed_train", "seed_val", "seed_test",
)
_SCHED_KEYS = {"schedule.T": "schedule_T", "schedule.beta_start": "schedule_beta_start",
               "schedule.beta_end": "schedule_beta_end"}
_SECTIONS = {"phantom": PhantomSpec, "aging": AgingSpec, "unet": UNetConfig, "train": TrainConfig}
# UNetConfig fields that are fixed by contract and therefore not configurable
_LOCKED = {("unet", "in_channels"), ("unet", "out_channels")}


def config_text(cfg: RunConfig) -> str:
    """Canonical text form; parse(config_text(cfg)) reproduces cfg exactly."""
    lines = []
    for key in _TOP_KEYS:
        lines.append(f"{key} = {_fmt(getattr(cfg, key))}")
    for key, attr in _SCHED_KEYS.items():
        lines.append(f"{key} = {_fmt(getattr(cfg, attr))}")
    for section, cls in _SECTIONS.items():
        obj = getattr(cfg, section)
        for f in fields(cls):
            if (section, f.name) in _LOCKED:
                continue
            lines.append(f"{section}.{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def _parse_value(section: str, name: str, raw: str, current):
    try:
        if isinstance(current, bool):  # no bool fields today; guard against int match
            raise DataError("boolean config fields are not supported")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, str):
            return raw
        if isinstance(current, tuple) and current and isinstance(current[0], tuple):
            triples = []
            for part in raw.split(";"):
                vals = tuple(float(v) for v in part.split())
                if len(vals) != 3:
                    raise DataError(f"expected triples of numbers, got {part.strip()!r}")
                triples.append(vals)
            return tuple(triples)
        if isinstance(current, tuple):
            elem = type(current[0])
            return tuple(elem(v) for v in raw.split())
        raise DataError(f"unsupported field type for {section}.{name}")
    except ValueError as exc:
        raise DataError(f"bad value for {section}.{name}: {raw!r} ({exc})") from None


def parse_config(text: str) -> RunConfig:
    """Parse config text into a validated RunConfig; unknown keys are errors."""
    cfg = RunConfig()
    overrides: dict[str, dict] = {s: {} for s in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise DataError(f"line {lineno}: expected 'key = value', got {line!r}")
        key = key.strip()
        raw = raw.strip()
        if key in _TOP_KEYS:
            setattr(cfg, key, _parse_value("", key, raw, getattr(cfg, key)))
        elif key in _SCHED_KEYS:
            attr = _SCHED_KEYS[key]
            setattr(cfg, attr, _parse_value("schedule", key, raw, getattr(cfg, attr)))
        else:
            section, dot, name = key.partition(".")
            if not dot or section not in _SECTIONS or (section, name) in _LOCKED:
                raise DataError(f"line {lineno}: unknown config key {key!r}")
            cls = _SECTIONS[section]
            if name not in {f.name for f in fields(cls)}:
                raise DataError(f"line {lineno}: unknown config key {key!r}")
            current = getattr(getattr(cfg, section), name)
            overrides[section][name] = _parse_value(section, name, raw, current)
    for section, kv in overrides.items():
        if kv:
            setattr(cfg, section, replace(getattr(cfg, section), **kv))
    # re-run top-level validation after all assignments
    cfg.__post_init__()
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())
