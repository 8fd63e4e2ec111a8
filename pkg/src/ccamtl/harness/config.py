"""Run configuration: ``key=value`` files with ``#`` comments."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from ..exceptions import InputError
from ..regularize import OrthoConfig
from .model import MODES


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_float(v: str):
    return None if v.strip().lower() in ("", "none") else float(v)


def _opt_str(v: str):
    return None if v.strip().lower() in ("", "none") else v.strip()


def _int_pair(v: str) -> tuple:
    lo, hi = (int(x) for x in v.split(","))
    return lo, hi


def _int_tuple(v: str) -> tuple:
    return tuple(int(x) for x in v.split(",") if x.strip())


# config key -> (attribute, parser)
KEYS = {
    "steps": ("steps", int),
    "lr": ("lr", float),
    "lr_decay_step": ("lr_decay_step", lambda v: None if v.strip().lower() in ("", "none") else int(v)),
    "batch_size": ("batch_size", int),
    "labeled_fraction": ("labeled_fraction", float),
    "seed": ("seed", int),
    "mode": ("mode", str),
    "out": ("out", str),
    "n_train": ("n_train", int),
    "n_val": ("n_val", int),
    "eval_every": ("eval_every", int),
    "height": ("height", int),
    "width": ("width", int),
    "channels": ("channels", int),
    "reduction": ("reduction", int),
    "n_objects": ("n_objects", _int_pair),
    "movable": ("movable", _int_tuple),
    "grad_clip": ("grad_clip", _opt_float),
    "ortho.enabled": ("ortho_enabled", _bool),
    "ortho.lambda0": ("ortho_lambda0", _opt_float),
    "ortho.schedule": ("ortho_schedule", _opt_str),
    "ortho.roles": ("ortho_roles", _opt_str),
    "ssl.enabled": ("ssl_enabled", _bool),
    "ssl.alpha": ("ssl_alpha", float),
    "ssl.unlabeled_ratio": ("ssl_unlabeled_ratio", int),
    "ssl.affinemix.enabled": ("affinemix_enabled", _bool),
    "coloraug.enabled": ("coloraug_enabled", _bool),
}


@dataclass
class RunConfig:
    steps: int = 2000
    lr: float = 0.05
    lr_decay_step: int | None = None
    batch_size: int = 2
    labeled_fraction: float = 0.125
    seed: int = 0
    mode: str = "ccam"
    out: str = "run"
    n_train: int = 128
    n_val: int = 32
    eval_every: int = 500
    height: int = 64
    width: int = 64
    channels: int = 16
    reduction: int = 4
    n_objects: tuple = (2, 6)
    movable: tuple = (3, 4)
    grad_clip: float | None = 5.0
    ortho_enabled: bool = True
    ortho_lambda0: float | None = None
    ortho_schedule: str | None = None
    ortho_roles: str | None = None
    ssl_enabled: bool = True
    ssl_alpha: float = 0.99
    ssl_unlabeled_ratio: int = 1
    affinemix_enabled: bool = True
    coloraug_enabled: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 0:
            raise InputError("steps must be >= 0")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise InputError("labeled_fraction must lie in (0, 1]")
        if self.batch_size < 1 or self.n_train < 1 or self.n_val < 1:
            raise InputError("batch_size, n_train and n_val must be positive")
        if self.height % 16 or self.width % 16:
            raise InputError("height and width must be multiples of 16")
        if self.eval_every < 1:
            raise InputError("eval_every must be positive")
        if not 0.0 <= self.ssl_alpha <= 1.0:
            raise InputError("ssl.alpha must lie in [0, 1]")
        self.ortho_config()

    def ortho_config(self) -> OrthoConfig:
        try:
            return OrthoConfig.from_strings(self.ortho_schedule, self.ortho_lambda0,
                                            self.ortho_roles, enabled=self.ortho_enabled)
        except (ValueError, IndexError) as e:
            raise InputError(f"bad ortho settings: {e}") from None

    def with_updates(self, updates: dict[str, str]) -> "RunConfig":
        """Copy with ``key=value`` string overrides applied (keys as in files)."""
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        for key, raw in updates.items():
            if key not in KEYS:
                raise InputError(f"unknown config key {key!r}")
            attr, parse = KEYS[key]
            try:
                values[attr] = parse(raw)
            except ValueError as e:
                raise InputError(f"bad value for {key}: {e}") from None
        return RunConfig(**values)

    def to_text(self) -> str:
        lines = []
        for key, (attr, _) in KEYS.items():
            v = getattr(self, attr)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif v is None:
                v = "none"
            lines.append(f"{key}={v}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"line {n}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    updates = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise InputError(f"cannot read config {path}: {e}") from None
        updates.update(parse_config_text(text))
    updates.update(overrides or {})
    return RunConfig().with_updates(updates)
