"""Run configuration: one flat namespace over every tunable.

Config files are flat "key = value" text; [section] headers are allowed
for grouping but carry no meaning, and '#' starts a comment. Unknown keys
are rejected. Command-line overrides beat file values, which beat
defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError
from .pipeline import TrackerConfig


@dataclass
class RunConfig:
    # tracker / model
    bins: int = 5
    window: int = 16
    t_step: int = 8
    iterations: int = 4
    downsample: int = 4
    channels: int = 128
    radius: int = 3
    levels: int = 4
    dt_track_us: int = 5000
    frame_channels: int = 1
    dim: int = 256
    pairs: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    freqs: int = 16
    pos_wavelength: float = 512.0
    time_wavelength: float = 1_000_000.0
    accumulate_mode: str = "since_frame"
    fixed_window_us: int = 0
    time_embed: bool = True
    use_frames: bool = True
    use_events: bool = True
    # training
    steps: int = 2000
    lr: float = 0.0005
    warmup_steps: int = 100
    weight_decay: float = 0.0001
    gamma: float = 0.8
    seed: int = 0
    checkpoint_every: int = 500
    # evaluation
    delta_px: float = 5.0
    # synthetic data
    scenes: int = 3
    synth_width: int = 64
    synth_height: int = 64
    sprites: int = 2
    duration_us: int = 600_000
    frame_period_us: int = 100_000
    theta: float = 0.2
    dt_sim_us: int = 1000
    translate_only: bool = False
    speed_min: float = 25.0
    speed_max: float = 55.0

    def tracker(self) -> TrackerConfig:
        return TrackerConfig(
            bins=self.bins,
            window=self.window,
            t_step=self.t_step,
            iterations=self.iterations,
            downsample=self.downsample,
            channels=self.channels,
            radius=self.radius,
            levels=self.levels,
            dt_track_us=self.dt_track_us,
            frame_channels=self.frame_channels,
            dim=self.dim,
            pairs=self.pairs,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            freqs=self.freqs,
            pos_wavelength=self.pos_wavelength,
            time_wavelength=self.time_wavelength,
            accumulate_mode=self.accumulate_mode,
            fixed_window_us=self.fixed_window_us,
            time_embed=self.time_embed,
            use_frames=self.use_frames,
            use_events=self.use_events,
        )


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELDS[key].type
    raw = raw.strip()
    try:
        if kind == "bool" or kind is bool:
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int" or kind is int:
            return int(raw)
        if kind == "float" or kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            continue  # grouping only
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno} is not 'key = value': {line.strip()!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        values[key] = _coerce(key, raw)
    return values


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then file values, then overrides; validated as a whole."""
    values = {}
    if path is not None:
        with open(path) as f:
            values.update(parse_config_text(f.read()))
    for key, raw in (overrides or {}).items():
        values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    for key in values:
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
    cfg = RunConfig(**values)
    cfg.tracker()  # surface tracker-level validation now
    if cfg.speed_min > cfg.speed_max:
        raise ConfigError("speed_min exceeds speed_max")
    return cfg
