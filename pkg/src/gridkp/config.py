"""Flat key=value run configuration with one section per pipeline stage."""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, fields
from pathlib import Path

from gridkp.grid import GridSpec

CONDENSATION_MODES = ("sum", "worst")
PROPAGATORS = ("binary", "gaussian", "vector")


@dataclass
class TrainConfig:
    # [common]
    grid_height: int = 64
    grid_width: int = 64
    num_keypoints: int = 12
    image_size: int = 64
    channels: int = 1
    sigma: float = 1.5
    seed: int = 0
    t_obs: int = 10
    horizon: int = 10
    data_root: str = "data/synthetic"
    run_dir: str = "runs/default"
    # [data] synthetic generation
    data_num_train: int = 200
    data_num_test: int = 40
    data_frames: int = 20
    data_num_objects: int = 2
    data_motion: str = "bouncing"
    data_radius: float = 5.0
    data_noise_std: float = 0.0
    data_switch_prob: float = 0.15
    # [detector]
    det_steps: int = 400
    det_batch: int = 8
    det_lr: float = 1e-3
    det_decay: float = 0.25
    det_patience: int = 10
    det_base: int = 16
    det_eval_every: int = 50
    det_checkpoint_every: int = 200
    lam: float = 0.01
    condensation: str = "sum"
    use_grid: bool = True
    # [predictor]
    pred_steps: int = 300
    pred_batch: int = 4
    pred_window: int = 12
    pred_lr: float = 1e-3
    pred_decay: float = 0.25
    pred_patience: int = 10
    pred_eval_every: int = 50
    pred_checkpoint_every: int = 200
    beta: float = 0.1
    propagator: str = "binary"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = [
            "grid_height", "grid_width", "num_keypoints", "image_size", "channels",
            "sigma", "t_obs", "horizon", "data_num_train", "data_frames",
            "det_steps", "det_batch", "det_lr", "det_base", "pred_steps",
            "pred_batch", "pred_window", "pred_lr",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"config field {name} must be positive")
        if self.lam < 0 or self.beta < 0:
            raise ValueError("lambda and beta must be nonnegative")
        for name in ("det_decay", "pred_decay"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.condensation not in CONDENSATION_MODES:
            raise ValueError(f"condensation must be one of {CONDENSATION_MODES}")
        if self.propagator not in PROPAGATORS:
            raise ValueError(f"propagator must be one of {PROPAGATORS}")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.grid_height, self.grid_width, self.num_keypoints)


# section -> (file key, attribute) mapping; file keys drop the stage prefix
_SECTIONS = {
    "common": [
        "grid_height", "grid_width", "num_keypoints", "image_size", "channels",
        "sigma", "seed", "t_obs", "horizon", "data_root", "run_dir",
    ],
    "data": [
        "data_num_train", "data_num_test", "data_frames", "data_num_objects",
        "data_motion", "data_radius", "data_noise_std", "data_switch_prob",
    ],
    "detector": [
        "det_steps", "det_batch", "det_lr", "det_decay", "det_patience",
        "det_base", "det_eval_every", "det_checkpoint_every",
        "lam", "condensation", "use_grid",
    ],
    "predictor": [
        "pred_steps", "pred_batch", "pred_window", "pred_lr", "pred_decay",
        "pred_patience", "pred_eval_every", "pred_checkpoint_every",
        "beta", "propagator",
    ],
}


def _file_key(section: str, attr: str) -> str:
    for prefix in ("data_", "det_", "pred_"):
        if attr.startswith(prefix) and section != "common":
            return attr[len(prefix):]
    return attr


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _parse_value(attr: str, raw: str):
    t = _TYPES[attr]
    if t == "bool" or t is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean {attr}={raw!r}")
    if t == "int" or t is int:
        return int(raw)
    if t == "float" or t is float:
        return float(raw)
    return raw


def serialize_config(cfg: TrainConfig) -> str:
    out = io.StringIO()
    for section, attrs in _SECTIONS.items():
        out.write(f"[{section}]\n")
        for attr in attrs:
            val = getattr(cfg, attr)
            if isinstance(val, bool):
                val = "true" if val else "false"
            out.write(f"{_file_key(section, attr)} = {val}\n")
        out.write("\n")
    return out.getvalue()


def parse_config_text(text: str) -> TrainConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ValueError(f"malformed config: {e}") from e
    cfg = TrainConfig()
    for section, attrs in _SECTIONS.items():
        if not parser.has_section(section):
            continue
        known = {_file_key(section, a): a for a in attrs}
        for key, raw in parser.items(section):
            if key not in known:
                raise ValueError(f"unknown config key [{section}] {key}")
            setattr(cfg, known[key], _parse_value(known[key], raw))
    cfg.validate()
    return cfg


def parse_config(path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def apply_overrides(cfg: TrainConfig, pairs: list[str]) -> TrainConfig:
    """Apply ``section.key=value`` or ``key=value`` command-line overrides."""
    attr_by_name = {a: a for attrs in _SECTIONS.values() for a in attrs}
    file_keys = {
        f"{sec}.{_file_key(sec, a)}": a for sec, attrs in _SECTIONS.items() for a in attrs
    }
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        attr = attr_by_name.get(key) or file_keys.get(key)
        if attr is None:
            raise ValueError(f"unknown config override key {key!r}")
        setattr(cfg, attr, _parse_value(attr, raw.strip()))
    cfg.validate()
    return cfg


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()[:16]
