"""Model and run configuration.

Two model presets exist: "desk", the small trained configuration, and
"paper", a shapes-only dry run at full dimensions (tactile input is
448x448 so that five stride-2 layers leave a 14x14 map, i.e. 196 tokens
per sensor; the original 480x640 sensor stream does not divide evenly,
so the resize is an explicit recorded assumption). The paper preset is
never trained here.

Run configuration is a TOML file with [model], [train], [env] and
[paths] sections. Unknown keys are rejected; the fully resolved config
is echoed into the run directory as resolved.toml.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

CLEARANCES = {"loose": 0.06, "medium": 0.02, "tight": 0.004}
ABLATIONS = ("none", "no-xattn", "no-gate", "no-recon", "no-reciprocal")
TACTILE_CHANNELS = (32, 64, 128, 256, 512)


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class ModelConfig:
    preset: str = "desk"
    d_model: int = 64
    heads: int = 4
    enc_layers: int = 4
    dec_layers: int = 1
    chunk: int = 8
    z_dim: int = 8
    action_dim: int = 3
    proprio_dim: int = 4
    cameras: int = 2
    cam_h: int = 64
    cam_w: int = 64
    cam_channels: int = 3
    sensors: int = 2
    tac_h: int = 32
    tac_w: int = 32
    tac_channels: int = 1
    vis_channels: tuple = (8, 16, 32, 64)
    ffn_mult: int = 4
    style_layers: int = 2
    gate_hidden: tuple = (64, 64)
    contrast_dim: int = 32
    tau_con: float = 0.07
    lambda_kl: float = 10.0
    lambda_rec: float = 0.5
    lambda_con: float = 0.1
    lr: float = 6e-4
    lr_backbone: float = 1e-3
    lr_tactile: float = 6e-4
    warmup_steps: int = 200
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    precision: str = "f32"
    multiscale: bool = False  # recorded option; no fusion rule defined, stays off

    # Tactile encoder channel progression is architecturally fixed.
    tac_enc_channels: tuple = TACTILE_CHANNELS

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if tuple(self.tac_enc_channels) != TACTILE_CHANNELS:
            raise ConfigError(f"tactile channel progression must be {TACTILE_CHANNELS}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        for name, res, stages in (("camera", (self.cam_h, self.cam_w), len(self.vis_channels)),
                                  ("tactile", (self.tac_h, self.tac_w), 5)):
            for r in res:
                if r % (1 << stages) != 0:
                    raise ConfigError(f"{name} resolution {res} not divisible by 2^{stages}")

    # ---- derived shapes ----

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    @property
    def vis_map_hw(self) -> tuple[int, int]:
        s = 1 << len(self.vis_channels)
        return self.cam_h // s, self.cam_w // s

    @property
    def vis_tokens_per_camera(self) -> int:
        h, w = self.vis_map_hw
        return h * w

    @property
    def tac_map_hw(self) -> tuple[int, int]:
        return self.tac_h // 32, self.tac_w // 32

    @property
    def tac_tokens_per_sensor(self) -> int:
        h, w = self.tac_map_hw
        return h * w

    @property
    def num_visual_tokens(self) -> int:
        return self.cameras * self.vis_tokens_per_camera

    @property
    def num_tactile_tokens(self) -> int:
        return self.sensors * self.tac_tokens_per_sensor

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


def desk_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def paper_config(**overrides) -> ModelConfig:
    base = dict(
        preset="paper",
        d_model=512,
        heads=8,
        enc_layers=4,
        dec_layers=1,
        chunk=100,
        z_dim=32,
        action_dim=16,
        proprio_dim=30,
        cameras=3,
        cam_h=480,
        cam_w=640,
        cam_channels=3,
        sensors=4,
        tac_h=448,
        tac_w=448,
        tac_channels=3,
        vis_channels=(16, 32, 64, 128),
        lr=1e-4,
        lr_backbone=1e-5,
        lr_tactile=1e-4,
    )
    base.update(overrides)
    return ModelConfig(**base)


def make_model_config(preset: str = "desk", **overrides) -> ModelConfig:
    if preset == "desk":
        return desk_config(**overrides)
    if preset == "paper":
        return paper_config(**overrides)
    raise ConfigError(f"unknown model preset {preset!r}")


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig = dataclasses.field(default_factory=desk_config)
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    log_every: int = 10
    ablate: str = "none"
    clearance: str = "tight"
    horizon: int = 200
    episodes: int = 100
    noise_lo: float = 0.02
    noise_hi: float = 0.08
    data_dir: str = ""
    out_dir: str = ""

    def __post_init__(self):
        if self.ablate not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablate!r}, expected one of {ABLATIONS}")
        if self.clearance not in CLEARANCES:
            raise ConfigError(f"unknown clearance {self.clearance!r}, expected one of {tuple(CLEARANCES)}")


_TRAIN_KEYS = ("steps", "batch_size", "seed", "log_every", "ablate")
_ENV_KEYS = ("clearance", "horizon", "episodes", "noise_lo", "noise_hi")
_PATH_KEYS = ("data", "out")


def run_config_from_dict(doc: dict) -> RunConfig:
    unknown_sections = set(doc) - {"model", "train", "env", "paths"}
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")

    model_doc = dict(doc.get("model", {}))
    preset = model_doc.pop("preset", "desk")
    field_names = {f.name for f in dataclasses.fields(ModelConfig)}
    bad = set(model_doc) - field_names
    if bad:
        raise ConfigError(f"unknown [model] keys: {sorted(bad)}")
    for key in ("vis_channels", "gate_hidden", "tac_enc_channels"):
        if key in model_doc:
            model_doc[key] = tuple(model_doc[key])
    model = make_model_config(preset, **model_doc)

    kw: dict = {"model": model}
    for section, keys in (("train", _TRAIN_KEYS), ("env", _ENV_KEYS)):
        sec = dict(doc.get(section, {}))
        bad = set(sec) - set(keys)
        if bad:
            raise ConfigError(f"unknown [{section}] keys: {sorted(bad)}")
        kw.update(sec)
    paths = dict(doc.get("paths", {}))
    bad = set(paths) - set(_PATH_KEYS)
    if bad:
        raise ConfigError(f"unknown [paths] keys: {sorted(bad)}")
    if "data" in paths:
        kw["data_dir"] = str(paths["data"])
    if "out" in paths:
        kw["out_dir"] = str(paths["out"])
    return RunConfig(**kw)


def load_run_config(path: str | Path) -> RunConfig:
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
    return run_config_from_dict(doc)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {v!r} to TOML")


def write_resolved(cfg: RunConfig, path: str | Path) -> None:
    """Echo the fully resolved configuration, one key per line."""
    lines = ["[model]"]
    for f in dataclasses.fields(ModelConfig):
        lines.append(f"{f.name} = {_toml_value(getattr(cfg.model, f.name))}")
    lines.append("")
    lines.append("[train]")
    for k in _TRAIN_KEYS:
        lines.append(f"{k} = {_toml_value(getattr(cfg, k))}")
    lines.append("")
    lines.append("[env]")
    for k in _ENV_KEYS:
        lines.append(f"{k} = {_toml_value(getattr(cfg, k))}")
    lines.append("")
    lines.append("[paths]")
    lines.append(f"data = {_toml_value(cfg.data_dir)}")
    lines.append(f"out = {_toml_value(cfg.out_dir)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_resolved(path: str | Path) -> RunConfig:
    cfg = load_run_config(path)
    return cfg
