"""Flat key=value configuration.

One option per line, `#` starts a comment, later duplicates win, and any key
outside the documented set is a hard error.  Every key has a default, so an
empty file (or no file) is a complete configuration.
"""

from __future__ import annotations

from .backbone import BackboneConfig, BlockSpec
from .engine import TrainConfig
from .mappers import MapperLayout, SetFeatExtractor

DEFAULTS: dict[str, str] = {
    "backbone.input_channels": "3",
    "backbone.channels": "64,64,64,64",
    "backbone.kinds": "plain,plain,plain,plain",
    "mappers.layout": "1,2,3,4",
    "mappers.style": "fc",
    "mappers.residual": "auto",
    "mappers.proj_bn": "true",
    "metric": "sum-min",
    "metric.m": "2",
    "logit_scale": "1.0",
    "seed": "0",
    "pretrain.optimizer": "adam",
    "pretrain.lr": "0.001",
    "pretrain.weight_decay": "0.0005",
    "pretrain.batch_size": "64",
    "pretrain.steps": "300",
    "meta.optimizer": "sgd",
    "meta.lr": "0.01",
    "meta.momentum": "0.9",
    "meta.weight_decay": "0.0005",
    "meta.episodes": "2000",
    "meta.way": "5",
    "meta.shot": "1",
    "meta.queries": "15",
    "meta.decay_every": "500",
    "meta.decay_factor": "0.5",
    "meta.bn_mode": "train",
}


class Config:
    """Parsed option map with typed accessors; starts from DEFAULTS."""

    def __init__(self, values: dict[str, str] | None = None):
        self.values = dict(DEFAULTS)
        if values:
            for key in values:
                if key not in DEFAULTS:
                    raise ValueError(f"unknown config key {key!r}")
            self.values.update(values)

    def __getitem__(self, key: str) -> str:
        return self.values[key]

    def get_int(self, key: str) -> int:
        return int(self.values[key])

    def get_float(self, key: str) -> float:
        return float(self.values[key])

    def get_bool(self, key: str) -> bool:
        raw = self.values[key].lower()
        if raw not in ("true", "false"):
            raise ValueError(f"{key} must be true or false, got {self.values[key]!r}")
        return raw == "true"

    def get_ints(self, key: str) -> tuple[int, ...]:
        return tuple(int(v) for v in self.values[key].split(","))

    def get_strs(self, key: str) -> tuple[str, ...]:
        return tuple(v.strip() for v in self.values[key].split(","))

    def render(self) -> str:
        return "\n".join(f"{k}={self.values[k]}" for k in sorted(self.values))


def parse_config(text: str) -> Config:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()  # last duplicate wins
    return Config(values)


def load_config(path: str | None) -> Config:
    if path is None:
        return Config()
    with open(path) as fh:
        return parse_config(fh.read())


def build_extractor(cfg: Config) -> SetFeatExtractor:
    channels = cfg.get_ints("backbone.channels")
    kinds = cfg.get_strs("backbone.kinds")
    if len(kinds) != len(channels):
        raise ValueError(
            f"backbone.kinds lists {len(kinds)} blocks, backbone.channels {len(channels)}"
        )
    backbone_cfg = BackboneConfig(
        cfg.get_int("backbone.input_channels"),
        tuple(BlockSpec(c, kind=k) for c, k in zip(channels, kinds)),
    )
    return SetFeatExtractor(
        backbone_cfg,
        MapperLayout(cfg.get_ints("mappers.layout")),
        style=cfg["mappers.style"],
        residual=cfg["mappers.residual"],
        proj_bn=cfg.get_bool("mappers.proj_bn"),
        seed=cfg.get_int("seed"),
    )


def metric_m(cfg: Config) -> int | None:
    return cfg.get_int("metric.m") if cfg["metric"] == "top-m" else None


def train_config(cfg: Config, stage: str) -> TrainConfig:
    if stage == "pretrain":
        return TrainConfig(
            stage="pretrain",
            optimizer=cfg["pretrain.optimizer"],
            lr=cfg.get_float("pretrain.lr"),
            weight_decay=cfg.get_float("pretrain.weight_decay"),
            batch_size=cfg.get_int("pretrain.batch_size"),
            steps=cfg.get_int("pretrain.steps"),
            seed=cfg.get_int("seed"),
            metric=cfg["metric"],
            metric_m=metric_m(cfg),
        )
    return TrainConfig(
        stage="meta",
        optimizer=cfg["meta.optimizer"],
        lr=cfg.get_float("meta.lr"),
        momentum=cfg.get_float("meta.momentum"),
        weight_decay=cfg.get_float("meta.weight_decay"),
        episodes=cfg.get_int("meta.episodes"),
        way=cfg.get_int("meta.way"),
        shot=cfg.get_int("meta.shot"),
        queries=cfg.get_int("meta.queries"),
        seed=cfg.get_int("seed"),
        metric=cfg["metric"],
        metric_m=metric_m(cfg),
        logit_scale=cfg.get_float("logit_scale"),
        decay_every=cfg.get_int("meta.decay_every"),
        decay_factor=cfg.get_float("meta.decay_factor"),
        bn_mode=cfg["meta.bn_mode"],
    )
