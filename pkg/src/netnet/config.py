"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, sections are key prefixes
(``model.``, ``scene.``, ``train.``, ``eval.``, ``ablate.``).  Lists are comma
separated.  Unknown keys are rejected before anything runs.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .detector import ModelConfig, TrainConfig, Variant
from .netm import GateMode, Topology
from .nnops import ConfigError
from .pyramid import PyramidConfig
from .scenes import SceneConfig

PROFILES = ("desk", "full")


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(conv):
    def parse(s: str):
        return tuple(conv(x.strip()) for x in s.split(",") if x.strip())
    return parse


def _range(s: str):
    lo, hi = _list(float)(s)
    return (lo, hi)


# key -> parser; every accepted key is listed here
SCHEMA = {
    "profile": str,
    "seed": int,
    "out": str,
    "model.variant": lambda s: Variant(s).value,
    "model.gate_mode": lambda s: GateMode(s).value,
    "model.topology": lambda s: Topology(s).value,
    "model.fusion": _bool,
    "model.head_kernel": int,
    "model.anchor_min": float,
    "model.anchor_max": float,
    "model.anchor_ratios": _list(float),
    "scene.min_objects": int,
    "scene.max_objects": int,
    "scene.noise_sigma": float,
    "scene.max_overlap": float,
    "scene.small": _range,
    "scene.medium": _range,
    "scene.large": _range,
    "scene.train_count": int,
    "scene.test_count": int,
    "train.lr0": float,
    "train.warmup_epochs": int,
    "train.momentum": float,
    "train.weight_decay": float,
    "train.milestones": _list(int),
    "train.gamma": float,
    "train.epochs": int,
    "train.batch_size": int,
    "train.neg_ratio": int,
    "eval.score_thresh": float,
    "eval.nms_thresh": float,
    "eval.top_k": int,
    "eval.pfp_thresholds": _list(float),
    "ablate.variants": _list(lambda s: Variant(s).value),
    "ablate.seeds": int,
    "ablate.workers": int,
    "gradcheck.seeds": int,
}

DESK_ANCHOR_MIN = 0.05


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        for k in self.values:
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        # build everything once so bad combinations fail before any work
        self.model_config()
        self.scene_config()
        self.train_config()

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def profile(self) -> str:
        return self.values.get("profile", "desk")

    @property
    def seed(self) -> int:
        return self.values.get("seed", 0)

    def with_overrides(self, **kv) -> "RunConfig":
        vals = dict(self.values)
        vals.update({k.replace("__", "."): v for k, v in kv.items() if v is not None})
        return RunConfig(vals)

    def _section(self, prefix):
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def model_config(self, variant: str | None = None) -> ModelConfig:
        kw = self._section("model")
        if variant is not None:
            # the topology key only makes sense for the variant it was written for
            if Variant(variant) is not Variant(kw.get("variant", variant)):
                kw.pop("topology", None)
            kw["variant"] = variant
        if self.profile == "desk":
            kw.setdefault("anchor_min", DESK_ANCHOR_MIN)
            pyr = PyramidConfig.desk()
        else:
            pyr = PyramidConfig.full()
        try:
            return ModelConfig(pyramid=pyr, num_classes=self.scene_config().num_classes, **kw)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def scene_config(self) -> SceneConfig:
        kw = {k: v for k, v in self._section("scene").items() if k not in ("train_count", "test_count")}
        size = 75 if self.profile == "desk" else 300
        try:
            return SceneConfig(image_size=size, **kw)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def train_config(self, seed: int | None = None) -> TrainConfig:
        s = self.seed if seed is None else seed
        base = TrainConfig.desk(s) if self.profile == "desk" else TrainConfig(seed=s)
        kw = self._section("train")
        try:
            return dataclasses.replace(base, **kw)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    @property
    def train_count(self) -> int:
        return self.values.get("scene.train_count", 500 if self.profile == "desk" else 2000)

    @property
    def test_count(self) -> int:
        return self.values.get("scene.test_count", 100 if self.profile == "desk" else 500)

    def dumps(self) -> str:
        lines = []
        for k in sorted(self.values):
            v = self.values[k]
            if isinstance(v, tuple):
                v = ",".join(f"{x:g}" if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def parse_config(text: str) -> RunConfig:
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, val = (x.strip() for x in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {n}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        try:
            values[key] = SCHEMA[key](val)
        except ValueError as e:
            raise ConfigError(f"line {n}: bad value for {key}: {e}") from e
    return RunConfig(values)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
