"""Small trainable backbone emitting the multi-level basic feature pyramid."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .nnops import ConfigError, ConvParams, conv, init_conv, pool
from .tensor import Parameter, ShapeError, Tensor, relu

# (window, stride, padding) of the max-pool steps available between convs
POOL_STEPS = ((3, 2, 1), (3, 1, 0))


@dataclass
class PyramidConfig:
    input_size: int = 75
    sizes: list[int] = field(default_factory=lambda: [19, 10, 5, 3])
    channels: list[int] = field(default_factory=lambda: [32, 64, 64, 64])
    stem_channels: int = 16
    in_channels: int = 1

    def __post_init__(self):
        if len(self.sizes) != len(self.channels):
            raise ConfigError("sizes and channels must have the same length")
        if len(self.sizes) < 3:
            raise ConfigError("a pyramid needs at least 3 levels")
        if any(a <= b for a, b in zip(self.sizes, self.sizes[1:])):
            raise ConfigError(f"level sizes must strictly decrease: {self.sizes}")
        if any(c < 1 for c in self.channels) or self.stem_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.sizes[0] >= self.input_size:
            raise ConfigError("first level must be smaller than the input")

    @property
    def levels(self) -> int:
        return len(self.sizes)

    @classmethod
    def desk(cls) -> "PyramidConfig":
        return cls()

    @classmethod
    def full(cls) -> "PyramidConfig":
        return cls(input_size=300, sizes=[38, 19, 10, 5, 3, 1],
                   channels=[64, 128, 64, 64, 64, 64], stem_channels=32)


def plan_pool_steps(start: int, target: int) -> list[tuple[int, int, int]]:
    """Shortest sequence of pool steps taking ``start`` to exactly ``target``."""
    seen = {start}
    queue = deque([(start, [])])
    while queue:
        size, path = queue.popleft()
        if size == target:
            return path
        for step in POOL_STEPS:
            k, s, p = step
            nxt = (size + 2 * p - k) // s + 1
            if target <= nxt < size and nxt not in seen:
                seen.add(nxt)
                queue.append((nxt, path + [step]))
    raise ConfigError(f"size {target} is not reachable from {start} by integer pooling")


@dataclass
class Stage:
    pool: tuple[int, int, int] | None
    conv: ConvParams
    tap: int | None  # pyramid level index emitted after this stage


@dataclass
class Backbone:
    config: PyramidConfig
    stages: list[Stage]

    def parameters(self) -> list[Parameter]:
        return [p for st in self.stages for p in st.conv.parameters()]


def build_backbone(config: PyramidConfig, seed: int) -> Backbone:
    rng = np.random.default_rng(seed)
    stages = [Stage(None, init_conv(rng, config.in_channels, config.stem_channels, 3, "backbone.stem"), None)]
    size, width = config.input_size, config.stem_channels
    for level, (target, ch) in enumerate(zip(config.sizes, config.channels)):
        steps = plan_pool_steps(size, target)
        for i, step in enumerate(steps):
            last = i == len(steps) - 1
            name = f"backbone.l{level}" + ("" if last else f".pre{i}")
            stages.append(Stage(step, init_conv(rng, width, ch, 3, name), level if last else None))
            width = ch
        size = target
    return Backbone(config, stages)


def forward_pyramid(image: Tensor, backbone: Backbone) -> list[Tensor]:
    cfg = backbone.config
    if image.shape[-2:] != (cfg.input_size, cfg.input_size):
        raise ShapeError(f"image is {image.shape[-2:]}, backbone expects {cfg.input_size}²")
    if image.shape[-3] != cfg.in_channels:
        raise ShapeError(f"image has {image.shape[-3]} channels, backbone expects {cfg.in_channels}")
    x = image
    feats: list[Tensor] = []
    for st in backbone.stages:
        if st.pool is not None:
            k, s, p = st.pool
            x = pool(x, "max", k, s, p)
        x = relu(conv(x, st.conv))
        if st.tap is not None:
            feats.append(x)
    return feats


def pyramid_shapes(feats: list[Tensor]) -> list[tuple[int, ...]]:
    return [f.shape[-3:] for f in feats]
