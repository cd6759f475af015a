"""Reference desk-scale networks."""
from __future__ import annotations

from ..tensornet import NetworkSpec, conv, fc


def desk_net(input_shape=(1, 16, 16), num_classes: int = 10, width: int = 8, hidden: int = 32) -> NetworkSpec:
    """8 layers: 6 conv (3x3, two 2x2 max-pools) then 2 fully-connected."""
    c, h, w = input_shape
    layers = (
        conv(c, width),
        conv(width, width, pool=2),
        conv(width, 2 * width),
        conv(2 * width, 2 * width, pool=2),
        conv(2 * width, 2 * width),
        conv(2 * width, 2 * width),
        fc(2 * width * (h // 4) * (w // 4), hidden),
        fc(hidden, num_classes, relu=False),
    )
    return NetworkSpec(layers, tuple(input_shape))


def desk_net6(input_shape=(1, 16, 16), num_classes: int = 10, width: int = 8, hidden: int = 32) -> NetworkSpec:
    """6 layers: 4 conv (two pools) then 2 fully-connected."""
    c, h, w = input_shape
    layers = (
        conv(c, width),
        conv(width, width, pool=2),
        conv(width, 2 * width, pool=2),
        conv(2 * width, 2 * width),
        fc(2 * width * (h // 4) * (w // 4), hidden),
        fc(hidden, num_classes, relu=False),
    )
    return NetworkSpec(layers, tuple(input_shape))


PRESETS = {"desk8": desk_net, "desk6": desk_net6}


def build_network(cfg: dict, input_shape, num_classes: int) -> NetworkSpec:
    """``{"preset": "desk8", ...kwargs}`` or an explicit ``{"layers": [...]}`` dict."""
    if "layers" in cfg:
        return NetworkSpec.from_dict({"input_shape": list(input_shape), **cfg})
    kwargs = {k: v for k, v in cfg.items() if k != "preset"}
    preset = cfg.get("preset", "desk8")
    if preset not in PRESETS:
        raise ValueError(f"unknown network preset {preset!r}")
    return PRESETS[preset](tuple(input_shape), num_classes, **kwargs)
