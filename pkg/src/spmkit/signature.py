"""Model signatures: the ordered record of injectable layers and their shapes.

Signature equality over (layer_id, m, n, kernel) is the transfer-compatibility
criterion; stride/padding are carried for reconstructing convolution geometry
but do not participate in compatibility or the digest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import torch.nn as nn

from .errors import ConfigurationError


@dataclass(frozen=True)
class LayerSpec:
    """Shape record for one injectable host layer.

    For convolutions m/n are out/in channels and kernel is (kh, kw); for
    linear layers kernel is (1, 1).
    """

    layer_id: str
    m: int
    n: int
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)

    @property
    def is_conv(self) -> bool:
        return self.kernel != (1, 1) or self.stride != (1, 1) or self.padding != (0, 0)

    @property
    def fan_in(self) -> int:
        """Input features per output position: n * kh * kw."""
        return self.n * self.kernel[0] * self.kernel[1]

    @property
    def weight_params(self) -> int:
        return self.m * self.fan_in

    def compat_key(self) -> tuple[str, int, int, int, int]:
        return (self.layer_id, self.m, self.n, self.kernel[0], self.kernel[1])

    def to_dict(self) -> dict:
        return {
            "layer_id": self.layer_id,
            "m": self.m,
            "n": self.n,
            "kernel": list(self.kernel),
            "stride": list(self.stride),
            "padding": list(self.padding),
            "dilation": list(self.dilation),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            layer_id=d["layer_id"],
            m=int(d["m"]),
            n=int(d["n"]),
            kernel=tuple(d.get("kernel", (1, 1))),
            stride=tuple(d.get("stride", (1, 1))),
            padding=tuple(d.get("padding", (0, 0))),
            dilation=tuple(d.get("dilation", (1, 1))),
        )


@dataclass(frozen=True)
class ModelSignature:
    """Ordered list of injectable layers plus a content digest."""

    layers: tuple[LayerSpec, ...] = field(default_factory=tuple)

    @property
    def digest(self) -> str:
        canon = json.dumps([list(s.compat_key()) for s in self.layers])
        return hashlib.sha256(canon.encode()).hexdigest()

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def get(self, layer_id: str) -> LayerSpec | None:
        for spec in self.layers:
            if spec.layer_id == layer_id:
                return spec
        return None

    def compatible_with(self, other: "ModelSignature") -> bool:
        return self.first_mismatch(other) is None

    def first_mismatch(self, other: "ModelSignature") -> str | None:
        """Human-readable description of the first incompatible layer, or None."""
        a, b = self.layers, other.layers
        for i in range(max(len(a), len(b))):
            if i >= len(a):
                return f"extra layer {b[i].layer_id!r} not present in source"
            if i >= len(b):
                return f"layer {a[i].layer_id!r} missing from target"
            if a[i].compat_key() != b[i].compat_key():
                return (
                    f"layer {a[i].layer_id!r}: source {a[i].compat_key()} "
                    f"!= target {b[i].compat_key()}"
                )
        return None

    def to_dict(self) -> dict:
        return {"digest": self.digest, "layers": [s.to_dict() for s in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSignature":
        return cls(layers=tuple(LayerSpec.from_dict(x) for x in d["layers"]))


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return (int(v[0]), int(v[1]))
    return (int(v), int(v))


def signature_of(model: nn.Module) -> ModelSignature:
    """Collect every linear and 2d-convolution layer of a model, in registration order.

    Layer ids are the module names, which must be stable across save/load.
    """
    specs: list[LayerSpec] = []
    for name, module in model.named_modules():
        if isinstance(module, nn.Linear):
            specs.append(LayerSpec(layer_id=name, m=module.out_features, n=module.in_features))
        elif isinstance(module, nn.Conv2d):
            if module.groups != 1:
                raise ConfigurationError(f"grouped convolution {name!r} is not injectable")
            specs.append(
                LayerSpec(
                    layer_id=name,
                    m=module.out_channels,
                    n=module.in_channels,
                    kernel=_pair(module.kernel_size),
                    stride=_pair(module.stride),
                    padding=_pair(module.padding),
                    dilation=_pair(module.dilation),
                )
            )
    if not specs:
        raise ConfigurationError("model exposes no injectable linear or conv layers")
    return ModelSignature(layers=tuple(specs))
