"""Semi-permeable membrane adapters: structure, injection, and overlay arithmetic.

A membrane adds, per host layer with weight W in R^{m x n}, a rank-d correction
    y = W x + gamma * v_sig (v_reg x)
with v_sig in R^{m x d} zero-initialized (identity at init) and v_reg in
R^{d x n} drawn from the fan-based Kaiming-uniform scheme. For convolutions
the regulator acts as a d-channel convolution with the host kernel geometry
and the signal as a 1x1 convolution from d back to m channels. Biases are
never adapted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CompatibilityError, ConfigurationError, ContractViolationError
from .signature import LayerSpec, ModelSignature


class SpmLayer:
    """The (v_sig, v_reg) pair attached to one host layer.

    v_sig: [m, d] erasing signal (output side), zero at construction.
    v_reg: [d, n * kh * kw] regulator (input side, flattened fan-in).
    """

    def __init__(self, spec: LayerSpec, d: int, v_sig: torch.Tensor, v_reg: torch.Tensor):
        if d < 1:
            raise ConfigurationError(f"intrinsic dimension must be >= 1, got {d}")
        if tuple(v_sig.shape) != (spec.m, d):
            raise ContractViolationError(
                f"{spec.layer_id}: v_sig shape {tuple(v_sig.shape)} != ({spec.m}, {d})"
            )
        if tuple(v_reg.shape) != (d, spec.fan_in):
            raise ContractViolationError(
                f"{spec.layer_id}: v_reg shape {tuple(v_reg.shape)} != ({d}, {spec.fan_in})"
            )
        self.spec = spec
        self.d = d
        self.v_sig = nn.Parameter(v_sig)
        self.v_reg = nn.Parameter(v_reg)

    @property
    def layer_id(self) -> str:
        return self.spec.layer_id

    def delta(self, x: torch.Tensor) -> torch.Tensor:
        """Intervention term v_sig (v_reg x) for one input activation (gamma excluded)."""
        spec = self.spec
        if spec.is_conv:
            if x.dim() != 4 or x.shape[1] != spec.n:
                raise ContractViolationError(
                    f"{spec.layer_id}: expected conv input [B, {spec.n}, H, W], got {tuple(x.shape)}"
                )
            kh, kw = spec.kernel
            h = F.conv2d(
                x,
                self.v_reg.view(self.d, spec.n, kh, kw),
                stride=spec.stride,
                padding=spec.padding,
                dilation=spec.dilation,
            )
            return F.conv2d(h, self.v_sig.view(spec.m, self.d, 1, 1))
        if x.shape[-1] != spec.n:
            raise ContractViolationError(
                f"{spec.layer_id}: expected input [..., {spec.n}], got {tuple(x.shape)}"
            )
        return F.linear(F.linear(x, self.v_reg), self.v_sig)


class Membrane:
    """A named collection of SpmLayers plus training metadata."""

    def __init__(
        self,
        name: str,
        layers: dict[str, SpmLayer],
        source_signature: ModelSignature,
        targets: Sequence[str] = (),
        surrogate: str = "",
        train_meta: dict | None = None,
    ):
        injectable = [s.layer_id for s in source_signature]
        if sorted(layers.keys()) != sorted(injectable):
            raise ContractViolationError(
                "membrane layers do not match the injectable layers of the signature"
            )
        self.name = name
        self.targets = list(targets)
        self.surrogate = surrogate
        self.layers = layers
        self.train_meta = dict(train_meta or {})
        self.source_signature = source_signature

    @property
    def d(self) -> int:
        if not self.layers:
            return 0
        return next(iter(self.layers.values())).d

    def parameters(self) -> Iterator[nn.Parameter]:
        for spec in self.source_signature:
            layer = self.layers[spec.layer_id]
            yield layer.v_sig
            yield layer.v_reg

    def requires_grad_(self, flag: bool = True) -> "Membrane":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def validate_targets(self) -> None:
        if not self.targets:
            raise ConfigurationError(f"membrane {self.name!r} has no target concepts")


def _kaiming_uniform_bound(fan_in: int, a: float = math.sqrt(5)) -> float:
    # gain for leaky_relu with negative slope a, uniform bound sqrt(3) * gain / sqrt(fan_in)
    gain = math.sqrt(2.0 / (1.0 + a * a))
    return gain * math.sqrt(3.0 / fan_in)


def inject(
    model_signature: ModelSignature,
    d: int = 1,
    seed: int = 0,
    *,
    name: str = "membrane",
    targets: Sequence[str] = (),
    surrogate: str = "",
    dtype: torch.dtype = torch.float32,
) -> Membrane:
    """Create a fresh membrane for every injectable layer of a signature.

    v_sig is zero-initialized so the host output is unchanged; v_reg uses
    Kaiming-uniform with negative-slope sqrt(5), deterministic under seed.
    """
    if d < 1:
        raise ConfigurationError(f"intrinsic dimension must be >= 1, got {d}")
    if len(model_signature) == 0:
        raise ConfigurationError("cannot inject into an empty model signature")
    gen = torch.Generator().manual_seed(seed)
    layers: dict[str, SpmLayer] = {}
    for spec in model_signature:
        v_sig = torch.zeros(spec.m, d, dtype=dtype)
        bound = _kaiming_uniform_bound(spec.fan_in)
        v_reg = torch.empty(d, spec.fan_in, dtype=dtype).uniform_(-bound, bound, generator=gen)
        layers[spec.layer_id] = SpmLayer(spec, d, v_sig, v_reg)
    return Membrane(
        name=name,
        layers=layers,
        source_signature=model_signature,
        targets=targets,
        surrogate=surrogate,
    )


def intervened_forward(
    x: torch.Tensor,
    w_out: torch.Tensor,
    layers: Sequence[tuple[SpmLayer, float]],
) -> torch.Tensor:
    """Host output plus the summed membrane interventions: Wx + sum_c gamma_c * v_sig_c (v_reg_c x)."""
    out = w_out
    for layer, gamma in layers:
        if gamma == 0.0:
            continue
        delta = layer.delta(x)
        if delta.shape != w_out.shape:
            raise ContractViolationError(
                f"{layer.layer_id}: intervention shape {tuple(delta.shape)} "
                f"!= host output {tuple(w_out.shape)}"
            )
        out = out + gamma * delta
    return out


class apply_membranes:
    """Context manager that overlays membranes onto a live model via forward hooks.

    Within the context every named host layer that appears in an active
    membrane produces `w_out + sum_c gamma_c * delta_c(x)`. Gradients flow
    through the membrane parameters; zero-permeability membranes are skipped
    entirely so deactivation contributes exactly nothing.
    """

    def __init__(self, model: nn.Module, active: Sequence[tuple[Membrane, float]]):
        self.model = model
        self.active = [(m, float(g)) for m, g in active if float(g) != 0.0]
        self._handles: list = []

    def __enter__(self):
        by_layer: dict[str, list[tuple[SpmLayer, float]]] = {}
        for membrane, gamma in self.active:
            for layer_id, layer in membrane.layers.items():
                by_layer.setdefault(layer_id, []).append((layer, gamma))
        if not by_layer:
            return self
        modules = dict(self.model.named_modules())
        for layer_id, entries in by_layer.items():
            module = modules.get(layer_id)
            if module is None:
                raise CompatibilityError(f"model has no layer named {layer_id!r}")
            self._handles.append(module.register_forward_hook(self._make_hook(entries)))
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        for h in self._handles:
            h.remove()
        self._handles.clear()
        return False

    @staticmethod
    def _make_hook(entries: list[tuple[SpmLayer, float]]):
        def hook(module, inputs, output):
            return intervened_forward(inputs[0], output, entries)

        return hook


def overhead_ratio(membrane: Membrane) -> float:
    """Adapter-to-host parameter ratio: sum_i d(m_i + n_i k_i^2) / sum_i m_i n_i k_i^2."""
    extra = 0
    host = 0
    for spec in membrane.source_signature:
        extra += membrane.layers[spec.layer_id].d * (spec.m + spec.fan_in)
        host += spec.weight_params
    if host == 0:
        return 0.0
    return extra / host


def signature_overhead_ratio(signature: ModelSignature | Iterable[LayerSpec], d: int = 1) -> float:
    """Closed-form overhead for a signature without materializing a membrane."""
    specs = list(signature)
    host = sum(s.weight_params for s in specs)
    if host == 0:
        return 0.0
    return sum(d * (s.m + s.fan_in) for s in specs) / host
