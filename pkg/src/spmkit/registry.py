"""Membrane persistence and composition: the erasure-corpus workflow.

A membrane file is a single uncompressed zip archive with the manifest first,
so metadata can be inspected without touching tensor payloads. Per layer the
payload holds `layers/<layer_id>/v_sig` (float32, [m, d], row-major,
little-endian) and `layers/<layer_id>/v_reg` (float32, [d, n*kh*kw]). The
manifest records a sha256 over the concatenated payload bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .adapter import Membrane, SpmLayer
from .errors import (
    ChecksumError,
    CompatibilityError,
    RegistryError,
    TruncatedPayloadError,
    VersionError,
)
from .gating import DEFAULT_GAMMA_MAX, GateReport, permeability
from .signature import LayerSpec, ModelSignature
from .toy.denoiser import sample as toy_sample

FORMAT_VERSION = 1
SUFFIX = ".spm"


@dataclass
class MembraneFile:
    path: Path
    manifest: dict


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()


def _payload_entries(membrane: Membrane) -> list[tuple[str, bytes]]:
    entries = []
    for spec in membrane.source_signature:
        layer = membrane.layers[spec.layer_id]
        entries.append((f"layers/{spec.layer_id}/v_sig", _tensor_bytes(layer.v_sig)))
        entries.append((f"layers/{spec.layer_id}/v_reg", _tensor_bytes(layer.v_reg)))
    return entries


def _checksum(entries: Sequence[tuple[str, bytes]]) -> str:
    h = hashlib.sha256()
    for _, data in entries:
        h.update(data)
    return "sha256:" + h.hexdigest()


def save(membrane: Membrane, path: str | Path) -> MembraneFile:
    """Write a membrane archive atomically, holding an exclusive lock on the destination."""
    membrane.validate_targets()
    path = Path(path)
    entries = _payload_entries(membrane)
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": membrane.name,
        "targets": list(membrane.targets),
        "surrogate": membrane.surrogate,
        "d": membrane.d,
        "train_meta": membrane.train_meta,
        "source_signature": membrane.source_signature.to_dict(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "checksum": _checksum(entries),
    }

    lock_path = path.with_name(path.name + ".lock")
    try:
        lock_fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RegistryError(f"destination {path} is locked by another writer") from None
    tmp_path = path.with_name(path.name + f".tmp{os.getpid()}")
    try:
        with zipfile.ZipFile(tmp_path, "w", compression=zipfile.ZIP_STORED) as zf:
            zf.writestr("manifest.json", json.dumps(manifest, indent=2))
            for name, data in entries:
                zf.writestr(name, data)
        os.replace(tmp_path, path)
    finally:
        os.close(lock_fd)
        lock_path.unlink(missing_ok=True)
        Path(tmp_path).unlink(missing_ok=True)
    return MembraneFile(path=path, manifest=manifest)


def inspect(path: str | Path) -> dict:
    """Read the manifest without loading any tensor payload."""
    path = Path(path)
    if not path.is_file():
        raise TruncatedPayloadError(f"no membrane file at {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            with zf.open("manifest.json") as f:
                return json.loads(f.read())
    except KeyError:
        raise TruncatedPayloadError(f"{path} has no manifest entry") from None
    except zipfile.BadZipFile as e:
        raise TruncatedPayloadError(f"{path} is not a readable membrane archive: {e}") from None


def load(path: str | Path) -> Membrane:
    """Reconstruct a membrane, verifying version, payload sizes, and content checksum."""
    path = Path(path)
    manifest = inspect(path)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path} has format_version {version}; this build reads {FORMAT_VERSION}")
    signature = ModelSignature.from_dict(manifest["source_signature"])
    d = int(manifest["d"])

    layers: dict[str, SpmLayer] = {}
    digest = hashlib.sha256()
    with zipfile.ZipFile(path) as zf:
        for spec in signature:
            tensors = {}
            for kind, shape in (("v_sig", (spec.m, d)), ("v_reg", (d, spec.fan_in))):
                entry = f"layers/{spec.layer_id}/{kind}"
                try:
                    raw = zf.read(entry)
                except KeyError:
                    raise TruncatedPayloadError(f"{path} is missing payload entry {entry}") from None
                except zipfile.BadZipFile as e:
                    raise ChecksumError(f"{path}: corrupt payload entry {entry}: {e}") from None
                expected = shape[0] * shape[1] * 4
                if len(raw) != expected:
                    raise TruncatedPayloadError(
                        f"{path}: entry {entry} holds {len(raw)} bytes, expected {expected}"
                    )
                digest.update(raw)
                arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
                tensors[kind] = torch.from_numpy(arr)
            layers[spec.layer_id] = SpmLayer(spec, d, tensors["v_sig"], tensors["v_reg"])

    stored = manifest.get("checksum", "")
    actual = "sha256:" + digest.hexdigest()
    if stored != actual:
        raise ChecksumError(f"{path}: payload checksum {actual} does not match manifest {stored}")

    membrane = Membrane(
        name=manifest["name"],
        layers=layers,
        source_signature=signature,
        targets=manifest["targets"],
        surrogate=manifest.get("surrogate", ""),
        train_meta=manifest.get("train_meta", {}),
    )
    membrane.requires_grad_(False)
    return membrane


@dataclass
class CompatibilityReport:
    ok: bool
    detail: str | None = None

    def __bool__(self) -> bool:
        return self.ok


def check_compatibility(membrane: Membrane, model_signature: ModelSignature) -> CompatibilityReport:
    """Strict shape equality between the membrane's source and a model signature."""
    mismatch = membrane.source_signature.first_mismatch(model_signature)
    if mismatch is None:
        return CompatibilityReport(ok=True)
    return CompatibilityReport(ok=False, detail=mismatch)


class ComposedModel:
    """Inference handle: a frozen model overlaid with gated membranes.

    Per prompt, each membrane's permeability comes from facilitated transport
    (or is forced to gamma_scale when gating is disabled); sampling then runs
    with every intervention applied at its permeability.
    """

    def __init__(
        self,
        model,
        membranes: Sequence[Membrane] = (),
        gamma_scale: float = 1.0,
        no_ft: bool = False,
        gamma_max: float = DEFAULT_GAMMA_MAX,
    ):
        signature = model.signature
        for m in membranes:
            report = check_compatibility(m, signature)
            if not report:
                raise CompatibilityError(f"membrane {m.name!r}: {report.detail}")
        self.model = model
        self.membranes = list(membranes)
        self.gamma_scale = float(gamma_scale)
        self.no_ft = bool(no_ft)
        self.gamma_max = float(gamma_max)

    def gate_reports(self, prompt: str) -> list[GateReport]:
        return [
            permeability(
                m,
                prompt,
                self.model.encoder.tokenize,
                self.model.encoder,
                gamma_scale=self.gamma_scale,
                gamma_max=self.gamma_max,
            )
            for m in self.membranes
        ]

    def gammas(self, prompt: str) -> list[float]:
        if self.no_ft:
            return [self.gamma_scale] * len(self.membranes)
        return [r.gamma_scaled for r in self.gate_reports(prompt)]

    def active(self, prompt: str) -> list[tuple[Membrane, float]]:
        return list(zip(self.membranes, self.gammas(prompt)))

    def sample(self, prompt: str, n: int, seed: int, steps: int | None = None) -> torch.Tensor:
        cond = self.model.encoder.encode(prompt).vector[None, :].expand(n, -1)
        return toy_sample(
            self.model.denoiser,
            self.model.schedule,
            cond,
            seed=seed,
            steps=steps,
            active=self.active(prompt),
        )

    def frozen_sample(self, prompt: str, n: int, seed: int, steps: int | None = None) -> torch.Tensor:
        cond = self.model.encoder.encode(prompt).vector[None, :].expand(n, -1)
        return toy_sample(self.model.denoiser, self.model.schedule, cond, seed=seed, steps=steps)


def compose(
    membranes: Sequence[Membrane],
    model,
    gamma_scale: float = 1.0,
    no_ft: bool = False,
    gamma_max: float = DEFAULT_GAMMA_MAX,
) -> ComposedModel:
    """Overlay membranes on a model; any incompatibility aborts composition."""
    return ComposedModel(model, membranes, gamma_scale=gamma_scale, no_ft=no_ft, gamma_max=gamma_max)
