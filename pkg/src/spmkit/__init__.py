"""spmkit: semi-permeable membrane adapters for concept erasure in diffusion models."""

from .adapter import (
    Membrane,
    SpmLayer,
    apply_membranes,
    inject,
    intervened_forward,
    overhead_ratio,
    signature_overhead_ratio,
)
from .concepts import AnchorPool, ConceptEncoding, anchor_weight, build_anchor_pool, sample_anchors
from .gating import GateReport, global_similarity, permeability, token_similarity
from .signature import LayerSpec, ModelSignature, signature_of

__version__ = "0.1.0"
