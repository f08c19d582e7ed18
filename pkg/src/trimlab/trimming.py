"""Physical extraction of the surviving subnetwork.

Masked units are removed by slicing parameters: gated output rows/channels/
heads disappear together with the matching input columns of the next layer,
so the trimmed model computes exactly what the masked model computed. A site
whose units all died stays in the model as a structurally-zero path (empty
weight dims); the residual stream keeps transformer/conformer outputs well
defined, while a fully-dead conv_t stage collapses downstream activations to
bias-driven constants (diagnosed with a warning).
"""

from __future__ import annotations

import warnings
from copy import deepcopy
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ShapeError
from .blocks import ModelInstance, ModelSpec, Tensor, forward_encoder, param_counts, param_shapes


class TrimError(ValueError):
    """Inconsistent trim plan or mask/site mismatch."""


class VerificationError(RuntimeError):
    """Masked and trimmed outputs deviate beyond the contract."""


# float32 surgery must agree to 1e-5; float64 to 1e-10
DEVIATION_CONTRACT = {np.dtype(np.float32): 1e-5, np.dtype(np.float64): 1e-10}


@dataclass
class SliceOp:
    param: str
    axis: int
    keep: np.ndarray  # strictly increasing dim indices that survive


@dataclass
class TrimPlan:
    keep: dict[str, np.ndarray]  # site_id -> surviving unit indices
    slices: list[SliceOp] = field(default_factory=list)

    def keep_counts(self) -> dict[str, int]:
        return {sid: len(idx) for sid, idx in self.keep.items()}

    def to_dict(self) -> dict:
        return {"keep": {sid: [int(i) for i in idx] for sid, idx in self.keep.items()}}

    @classmethod
    def from_dict(cls, d: dict, spec: ModelSpec) -> "TrimPlan":
        keep = {sid: np.asarray(idx, dtype=np.int64) for sid, idx in d["keep"].items()}
        return plan_from_keep(spec, keep)


@dataclass
class TrimReport:
    params_before: int
    params_after: int
    trimming_ratio: float
    per_site_removed: dict[str, int]
    bytes_before: int
    bytes_after: int
    verification: float | None = None
    dead_sites: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "params_before": self.params_before,
            "params_after": self.params_after,
            "trimming_ratio": self.trimming_ratio,
            "per_site_removed": self.per_site_removed,
            "bytes_before": self.bytes_before,
            "bytes_after": self.bytes_after,
            "verification": self.verification,
            "dead_sites": self.dead_sites,
            "counts_encoder_only": True,  # the head is excluded from the ratio
        }


def _site_keep(assignment, site) -> np.ndarray:
    vec = np.asarray(assignment[site.site_id])
    if vec.shape != (site.unit_count,):
        raise TrimError(
            f"mask for {site.site_id} has shape {vec.shape}, site has {site.unit_count} units"
        )
    if not np.all((vec == 0.0) | (vec == 1.0)):
        raise TrimError(f"mask for {site.site_id} is not binary")
    return np.flatnonzero(vec >= 0.5).astype(np.int64)


def plan_trim(model: ModelInstance, masks: dict[str, np.ndarray]) -> TrimPlan:
    """Derive keep-indices and parameter slicing directives from binary masks."""
    spec = model.spec
    missing = {s.site_id for s in spec.sites()} - set(masks)
    if missing:
        raise TrimError(f"mask assignment missing sites {sorted(missing)}")
    keep = {s.site_id: _site_keep(masks, s) for s in spec.sites()}
    return plan_from_keep(spec, keep)


def plan_from_keep(spec: ModelSpec, keep: dict[str, np.ndarray]) -> TrimPlan:
    slices: list[SliceOp] = []
    sites = {s.site_id: s for s in spec.sites()}
    for sid, idx in keep.items():
        if sid not in sites:
            raise TrimError(f"unknown site {sid!r} in trim plan")
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= sites[sid].unit_count):
            raise TrimError(f"keep indices for {sid} must be strictly increasing within unit_count")

    if spec.backbone == "conv_t":
        n = len(spec.conv_blocks)
        for i in range(n):
            idx = keep[f"conv{i}.channels"]
            slices.append(SliceOp(f"conv{i}.weight", 0, idx))
            slices.append(SliceOp(f"conv{i}.bias", 0, idx))
            if i + 1 < n:
                slices.append(SliceOp(f"conv{i + 1}.weight", 1, idx))
            elif spec.head is not None:
                slices.append(SliceOp("head.w1", 1, idx))
    else:
        for i, layer in enumerate(spec.layers):
            p = f"layer{i}"
            heads = keep[f"{p}.heads"]
            dims = np.concatenate([np.arange(h * layer.d_head, (h + 1) * layer.d_head) for h in heads]) if heads.size else np.empty(0, dtype=np.int64)
            for proj, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv")):
                slices.append(SliceOp(f"{p}.attn.{proj}", 0, dims))
                slices.append(SliceOp(f"{p}.attn.{b}", 0, dims))
            slices.append(SliceOp(f"{p}.attn.wo", 1, dims))
            if spec.backbone == "conformer_t":
                cidx = keep[f"{p}.conv"]
                slices.append(SliceOp(f"{p}.conv.pw1_w", 0, cidx))
                slices.append(SliceOp(f"{p}.conv.pw1_b", 0, cidx))
                slices.append(SliceOp(f"{p}.conv.dw_w", 0, cidx))
                slices.append(SliceOp(f"{p}.conv.dw_b", 0, cidx))
                slices.append(SliceOp(f"{p}.conv.pw2_w", 1, cidx))
            fidx = keep[f"{p}.ffn"]
            slices.append(SliceOp(f"{p}.ffn.w1", 0, fidx))
            slices.append(SliceOp(f"{p}.ffn.b1", 0, fidx))
            slices.append(SliceOp(f"{p}.ffn.w2", 1, fidx))
    return TrimPlan(keep=keep, slices=slices)


def derive_trimmed_spec(spec: ModelSpec, keep_counts: dict[str, int]) -> ModelSpec:
    """The smaller spec the keep counts realize; block order is preserved."""
    trimmed = deepcopy(spec)
    if spec.backbone == "conv_t":
        for i, blk in enumerate(trimmed.conv_blocks):
            blk.out_channels = keep_counts[f"conv{i}.channels"]
    else:
        for i, layer in enumerate(trimmed.layers):
            layer.num_heads = keep_counts[f"layer{i}.heads"]
            layer.ffn_hidden = keep_counts[f"layer{i}.ffn"]
            if spec.backbone == "conformer_t":
                layer.conv_channels = keep_counts[f"layer{i}.conv"]
    return trimmed


def apply_trim(model: ModelInstance, plan: TrimPlan) -> tuple[ModelInstance, TrimReport]:
    """Copy the surviving parameters into a smaller model (the original
    instance is left untouched)."""
    spec = model.spec
    site_ids = {s.site_id for s in spec.sites()}
    if set(plan.keep) != site_ids:
        raise TrimError(f"plan sites {sorted(plan.keep)} do not match model sites {sorted(site_ids)}")
    for op in plan.slices:
        if op.param not in model.params:
            raise TrimError(f"plan references unknown parameter {op.param!r}")

    trimmed_spec = derive_trimmed_spec(spec, plan.keep_counts())
    expected = param_shapes(trimmed_spec)

    new_params: dict[str, Tensor] = {}
    for name, tensor in model.params.items():
        arr = tensor.data
        for op in plan.slices:
            if op.param == name:
                arr = np.take(arr, op.keep, axis=op.axis)
        if name in expected and arr.shape != expected[name]:
            raise TrimError(f"plan is inconsistent: {name} sliced to {arr.shape}, expected {expected[name]}")
        new_params[name] = Tensor(arr.copy())
    trimmed = ModelInstance(trimmed_spec, new_params, frozen=model.frozen)

    dead = [sid for sid, idx in plan.keep.items() if len(idx) == 0]
    if dead:
        extra = ""
        if spec.backbone == "conv_t":
            extra = "; downstream conv stages collapse to bias-driven constants"
        warnings.warn(f"fully dead sites kept as structurally-zero paths: {sorted(dead)}{extra}")

    from .checkpoint import serialize  # deferred: checkpoint depends on blocks only

    before = param_counts(spec)["encoder"]
    after = param_counts(trimmed_spec)["encoder"]
    sites = {s.site_id: s for s in spec.sites()}
    report = TrimReport(
        params_before=before,
        params_after=after,
        trimming_ratio=1.0 - after / max(1, before),
        per_site_removed={sid: sites[sid].unit_count - len(idx) for sid, idx in plan.keep.items()},
        bytes_before=len(serialize(model)),
        bytes_after=len(serialize(trimmed)),
        dead_sites=sorted(dead),
    )
    return trimmed, report


def embedding_keep(plan: TrimPlan, spec: ModelSpec) -> np.ndarray:
    """Indices of base-embedding dims that survive in the trimmed embedding.

    Only conv_t trims its embedding (pooled final-stage channels); the
    transformer/conformer residual stream is never gated.
    """
    if spec.backbone == "conv_t":
        return plan.keep[f"conv{len(spec.conv_blocks) - 1}.channels"]
    return np.arange(spec.embedding_dim(), dtype=np.int64)


def verify_equivalence(
    model: ModelInstance,
    masks: dict[str, np.ndarray],
    trimmed: ModelInstance,
    probes: np.ndarray,
) -> float:
    """Max |masked - trimmed| over the probe batch, at the embedding (through
    the keep projection) and, when a head is present, at the logits."""
    probes = np.asarray(probes)
    if probes.ndim != 3 or probes.shape[-1] != model.spec.feature_dim:
        raise ShapeError(f"verify_equivalence: shapes {probes.shape} and feature_dim {model.spec.feature_dim} do not conform")
    plan = plan_trim(model, masks)
    emb_keep = embedding_keep(plan, model.spec)
    with ag.no_grad():
        m_emb = forward_encoder(model, probes, masks)
        t_emb = trimmed.encode(probes)
        dev = 0.0
        if emb_keep.size or t_emb.data.size == 0:
            dev = float(np.max(np.abs(m_emb.data[:, emb_keep] - t_emb.data))) if emb_keep.size else 0.0
        if model.spec.head is not None and trimmed.spec.head is not None:
            m_log = model.head_forward(m_emb)
            t_log = trimmed.head_forward(t_emb)
            if m_log.shape != t_log.shape:
                raise ShapeError(f"verify_equivalence: shapes {m_log.shape} and {t_log.shape} do not conform")
            dev = max(dev, float(np.max(np.abs(m_log.data - t_log.data))))
    return dev


def trim(
    model: ModelInstance,
    masks: dict[str, np.ndarray],
    probes: np.ndarray | None = None,
) -> tuple[ModelInstance, TrimPlan, TrimReport]:
    """Plan, apply, and (when probes are given) verify a surgery."""
    plan = plan_trim(model, masks)
    trimmed, report = apply_trim(model, plan)
    if probes is not None:
        report.verification = verify_equivalence(model, masks, trimmed, probes)
    return trimmed, plan, report
