"""Backbone architectures with annotated maskable sites.

Three toy encoders are provided:

* ``conv_t``       - 4 conv blocks (ReLU, stride 2), global average pool.
* ``transformer_t``- input projection + 4 pre-norm transformer layers, mean pool.
* ``conformer_t``  - transformer_t plus a depthwise-separable conv sub-block
                     in every layer.

A maskable site is a position where a vector of removable units is gated:
conv channels after the activation, attention heads on each head's output
before the output projection, FFN hidden units after the activation, and the
conformer conv channels after the first pointwise activation. Normalization
parameters and the residual stream are never gated, so removing a dead unit
changes no surviving activation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor

BACKBONES = ("conv_t", "transformer_t", "conformer_t")
SITE_KINDS = ("linear_columns", "conv_channels", "attention_heads", "ffn_hidden")


class SpecError(ValueError):
    """Invalid or inconsistent model hyperparameters."""


@dataclass(frozen=True)
class MaskableSite:
    site_id: str
    kind: str
    unit_count: int
    block_index: int
    slot: str


@dataclass
class ConvBlockCfg:
    out_channels: int
    kernel: int = 3
    stride: int = 2
    padding: int = 1


@dataclass
class LayerCfg:
    num_heads: int
    d_head: int
    ffn_hidden: int
    conv_channels: int | None = None  # conformer only
    conv_kernel: int = 7


@dataclass
class HeadCfg:
    hidden: int
    out_dim: int


@dataclass
class ModelSpec:
    backbone: str
    feature_dim: int = 128
    conv_blocks: list[ConvBlockCfg] = field(default_factory=list)
    d_model: int = 0
    layers: list[LayerCfg] = field(default_factory=list)
    head: HeadCfg | None = None

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise SpecError(f"unknown backbone {self.backbone!r}")
        if self.feature_dim <= 0:
            raise SpecError("feature_dim must be positive")
        if self.backbone == "conv_t":
            if not self.conv_blocks:
                raise SpecError("conv_t needs at least one conv block")
            for b in self.conv_blocks:
                if b.out_channels < 0 or b.kernel <= 0 or b.stride <= 0 or b.padding < 0:
                    raise SpecError(f"bad conv block hyperparameters: {b}")
        else:
            if self.d_model <= 0 or not self.layers:
                raise SpecError(f"{self.backbone} needs positive d_model and at least one layer")
            for l in self.layers:
                if l.num_heads < 0 or l.d_head <= 0 or l.ffn_hidden < 0:
                    raise SpecError(f"bad layer hyperparameters: {l}")
                if self.backbone == "conformer_t" and (l.conv_channels is None or l.conv_channels < 0):
                    raise SpecError("conformer_t layers need conv_channels")
        if self.head is not None and (self.head.hidden <= 0 or self.head.out_dim <= 0):
            raise SpecError("head hidden/out_dim must be positive")
        ids = [s.site_id for s in self.sites()]
        if len(ids) != len(set(ids)):
            raise SpecError("site ids must be unique")

    def embedding_dim(self) -> int:
        if self.backbone == "conv_t":
            return self.conv_blocks[-1].out_channels
        return self.d_model

    def sites(self) -> list[MaskableSite]:
        out = []
        if self.backbone == "conv_t":
            for i, b in enumerate(self.conv_blocks):
                out.append(MaskableSite(f"conv{i}.channels", "conv_channels", b.out_channels, i, "conv"))
            return out
        for i, l in enumerate(self.layers):
            out.append(MaskableSite(f"layer{i}.heads", "attention_heads", l.num_heads, i, "attn"))
            if self.backbone == "conformer_t":
                out.append(MaskableSite(f"layer{i}.conv", "conv_channels", l.conv_channels, i, "conv"))
            out.append(MaskableSite(f"layer{i}.ffn", "ffn_hidden", l.ffn_hidden, i, "ffn"))
        return out

    def site_by_id(self, site_id: str) -> MaskableSite:
        for s in self.sites():
            if s.site_id == site_id:
                return s
        raise KeyError(site_id)

    def to_dict(self) -> dict:
        d = {"backbone": self.backbone, "feature_dim": self.feature_dim}
        if self.backbone == "conv_t":
            d["conv_blocks"] = [vars(b).copy() for b in self.conv_blocks]
        else:
            d["d_model"] = self.d_model
            d["layers"] = [vars(l).copy() for l in self.layers]
        if self.head is not None:
            d["head"] = vars(self.head).copy()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        spec = cls(
            backbone=d["backbone"],
            feature_dim=d["feature_dim"],
            conv_blocks=[ConvBlockCfg(**b) for b in d.get("conv_blocks", [])],
            d_model=d.get("d_model", 0),
            layers=[LayerCfg(**l) for l in d.get("layers", [])],
            head=HeadCfg(**d["head"]) if d.get("head") else None,
        )
        spec.validate()
        return spec


def default_spec(
    backbone: str,
    num_outputs: int | None = 10,
    feature_dim: int = 128,
    d_model: int = 64,
    num_layers: int = 4,
    num_heads: int = 4,
    ffn_hidden: int = 128,
    conv_channels=(32, 64, 64, 128),
    conformer_conv_channels: int = 64,
    head_hidden: int = 256,
) -> ModelSpec:
    """Desk-scale defaults for each backbone; pass ``num_outputs=None`` for a
    headless encoder (pretraining)."""
    head = HeadCfg(head_hidden, num_outputs) if num_outputs else None
    if backbone == "conv_t":
        spec = ModelSpec(backbone, feature_dim, conv_blocks=[ConvBlockCfg(c) for c in conv_channels], head=head)
    else:
        if d_model % num_heads != 0:
            raise SpecError(f"d_model {d_model} not divisible by num_heads {num_heads}")
        conv = conformer_conv_channels if backbone == "conformer_t" else None
        layers = [LayerCfg(num_heads, d_model // num_heads, ffn_hidden, conv) for _ in range(num_layers)]
        spec = ModelSpec(backbone, feature_dim, d_model=d_model, layers=layers, head=head)
    spec.validate()
    return spec


# --------------------------------------------------------------------------
# parameter bookkeeping
# --------------------------------------------------------------------------


def param_shapes(spec: ModelSpec) -> dict[str, tuple]:
    """Ordered parameter name -> shape map; the single source of truth for
    initialization, checkpoint manifests, and param counting.

    Linear weights are (out, in); conv weights (out, in, k); depthwise (ch, k).
    """
    shapes: dict[str, tuple] = {}
    if spec.backbone == "conv_t":
        cin = spec.feature_dim
        for i, b in enumerate(spec.conv_blocks):
            shapes[f"conv{i}.weight"] = (b.out_channels, cin, b.kernel)
            shapes[f"conv{i}.bias"] = (b.out_channels,)
            cin = b.out_channels
    else:
        d = spec.d_model
        shapes["input_proj.weight"] = (d, spec.feature_dim)
        shapes["input_proj.bias"] = (d,)
        for i, l in enumerate(spec.layers):
            hd = l.num_heads * l.d_head
            p = f"layer{i}"
            shapes[f"{p}.ln1.scale"] = (d,)
            shapes[f"{p}.ln1.offset"] = (d,)
            for proj in ("wq", "wk", "wv"):
                shapes[f"{p}.attn.{proj}"] = (hd, d)
                shapes[f"{p}.attn.b{proj[1]}"] = (hd,)
            shapes[f"{p}.attn.wo"] = (d, hd)
            shapes[f"{p}.attn.bo"] = (d,)
            if spec.backbone == "conformer_t":
                c = l.conv_channels
                shapes[f"{p}.ln_conv.scale"] = (d,)
                shapes[f"{p}.ln_conv.offset"] = (d,)
                shapes[f"{p}.conv.pw1_w"] = (c, d)
                shapes[f"{p}.conv.pw1_b"] = (c,)
                shapes[f"{p}.conv.dw_w"] = (c, l.conv_kernel)
                shapes[f"{p}.conv.dw_b"] = (c,)
                shapes[f"{p}.conv.pw2_w"] = (d, c)
                shapes[f"{p}.conv.pw2_b"] = (d,)
            shapes[f"{p}.ln2.scale"] = (d,)
            shapes[f"{p}.ln2.offset"] = (d,)
            shapes[f"{p}.ffn.w1"] = (l.ffn_hidden, d)
            shapes[f"{p}.ffn.b1"] = (l.ffn_hidden,)
            shapes[f"{p}.ffn.w2"] = (d, l.ffn_hidden)
            shapes[f"{p}.ffn.b2"] = (d,)
    if spec.head is not None:
        emb = spec.embedding_dim()
        shapes["head.w1"] = (spec.head.hidden, emb)
        shapes["head.b1"] = (spec.head.hidden,)
        shapes["head.w2"] = (spec.head.out_dim, spec.head.hidden)
        shapes["head.b2"] = (spec.head.out_dim,)
    return shapes


def param_counts(spec: ModelSpec) -> dict[str, int]:
    """Element counts split into encoder and head."""
    enc = head = 0
    for name, shape in param_shapes(spec).items():
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if name.startswith("head."):
            head += n
        else:
            enc += n
    return {"encoder": enc, "head": head, "total": enc + head}


def _param_seed(seed: int, name: str) -> int:
    # stable per-parameter stream: independent of build order and platform
    h = hashlib.blake2b(name.encode(), digest_size=8, key=int(seed).to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


def _init_param(name: str, shape: tuple, seed: int, dtype) -> np.ndarray:
    last = name.rsplit(".", 1)[-1]
    if last == "scale":
        return np.ones(shape, dtype=dtype)
    if len(shape) == 1:  # biases and layer-norm offsets
        return np.zeros(shape, dtype=dtype)
    if last == "dw_w":
        fan_in = shape[1]
    elif len(shape) == 3:
        fan_in = shape[1] * shape[2]
    else:
        fan_in = shape[1]
    bound = np.sqrt(6.0 / max(1, fan_in))
    rng = np.random.Generator(np.random.PCG64(_param_seed(seed, name)))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# --------------------------------------------------------------------------
# model instance and forward passes
# --------------------------------------------------------------------------


class ModelInstance:
    """A spec bound to concrete parameters.

    Immutable during inference (safe for concurrent reads); the training loop
    is the single writer of parameter data.
    """

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor], frozen: bool = False):
        self.spec = spec
        self.params = params
        self.frozen = frozen

    def param(self, name: str) -> Tensor:
        return self.params[name]

    def encoder_param_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("head.")]

    def head_param_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("head.")]

    def freeze_encoder(self) -> None:
        for n in self.encoder_param_names():
            self.params[n].requires_grad = False
        self.frozen = True

    def set_trainable(self, names) -> None:
        wanted = set(names)
        for n, p in self.params.items():
            p.requires_grad = n in wanted

    def encode(self, features, gates=None, ssf=None, return_states: bool = False):
        return _encode(self, features, gates, ssf, return_states)

    def head_forward(self, embedding: Tensor) -> Tensor:
        return forward_head(self, embedding)

    def forward(self, features, gates=None, ssf=None) -> Tensor:
        return forward_head(self, self.encode(features, gates, ssf))


def build_backbone(spec: ModelSpec, seed: int, dtype=np.float32) -> ModelInstance:
    """Deterministically initialize a model: equal seeds give bitwise-equal
    parameters regardless of build order."""
    spec.validate()
    params = {
        name: Tensor(_init_param(name, shape, seed, dtype), requires_grad=True)
        for name, shape in param_shapes(spec).items()
    }
    return ModelInstance(spec, params)


def attach_head(model: ModelInstance, head: HeadCfg, seed: int) -> None:
    """Add (or replace) a freshly initialized probing head."""
    for n in model.head_param_names():
        del model.params[n]
    model.spec.head = head
    model.spec.validate()
    dtype = next(iter(model.params.values())).dtype
    for name, shape in param_shapes(model.spec).items():
        if name.startswith("head."):
            model.params[name] = Tensor(_init_param(name, shape, seed, dtype), requires_grad=True)


def _as_features(model: ModelInstance, features) -> Tensor:
    dtype = next(iter(model.params.values())).dtype
    if not isinstance(features, Tensor):
        features = Tensor(np.asarray(features, dtype=dtype))
    if features.data.ndim == 2:
        features = ag.reshape(features, (1,) + features.shape)
    if features.data.ndim != 3 or features.shape[-1] != model.spec.feature_dim:
        raise ShapeError(
            f"encode: shapes {features.shape} and feature_dim {model.spec.feature_dim} do not conform"
        )
    return features


def _gate_for(gates, site_id: str):
    if gates is None:
        return None
    return gates.get(site_id)


def _apply_gate(x: Tensor, gate: Tensor | None, shape) -> Tensor:
    if gate is None:
        return x
    return ag.mul(x, ag.reshape(gate, shape))


def _apply_ssf(x: Tensor, ssf, site_id: str, shape) -> Tensor:
    if ssf is None or site_id not in ssf:
        return x
    scale, shift = ssf[site_id]
    return ag.add(ag.mul(x, ag.reshape(scale, shape)), ag.reshape(shift, shape))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    # x (..., in) with weight (out, in)
    y = ag.bmm(x, ag.transpose(w)) if x.data.ndim > 2 else ag.matmul(x, ag.transpose(w))
    return ag.add(y, b)


def _encode(model: ModelInstance, features, gates, ssf, return_states):
    spec = model.spec
    x = _as_features(model, features)
    p = model.params

    if spec.backbone == "conv_t":
        x = ag.transpose(x, (0, 2, 1))  # (B, F, T): frequency bins are channels
        for i, blk in enumerate(spec.conv_blocks):
            sid = f"conv{i}.channels"
            x = ag.conv1d(x, p[f"conv{i}.weight"], stride=blk.stride, padding=blk.padding)
            x = ag.add(x, ag.reshape(p[f"conv{i}.bias"], (1, -1, 1)))
            x = ag.relu(x)
            x = _apply_gate(x, _gate_for(gates, sid), (1, -1, 1))
            x = _apply_ssf(x, ssf, sid, (1, -1, 1))
        states = ag.transpose(x, (0, 2, 1))  # (B, T', C)
        emb = ag.mean(x, axis=2)
        return (emb, states) if return_states else emb

    x = _linear(x, p["input_proj.weight"], p["input_proj.bias"])  # (B, T, d)
    bsz, t = x.shape[0], x.shape[1]
    for i, layer in enumerate(spec.layers):
        pre = f"layer{i}"
        # attention sub-block (pre-norm, residual)
        a = ag.layer_norm(x, p[f"{pre}.ln1.scale"], p[f"{pre}.ln1.offset"])
        h, dh = layer.num_heads, layer.d_head
        q = _split_heads(_linear(a, p[f"{pre}.attn.wq"], p[f"{pre}.attn.bq"]), h, dh)
        k = _split_heads(_linear(a, p[f"{pre}.attn.wk"], p[f"{pre}.attn.bk"]), h, dh)
        v = _split_heads(_linear(a, p[f"{pre}.attn.wv"], p[f"{pre}.attn.bv"]), h, dh)
        scores = ag.mul_scalar(ag.bmm(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        ctx = ag.bmm(ag.softmax(scores), v)  # (B, h, T, dh)
        ctx = _apply_gate(ctx, _gate_for(gates, f"{pre}.heads"), (1, -1, 1, 1))
        ctx = _apply_ssf(ctx, ssf, f"{pre}.heads", (1, -1, 1, 1))
        ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (bsz, t, h * dh))
        x = ag.add(x, _linear(ctx, p[f"{pre}.attn.wo"], p[f"{pre}.attn.bo"]))

        if spec.backbone == "conformer_t":
            # depthwise-separable conv sub-block (pre-norm, residual)
            c = ag.layer_norm(x, p[f"{pre}.ln_conv.scale"], p[f"{pre}.ln_conv.offset"])
            c = ag.gelu(_linear(c, p[f"{pre}.conv.pw1_w"], p[f"{pre}.conv.pw1_b"]))
            c = _apply_gate(c, _gate_for(gates, f"{pre}.conv"), (1, 1, -1))
            c = _apply_ssf(c, ssf, f"{pre}.conv", (1, 1, -1))
            c = ag.transpose(c, (0, 2, 1))  # (B, C, T)
            c = ag.depthwise_conv1d(c, p[f"{pre}.conv.dw_w"], padding=(layer.conv_kernel - 1) // 2)
            c = ag.add(c, ag.reshape(p[f"{pre}.conv.dw_b"], (1, -1, 1)))
            c = ag.transpose(c, (0, 2, 1))
            x = ag.add(x, _linear(c, p[f"{pre}.conv.pw2_w"], p[f"{pre}.conv.pw2_b"]))

        # feed-forward sub-block (pre-norm, residual)
        f = ag.layer_norm(x, p[f"{pre}.ln2.scale"], p[f"{pre}.ln2.offset"])
        f = ag.gelu(_linear(f, p[f"{pre}.ffn.w1"], p[f"{pre}.ffn.b1"]))
        f = _apply_gate(f, _gate_for(gates, f"{pre}.ffn"), (1, 1, -1))
        f = _apply_ssf(f, ssf, f"{pre}.ffn", (1, 1, -1))
        x = ag.add(x, _linear(f, p[f"{pre}.ffn.w2"], p[f"{pre}.ffn.b2"]))

    emb = ag.mean(x, axis=1)
    return (emb, x) if return_states else emb


def _split_heads(x: Tensor, h: int, dh: int) -> Tensor:
    bsz, t = x.shape[0], x.shape[1]
    return ag.transpose(ag.reshape(x, (bsz, t, h, dh)), (0, 2, 1, 3))


def forward_encoder(model: ModelInstance, features, masks=None) -> Tensor:
    """Embed a batch, optionally gating every maskable site.

    ``masks`` may be a dict of binary unit vectors (a materialized
    assignment), or anything with a ``.gates()`` method producing live gate
    tensors (trainable mask sites).
    """
    gates = None
    if masks is not None:
        gates = masks.gates() if hasattr(masks, "gates") else _assignment_gates(model, masks)
    return model.encode(features, gates=gates)


def _assignment_gates(model: ModelInstance, assignment) -> dict[str, Tensor]:
    dtype = next(iter(model.params.values())).dtype
    sites = {s.site_id: s for s in model.spec.sites()}
    missing = set(sites) - set(assignment)
    if missing:
        raise ShapeError(f"forward_encoder: mask assignment missing sites {sorted(missing)}")
    gates = {}
    for sid, vec in assignment.items():
        if sid not in sites:
            raise ShapeError(f"forward_encoder: unknown site {sid!r} in mask assignment")
        v = np.asarray(vec, dtype=dtype)
        if v.shape != (sites[sid].unit_count,):
            raise ShapeError(
                f"forward_encoder: shapes {v.shape} and ({sites[sid].unit_count},) do not conform at {sid}"
            )
        gates[sid] = Tensor(v)
    return gates


def forward_head(model: ModelInstance, embedding: Tensor) -> Tensor:
    """2-layer ReLU MLP head on an embedding batch."""
    if model.spec.head is None:
        raise SpecError("model has no head")
    if not isinstance(embedding, Tensor):
        embedding = Tensor(np.asarray(embedding, dtype=next(iter(model.params.values())).dtype))
    if embedding.shape[-1] != model.spec.embedding_dim():
        raise ShapeError(
            f"forward_head: shapes {embedding.shape} and embedding_dim {model.spec.embedding_dim()} do not conform"
        )
    p = model.params
    h = ag.relu(_linear(embedding, p["head.w1"], p["head.b1"]))
    return _linear(h, p["head.w2"], p["head.b2"])
