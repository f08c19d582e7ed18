"""Trainable binary masks and the sparsity-inducing loss.

Each maskable site owns a logit vector ``m``; the forward gate is
``ste_round(sigmoid(m))`` (unit active iff m >= 0, ties up), so gradients
reach the logits through the straight-through estimator while the features
see exact {0, 1} gates. The sparsity loss pushes logits below a threshold
``t``: lower t, stronger pressure toward sparsity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .blocks import ModelInstance, ModelSpec

MASK_INIT_LOGIT = 3.0  # gate = 1, sigmoid ~ 0.95: step 0 reproduces plain probing


@dataclass
class SparsityConfig:
    """Sparsity-loss hyperparameters.

    ``lam`` is either a number or "auto", which freezes the weight at the
    first-step ratio task_loss / sparsity_loss. ``norm_scope`` selects whether
    the l2 norm spans each site's unit vector ("site", the default reading) or
    each scalar unit ("unit", for comparison).
    """

    t: float = 0.5
    lam: float | str = "auto"
    norm_scope: str = "site"

    def validate(self) -> None:
        if not np.isfinite(self.t):
            raise ValueError("sparsity threshold t must be finite")
        if isinstance(self.lam, str):
            if self.lam != "auto":
                raise ValueError(f"lambda must be a number or 'auto', got {self.lam!r}")
        elif self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.norm_scope not in ("site", "unit"):
            raise ValueError(f"norm_scope must be 'site' or 'unit', got {self.norm_scope!r}")


class MaskSite:
    """One site's trainable logits; length is fixed at creation."""

    __slots__ = ("site_id", "kind", "logits")

    def __init__(self, site_id: str, kind: str, unit_count: int, init_logit: float = MASK_INIT_LOGIT, dtype=np.float32):
        self.site_id = site_id
        self.kind = kind
        self.logits = Tensor(np.full(unit_count, init_logit, dtype=dtype), requires_grad=True)

    @property
    def unit_count(self) -> int:
        return self.logits.size

    def gate_tensor(self) -> Tensor:
        return ag.ste_round(ag.sigmoid(self.logits))

    def active(self) -> np.ndarray:
        return self.logits.data >= 0.0


class MaskSet:
    """The mask sites of one model, in site order."""

    def __init__(self, sites: list[MaskSite]):
        self.sites = sites
        self.by_id = {s.site_id: s for s in sites}

    @classmethod
    def for_spec(cls, spec: ModelSpec, init_logit: float = MASK_INIT_LOGIT, dtype=np.float32) -> "MaskSet":
        return cls([MaskSite(s.site_id, s.kind, s.unit_count, init_logit, dtype) for s in spec.sites()])

    @classmethod
    def for_model(cls, model: ModelInstance, init_logit: float = MASK_INIT_LOGIT) -> "MaskSet":
        dtype = next(iter(model.params.values())).dtype
        return cls.for_spec(model.spec, init_logit, dtype)

    def gates(self) -> dict[str, Tensor]:
        return {s.site_id: s.gate_tensor() for s in self.sites}

    def assignment(self) -> dict[str, np.ndarray]:
        """Materialize the current binary gates (an immutable snapshot)."""
        return {s.site_id: s.active().astype(np.float64) for s in self.sites}

    def parameters(self) -> dict[str, Tensor]:
        return {f"mask.{s.site_id}": s.logits for s in self.sites}

    def load_logits(self, logits: dict[str, np.ndarray]) -> None:
        for s in self.sites:
            arr = np.asarray(logits[s.site_id], dtype=s.logits.dtype)
            if arr.shape != s.logits.shape:
                raise ShapeError(f"mask logits: shapes {arr.shape} and {s.logits.shape} do not conform at {s.site_id}")
            s.logits.data[...] = arr


def gate(site: MaskSite, features: Tensor, axis: int = -1) -> Tensor:
    """Multiply features along ``axis`` by the site's binary gates."""
    if features.shape[axis] != site.unit_count:
        raise ShapeError(
            f"gate: shapes {features.shape} and ({site.unit_count},) do not conform on axis {axis}"
        )
    shape = [1] * features.data.ndim
    shape[axis] = site.unit_count
    return ag.mul(features, ag.reshape(site.gate_tensor(), shape))


def sparsity_loss(sites, t: float, norm_scope: str = "site") -> Tensor:
    """(1/N) * sum over sites of ||sigmoid(m - t)||, N = total unit count.

    With norm_scope="site" the l2 norm spans each site's unit vector; with
    "unit" every unit contributes |sigmoid(m - t)| individually (sigmoid is
    positive, so no explicit abs is needed).
    """
    sites = list(sites)
    if not sites:
        raise ValueError("sparsity_loss: need at least one mask site")
    n_units = sum(s.unit_count for s in sites)
    total = None
    for s in sites:
        sig = ag.sigmoid(ag.add_scalar(s.logits, -t))
        term = ag.sum_(sig) if norm_scope == "unit" else ag.sqrt(ag.sum_(ag.mul(sig, sig)))
        total = term if total is None else ag.add(total, term)
    return ag.mul_scalar(total, 1.0 / n_units)


def resolve_lambda(config: SparsityConfig, first_task_loss: float, first_sparsity_loss: float) -> float:
    """The frozen weight of the sparsity term.

    Numeric lambda passes through; "auto" matches the magnitude of the task
    objective on the first optimization step: lambda = L_task / L_sparsity.
    """
    if not isinstance(config.lam, str):
        return float(config.lam)
    if first_sparsity_loss <= 0.0:
        raise ValueError("auto lambda: first-step sparsity loss must be positive")
    return float(first_task_loss) / float(first_sparsity_loss)


@dataclass
class Objective:
    total: Tensor
    task: Tensor
    sparsity: Tensor
    lam: float


def total_objective(task_loss: Tensor, sites, config: SparsityConfig, lam: float | None = None) -> Objective:
    """Combined loss: task + lambda * sparsity.

    Pass ``lam`` when config.lam is "auto" (resolved once by the trainer and
    frozen thereafter).
    """
    if task_loss.shape != ():
        raise ShapeError(f"total_objective: task loss must be scalar, got {task_loss.shape}")
    if lam is None:
        if isinstance(config.lam, str):
            raise ValueError("total_objective: auto lambda has not been resolved yet")
        lam = float(config.lam)
    if not np.isfinite(lam) or not np.isfinite(task_loss.data):
        raise ag.NumericError("total_objective: non-finite inputs")
    ls = sparsity_loss(sites, config.t, config.norm_scope)
    total = ag.add(task_loss, ag.mul_scalar(ls, lam))
    return Objective(total=total, task=task_loss, sparsity=ls, lam=lam)


@dataclass
class MaskStats:
    per_site_active: dict[str, int] = field(default_factory=dict)
    active_units: int = 0
    total_units: int = 0
    active_fraction: float = 1.0
    params_before: int = 0
    params_after: int = 0
    trimming_ratio: float = 0.0


def mask_statistics(masks, spec: ModelSpec) -> MaskStats:
    """Active-unit summary plus the parameter-level trimming ratio the current
    masks would realize (encoder parameters only; the head is never trimmed).

    ``masks`` is a MaskSet or a materialized binary assignment.
    """
    from .trimming import derive_trimmed_spec  # local import: trimming sits above masking

    assignment = masks.assignment() if isinstance(masks, MaskSet) else masks
    stats = MaskStats()
    keep_counts = {}
    for site in spec.sites():
        vec = np.asarray(assignment[site.site_id])
        active = int((vec >= 0.5).sum())
        stats.per_site_active[site.site_id] = active
        stats.active_units += active
        stats.total_units += site.unit_count
        keep_counts[site.site_id] = active
    stats.active_fraction = stats.active_units / max(1, stats.total_units)

    from .blocks import param_counts

    stats.params_before = param_counts(spec)["encoder"]
    trimmed = derive_trimmed_spec(spec, keep_counts)
    stats.params_after = param_counts(trimmed)["encoder"]
    stats.trimming_ratio = 1.0 - stats.params_after / max(1, stats.params_before)
    return stats
