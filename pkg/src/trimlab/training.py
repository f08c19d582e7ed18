"""Optimization, task losses, metrics, and the training modes.

Modes: ``pretrain`` (masked-frame reconstruction to produce a frozen
encoder), ``probe`` (head only), ``mask`` (head + mask logits under the
combined objective), ``ssf`` (head + per-site scale/shift modulation, no
sparsity loss), and ``scratch`` (all parameters of a trimmed spec, linear
warmup then constant lr).

In probe/mask/ssf the encoder is frozen: its parameter bytes are identical
before and after training. Checkpoint selection is highest validation metric
over the logged evals; returned artifacts are restored to that state.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .blocks import ModelInstance
from .data import Dataset
from .masking import MaskSet, SparsityConfig, mask_statistics, resolve_lambda, sparsity_loss

MODES = ("pretrain", "probe", "mask", "ssf", "scratch")


@dataclass
class TrainConfig:
    mode: str = "probe"
    steps: int = 5000
    batch_size: int = 32
    lr: float = 1e-3
    warmup_steps: int | None = None  # scratch only; defaults to steps // 4
    seed: int = 0
    loss_kind: str = "cross_entropy"
    eval_every: int = 250
    mask_fraction: float = 0.3  # pretrain: share of frames zeroed
    freeze_modulation: bool = False  # diagnostic: keep ssf at identity

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.warmup_steps is not None and not 0 <= self.warmup_steps <= self.steps:
            raise ValueError("warmup_steps must lie in [0, steps]")
        if self.loss_kind not in ("cross_entropy", "binary_cross_entropy", "masked_mse"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if not 0.0 <= self.mask_fraction <= 1.0:
            raise ValueError("mask_fraction must lie in [0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")

    def resolved_warmup(self) -> int:
        return self.steps // 4 if self.warmup_steps is None else self.warmup_steps


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.moments = {name: (np.zeros_like(p.data), np.zeros_like(p.data)) for name, p in params.items()}
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> bool:
        """Apply one update; returns False (and skips) on non-finite grads."""
        lr = self.lr if lr is None else lr
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ag.ShapeError(f"adam: shapes {g.shape} and {p.data.shape} do not conform for {name}")
            if not np.all(np.isfinite(g)):
                warnings.warn(f"adam: non-finite gradient for {name}; step skipped")
                return False
            grads[name] = g
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            m, v = self.moments[name]
            g = grads[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
        return True


def task_loss(logits: Tensor, targets, kind: str) -> Tensor:
    """Mean-over-batch downstream loss."""
    if kind == "cross_entropy":
        return ag.cross_entropy(logits, targets)
    if kind == "binary_cross_entropy":
        return ag.bce_with_logits(logits, targets)
    raise ValueError(f"unknown task loss {kind!r}")


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def weighted_accuracy(scores: np.ndarray, targets: np.ndarray) -> float:
    """Class-frequency-weighted mean of per-class recall.

    Classes absent from the targets are excluded (with a diagnostic).
    """
    targets = np.asarray(targets)
    if targets.size == 0:
        raise ValueError("weighted_accuracy: empty evaluation set")
    preds = np.argmax(np.asarray(scores), axis=1)
    classes = np.arange(np.asarray(scores).shape[1])
    present = np.array([np.any(targets == c) for c in classes])
    if not present.all():
        warnings.warn(f"weighted_accuracy: classes {list(classes[~present])} absent from targets; excluded")
    total = 0.0
    n = sum(int((targets == c).sum()) for c in classes[present])
    for c in classes[present]:
        sel = targets == c
        recall = float((preds[sel] == c).mean())
        total += (sel.sum() / n) * recall
    return total


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Precision averaged at each positive, scores descending, ties broken by
    stable index order. None when the tag has no positives."""
    labels = np.asarray(labels)
    if labels.sum() == 0:
        return None
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    ranked = labels[order]
    hits = 0
    precisions = []
    for rank, is_pos in enumerate(ranked, start=1):
        if is_pos:
            hits += 1
            precisions.append(hits / rank)
    return float(np.mean(precisions))


def mean_average_precision(scores: np.ndarray, targets: np.ndarray) -> float:
    """Mean over tags of average precision; positive-free tags are skipped."""
    targets = np.asarray(targets)
    if targets.size == 0:
        raise ValueError("mean_average_precision: empty evaluation set")
    aps = []
    skipped = []
    for k in range(targets.shape[1]):
        ap = average_precision(np.asarray(scores)[:, k], targets[:, k])
        if ap is None:
            skipped.append(k)
        else:
            aps.append(ap)
    if skipped:
        warnings.warn(f"mean_average_precision: tags {skipped} have no positives; excluded")
    if not aps:
        raise ValueError("mean_average_precision: no tag has positives")
    return float(np.mean(aps))


def metrics(scores, targets, kind: str) -> float:
    if kind == "w_acc":
        return weighted_accuracy(scores, targets)
    if kind == "map":
        return mean_average_precision(scores, targets)
    raise ValueError(f"unknown metric {kind!r}")


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------


def _batch_stream(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield perm[i : i + batch_size]


def _chunks(n: int, size: int):
    for i in range(0, n, size):
        yield slice(i, min(n, i + size))


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_step: int = 0
    best_val_metric: float = float("-inf")
    test_metric: float | None = None
    lam: float | None = None
    masks: MaskSet | None = None
    ssf: dict | None = None
    model: ModelInstance | None = None

    def best_assignment(self):
        return self.masks.assignment() if self.masks is not None else None


def _record(step, loss, task, sparsity, metric, active, trim, sink, history):
    rec = {
        "step": int(step),
        "loss": float(loss),
        "task_loss": float(task),
        "sparsity_loss": None if sparsity is None else float(sparsity),
        "metric": float(metric),
        "active_fraction": float(active),
        "trim_ratio": float(trim),
    }
    history.append(rec)
    if sink is not None:
        sink(rec)
    return rec


def _eval_logits(model, feats, masks=None, ssf=None, batch=256) -> np.ndarray:
    outs = []
    with ag.no_grad():
        gates = masks.gates() if masks is not None else None
        for sl in _chunks(len(feats), batch):
            outs.append(model.forward(feats[sl], gates=gates, ssf=ssf).data)
    return np.concatenate(outs, axis=0)


def _make_ssf(model) -> dict[str, tuple[Tensor, Tensor]]:
    dtype = next(iter(model.params.values())).dtype
    out = {}
    for s in model.spec.sites():
        out[s.site_id] = (
            Tensor(np.ones(s.unit_count, dtype=dtype), requires_grad=True),
            Tensor(np.zeros(s.unit_count, dtype=dtype), requires_grad=True),
        )
    return out


def ssf_parameters(ssf: dict) -> dict[str, Tensor]:
    params = {}
    for sid, (scale, shift) in ssf.items():
        params[f"ssf.{sid}.scale"] = scale
        params[f"ssf.{sid}.shift"] = shift
    return params


def run_downstream(
    model: ModelInstance,
    dataset: Dataset,
    config: TrainConfig,
    sparsity: SparsityConfig | None = None,
    history_sink=None,
) -> TrainResult:
    """Train one downstream mode on a task; see the module docstring.

    ``history_sink``, when given, receives each eval record as it is logged.
    """
    config.validate()
    mode = config.mode
    if mode not in ("probe", "mask", "ssf", "scratch"):
        raise ValueError(f"run_downstream cannot run mode {mode!r}")
    if mode in ("probe", "mask", "ssf") and not model.frozen:
        raise ValueError(f"{mode} mode requires a frozen encoder")
    if mode == "scratch" and model.frozen:
        raise ValueError("scratch mode trains a fresh unfrozen model")
    if model.spec.head is None:
        raise ValueError("downstream training requires a head")
    if mode == "mask" and sparsity is None:
        raise ValueError("mask mode requires a SparsityConfig")
    if sparsity is not None:
        sparsity.validate()

    metric_kind = dataset.task.metric_kind
    feats_train = dataset.features("train")
    labels_train = dataset.labels("train")
    feats_val = dataset.features("val")
    labels_val = dataset.labels("val")

    result = TrainResult(model=model)
    masks = ssf = None
    head_names = model.head_param_names()
    trainables: dict[str, Tensor] = {n: model.params[n] for n in head_names}

    if mode == "probe":
        model.set_trainable(head_names)
    elif mode == "mask":
        model.set_trainable(head_names)
        masks = MaskSet.for_model(model)
        trainables.update(masks.parameters())
        result.masks = masks
    elif mode == "ssf":
        model.set_trainable(head_names)
        ssf = _make_ssf(model)
        if not config.freeze_modulation:
            trainables.update(ssf_parameters(ssf))
        result.ssf = ssf
    else:  # scratch
        model.set_trainable(list(model.params))
        trainables = dict(model.params)

    opt = Adam(trainables, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    batches = _batch_stream(len(feats_train), config.batch_size, rng)
    warmup = config.resolved_warmup() if mode == "scratch" else 0
    lam = None if (sparsity is None or isinstance(sparsity.lam, str)) else float(sparsity.lam)

    best_snapshot = None

    def eval_now(step, loss_v, task_v, spars_v):
        nonlocal best_snapshot
        logits = _eval_logits(model, feats_val, masks=masks, ssf=ssf)
        metric = metrics(logits, labels_val, metric_kind)
        active, trimr = 1.0, 0.0
        if masks is not None:
            stats = mask_statistics(masks, model.spec)
            active, trimr = stats.active_fraction, stats.trimming_ratio
        _record(step, loss_v, task_v, spars_v, metric, active, trimr, history_sink, result.history)
        if metric > result.best_val_metric:
            result.best_val_metric = metric
            result.best_step = step
            best_snapshot = {n: p.data.copy() for n, p in trainables.items()}

    for step in range(1, config.steps + 1):
        idx = next(batches)
        targets = labels_train[idx]
        logits = model.forward(Tensor(feats_train[idx]), gates=masks.gates() if masks else None, ssf=ssf)
        t_loss = task_loss(logits, targets, config.loss_kind)

        s_loss = None
        if mode == "mask":
            s_loss = sparsity_loss(masks.sites, sparsity.t, sparsity.norm_scope)
            if lam is None:
                lam = resolve_lambda(sparsity, float(t_loss.data), float(s_loss.data))
            total = ag.add(t_loss, ag.mul_scalar(s_loss, lam))
        else:
            total = t_loss

        opt.zero_grad()
        ag.backward(total)
        lr = config.lr * step / warmup if (warmup and step < warmup) else config.lr
        opt.step(lr=lr)

        if step % config.eval_every == 0 or step == config.steps:
            eval_now(step, total.data, t_loss.data, None if s_loss is None else s_loss.data)

    result.lam = lam
    if best_snapshot is not None:
        for n, arr in best_snapshot.items():
            trainables[n].data[...] = arr

    feats_test = dataset.features("test")
    labels_test = dataset.labels("test")
    test_logits = _eval_logits(model, feats_test, masks=masks, ssf=ssf)
    result.test_metric = metrics(test_logits, labels_test, metric_kind)
    return result


def run_pretrain(
    model: ModelInstance,
    dataset: Dataset,
    config: TrainConfig,
    history_sink=None,
) -> tuple[ModelInstance, list[dict]]:
    """Masked-frame reconstruction pretraining; the encoder comes back frozen.

    A share of spectrogram frames is zeroed per clip; a per-frame linear head
    on the encoder states reconstructs them, scored by MSE on the masked
    frames only. The reconstruction head is discarded afterwards. For conv_t,
    whose states are time-compressed, each frame reads the nearest state.
    """
    config.validate()
    if config.mode != "pretrain":
        raise ValueError("run_pretrain requires mode='pretrain'")

    feats_train = dataset.features("train")
    feats_val = dataset.features("val")
    n_frames, n_bins = feats_train.shape[1], feats_train.shape[2]
    dtype = next(iter(model.params.values())).dtype

    with ag.no_grad():
        state_dim = model.encode(feats_train[:1], return_states=True)[1].shape[-1]
    from .blocks import _init_param  # same fan-in rule as model weights

    recon_w = Tensor(_init_param("recon.weight", (n_bins, state_dim), config.seed, dtype), requires_grad=True)
    recon_b = Tensor(np.zeros(n_bins, dtype=dtype), requires_grad=True)

    model.set_trainable(list(model.params))
    trainables = dict(model.params)
    trainables["recon.weight"] = recon_w
    trainables["recon.bias"] = recon_b
    opt = Adam(trainables, lr=config.lr)

    rng = np.random.default_rng(config.seed)
    batches = _batch_stream(len(feats_train), config.batch_size, rng)
    val_rng = np.random.default_rng(config.seed + 0x5EED)
    val_mask = (val_rng.random(feats_val.shape[:2]) < config.mask_fraction).astype(np.float32)

    def recon_loss(feats: np.ndarray, frame_mask: np.ndarray) -> Tensor:
        masked_in = feats * (1.0 - frame_mask)[:, :, None]
        _, states = model.encode(Tensor(masked_in.astype(dtype)), return_states=True)
        if states.shape[1] != n_frames:  # conv_t: nearest-state upsampling
            s = states.shape[1]
            idx = np.minimum((np.arange(n_frames) * s) // n_frames, s - 1)
            states = ag.transpose(ag.gather_rows(ag.transpose(states, (1, 0, 2)), idx), (1, 0, 2))
        pred = ag.add(ag.bmm(states, ag.transpose(recon_w)), recon_b)
        diff = ag.sub(pred, Tensor(feats.astype(dtype)))
        weighted = ag.mul(ag.mul(diff, diff), Tensor(frame_mask[:, :, None].astype(dtype)))
        denom = max(1.0, float(frame_mask.sum())) * n_bins
        return ag.mul_scalar(ag.sum_(weighted), 1.0 / denom)

    history: list[dict] = []
    for step in range(1, config.steps + 1):
        idx = next(batches)
        frame_mask = (rng.random((len(idx), n_frames)) < config.mask_fraction).astype(np.float32)
        loss = recon_loss(feats_train[idx], frame_mask)
        opt.zero_grad()
        ag.backward(loss)
        opt.step()
        if step % config.eval_every == 0 or step == config.steps:
            with ag.no_grad():
                val_loss = recon_loss(feats_val, val_mask).item()
            ag.clear_tape()
            _record(step, loss.data, loss.data, None, -val_loss, 1.0, 0.0, history_sink, history)

    model.freeze_encoder()
    return model, history
