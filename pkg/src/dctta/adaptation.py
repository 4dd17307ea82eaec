"""Fully test-time adaptation: reliable-entropy loss, sharpness-aware updates, stream loop.

Also holds the supervised source pretraining used to produce the model that
gets adapted.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .analysis import MetricsLog
from .autograd import NonFiniteError, Tensor
from .data import StreamBatch, SyntheticDataset, iter_minibatches
from .model import GENERATOR, LN, ModelConfig, ModelParams, init_params, model_forward

log = logging.getLogger(__name__)

ADAPT_MODES = ("dct", "static-conditioner", "ln-only", "none")
_FORWARD_MODE = {"dct": "dct", "static-conditioner": "static", "ln-only": "baseline", "none": "baseline"}


class DivergenceError(RuntimeError):
    """Training or adaptation produced a non-finite loss or gradient."""


@dataclass
class AdaptConfig:
    learning_rate: float = 0.01
    rho: float = 0.05
    e0_factor: float = 0.4
    mode: str = "dct"
    momentum: float = 0.9
    score_after_update: bool = False
    lr_reference_batch: int = 64  # lr scales by batch/reference; 0 disables

    def __post_init__(self):
        if self.mode not in ADAPT_MODES:
            raise ValueError(f"unknown adaptation mode {self.mode!r}; expected one of {ADAPT_MODES}")
        if not self.learning_rate > 0:
            raise ValueError("adapt.learning_rate must be positive")
        if self.rho < 0:
            raise ValueError("adapt.rho must be non-negative")
        if not 0 < self.e0_factor <= 1:
            raise ValueError("adapt.e0_factor must lie in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ValueError("adapt.momentum must lie in [0, 1)")
        if self.lr_reference_batch < 0:
            raise ValueError("adapt.lr_reference_batch must be >= 0")

    def step_size(self, batch: int) -> float:
        if not self.lr_reference_batch:
            return self.learning_rate
        return self.learning_rate * batch / self.lr_reference_batch

    def e0(self, num_classes: int) -> float:
        return self.e0_factor * math.log(num_classes)

    @property
    def forward_mode(self) -> str:
        return _FORWARD_MODE[self.mode]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdaptState:
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    skipped: int = 0


@dataclass
class UpdateStats:
    n_selected1: int
    n_selected2: int
    loss: float
    skipped: bool
    logits: np.ndarray | None = None
    mean_entropy: float = float("nan")


# ------------------------------------------------------------------- losses

def entropy(logits: Tensor) -> Tensor:
    """Per-row Shannon entropy of softmax(logits), in nats."""
    logp = ag.log_softmax(logits)
    return ag.scale(ag.sum(ag.multiply(ag.exp(logp), logp), axis=-1), -1.0)


def reliability_mask(entropies, e0: float) -> np.ndarray:
    return np.asarray(entropies) < e0


def adaptation_loss(logits: Tensor, e0: float) -> tuple[Tensor | None, int, np.ndarray]:
    """Mean entropy over reliable samples; ``None`` when nothing passes the filter."""
    ent = entropy(logits)
    mask = reliability_mask(ent.data, e0)
    count = int(mask.sum())
    if count == 0:
        return None, 0, ent.data
    masked = ag.multiply(ent, Tensor(mask.astype(ent.data.dtype)))
    return ag.scale(ag.sum(masked), 1.0 / count), count, ent.data


def cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    c = logits.shape[-1]
    onehot = np.full(logits.shape, smoothing / c, dtype=logits.data.dtype)
    onehot[np.arange(len(labels)), labels] += 1.0 - smoothing
    picked = ag.sum(ag.multiply(ag.log_softmax(logits), Tensor(onehot)))
    return ag.scale(picked, -1.0 / len(labels))


# -------------------------------------------------------- parameter choice

def select_adaptable(params: ModelParams, mode: str) -> list[str]:
    if mode not in ADAPT_MODES:
        raise ValueError(f"unknown adaptation mode {mode!r}; expected one of {ADAPT_MODES}")
    if mode == "none":
        return []
    names = params.names(LN)
    if mode == "ln-only":
        return names
    prefix = "gen." if mode == "dct" else "static."
    extra = [n for n in params.names(GENERATOR) if n.startswith(prefix)]
    if not extra:
        raise ValueError(f"mode {mode!r} needs {prefix}* parameters in the model")
    return names + extra


def prepare_params(params: ModelParams, mode: str) -> ModelParams:
    """Copy of ``params`` with the conditioner kind ``mode`` needs and the right trainable flags."""
    out = params.copy()
    if mode == "static-conditioner" and out.conditioner_kind != "static":
        out = out.use_static_conditioners()
    elif mode == "dct" and out.conditioner_kind != "generator":
        out = out.use_generators()
    out.set_trainable(select_adaptable(out, mode))
    return out


# ---------------------------------------------------------------------- SAM

def sam_step(tensors: Sequence[Tensor], closure: Callable[[], tuple[Tensor | None, int]],
             lr: float, rho: float, momentum: float, buffers: list) -> tuple[int, int, float, bool]:
    """Two-pass sharpness-aware step followed by momentum descent.

    ``closure`` rebuilds the graph at the current parameter values and returns
    (loss or None, selected count). ``buffers`` holds one momentum array per
    tensor (``None`` until first use) and is updated in place. Returns
    (count1, count2, loss1, skipped). Parameters are restored exactly when a
    pass selects nothing or a non-finite value appears.
    """
    saved = [t.data.copy() for t in tensors]

    def restore():
        for t, s in zip(tensors, saved):
            t.data = s.copy()
            t.grad = None

    try:
        loss1, n1 = closure()
        if loss1 is None:
            return 0, 0, float("nan"), True
        g1 = ag.backward(loss1)
        grads = [g1.get(t) for t in tensors]
        grads = [np.zeros_like(t.data) if g is None else g for t, g in zip(tensors, grads)]
        norm = math.sqrt(float(np.sum([np.sum(g.astype(np.float64) ** 2) for g in grads])))
        if rho > 0:
            factor = rho / (norm + 1e-12)
            for t, g in zip(tensors, grads):
                t.data = (t.data + factor * g).astype(t.data.dtype)
        loss2, n2 = closure()
        if loss2 is None:
            restore()
            return n1, 0, loss1.item(), True
        g2 = ag.backward(loss2)
    except NonFiniteError as exc:
        restore()
        raise DivergenceError(str(exc)) from exc
    restore()
    for i, t in enumerate(tensors):
        g = g2.get(t)
        g = np.zeros_like(t.data) if g is None else g
        buffers[i] = g.copy() if buffers[i] is None else (momentum * buffers[i] + g).astype(t.data.dtype)
        t.data = (t.data - lr * buffers[i]).astype(t.data.dtype)
    return n1, n2, loss1.item(), False


def sam_update(params: ModelParams, images: np.ndarray, cfg: AdaptConfig, state: AdaptState) -> UpdateStats:
    """One reliable-entropy SAM update on a test batch.

    The logits of the first (unperturbed) forward pass are returned for scoring.
    """
    names = select_adaptable(params, cfg.mode)
    if not names:
        raise ValueError("no adaptable parameters for mode 'none'")
    tensors = [params[n] for n in names]
    e0 = cfg.e0(params.config.num_classes)
    first: dict = {}

    def closure():
        logits, _ = model_forward(images, params, cfg.forward_mode)
        loss, count, ent = adaptation_loss(logits, e0)
        if not first:
            first["logits"] = logits.data.copy()
            first["entropy"] = float(np.mean(ent))
        return loss, count

    buffers = [state.buffers.get(n) for n in names]
    n1, n2, loss, skipped = sam_step(tensors, closure, cfg.step_size(len(images)), cfg.rho, cfg.momentum,
                                     buffers)
    for n, b in zip(names, buffers):
        if b is not None:
            state.buffers[n] = b
    state.step += 1
    state.skipped += int(skipped)
    return UpdateStats(n1, n2, loss, skipped, first.get("logits"), first.get("entropy", float("nan")))


def adapt_stream(params: ModelParams, stream: Sequence[StreamBatch], cfg: AdaptConfig,
                 ) -> tuple[MetricsLog, ModelParams]:
    """Adapt online over ``stream`` in order; returns per-batch metrics and the final parameters.

    Each batch is scored from the first forward pass of its own update (the
    model already carries all earlier updates), unless ``score_after_update``.
    The input parameters are not modified.
    """
    num_classes = params.config.num_classes
    for batch in stream:
        if len(batch.labels) and int(np.max(batch.labels)) >= num_classes:
            raise ValueError(f"stream labels exceed model class count {num_classes}")
    work = prepare_params(params, cfg.mode)
    state = AdaptState()
    metrics = MetricsLog()
    e0 = cfg.e0(num_classes)
    for batch in stream:
        if cfg.mode == "none":
            logits, _ = model_forward(batch.images, work, cfg.forward_mode)
            ent = entropy(logits).data
            n_sel = int(reliability_mask(ent, e0).sum())
            stats = UpdateStats(n_sel, 0, float("nan"), True, logits.data, float(np.mean(ent)))
        else:
            stats = sam_update(work, batch.images, cfg, state)
        logits = stats.logits
        if cfg.score_after_update and cfg.mode != "none":
            logits = _inference_logits(work, batch.images, cfg.forward_mode)
        correct = int((logits.argmax(axis=1) == batch.labels).sum())
        metrics.update(batch.index, len(batch.labels), stats.n_selected1, stats.n_selected2,
                       stats.loss, correct, stats.skipped, stats.mean_entropy)
    work.set_trainable([])
    return metrics, work


def _inference_logits(params: ModelParams, images: np.ndarray, mode: str) -> np.ndarray:
    flags = {n: t.requires_grad for n, t in params.items()}
    params.set_trainable([])
    try:
        return model_forward(images, params, mode)[0].data
    finally:
        params.set_trainable([n for n, f in flags.items() if f])


# ---------------------------------------------------------------- pretrain

@dataclass
class PretrainConfig:
    epochs: int = 12
    lr: float = 2e-3
    batch_size: int = 64
    weight_decay: float = 0.05
    label_smoothing: float = 0.1
    seed: int = 0


def pretrain(config: ModelConfig, train: SyntheticDataset, tcfg: PretrainConfig,
             on_epoch: Callable[[dict], None] | None = None) -> ModelParams:
    """Supervised cross-entropy training of the source model in baseline mode.

    Adam with decoupled weight decay and a cosine learning-rate schedule;
    every non-generator parameter is trained. Deterministic given the seed.
    """
    if train.num_classes != config.num_classes or (len(train.labels) and
                                                    int(train.labels.max()) >= config.num_classes):
        raise ValueError(f"dataset has {train.num_classes} classes, model expects {config.num_classes}")
    init_rng, order_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(tcfg.seed).spawn(2))
    params = init_params(config, int(init_rng.integers(2 ** 31)))
    names = [n for n in params if not n.startswith(("gen.", "static."))]
    params.set_trainable(names)
    tensors = [params[n] for n in names]
    m1 = [np.zeros(t.shape) for t in tensors]
    m2 = [np.zeros(t.shape) for t in tensors]
    b1, b2 = 0.9, 0.999
    steps_per_epoch = math.ceil(len(train) / tcfg.batch_size)
    total = max(1, tcfg.epochs * steps_per_epoch)
    step = 0
    for epoch in range(tcfg.epochs):
        loss_sum = correct = seen = 0
        for idx in iter_minibatches(len(train), tcfg.batch_size, order_rng):
            lr = tcfg.lr * 0.5 * (1 + math.cos(math.pi * step / total))
            step += 1
            try:
                logits, _ = model_forward(train.images[idx], params, "baseline")
                loss = cross_entropy(logits, train.labels[idx], tcfg.label_smoothing)
                grads = ag.backward(loss)
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}") from exc
            for i, t in enumerate(tensors):
                g = grads[t].astype(np.float64)
                m1[i] = b1 * m1[i] + (1 - b1) * g
                m2[i] = b2 * m2[i] + (1 - b2) * g * g
                mhat = m1[i] / (1 - b1 ** step)
                vhat = m2[i] / (1 - b2 ** step)
                upd = mhat / (np.sqrt(vhat) + 1e-8)
                if t.ndim >= 2 and not t.name.endswith(("pos_embed", "cls_token")):
                    upd = upd + tcfg.weight_decay * t.data
                t.data = (t.data - lr * upd).astype(t.data.dtype)
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == train.labels[idx]).sum())
            seen += len(idx)
        row = {"epoch": epoch, "loss": loss_sum / seen, "train_accuracy": correct / seen}
        log.info("epoch %d loss %.4f acc %.4f", epoch, row["loss"], row["train_accuracy"])
        if on_epoch is not None:
            on_epoch(row)
    params.set_trainable([])
    return params
