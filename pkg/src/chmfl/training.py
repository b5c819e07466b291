"""Dual-task loss, Adam and the per-patient training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import nn
from .imaging import PatientRecord
from .network import ModelParams, NetworkConfig, copy_params, forward, init_params
from .tensor import Tensor, backward, clamp_min, log, mul, tensor_sum

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainingConfig:
    w: float = 0.5
    learning_rate: float = 1e-4
    batch_size: int = 1
    max_epochs: int = 200
    plateau_patience: int = 10
    plateau_epsilon: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.w <= 1:
            raise ValueError(f"CFL weight w must lie in [0, 1], got {self.w}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size != 1:
            raise ValueError("only batch_size 1 is supported")
        if self.max_epochs < 1 or self.plateau_patience < 0:
            raise ValueError("max_epochs must be >= 1 and plateau_patience >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossTerms:
    total: Tensor
    classification: float
    segmentation: float


def cross_entropy_terms(dm_logits: Tensor, dm_target, seg_logits: Tensor, seg_target):
    """Return (classification CE, voxel-averaged segmentation CE) as scalar tensors."""
    target = np.asarray(dm_target, dtype=dm_logits.dtype).reshape(dm_logits.shape)
    q1 = clamp_min(nn.softmax(dm_logits, axis=1), PROB_FLOOR)
    ce_cls = -tensor_sum(mul(log(q1), Tensor(target, dtype=dm_logits.dtype)))

    seg_target = np.asarray(seg_target)
    if seg_target.shape != seg_logits.shape[2:]:
        raise ValueError(f"segmentation target {seg_target.shape} does not match logits {seg_logits.shape}")
    if not np.isin(seg_target, (0, 1)).all():
        raise ValueError("segmentation target must be binary")
    one_hot = np.stack([1 - seg_target, seg_target]).astype(seg_logits.dtype)[None]
    q2 = clamp_min(nn.softmax(seg_logits, axis=1), PROB_FLOOR)
    n_vox = seg_target.size
    ce_seg = -tensor_sum(mul(log(q2), Tensor(one_hot, dtype=seg_logits.dtype))) * (1.0 / n_vox)
    return ce_cls, ce_seg


def total_loss(dm_logits: Tensor, dm_target, seg_logits: Tensor, seg_target, w: float) -> Tensor:
    """(1 - w) * classification CE + w * voxel-averaged segmentation CE (natural log)."""
    return loss_terms(dm_logits, dm_target, seg_logits, seg_target, w).total


def loss_terms(dm_logits, dm_target, seg_logits, seg_target, w: float) -> LossTerms:
    if not 0 <= w <= 1:
        raise ValueError(f"CFL weight w must lie in [0, 1], got {w}")
    ce_cls, ce_seg = cross_entropy_terms(dm_logits, dm_target, seg_logits, seg_target)
    total = ce_cls * (1.0 - w) + ce_seg * w
    return LossTerms(total, ce_cls.item(), ce_seg.item())


def one_hot_label(label: int, num_classes: int = 2) -> np.ndarray:
    v = np.zeros(num_classes)
    v[int(label)] = 1.0
    return v


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParams, state: AdamState, cfg: TrainingConfig) -> None:
    """One bias-corrected Adam update using each trainable tensor's ``.grad``.

    Parameter tensors receive new data buffers; gradients are left in place.
    """
    names = [n for n, p in params.items() if p.requires_grad]
    missing = [n for n in names if params[n].grad is None]
    if missing:
        raise ValueError(f"no gradient for parameter {missing[0]!r}")
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for n in names:
        p = params[n]
        g = p.grad.astype(np.float64)
        m = state.m.get(n)
        v = state.v.get(n)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[n], state.v[n] = m, v
        step = cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        new = (p.data - step).astype(p.dtype)
        new.flags.writeable = False
        p.data = new


def zero_grads(params: ModelParams) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# training loop

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    classification_loss: float
    segmentation_loss: float


def _as_input(vol, dtype) -> Tensor:
    return Tensor(vol.voxels[None, None], dtype=dtype)


def train_step(params: ModelParams, record: PatientRecord, net_cfg: NetworkConfig,
               cfg: TrainingConfig, state: AdamState, rng: np.random.Generator, dtype=np.float32) -> LossTerms:
    zero_grads(params)
    out = forward(params, _as_input(record.pet, dtype), _as_input(record.ct, dtype), net_cfg,
                  training=True, rng=rng)
    terms = loss_terms(out.dm_logits, one_hot_label(record.dm_label, net_cfg.num_classes),
                       out.seg_logits, record.mask.voxels, cfg.w)
    backward(terms.total)
    for n, p in params.items():
        # a parameter the loss does not reach (e.g. the classifier at w = 1) gets a zero gradient
        if p.requires_grad and p.grad is None:
            p.grad = np.zeros(p.shape, dtype=p.dtype)
    adam_step(params, state, cfg)
    return terms


def train(dataset: Sequence[PatientRecord], net_cfg: NetworkConfig, cfg: TrainingConfig,
          params: Optional[ModelParams] = None, rng=None, dtype=np.float32):
    """Train with batch size 1 until ``max_epochs`` or a loss plateau.

    Returns ``(best_params, history)`` where ``best_params`` is a snapshot from
    the epoch with the lowest mean loss.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    init_rng, shuffle_rng, dropout_rng = rng.spawn(3)
    if params is None:
        params = init_params(net_cfg, init_rng, dtype=dtype)
    state = AdamState()
    history: List[EpochRecord] = []
    best_loss = np.inf
    best_params = copy_params(params)
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(dataset))
        totals = np.zeros(3)
        for i in order:
            terms = train_step(params, dataset[i], net_cfg, cfg, state, dropout_rng, dtype)
            totals += (terms.total.item(), terms.classification, terms.segmentation)
        mean = totals / len(dataset)
        rec = EpochRecord(epoch, *map(float, mean))
        history.append(rec)
        logger.info("epoch %d loss %.6f (cls %.6f, seg %.6f)", epoch, *mean)
        if rec.loss < best_loss - cfg.plateau_epsilon:
            best_loss = rec.loss
            best_params = copy_params(params)
            stale = 0
        else:
            stale += 1
        if stale >= cfg.plateau_patience:
            break
    zero_grads(best_params)
    return best_params, history


def write_history(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "loss", "classification_loss", "segmentation_loss"])
        for r in history:
            writer.writerow([r.epoch, repr(r.loss), repr(r.classification_loss), repr(r.segmentation_loss)])
