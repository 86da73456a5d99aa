"""Losses, deep-supervision wiring and the clip-level label vote."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .attention import energy_distribution
from .errors import ContractError, DimensionError
from .tensor import Tensor

LOG_EPS = 1e-12


def class_probs(h: Tensor, w_prob: Tensor) -> Tensor:
    """softmax(W_prob h) over classes; ``h`` may carry leading axes."""
    return tn.softmax(tn.linear(h, w_prob), axis=-1)


def cross_entropy(probs: Tensor, label) -> Tensor:
    """-log(p[label] + 1e-12), one value per row of ``probs``.

    Clamped at zero: with p[label] rounding to 1 the guard would otherwise
    give about -1e-12.
    """
    label = np.asarray(label, dtype=np.intp)
    n_classes = probs.shape[-1]
    if label.size and (label.min() < 0 or label.max() >= n_classes):
        raise ContractError(f"label out of range for {n_classes} classes: {label}")
    return tn.relu(tn.neg(tn.log(tn.shift(tn.pick(probs, label), LOG_EPS))))


def attention_regularizer(cube: Tensor, att: Tensor) -> Tensor:
    """Squared distance between the cube's energy distribution and the
    (detached) attention map, summed over locations.

    Gradient reaches the cube only; the attention is a fixed target here.
    """
    if cube.shape[:-1] != att.shape:
        raise DimensionError(f"attention_regularizer: cube {cube.shape} vs attention {att.shape}")
    diff = tn.sub(energy_distribution(cube), tn.detach(att))
    return tn.sum_axis(tn.square(diff), axis=-1)


def weight_decay(params: Sequence[Tensor]) -> Tensor:
    params = list(params)
    if not params:
        return Tensor(0.0)
    return tn.add_n([tn.sum_axis(tn.square(p)) for p in params])


@dataclass
class DeepSupervisionLoss:
    lam: float
    zeta: float
    ce_lstm: Tensor
    ce_3d: Tensor
    att_reg: Tensor
    wd: Tensor
    total: Tensor

    def components(self) -> dict:
        return {
            "ce_lstm": self.ce_lstm.item(),
            "ce_3d": self.ce_3d.item(),
            "att_reg": self.att_reg.item(),
            "wd": self.wd.item(),
            "total": self.total.item(),
        }


def _per_clip_mean(x: Tensor) -> Tensor:
    """Sum over time (axis 1 if batched) then average over clips."""
    if x.ndim == 0:
        return x
    if x.ndim == 1:
        return tn.sum_axis(x)
    return tn.mean_axis(tn.sum_axis(x, axis=tuple(range(1, x.ndim))))


def total_loss(lstm_probs: Tensor, labels, head3d_probs: Tensor | None, attmaps: Tensor | None,
               reg_cubes: Tensor | None, params: Sequence[Tensor], lam: float, zeta: float) -> DeepSupervisionLoss:
    """Combine both cross-entropy heads, the attention regularizer and decay.

    ``lstm_probs`` / ``head3d_probs`` are ``(batch, T, C)`` (or ``(T, C)``),
    ``attmaps`` ``(batch, T, K*K)``, ``reg_cubes`` ``(batch, T, K*K, N)``.
    Time is summed, clips are averaged.  Missing heads contribute zero.
    """
    labels = np.asarray(labels, dtype=np.intp)
    steps = lstm_probs.shape[:-1]
    if labels.ndim == 0:
        per_step = np.full(steps, int(labels))
    else:
        if steps[0] != labels.shape[0]:
            raise DimensionError(f"total_loss: {labels.shape[0]} labels for probs {lstm_probs.shape}")
        per_step = np.broadcast_to(labels.reshape((-1,) + (1,) * (len(steps) - 1)), steps)
    ce_lstm = _per_clip_mean(cross_entropy(lstm_probs, per_step))
    if head3d_probs is not None:
        if head3d_probs.shape != lstm_probs.shape:
            raise DimensionError(f"total_loss: head shapes {head3d_probs.shape} vs {lstm_probs.shape}")
        ce_3d = _per_clip_mean(cross_entropy(head3d_probs, per_step))
    else:
        ce_3d = Tensor(0.0)
    if attmaps is not None and reg_cubes is not None:
        if attmaps.shape[:-1] != steps:
            raise DimensionError(f"total_loss: attention maps {attmaps.shape} vs steps {steps}")
        att_reg = _per_clip_mean(attention_regularizer(reg_cubes, attmaps))
    else:
        att_reg = Tensor(0.0)
    wd = weight_decay(params)
    total = tn.add_n([ce_lstm, ce_3d, tn.scale(att_reg, lam), tn.scale(wd, zeta)])
    return DeepSupervisionLoss(lam, zeta, ce_lstm, ce_3d, att_reg, wd, total)


@dataclass
class ClipVote:
    probs: np.ndarray
    frame_labels: np.ndarray
    label: int


def clip_vote(probs, l1: int, l2: int) -> ClipVote:
    """Majority vote of per-step argmax labels over steps ``[L1-L2, L1)``.

    Ties go to the class with the higher mean probability over the window,
    then to the lowest class index.
    """
    probs = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    if l2 > l1:
        raise ContractError(f"prediction window L2={l2} exceeds clip length L1={l1}")
    if l2 < 1 or l1 > probs.shape[0]:
        raise ContractError(f"clip_vote needs 1 <= L2 <= L1 <= steps, got L2={l2}, L1={l1}, steps={probs.shape[0]}")
    window = probs[l1 - l2:l1]
    frame_labels = window.argmax(axis=1)
    counts = np.bincount(frame_labels, minlength=probs.shape[1])
    tied = np.flatnonzero(counts == counts.max())
    if len(tied) > 1:
        means = window[:, tied].mean(axis=0)
        tied = tied[means == means.max()]
    return ClipVote(window, frame_labels, int(tied[0]))


def majority_label(labels: Sequence[int], mean_probs: np.ndarray | None = None) -> int:
    """Video-level vote over clip labels, same tie rules as :func:`clip_vote`."""
    labels = np.asarray(labels, dtype=np.intp)
    n = int(labels.max()) + 1 if mean_probs is None else len(mean_probs)
    counts = np.bincount(labels, minlength=n)
    tied = np.flatnonzero(counts == counts.max())
    if len(tied) > 1 and mean_probs is not None:
        m = np.asarray(mean_probs)[tied]
        tied = tied[m == m.max()]
    return int(tied[0])
