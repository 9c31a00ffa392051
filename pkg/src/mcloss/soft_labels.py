"""Learned per-sample channel weights and the label losses built on them.

A squeeze-excitation head maps the spatially pooled features of a sample to a
weight in (0, 1) per channel. Samples of one class in a batch stack into a
(J_i, N) matrix; the intra-class term sums the per-channel max of each such
matrix (averaged over classes) and the inter-class term is minus the sum of
the per-channel max over every class.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import loss as mc
from .autodiff import Tensor
from .errors import ValidationError

log = logging.getLogger(__name__)


class SoftLabelHead(NamedTuple):
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def n_channels(self) -> int:
        return self.w1.shape[0]


def se_forward(features, head: SoftLabelHead) -> Tensor:
    """(B, N) weights: sigmoid(relu(gap(F) @ w1 + b1) @ w2 + b2)."""
    features = ad.as_tensor(features)
    if features.ndim != 4:
        raise ValidationError(f"features must be (B, N, W, H), got {features.shape}")
    if features.shape[1] != head.n_channels:
        raise ValidationError(f"head expects {head.n_channels} channels, features have {features.shape[1]}")
    pooled = ad.reduce_mean(features, axis=(2, 3))
    hidden = ad.relu(pooled @ head.w1 + head.b1)
    return ad.sigmoid(hidden @ head.w2 + head.b2)


def class_matrices(weights: Tensor, labels) -> dict[int, Tensor]:
    """Group the rows of ``weights`` by label: class -> (J_i, N) tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValidationError("empty batch")
    return {int(c): ad.take(weights, np.flatnonzero(labels == c), axis=0) for c in np.unique(labels)}


def l_intra(matrices: dict[int, Tensor]) -> Tensor:
    if not matrices:
        raise ValidationError("empty batch")
    per_class = [ad.reduce_sum(ad.reduce_max(m, axis=0)) for _, m in sorted(matrices.items())]
    return ad.reduce_mean(ad.stack(per_class))


def l_inter(matrices: dict[int, Tensor]) -> Tensor:
    if not matrices:
        raise ValidationError("empty batch")
    class_max = ad.stack([ad.reduce_max(m, axis=0) for _, m in sorted(matrices.items())], axis=0)
    return -ad.reduce_sum(ad.reduce_max(class_max, axis=0))


def soft_assignment(class_mean_weights: np.ndarray, sizes) -> mc.ChannelAssignment:
    """Per class, the top-``sizes[i]`` channels by mean weight (ties to the lower index).

    Groups may overlap and leave channels unused.
    """
    class_mean_weights = np.asarray(class_mean_weights)
    groups = []
    for i, k in enumerate(sizes):
        order = np.lexsort((np.arange(class_mean_weights.shape[1]), -class_mean_weights[i]))
        groups.append(np.sort(order[:k]))
    return mc.ChannelAssignment(tuple(groups), class_mean_weights.shape[1])


class SoftTerms(NamedTuple):
    total: Tensor
    l_ce: Tensor
    l_mc: Tensor
    l_dis: Tensor
    l_div: Tensor
    l_intra: Tensor
    l_inter: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in
                ("l_ce", "l_dis", "l_div", "l_intra", "l_inter")} | {"l_total": self.total.item()}


def total_loss_soft(logits, features, labels, weights: Tensor, soft_groups: mc.ChannelAssignment,
                    masks=None, config: mc.McLossConfig | None = None,
                    intra_sign: float = 1.0) -> SoftTerms:
    """CE + mu * MC over learned groups + intra + inter label terms, all at unit weight.

    ``intra_sign=-1`` flips the intra-class term for experimentation.
    """
    config = config or mc.McLossConfig(mu=0.5)
    br = mc.total_loss(logits, features, labels, soft_groups, masks, config)
    mats = class_matrices(weights, labels)
    li, le = l_intra(mats), l_inter(mats)
    total = br.total + intra_sign * li + le
    return SoftTerms(total, br.l_ce, br.l_mc, br.l_dis, br.l_div, li, le)


@dataclass
class ChannelRanking:
    per_class: dict[int, list[tuple[int, float]]]

    def top(self, cls: int, k: int | None = None) -> list[int]:
        ranked = [ch for ch, _ in self.per_class[cls]]
        return ranked if k is None else ranked[:k]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class_id", "rank", "channel_index", "mean_weight"])
            for cls in sorted(self.per_class):
                for rank, (ch, mean) in enumerate(self.per_class[cls]):
                    w.writerow([cls, rank, ch, repr(float(mean))])


def rank_channels(weights: np.ndarray, labels, n_classes: int, k: int) -> ChannelRanking:
    """Rank channels per class by mean weight over that class's samples."""
    weights = np.asarray(weights)
    labels = np.asarray(labels)
    if not 1 <= k <= weights.shape[1]:
        raise ValidationError(f"k must lie in [1, {weights.shape[1]}], got {k}")
    out = {}
    for c in range(n_classes):
        rows = weights[labels == c]
        if rows.shape[0] == 0:
            log.warning("class %d has no samples; omitted from the channel ranking", c)
            continue
        # fsum is exactly rounded, so the mean does not depend on sample order
        mean = np.array([math.fsum(col) for col in rows.T]) / rows.shape[0]
        order = np.lexsort((np.arange(mean.size), -mean))[:k]
        out[c] = [(int(i), float(mean[i])) for i in order]
    return ChannelRanking(out)


def top_channels_report(model, images, labels, k: int, batch_size: int = 64) -> ChannelRanking:
    """Channel ranking from a trained model's soft-label head over a dataset."""
    weights = []
    for s in range(0, len(labels), batch_size):
        feats, _ = model.forward(images[s:s + batch_size], train=False)
        weights.append(model.se_weights(feats).data)
    return rank_channels(np.concatenate(weights), labels, model.cfg.n_classes, k)
