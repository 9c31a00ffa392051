"""Mutual-channel loss: channel groups, random channel masks, and the loss terms.

Feature tensors are (B, N, W, H) and post-ReLU. Each class owns a group of
channels; a group is handled as a (B, xi, W*H) slab.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError

POOLINGS = ("ccmp", "ccap")
DIVERSITIES = ("full", "v2", "off")


# ---------------------------------------------------------------- channel groups

@dataclass(frozen=True)
class ChannelAssignment:
    groups: tuple[np.ndarray, ...]
    n_channels: int

    @property
    def n_classes(self) -> int:
        return len(self.groups)

    @property
    def sizes(self) -> list[int]:
        return [len(g) for g in self.groups]

    def is_contiguous(self) -> bool:
        pos = 0
        for g in self.groups:
            if len(g) == 0 or g[0] != pos or np.any(np.diff(g) != 1):
                return False
            pos = int(g[-1]) + 1
        return pos == self.n_channels

    def ranges(self) -> list[tuple[int, int]]:
        if not self.is_contiguous():
            raise ValidationError("assignment is not a contiguous tiling")
        return [(int(g[0]), int(g[-1]) + 1) for g in self.groups]

    def group_of(self, channel: int) -> list[int]:
        return [i for i, g in enumerate(self.groups) if channel in g]

    def summary(self) -> str:
        counts: dict[int, int] = {}
        for s in self.sizes:
            counts[s] = counts.get(s, 0) + 1
        return ", ".join(f"{n} classes ×{s}" for s, n in sorted(counts.items()))

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> "ChannelAssignment":
        bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        groups = tuple(np.arange(bounds[i], bounds[i + 1]) for i in range(len(sizes)))
        return cls(groups, int(bounds[-1]))


def solve_channel_assignment(n_channels: int, n_classes: int) -> ChannelAssignment:
    """Split ``n_channels`` over ``n_classes`` with group sizes differing by at most one.

    The smaller groups go to the lowest class indices.
    """
    if n_classes < 1:
        raise ValidationError(f"need at least one class, got {n_classes}")
    if n_channels < n_classes:
        raise ValidationError(f"{n_channels} channels cannot cover {n_classes} classes")
    low = n_channels // n_classes
    n_low = n_classes * (low + 1) - n_channels
    return ChannelAssignment.from_sizes([low] * n_low + [low + 1] * (n_classes - n_low))


def uniform_assignment(n_classes: int, xi: int) -> ChannelAssignment:
    if n_classes < 1 or xi < 1:
        raise ValidationError(f"need n_classes >= 1 and xi >= 1, got {n_classes}, {xi}")
    return ChannelAssignment.from_sizes([xi] * n_classes)


def assignment_for(xi: int | str, n_classes: int, n_channels: int | None = None) -> ChannelAssignment:
    """Resolve a config ``xi`` (an int, or ``"table2"`` with an explicit channel count)."""
    if xi == "table2":
        if n_channels is None:
            raise ValidationError('xi="table2" needs an explicit channel count')
        return solve_channel_assignment(n_channels, n_classes)
    return uniform_assignment(n_classes, int(xi))


# ---------------------------------------------------------------- CWA masks

@dataclass(frozen=True)
class CwaMask:
    bits: np.ndarray
    seed: int | None = None


class MaskSampler:
    """Seeded source of CWA masks; ``draws`` counts every sampling call."""

    def __init__(self, seed: int):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.draws = 0

    def sample(self, xi: int, batch: int) -> np.ndarray:
        """(batch, xi) 0/1 array with floor(xi/2) zeros per row at uniform positions."""
        if xi < 1:
            raise ValidationError(f"xi must be >= 1, got {xi}")
        self.draws += 1
        ranks = self.rng.random((batch, xi)).argsort(axis=1).argsort(axis=1)
        return (ranks >= xi // 2).astype(np.float64)

    def sample_groups(self, assignment: ChannelAssignment, batch: int) -> list[np.ndarray]:
        return [self.sample(len(g), batch) for g in assignment.groups]


def sample_cwa_mask(xi: int, rng: np.random.Generator) -> CwaMask:
    if xi < 1:
        raise ValidationError(f"xi must be >= 1, got {xi}")
    bits = np.ones(xi)
    bits[rng.permutation(xi)[: xi // 2]] = 0.0
    return CwaMask(bits)


# ---------------------------------------------------------------- config

@dataclass
class McLossConfig:
    mu: float = 1.5
    lam: float = 10.0
    xi: int | str = 3
    pooling: str = "ccmp"
    diversity: str = "full"
    cwa: bool = True
    training_mode: bool = True

    def __post_init__(self):
        if self.mu < 0 or self.lam < 0:
            raise ValidationError(f"mu and lambda must be non-negative, got {self.mu}, {self.lam}")
        if self.pooling not in POOLINGS:
            raise ValidationError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.diversity not in DIVERSITIES:
            raise ValidationError(f"diversity must be one of {DIVERSITIES}, got {self.diversity!r}")
        if not (self.xi == "table2" or (isinstance(self.xi, int) and self.xi >= 1)):
            raise ValidationError(f'xi must be a positive int or "table2", got {self.xi!r}')

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d.pop("training_mode")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "McLossConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {"mu", "lam", "xi", "pooling", "diversity", "cwa", "training_mode"}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown loss config keys: {sorted(extra)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "McLossConfig":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------- pooling primitives

def ccmp(group) -> Tensor:
    """Cross-channel max pooling over the channel axis (second to last)."""
    return ad.reduce_max(group, axis=-2)


def ccap(group) -> Tensor:
    """Cross-channel average pooling over the channel axis (second to last)."""
    return ad.reduce_mean(group, axis=-2)


def gap(v) -> Tensor:
    """Spatial mean over the last axis."""
    return ad.reduce_mean(v, axis=-1)


def spatial_softmax(channel) -> Tensor:
    return ad.softmax(channel, axis=-1)


def g_score(group, mask=None, pooling: str = "ccmp") -> Tensor:
    """GAP(pool(diag(mask) . group)) for a (..., xi, WH) group and (..., xi) mask."""
    group = ad.as_tensor(group)
    if mask is not None:
        bits = mask.bits if isinstance(mask, CwaMask) else np.asarray(mask, dtype=np.float64)
        if bits.shape[-1] != group.shape[-2]:
            raise ValidationError(f"mask length {bits.shape[-1]} != group size {group.shape[-2]}")
        group = group * bits[..., None]
    pooled = ccmp(group) if pooling == "ccmp" else ccap(group)
    return gap(pooled)


def diversity_score_h(group) -> Tensor:
    """Sum over positions of the cross-channel max of per-channel spatial softmaxes.

    Lies in [1, xi]: 1 for identical channels, xi for one-hot channels peaking
    at distinct positions.
    """
    return ad.reduce_sum(ccmp(spatial_softmax(group)), axis=-1)


# ---------------------------------------------------------------- losses

def _flat(features) -> Tensor:
    features = ad.as_tensor(features)
    if features.ndim != 4:
        raise ValidationError(f"features must be (B, N, W, H), got {features.shape}")
    b, n, w, h = features.shape
    return ad.reshape(features, (b, n, w * h))


def _groups(flat: Tensor, assignment: ChannelAssignment) -> list[Tensor]:
    if flat.shape[1] != assignment.n_channels:
        raise ValidationError(
            f"features have {flat.shape[1]} channels, assignment covers {assignment.n_channels}")
    return [ad.take(flat, g, axis=1) for g in assignment.groups]


def _check_labels(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValidationError(f"labels must lie in [0, {n_classes})")
    return labels


def class_scores(features, assignment: ChannelAssignment, masks=None, pooling: str = "ccmp") -> Tensor:
    """(B, c) matrix of per-group g scores."""
    slabs = _groups(_flat(features), assignment)
    if masks is None:
        masks = [None] * len(slabs)
    return ad.stack([g_score(s, m, pooling) for s, m in zip(slabs, masks)], axis=1)


def discriminality_loss(features, labels, assignment: ChannelAssignment, masks=None,
                        config: McLossConfig | None = None) -> Tensor:
    """Cross-entropy of the labels against softmax over the per-class g scores.

    ``masks`` is one (B, xi_i) array per group, or None for unmasked groups.
    """
    config = config or McLossConfig()
    labels = _check_labels(labels, assignment.n_classes)
    if not config.cwa:
        masks = None
    scores = class_scores(features, assignment, masks, config.pooling)
    return ad.cross_entropy(scores, labels)


def diversity_scores(features, assignment: ChannelAssignment) -> Tensor:
    """(B, c) matrix of h over each group."""
    slabs = _groups(_flat(features), assignment)
    return ad.stack([diversity_score_h(s) for s in slabs], axis=1)


def diversity_loss(features, assignment: ChannelAssignment, config: McLossConfig | None = None,
                   labels=None) -> Tensor:
    config = config or McLossConfig()
    if config.diversity == "off":
        return Tensor(0.0)
    hs = diversity_scores(features, assignment)
    if config.diversity == "full":
        return ad.reduce_mean(hs)
    if labels is None:
        raise ValidationError("the v2 diversity variant needs labels")
    labels = _check_labels(labels, assignment.n_classes)
    return ad.reduce_mean(ad.pick(hs, labels))


class McTerms(NamedTuple):
    total: Tensor
    l_dis: Tensor
    l_div: Tensor


class LossBreakdown(NamedTuple):
    total: Tensor
    l_ce: Tensor
    l_mc: Tensor | None
    l_dis: Tensor | None
    l_div: Tensor | None

    def values(self) -> dict[str, float]:
        def f(t):
            return float("nan") if t is None else t.item()
        return {"l_ce": f(self.l_ce), "l_dis": f(self.l_dis), "l_div": f(self.l_div),
                "l_total": f(self.total)}


class _Counter:
    def __init__(self):
        self.count = 0


mc_evaluations = _Counter()


def mc_loss(features, labels, assignment: ChannelAssignment, masks=None,
            config: McLossConfig | None = None) -> McTerms:
    config = config or McLossConfig()
    if not config.training_mode:
        raise ValidationError("the mutual-channel branch only runs in training mode")
    mc_evaluations.count += 1
    l_dis = discriminality_loss(features, labels, assignment, masks, config)
    l_div = diversity_loss(features, assignment, config, labels)
    total = l_dis - config.lam * l_div if config.diversity != "off" else l_dis
    return McTerms(total, l_dis, l_div)


def total_loss(logits, features, labels, assignment: ChannelAssignment, masks=None,
               config: McLossConfig | None = None) -> LossBreakdown:
    """CE on the classifier logits plus mu times the mutual-channel loss (training only)."""
    config = config or McLossConfig()
    l_ce = ad.cross_entropy(logits, labels)
    if not config.training_mode:
        return LossBreakdown(l_ce, l_ce, None, None, None)
    terms = mc_loss(features, labels, assignment, masks, config)
    return LossBreakdown(l_ce + config.mu * terms.total, l_ce, terms.total, terms.l_dis, terms.l_div)
