"""Grad-CAM style per-channel maps and a within-group overlap statistic.

A channel's map is ``relu(alpha * A)`` where ``A`` is the channel's activation
and ``alpha`` the spatial mean of the gradient of a class logit with respect
to it, min-max scaled to [0, 1]. Maps of channels in the same group are then
compared by their summed elementwise minimum after scaling each to unit mass:
1 means the channels look at the same place, 0 at disjoint places.
"""

from __future__ import annotations

import itertools
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ValidationError
from .loss import ChannelAssignment
from .model import TinyCnn


def _cam(acts: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """(K, W, H) activations and gradients -> (K, W, H) maps in [0, 1]."""
    alpha = grads.mean(axis=(1, 2), keepdims=True)
    raw = np.maximum(alpha * acts, 0.0)
    lo = raw.min(axis=(1, 2), keepdims=True)
    span = raw.max(axis=(1, 2), keepdims=True) - lo
    return np.where(span > 0, (raw - lo) / np.where(span > 0, span, 1.0), 0.0)


def _feature_grads(model: TinyCnn, image: np.ndarray, class_index: int | None):
    feats, logits = model.forward(image[None], train=False)
    # re-root the head on a leaf copy of F so the gradient stops there
    leaf = ad.Tensor(feats.data, requires_grad=True)
    flat = ad.reshape(leaf, (1, -1))
    logits = flat @ model.params["head.weight"] + model.params["head.bias"]
    cls = int(logits.data[0].argmax()) if class_index is None else int(class_index)
    if not 0 <= cls < logits.shape[1]:
        raise ValidationError(f"class index {cls} outside [0, {logits.shape[1]})")
    ad.backward(ad.pick(logits, [cls]).sum())
    return feats.data[0], leaf.grad[0], cls


def channel_heatmaps(model: TinyCnn, sample: np.ndarray, channels, class_index: int | None = None) -> np.ndarray:
    """(len(channels), W, H) maps for one (1, S, S) image, against ``class_index`` (default: predicted)."""
    channels = np.asarray(channels, dtype=np.int64).reshape(-1)
    n = model.cfg.n_channels
    if channels.size == 0 or channels.min() < 0 or channels.max() >= n:
        raise ValidationError(f"channel indices must lie in [0, {n})")
    acts, grads, _ = _feature_grads(model, np.asarray(sample, dtype=np.float64), class_index)
    return _cam(acts[channels], grads[channels])


def channel_heatmap(model: TinyCnn, sample: np.ndarray, channel_index: int,
                    class_index: int | None = None) -> np.ndarray:
    """Normalised (W, H) map of one channel; all zeros when the gradient vanishes."""
    return channel_heatmaps(model, sample, [channel_index], class_index)[0]


def overlap_score(maps, atol: float = 1e-9) -> float:
    """Mean over pairs of sum(min(a, b)) for maps that each sum to one."""
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if len(maps) < 2:
        raise ValidationError("overlap needs at least two maps")
    for i, m in enumerate(maps):
        if m.shape != maps[0].shape:
            raise ValidationError("maps must share a shape")
        if np.any(m < -atol) or abs(m.sum() - 1.0) > atol:
            raise ValidationError(f"map {i} is not a non-negative map summing to 1 (sum={m.sum():.6g})")
    pairs = list(itertools.combinations(maps, 2))
    return float(np.mean([np.minimum(a, b).sum() for a, b in pairs]))


def sum_normalise(m: np.ndarray) -> np.ndarray:
    total = m.sum()
    if total <= 0:
        raise ValidationError("cannot normalise an all-zero map")
    return m / total


def group_overlap(model: TinyCnn, images: np.ndarray, labels, assignment: ChannelAssignment) -> float:
    """Mean within-group overlap of the true class's channel maps over a set of images.

    Channels whose map is identically zero carry no location and are left
    out; samples with fewer than two informative maps are skipped.
    """
    scores = []
    for image, y in zip(images, np.asarray(labels)):
        maps = channel_heatmaps(model, image, assignment.groups[int(y)], class_index=int(y))
        live = [sum_normalise(m) for m in maps if m.sum() > 0]
        if len(live) >= 2:
            scores.append(overlap_score(live))
    if not scores:
        raise ValidationError("no sample produced two informative channel maps")
    return float(np.mean(scores))


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Binary greyscale PGM (P5, maxval 255) of a map with values in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValidationError(f"PGM needs a 2-D map, got shape {image.shape}")
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise ValidationError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pixels = np.frombuffer(parts[4][: w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise ValidationError(f"{path}: expected {w * h} pixels, got {pixels.size}")
    return pixels.reshape(h, w) / maxval


def export_group_heatmaps(model: TinyCnn, images: np.ndarray, labels, assignment: ChannelAssignment,
                          out_dir: str | Path, upscale: int = 4) -> list[Path]:
    """Write the input and each true-group channel map as PGM files; returns the paths written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    block = np.ones((upscale, upscale))
    for i, (image, y) in enumerate(zip(images, np.asarray(labels))):
        y = int(y)
        p = out_dir / f"sample{i:03d}_class{y}_input.pgm"
        write_pgm(p, image[0])
        written.append(p)
        group = assignment.groups[y]
        maps = channel_heatmaps(model, image, group, class_index=y)
        for ch, m in zip(group, maps):
            p = out_dir / f"sample{i:03d}_class{y}_ch{int(ch):03d}.pgm"
            write_pgm(p, np.kron(m, block))
            written.append(p)
    return written
