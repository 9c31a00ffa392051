"""Finite-difference checks of every differentiable loss entry point."""

from __future__ import annotations

import time
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from . import loss as mc
from . import soft_labels as sl
from .autodiff import Tensor

TOLERANCE = 1e-4


class GradResult(NamedTuple):
    name: str
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _spread(rng: np.random.Generator, shape, scale: float = 1.0) -> np.ndarray:
    """Distinct non-negative values, at least 1/size apart, so no max sits on a tie."""
    n = int(np.prod(shape))
    return ((rng.permutation(n) + rng.uniform(0.2, 0.8, n)) / n * scale).reshape(shape)


def _head(rng, n: int, hidden: int) -> sl.SoftLabelHead:
    def t(*shape):
        return Tensor(rng.normal(0, 0.8, shape), requires_grad=True)
    return sl.SoftLabelHead(t(n, hidden), t(hidden), t(hidden, n), t(n))


def gradient_suite(seed: int = 0, step: float = 1e-5) -> list[GradResult]:
    rng = np.random.default_rng(seed)
    b, c, xi, w, h = 3, 3, 3, 3, 3
    n = c * xi
    assignment = mc.uniform_assignment(c, xi)
    labels = rng.integers(0, c, size=b)
    labels[:2] = [0, 1]
    masks = mc.MaskSampler(seed).sample_groups(assignment, b)
    feats = _spread(rng, (b, n, w, h), scale=3.0)
    group = _spread(rng, (xi, w * h), scale=3.0)
    head_w = rng.normal(0, 0.3, (n * w * h, c))
    cfg_full = mc.McLossConfig()
    cfg_v2 = mc.McLossConfig(diversity="v2")
    se = _head(rng, n, 3)
    weights = _spread(rng, (b + 1, n))
    wlabels = np.array([0, 1, 1, 2])[: b + 1]
    probe = rng.normal(size=n)

    def logits_of(t):
        return ad.reshape(t, (t.shape[0], -1)) @ head_w

    def fd(fn: Callable[[Tensor], Tensor], x) -> float:
        return ad.finite_difference_check(fn, x, step=step, tie_break=0)

    def se_out(t):
        return ad.reduce_sum(sl.se_forward(t, se) * probe)

    def soft(t):
        wts = sl.se_forward(t, se)
        return sl.total_loss_soft(logits_of(t), t, labels, wts, assignment, masks,
                                  mc.McLossConfig(mu=0.5)).total

    def soft_params():
        feats_t = Tensor(feats)
        wts = sl.se_forward(feats_t, se)
        return sl.total_loss_soft(logits_of(feats_t), feats_t, labels, wts, assignment, masks,
                                  mc.McLossConfig(mu=0.5)).total

    cases: list[tuple[str, Callable[[], float]]] = [
        ("g_score", lambda: fd(lambda t: mc.g_score(t, masks[0][0]), group)),
        ("discriminality_loss", lambda: fd(lambda t: mc.discriminality_loss(t, labels, assignment, masks), feats)),
        ("diversity_score_h", lambda: fd(mc.diversity_score_h, group)),
        ("diversity_loss_full", lambda: fd(lambda t: mc.diversity_loss(t, assignment, cfg_full), feats)),
        ("diversity_loss_v2", lambda: fd(lambda t: mc.diversity_loss(t, assignment, cfg_v2, labels), feats)),
        ("mc_loss", lambda: fd(lambda t: mc.mc_loss(t, labels, assignment, masks, cfg_full).total, feats)),
        ("total_loss", lambda: fd(lambda t: mc.total_loss(logits_of(t), t, labels, assignment, masks,
                                                          cfg_full).total, feats)),
        ("se_forward", lambda: max(fd(se_out, feats),
                                   ad.parameters_check(lambda: se_out(Tensor(feats)), se, step))),
        ("l_intra", lambda: fd(lambda t: sl.l_intra(sl.class_matrices(t, wlabels)), weights)),
        ("l_inter", lambda: fd(lambda t: sl.l_inter(sl.class_matrices(t, wlabels)), weights)),
        ("total_loss_soft", lambda: max(fd(soft, feats), ad.parameters_check(soft_params, se, step))),
    ]
    return [GradResult(name, float(run())) for name, run in cases]


def run_suite(seed: int = 0) -> tuple[list[GradResult], float]:
    t0 = time.perf_counter()
    results = gradient_suite(seed)
    return results, time.perf_counter() - t0
