"""SGD training with the step schedule, per-epoch metrics, and run directories."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import loss as mc
from . import soft_labels as sl
from .data import Dataset, SyntheticPartsSpec
from .errors import NumericalError, ValidationError
from .model import TinyCnn, TinyCnnConfig, build_tiny_cnn

log = logging.getLogger(__name__)

METHODS = ("ce", "mc", "soft")
METRIC_FIELDS = ("epoch", "split", "acc", "l_ce", "l_dis", "l_div", "l_total")


@dataclass
class TrainConfig:
    method: str = "mc"
    lr0: float = 0.1
    schedule: tuple[int, ...] = (30, 45)
    epochs: int = 60
    weight_decay: float = 5e-4
    batch_size: int = 8
    seed: int = 0
    loss: mc.McLossConfig = field(default_factory=mc.McLossConfig)
    widths: tuple[int, ...] = (8, 16)
    strides: tuple[int, ...] = (1, 2)
    n_channels: int | None = None
    batch_norm: bool = True
    final_batch_norm: bool = True
    se_reduction: int = 4
    intra_sign: float = 1.0
    data: SyntheticPartsSpec = field(default_factory=SyntheticPartsSpec)

    def __post_init__(self):
        self.schedule = tuple(self.schedule)
        self.widths = tuple(self.widths)
        self.strides = tuple(self.strides)
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.lr0 <= 0:
            raise ValidationError(f"lr0 must be positive, got {self.lr0}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive")
        if any(b <= a for a, b in zip(self.schedule, self.schedule[1:])):
            raise ValidationError(f"schedule must be strictly increasing, got {list(self.schedule)}")
        if any(not 0 <= s < self.epochs for s in self.schedule):
            raise ValidationError(f"schedule epochs must lie in [0, {self.epochs})")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be non-negative")

    @property
    def channels(self) -> int:
        if self.n_channels is not None:
            return self.n_channels
        if self.loss.xi == "table2":
            raise ValidationError('xi="table2" needs n_channels in the config')
        return self.data.n_classes * int(self.loss.xi)

    def assignment(self) -> mc.ChannelAssignment:
        return mc.assignment_for(self.loss.xi, self.data.n_classes, self.channels)

    def model_config(self) -> TinyCnnConfig:
        return TinyCnnConfig(image_size=self.data.image_size, widths=self.widths, strides=self.strides,
                             n_channels=self.channels, n_classes=self.data.n_classes,
                             batch_norm=self.batch_norm, final_batch_norm=self.final_batch_norm,
                             se_reduction=self.se_reduction if self.method == "soft" else None)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        d["schedule"] = list(self.schedule)
        d["widths"] = list(self.widths)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown config keys: {sorted(extra)}")
        if "loss" in d:
            d["loss"] = mc.McLossConfig.from_dict(d["loss"])
        if "data" in d:
            d["data"] = SyntheticPartsSpec(**d["data"])
        return cls(**d)

    @classmethod
    def from_json_file(cls, path: str | Path) -> "TrainConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            return cls.from_dict(json.loads(text))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ValidationError(f"invalid config {path}: {exc}") from exc

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def seed_from_env(cfg: TrainConfig) -> TrainConfig:
    """Apply the ``MC_SEED`` override, if set."""
    raw = os.environ.get("MC_SEED")
    if raw is None:
        return cfg
    try:
        seed = int(raw)
    except ValueError as exc:
        raise ValidationError(f"MC_SEED must be an integer, got {raw!r}") from exc
    d = cfg.to_dict()
    d["seed"] = seed
    return TrainConfig.from_dict(d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    drops = sum(1 for s in cfg.schedule if s <= epoch)
    return cfg.lr0 / 10 ** drops


def sgd_step(params, lr: float, weight_decay: float) -> None:
    """In place: p <- p - lr * (grad + weight_decay * p). ``params`` are (name, Tensor) pairs."""
    for name, p in params:
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise ValidationError(f"{name}: gradient shape {p.grad.shape} != parameter shape {p.data.shape}")
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in parameter {name}")
    for _, p in params:
        if p.grad is not None:
            p.data = p.data - lr * (p.grad + weight_decay * p.data)


# ---------------------------------------------------------------- metrics

@dataclass
class RunMetrics:
    seed: int
    rows: list[dict] = field(default_factory=list)
    wall_time: float = 0.0

    def add(self, epoch: int, split: str, acc: float, losses: dict[str, float]) -> None:
        for k, v in losses.items():
            if not math.isnan(v) and not math.isfinite(v):
                raise NumericalError(f"non-finite {k} at epoch {epoch} ({split})")
        self.rows.append({"epoch": epoch, "split": split, "acc": acc, **losses})

    def final(self, split: str = "test") -> dict:
        return [r for r in self.rows if r["split"] == split][-1]

    def curve(self, split: str, key: str = "acc") -> list[float]:
        return [r[key] for r in self.rows if r["split"] == split]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in self.rows:
            w.writerow([r["epoch"], r["split"]] + [_fmt(r.get(k, float("nan"))) for k in METRIC_FIELDS[2:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, seed: int = 0) -> "RunMetrics":
        m = cls(seed)
        for r in csv.DictReader(io.StringIO(text)):
            m.rows.append({"epoch": int(r["epoch"]), "split": r["split"],
                           **{k: float(r[k]) if r[k] else float("nan") for k in METRIC_FIELDS[2:]}})
        return m


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


# ---------------------------------------------------------------- evaluation

def predict(model: TinyCnn, images: np.ndarray, batch_size: int = 100) -> np.ndarray:
    """Eval-mode logits; never touches the loss branch or a mask sampler."""
    out = []
    for s in range(0, images.shape[0], batch_size):
        _, logits = model.forward(images[s:s + batch_size], train=False)
        out.append(logits.data)
    return np.concatenate(out)


def evaluate(model: TinyCnn, ds: Dataset, batch_size: int = 100) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) in eval mode."""
    logits = predict(model, ds.images, batch_size)
    acc = float((logits.argmax(axis=1) == ds.labels).mean())
    ce = ad.cross_entropy(logits, ds.labels).item()
    return acc, ce


def class_mean_weights(model: TinyCnn, ds: Dataset, batch_size: int = 100) -> np.ndarray:
    w = []
    for s in range(0, len(ds), batch_size):
        feats, _ = model.forward(ds.images[s:s + batch_size], train=False)
        w.append(model.se_weights(feats).data)
    w = np.concatenate(w)
    return np.stack([w[ds.labels == c].mean(axis=0) if np.any(ds.labels == c) else np.zeros(w.shape[1])
                     for c in range(model.cfg.n_classes)])


# ---------------------------------------------------------------- training

@dataclass
class RunResult:
    config: TrainConfig
    metrics: RunMetrics
    model: TinyCnn
    best: TinyCnn
    mask_draws: int
    soft_groups: mc.ChannelAssignment | None = None


def _copy(model: TinyCnn) -> TinyCnn:
    clone = build_tiny_cnn(model.cfg, seed=0)
    for k, v in model.params.items():
        clone.params[k].data = v.data.copy()
    for k, v in model.buffers.items():
        clone.buffers[k] = v.copy()
    return clone


def train(cfg: TrainConfig, train_ds: Dataset, test_ds: Dataset) -> RunResult:
    """Run SGD for ``cfg.epochs`` epochs; deterministic in ``cfg.seed``."""
    t0 = time.perf_counter()
    n_classes = cfg.data.n_classes
    if train_ds.labels.max() >= n_classes or test_ds.labels.max() >= n_classes:
        raise ValidationError("dataset labels exceed the configured class count")
    model = build_tiny_cnn(cfg.model_config(), cfg.seed)
    assignment = cfg.assignment()
    sizes = assignment.sizes
    if assignment.n_channels != model.cfg.n_channels:
        raise ValidationError(f"assignment covers {assignment.n_channels} channels, model has {model.cfg.n_channels}")
    order_rng = np.random.default_rng([cfg.seed, 1])
    sampler = mc.MaskSampler(np.random.SeedSequence([cfg.seed, 2]).generate_state(1)[0].item())
    log.info("run %s: method=%s seed=%d mask_seed=%d", cfg.digest(), cfg.method, cfg.seed, sampler.seed)
    loss_cfg = mc.McLossConfig.from_dict(cfg.loss.to_dict())
    metrics = RunMetrics(cfg.seed)
    best, best_acc = _copy(model), -1.0
    params = model.trainable()
    n = len(train_ds)

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        if cfg.method == "soft":
            assignment = sl.soft_assignment(class_mean_weights(model, train_ds), sizes)
        perm = order_rng.permutation(n)
        sums = {"l_ce": 0.0, "l_dis": 0.0, "l_div": 0.0, "l_total": 0.0}
        correct, seen = 0, 0
        for it, s in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[s:s + cfg.batch_size]
            x, y = train_ds.images[idx], train_ds.labels[idx]
            feats, logits = model.forward(x, train=True)
            if cfg.method == "ce":
                l_ce = ad.cross_entropy(logits, y)
                total, parts = l_ce, {"l_ce": l_ce.item(), "l_dis": float("nan"), "l_div": float("nan")}
            else:
                masks = sampler.sample_groups(assignment, len(idx)) if loss_cfg.cwa else None
                if cfg.method == "mc":
                    br = mc.total_loss(logits, feats, y, assignment, masks, loss_cfg)
                    total = br.total
                else:
                    weights = model.se_weights(feats)
                    br = sl.total_loss_soft(logits, feats, y, weights, assignment, masks, loss_cfg,
                                            intra_sign=cfg.intra_sign)
                    total = br.total
                parts = {"l_ce": br.l_ce.item(), "l_dis": br.l_dis.item(),
                         "l_div": br.l_div.item() if loss_cfg.diversity != "off" else float("nan")}
            if not math.isfinite(total.item()):
                raise NumericalError(f"non-finite loss at epoch {epoch}, iteration {it}")
            ad.backward(total)
            sgd_step(params, lr, cfg.weight_decay)
            k = len(idx)
            for key, v in parts.items():
                sums[key] += v * k
            sums["l_total"] += total.item() * k
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += k
        metrics.add(epoch, "train", correct / seen, {key: v / seen for key, v in sums.items()})
        acc, ce = evaluate(model, test_ds)
        nan = float("nan")
        metrics.add(epoch, "test", acc, {"l_ce": ce, "l_dis": nan, "l_div": nan, "l_total": ce})
        if acc > best_acc:
            best, best_acc = _copy(model), acc
        log.debug("epoch %d lr=%g train_acc=%.3f test_acc=%.3f", epoch, lr, correct / seen, acc)

    metrics.wall_time = time.perf_counter() - t0
    return RunResult(cfg, metrics, model, best, sampler.draws,
                     assignment if cfg.method == "soft" else None)


def write_run(result: RunResult, root: str | Path) -> Path:
    """Write config, metrics CSV and the best checkpoint under ``root/<config hash>``."""
    run_dir = Path(root) / result.config.digest()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(result.config.to_dict(), indent=1, sort_keys=True) + "\n")
    (run_dir / "metrics.csv").write_text(result.metrics.to_csv())
    result.best.save(run_dir / "checkpoint")
    summary = {"seed": result.config.seed, "wall_time": result.metrics.wall_time,
               "mask_draws": result.mask_draws, "final_test_acc": result.metrics.final()["acc"]}
    (run_dir / "run.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    if result.soft_groups is not None:
        groups = [list(map(int, g)) for g in result.soft_groups.groups]
        (run_dir / "soft_groups.json").write_text(json.dumps(groups) + "\n")
    return run_dir
