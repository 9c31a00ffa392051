"""A small CNN whose last conv layer emits the N feature channels the loss groups."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tensor_io
from .autodiff import Tensor
from .errors import TensorFormatError, ValidationError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class TinyCnnConfig:
    image_size: int = 32
    widths: tuple[int, ...] = (8, 16)
    strides: tuple[int, ...] = (1, 2)
    final_stride: int = 2
    n_channels: int = 24
    n_classes: int = 8
    kernel: int = 3
    batch_norm: bool = True
    final_batch_norm: bool = True
    se_reduction: int | None = None

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.strides = tuple(self.strides)
        if len(self.widths) != len(self.strides):
            raise ValidationError("widths and strides must have the same length")
        if self.n_channels < 1 or self.n_classes < 1:
            raise ValidationError("n_channels and n_classes must be positive")
        if self.feature_size < 4:
            raise ValidationError(
                f"feature maps collapse to {self.feature_size}x{self.feature_size}; need at least 4x4")

    @property
    def feature_size(self) -> int:
        s = self.image_size
        pad = self.kernel // 2
        for st in list(self.strides) + [self.final_stride]:
            s = (s + 2 * pad - self.kernel) // st + 1
        return s

    def layer_shapes(self) -> list[tuple[int, int]]:
        ins = [1] + list(self.widths)
        outs = list(self.widths) + [self.n_channels]
        return list(zip(ins, outs))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TinyCnnConfig":
        return cls(**d)


def parameter_count(cfg: TinyCnnConfig) -> int:
    """Closed-form count of trainable scalars for ``cfg``."""
    total = 0
    last = len(cfg.layer_shapes()) - 1
    for i, (cin, cout) in enumerate(cfg.layer_shapes()):
        total += cout * cin * cfg.kernel ** 2
        bn = cfg.batch_norm and (cfg.final_batch_norm or i < last)
        total += 2 * cout if bn else cout
    total += cfg.n_channels * cfg.feature_size ** 2 * cfg.n_classes + cfg.n_classes
    if cfg.se_reduction:
        hidden = max(cfg.n_channels // cfg.se_reduction, 1)
        total += cfg.n_channels * hidden + hidden + hidden * cfg.n_channels + cfg.n_channels
    return total


@dataclass
class TinyCnn:
    cfg: TinyCnnConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def forward(self, images, train: bool = False) -> tuple[Tensor, Tensor]:
        """Return (features, logits). ``train`` selects batch statistics and updates running ones."""
        x = ad.as_tensor(images)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValidationError(f"expected (B, 1, S, S) images, got {x.shape}")
        strides = list(self.cfg.strides) + [self.cfg.final_stride]
        for i, st in enumerate(strides):
            x = ad.conv2d(x, self.params[f"conv{i}.weight"], stride=st, padding=self.cfg.kernel // 2)
            if self._has_bn(i):
                x = self._batch_norm(x, i, train)
            else:
                x = x + ad.reshape(self.params[f"conv{i}.bias"], (1, -1, 1, 1))
            x = ad.relu(x)
        feats = x
        flat = ad.reshape(feats, (feats.shape[0], -1))
        logits = flat @ self.params["head.weight"] + self.params["head.bias"]
        return feats, logits

    def _has_bn(self, i: int) -> bool:
        return self.cfg.batch_norm and (self.cfg.final_batch_norm or i < len(self.cfg.widths))

    def _batch_norm(self, x: Tensor, i: int, train: bool) -> Tensor:
        gamma = ad.reshape(self.params[f"bn{i}.gamma"], (1, -1, 1, 1))
        beta = ad.reshape(self.params[f"bn{i}.beta"], (1, -1, 1, 1))
        if train:
            mean = ad.reduce_mean(x, axis=(0, 2, 3), keepdims=True)
            centred = x - mean
            var = ad.reduce_mean(centred * centred, axis=(0, 2, 3), keepdims=True)
            xhat = centred / ad.power(var + BN_EPS, 0.5)
            n = x.size // x.shape[1]
            rm, rv = self.buffers[f"bn{i}.running_mean"], self.buffers[f"bn{i}.running_var"]
            rm *= 1 - BN_MOMENTUM
            rm += BN_MOMENTUM * mean.data.reshape(-1)
            rv *= 1 - BN_MOMENTUM
            rv += BN_MOMENTUM * var.data.reshape(-1) * n / max(n - 1, 1)
        else:
            rm = self.buffers[f"bn{i}.running_mean"].reshape(1, -1, 1, 1)
            rv = self.buffers[f"bn{i}.running_var"].reshape(1, -1, 1, 1)
            xhat = (x - rm) / np.sqrt(rv + BN_EPS)
        return xhat * gamma + beta

    def se_weights(self, features) -> Tensor:
        """Per-sample channel weights in (0, 1) from the squeeze-excitation head."""
        from .soft_labels import se_forward
        return se_forward(features, self.se_head())

    def se_head(self):
        from .soft_labels import SoftLabelHead
        if not self.cfg.se_reduction:
            raise ValidationError("model was built without a soft-label head")
        p = self.params
        return SoftLabelHead(p["se.w1"], p["se.b1"], p["se.w2"], p["se.b2"])

    def trainable(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.buffers)
        return out

    def save(self, directory: str | Path) -> None:
        """Write ``checkpoint.bin`` (concatenated MCT1 records) and ``manifest.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        blob = bytearray()
        entries = []
        for name, arr in self.state().items():
            entries.append({"name": name, "shape": list(arr.shape), "offset": len(blob)})
            blob += tensor_io.encode(arr)
        (directory / "checkpoint.bin").write_bytes(bytes(blob))
        manifest = {"model": self.cfg.to_dict(), "tensors": entries}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "TinyCnn":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        blob = (directory / "checkpoint.bin").read_bytes()
        model = build_tiny_cnn(TinyCnnConfig.from_dict(manifest["model"]), seed=0)
        for e in manifest["tensors"]:
            arr, _ = tensor_io.decode(blob, e["offset"])
            if list(arr.shape) != e["shape"]:
                raise TensorFormatError(f"{e['name']}: manifest shape {e['shape']} != stored {list(arr.shape)}")
            if e["name"] in model.params:
                model.params[e["name"]].data = arr
            elif e["name"] in model.buffers:
                model.buffers[e["name"]] = arr.copy()
            else:
                raise TensorFormatError(f"unexpected tensor {e['name']!r} in checkpoint")
        return model


def _uniform(rng: np.random.Generator, bound: float, shape) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def build_tiny_cnn(cfg: TinyCnnConfig, seed: int) -> TinyCnn:
    """Fan-in scaled uniform initialisation, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    model = TinyCnn(cfg)
    k = cfg.kernel
    for i, (cin, cout) in enumerate(cfg.layer_shapes()):
        fan_in = cin * k * k
        model.params[f"conv{i}.weight"] = _uniform(rng, np.sqrt(6.0 / fan_in), (cout, cin, k, k))
        if model._has_bn(i):
            model.params[f"bn{i}.gamma"] = Tensor(np.ones(cout), requires_grad=True)
            model.params[f"bn{i}.beta"] = Tensor(np.zeros(cout), requires_grad=True)
            model.buffers[f"bn{i}.running_mean"] = np.zeros(cout)
            model.buffers[f"bn{i}.running_var"] = np.ones(cout)
        else:
            model.params[f"conv{i}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
    flat = cfg.n_channels * cfg.feature_size ** 2
    model.params["head.weight"] = _uniform(rng, 1.0 / np.sqrt(flat), (flat, cfg.n_classes))
    model.params["head.bias"] = Tensor(np.zeros(cfg.n_classes), requires_grad=True)
    if cfg.se_reduction:
        hidden = max(cfg.n_channels // cfg.se_reduction, 1)
        model.params["se.w1"] = _uniform(rng, 1.0 / np.sqrt(cfg.n_channels), (cfg.n_channels, hidden))
        model.params["se.b1"] = Tensor(np.zeros(hidden), requires_grad=True)
        model.params["se.w2"] = _uniform(rng, 1.0 / np.sqrt(hidden), (hidden, cfg.n_channels))
        model.params["se.b2"] = Tensor(np.zeros(cfg.n_channels), requires_grad=True)
    return model
