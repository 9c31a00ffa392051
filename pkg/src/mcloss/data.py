"""Synthetic "localized parts" images and their on-disk format.

Each class owns ``parts_per_class`` binary glyphs; no glyph is shared between
classes. A sample shows every glyph of its class at independent random,
non-overlapping positions, on a noisy background.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor_io
from .errors import TensorFormatError, ValidationError


@dataclass
class SyntheticPartsSpec:
    n_classes: int = 8
    parts_per_class: int = 3
    image_size: int = 32
    glyph_size: int = 6
    glyph_cell: int = 2
    noise: float = 0.25
    distractors: int = 2
    slots: int = 3
    jitter: int | None = 0
    distractor_source: str = "bank"
    n_train: int = 200
    n_test: int = 400
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 1 or self.parts_per_class < 1:
            raise ValidationError("need at least one class and one part")
        area = (self.parts_per_class + self.distractors) * self.glyph_size ** 2
        bound = 0.25 * self.image_size ** 2
        if area > bound:
            raise ValidationError(
                f"infeasible geometry: (parts + distractors) * glyph_area = {area} exceeds "
                f"0.25 * S^2 = {bound:g}")
        if self.glyph_size % self.glyph_cell:
            raise ValidationError("glyph_size must be a multiple of glyph_cell")
        if self.slots and (self.image_size // self.slots < self.glyph_size
                           or self.slots ** 2 < self.parts_per_class + self.distractors):
            raise ValidationError(f"{self.slots}x{self.slots} slots cannot hold the glyphs")
        if self.jitter is not None and self.jitter < 0:
            raise ValidationError("jitter must be non-negative")
        if self.distractor_source not in ("bank", "foreign"):
            raise ValidationError(f"distractor_source must be 'bank' or 'foreign', got {self.distractor_source!r}")
        if self.distractor_source == "foreign" and self.distractors and (
                self.n_classes < 2 or self.distractors >= self.parts_per_class):
            raise ValidationError("foreign distractors need two classes and fewer distractors than parts")
        if self.noise < 0:
            raise ValidationError("noise must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str

    def __len__(self) -> int:
        return len(self.labels)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tensor_io.save(directory / "images.mct", self.images)
        with open(directory / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_index", "label"])
            for i, y in enumerate(self.labels):
                w.writerow([i, int(y)])

    @classmethod
    def load(cls, directory: str | Path, n_classes: int, split: str = "") -> "Dataset":
        directory = Path(directory)
        images = tensor_io.load(directory / "images.mct")
        labels = []
        with open(directory / "labels.csv", newline="") as fh:
            rows = csv.reader(fh)
            header = next(rows, None)
            if header != ["sample_index", "label"]:
                raise TensorFormatError(f"labels.csv: unexpected header {header}")
            for i, row in enumerate(rows):
                idx, y = int(row[0]), int(row[1])
                if idx != i:
                    raise TensorFormatError(f"labels.csv: sample_index {idx} at row {i}")
                if not 0 <= y < n_classes:
                    raise TensorFormatError(f"labels.csv: label {y} at row {i} outside [0, {n_classes})")
                labels.append(y)
        if images.ndim != 4 or images.shape[0] != len(labels):
            raise TensorFormatError(f"{images.shape[0]} images but {len(labels)} labels")
        return cls(images, np.asarray(labels, dtype=np.int64), split or directory.name)


def _blocky(rng: np.random.Generator, g: int, cell: int) -> np.ndarray:
    coarse = (rng.random((g // cell, g // cell)) < 0.5).astype(np.float64)
    return np.kron(coarse, np.ones((cell, cell)))


def make_glyphs(spec: SyntheticPartsSpec, rng: np.random.Generator) -> np.ndarray:
    """(c, parts, g, g) distinct binary glyphs built from ``glyph_cell``-sized blocks.

    Each glyph has between a third and two thirds of its pixels on.
    """
    g = spec.glyph_size
    seen: set[bytes] = set()
    out = np.zeros((spec.n_classes, spec.parts_per_class, g, g))
    for c in range(spec.n_classes):
        for p in range(spec.parts_per_class):
            while True:
                glyph = _blocky(rng, g, spec.glyph_cell)
                key = glyph.tobytes()
                if key not in seen and g * g / 3 <= glyph.sum() <= 2 * g * g / 3:
                    break
            seen.add(key)
            out[c, p] = glyph
    return out


def _place(n: int, size: int, g: int, rng: np.random.Generator, slots: int = 0,
           max_jitter: int | None = None) -> list[tuple[int, int]]:
    if slots:
        # distinct cells of a slots x slots grid, jittered inside the cell
        cell = size // slots
        room = cell - g if max_jitter is None else min(max_jitter, cell - g)
        chosen = rng.choice(slots * slots, size=n, replace=False)
        jitter = rng.integers(0, room + 1, size=(n, 2))
        return [(int(k // slots * cell + jr), int(k % slots * cell + jc))
                for k, (jr, jc) in zip(chosen, jitter)]
    # rejection sampling of top-left corners with a one-pixel gap between boxes
    spots: list[tuple[int, int]] = []
    while len(spots) < n:
        r, q = (int(v) for v in rng.integers(0, size - g + 1, size=2))
        if all(abs(r - a) > g or abs(q - b) > g for a, b in spots):
            spots.append((r, q))
    return spots


def _render(spec, glyphs, distractor_bank, label, rng):
    s, g = spec.image_size, spec.glyph_size
    img = np.zeros((s, s))
    pieces = list(glyphs[label])
    if spec.distractor_source == "foreign" and spec.distractors:
        # an incomplete part set of one other class: no single part identifies the label
        other = (label + 1 + rng.integers(spec.n_classes - 1)) % spec.n_classes
        for p in rng.choice(spec.parts_per_class, size=spec.distractors, replace=False):
            pieces.append(glyphs[other, p])
    else:
        for _ in range(spec.distractors):
            pieces.append(distractor_bank[rng.integers(len(distractor_bank))])
    for (r, q), glyph in zip(_place(len(pieces), s, g, rng, spec.slots, spec.jitter), pieces):
        img[r:r + g, q:q + g] = glyph
    if spec.noise:
        img = img + rng.normal(0.0, spec.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_generate(spec: SyntheticPartsSpec) -> tuple[Dataset, Dataset, np.ndarray]:
    """Deterministic (train, test, glyphs) for ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    glyphs = make_glyphs(spec, rng)
    # distractors: random blobs that belong to no class
    bank_rng = np.random.default_rng([spec.seed, 1])
    bank = [_blocky(bank_rng, spec.glyph_size, spec.glyph_cell) for _ in range(16)]
    known = {gl.tobytes() for gl in glyphs.reshape(-1, spec.glyph_size, spec.glyph_size)}
    bank = [b for b in bank if b.tobytes() not in known]

    def split(n: int, tag: str, stream: int) -> Dataset:
        srng = np.random.default_rng([spec.seed, stream])
        labels = np.resize(np.arange(spec.n_classes), n)
        srng.shuffle(labels)
        images = np.stack([_render(spec, glyphs, bank, y, srng) for y in labels])[:, None]
        return Dataset(images, labels.astype(np.int64), tag)

    return split(spec.n_train, "train", 2), split(spec.n_test, "test", 3), glyphs


def save_dataset(directory: str | Path, spec: SyntheticPartsSpec, train: Dataset, test: Dataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "spec.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")
    train.save(directory / "train")
    test.save(directory / "test")


def load_dataset(directory: str | Path) -> tuple[SyntheticPartsSpec, Dataset, Dataset]:
    directory = Path(directory)
    try:
        spec = SyntheticPartsSpec(**json.loads((directory / "spec.json").read_text()))
    except FileNotFoundError as exc:
        raise ValidationError(f"no dataset at {directory}: {exc}") from exc
    return (spec, Dataset.load(directory / "train", spec.n_classes, "train"),
            Dataset.load(directory / "test", spec.n_classes, "test"))
