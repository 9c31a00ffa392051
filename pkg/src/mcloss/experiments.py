"""Paired ablation runs: every arm is a controlled diff of one base config, under shared seeds."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .heatmap import group_overlap
from .train import RunResult, TrainConfig, train, write_run

log = logging.getLogger(__name__)

# arm name -> overrides applied on top of the base config
ARMS: dict[str, dict] = {
    "ce": {"method": "ce"},
    "mc": {"method": "mc"},
    "mc_xi1": {"method": "mc", "loss": {"xi": 1}},
    "no_div": {"method": "mc", "loss": {"diversity": "off"}},
    "no_cwa": {"method": "mc", "loss": {"cwa": False}},
    "v2": {"method": "mc", "loss": {"diversity": "v2"}},
    "ccap": {"method": "mc", "loss": {"pooling": "ccap"}},
    "soft": {"method": "soft", "loss": {"mu": 0.5}},
}
CORE_ARMS = ("ce", "mc", "mc_xi1", "no_div", "no_cwa")


def arm_config(base: TrainConfig, arm: str | dict, seed: int) -> TrainConfig:
    over = ARMS[arm] if isinstance(arm, str) else arm
    d = base.to_dict()
    for key, value in over.items():
        if isinstance(value, dict):
            d[key] = {**d[key], **value}
        else:
            d[key] = value
    d["seed"] = seed
    return TrainConfig.from_dict(d)


@dataclass
class AblationResult:
    runs: dict[str, list[RunResult]] = field(default_factory=dict)
    overlap: dict[str, list[float]] = field(default_factory=dict)

    def accuracies(self, arm: str) -> list[float]:
        return [r.metrics.final()["acc"] for r in self.runs[arm]]

    def mean_accuracy(self, arm: str) -> float:
        return float(np.mean(self.accuracies(arm)))

    def summary_rows(self) -> list[dict]:
        rows = []
        for arm, runs in self.runs.items():
            for i, r in enumerate(runs):
                row = {"arm": arm, "seed": r.config.seed, "final_test_acc": r.metrics.final()["acc"],
                       "best_test_acc": max(r.metrics.curve("test")), "run": r.config.digest()}
                if arm in self.overlap:
                    row["overlap"] = self.overlap[arm][i]
                rows.append(row)
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["arm", "seed", "final_test_acc", "best_test_acc", "overlap", "run"]
        w = csv.DictWriter(buf, fields, lineterminator="\n")
        w.writeheader()
        for row in self.summary_rows():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def run_ablation(base: TrainConfig, train_ds: Dataset, test_ds: Dataset, seeds=(0, 1, 2),
                 arms=CORE_ARMS, overlap_arms=("mc", "no_div"), out_root: str | Path | None = None,
                 overlap_samples: int | None = None) -> AblationResult:
    """Train every arm for every seed; optionally write each run under ``out_root``."""
    result = AblationResult()
    for arm in arms:
        result.runs[arm] = []
        for seed in seeds:
            cfg = arm_config(base, arm, seed)
            log.info("ablation arm=%s seed=%d", arm, seed)
            run = train(cfg, train_ds, test_ds)
            result.runs[arm].append(run)
            if out_root is not None:
                write_run(run, out_root)
    sl = slice(None) if overlap_samples is None else slice(0, overlap_samples)
    for arm in overlap_arms:
        if arm not in result.runs:
            continue
        result.overlap[arm] = [
            group_overlap(r.model, test_ds.images[sl], test_ds.labels[sl], r.config.assignment())
            for r in result.runs[arm]]
    if out_root is not None:
        out = Path(out_root)
        (out / "ablation.csv").write_text(result.to_csv())
        (out / "ablation.json").write_text(json.dumps(
            {arm: {"mean_acc": result.mean_accuracy(arm), "accs": result.accuracies(arm)}
             for arm in result.runs}, indent=1, sort_keys=True) + "\n")
    return result
