"""Run-directory layout and persistence helpers.

One process owns one run directory. Stages leave marker files so interrupted
runs can resume without recomputing or corrupting completed artifacts.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


def new_run_id(dataset_name: str, arch: str, seed: int) -> str:
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    return f"{dataset_name}-{arch}-{stamp}-{seed & 0xFFFF:04x}"


@dataclass
class RunPaths:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def run_id(self) -> str:
        return self.root.name

    # artifact locations -------------------------------------------------
    @property
    def config(self) -> Path: return self.root / "config.yaml"

    @property
    def clean_model(self) -> Path: return self.root / "clean_model"

    @property
    def ran_model(self) -> Path: return self.root / "ran_model"

    @property
    def backdoored_model(self) -> Path: return self.root / "backdoored_model"

    @property
    def mask(self) -> Path: return self.root / "mask.json"

    @property
    def trigger(self) -> Path: return self.root / "trigger"

    @property
    def trace(self) -> Path: return self.root / "trace.jsonl"

    @property
    def trigger_loss(self) -> Path: return self.root / "trigger_loss.csv"

    @property
    def metrics_csv(self) -> Path: return self.root / "metrics.csv"

    @property
    def metrics_jsonl(self) -> Path: return self.root / "metrics.jsonl"

    @property
    def ablation(self) -> Path: return self.root / "ablation.csv"

    @property
    def defenses_dir(self) -> Path: return self.root / "defenses"

    @property
    def plots_dir(self) -> Path: return self.root / "plots"

    @property
    def report_json(self) -> Path: return self.root / "report.json"

    @property
    def report_txt(self) -> Path: return self.root / "report.txt"

    # stages --------------------------------------------------------------
    def _stage_marker(self, stage: str) -> Path:
        return self.root / ".stages" / f"{stage}.done"

    def stage_done(self, stage: str) -> bool:
        return self._stage_marker(stage).exists()

    def mark_stage(self, stage: str) -> None:
        marker = self._stage_marker(stage)
        marker.parent.mkdir(parents=True, exist_ok=True)
        marker.write_text(json.dumps({"stage": stage, "time": time.time()}))

    def create(self) -> "RunPaths":
        self.root.mkdir(parents=True, exist_ok=False)
        (self.root / ".stages").mkdir()
        return self


def open_run(out_root: str | Path, run_id: str) -> RunPaths:
    root = Path(out_root) / run_id
    if not root.is_dir():
        raise ConfigError(f"run directory not found: {root}")
    return RunPaths(root)
