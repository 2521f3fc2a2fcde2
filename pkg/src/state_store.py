#!/usr/bin/env python3
"""
Run Store Module for OmniVL Desk

Persistent state for one run directory: run status, metrics log, resolved
config snapshot, vocabulary and rotated checkpoints.

Layout:
    <outdir>/state/run.json
    <outdir>/metrics.jsonl
    <outdir>/resolved_config.json
    <outdir>/vocab.txt
    <outdir>/checkpoints/ckpt_XXXXXXXX.npz
"""

import io
import json
import logging
import threading
import zipfile
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from errors import ConfigError

logger = logging.getLogger(__name__)

# Fixed zip entry timestamp so identical arrays give identical files.
ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class RunStatus(Enum):
    """Run status enumeration."""
    PENDING = "pending"
    IN_PROGRESS = "in_progress"
    COMPLETED = "completed"
    FAILED = "failed"


def save_checkpoint(path: Union[str, Path], arrays: Dict[str, np.ndarray]) -> Path:
    """
    Write named arrays as an uncompressed ``.npz`` container.

    Entries are written in sorted name order with a fixed timestamp, so the
    same arrays always produce the same bytes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_suffix(".tmp")
    with zipfile.ZipFile(tmp_path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buffer = io.BytesIO()
            np.lib.format.write_array(buffer, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buffer.getvalue())
    tmp_path.replace(path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        return {name: data[name] for name in data.files}


class RunStore:
    """
    Persistent state management for one training or evaluation run.
    """

    DEFAULT_KEEP_CHECKPOINTS = 5

    def __init__(self, outdir: Union[str, Path], keep_checkpoints: int = DEFAULT_KEEP_CHECKPOINTS):
        """
        Initialize run store.

        Args:
            outdir: Run output directory
            keep_checkpoints: Number of newest checkpoints kept on disk
        """
        self.outdir = Path(outdir)
        self.state_dir = self.outdir / "state"
        self.checkpoint_dir = self.outdir / "checkpoints"
        try:
            self.state_dir.mkdir(parents=True, exist_ok=True)
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"cannot create output directory {self.outdir}: {e}")

        self.run_file = self.state_dir / "run.json"
        self.metrics_file = self.outdir / "metrics.jsonl"
        self.config_file = self.outdir / "resolved_config.json"
        self.vocab_file = self.outdir / "vocab.txt"
        self.keep_checkpoints = max(1, keep_checkpoints)

        self._lock = threading.Lock()
        self._initialize_run_file()

    def _initialize_run_file(self):
        if self.run_file.exists():
            return
        self._save_run({
            "metadata": {"created_at": datetime.now().isoformat(), "version": "1.0.0"},
            "run": {
                "status": RunStatus.PENDING.value,
                "current_step": None,
                "last_error": None,
                "start_time": None,
                "end_time": None,
                "last_checkpoint": None,
            },
        })

    def _load_run(self) -> Dict[str, Any]:
        with self._lock:
            with open(self.run_file, "r", encoding="utf-8") as f:
                return json.load(f)

    def _save_run(self, state: Dict[str, Any]):
        with self._lock:
            state["metadata"]["last_updated"] = datetime.now().isoformat()
            with open(self.run_file, "w", encoding="utf-8") as f:
                json.dump(state, f, indent=2)

    def mark_status(self, status: RunStatus, error_message: Optional[str] = None,
                    current_step: Optional[int] = None):
        """
        Update run status.

        Args:
            status: New run status
            error_message: Optional error message
            current_step: Current training step
        """
        state = self._load_run()
        run = state["run"]
        run["status"] = status.value
        if error_message:
            run["last_error"] = error_message
        if current_step is not None:
            run["current_step"] = current_step
        if status == RunStatus.IN_PROGRESS and not run["start_time"]:
            run["start_time"] = datetime.now().isoformat()
        elif status in (RunStatus.COMPLETED, RunStatus.FAILED):
            run["end_time"] = datetime.now().isoformat()
        self._save_run(state)

    def get_run(self) -> Dict[str, Any]:
        return self._load_run()["run"]

    @property
    def status(self) -> RunStatus:
        return RunStatus(self.get_run()["status"])

    # ------------------------------------------------------------------
    # Metrics
    # ------------------------------------------------------------------

    def append_metrics(self, record: Dict[str, Any]):
        with self._lock:
            with open(self.metrics_file, "a", encoding="utf-8", newline="\n") as f:
                f.write(json.dumps(record) + "\n")

    def read_metrics(self) -> List[Dict[str, Any]]:
        if not self.metrics_file.exists():
            return []
        with open(self.metrics_file, "r", encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]

    def truncate_metrics(self, last_step: int):
        """Drop metric records past ``last_step`` (used when resuming)."""
        kept = [r for r in self.read_metrics() if r.get("step", 0) <= last_step]
        with self._lock:
            with open(self.metrics_file, "w", encoding="utf-8", newline="\n") as f:
                for record in kept:
                    f.write(json.dumps(record) + "\n")

    def reset_metrics(self):
        with self._lock:
            self.metrics_file.write_text("", encoding="utf-8")

    # ------------------------------------------------------------------
    # Checkpoints
    # ------------------------------------------------------------------

    def checkpoint_path(self, step: int) -> Path:
        return self.checkpoint_dir / f"ckpt_{step:08d}.npz"

    def list_checkpoints(self) -> List[Path]:
        return sorted(self.checkpoint_dir.glob("ckpt_*.npz"))

    def latest_checkpoint(self) -> Optional[Path]:
        checkpoints = self.list_checkpoints()
        return checkpoints[-1] if checkpoints else None

    def write_checkpoint(self, step: int, arrays: Dict[str, np.ndarray]) -> Path:
        """Save a checkpoint and keep only the newest ones."""
        path = save_checkpoint(self.checkpoint_path(step), arrays)

        checkpoints = self.list_checkpoints()
        if len(checkpoints) > self.keep_checkpoints:
            for old in checkpoints[:-self.keep_checkpoints]:
                try:
                    old.unlink()
                except OSError as e:
                    logger.warning(f"Could not remove old checkpoint {old}: {e}")

        state = self._load_run()
        state["run"]["last_checkpoint"] = str(path)
        self._save_run(state)
        return path
