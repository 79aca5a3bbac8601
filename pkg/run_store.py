"""Append-only store of training runs and their metric curves."""

from __future__ import annotations

import csv
import json
import logging
import os
import threading
from collections.abc import Iterable, Sequence
from pathlib import Path

from errors import InputError
from stability import RunRecord

CURVE_COLUMNS = ("epoch", "train_loss", "val_err", "ema_val_err", "lr")

CurveRow = tuple[float, float, float, float, float]


class RunStore:
    """
    Manages a JSON-lines log of RunRecords with one CSV curve per run.

    Every append is flushed and fsynced while holding the write lock, so records
    completed before a crash stay readable.
    """

    def __init__(self, root: str | Path) -> None:
        """
        Initialize the RunStore.

        Args:
            root: Directory holding ``runs.jsonl`` and the ``curves/`` sidecars.

        """
        self.root = Path(root)
        self.log_path = self.root / "runs.jsonl"
        self.curve_dir = self.root / "curves"
        self.curve_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self.logger = logging.getLogger("RunStore")
        self._ids = {record.run_id for record in self.get_all_records()}

    def add_record(self, record: RunRecord) -> None:
        """
        Append a record to the log.

        Args:
            record: The finished run.

        Raises:
            InputError: A record with the same run id is already stored.

        """
        line = (json.dumps(record.to_dict(), sort_keys=True) + "\n").encode("utf-8")
        with self._lock:
            if record.run_id in self._ids:
                msg = f"run id {record.run_id} is already stored"
                raise InputError(msg)
            with self.log_path.open("ab+") as f:
                # a crash can leave the last line without its newline
                if f.seek(0, os.SEEK_END) > 0:
                    f.seek(-1, os.SEEK_END)
                    if f.read(1) != b"\n":
                        self.logger.warning("Terminating torn last line of %s", self.log_path)
                        f.write(b"\n")
                f.write(line)
                f.flush()
                os.fsync(f.fileno())
            self._ids.add(record.run_id)
        self.logger.debug("Stored run %s (%s)", record.run_id, record.model_name)

    def get_all_records(self) -> list[RunRecord]:
        """
        Read every complete record in append order.

        A torn final line left by a crash is skipped with a warning.
        """
        if not self.log_path.exists():
            return []
        records = []
        with self.log_path.open(encoding="utf-8") as f:
            for number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(RunRecord.from_dict(json.loads(line)))
                except (ValueError, TypeError):
                    self.logger.warning("Skipping unreadable line %d of %s", number, self.log_path)
        return records

    def get_record(self, run_id: str) -> RunRecord | None:
        for record in self.get_all_records():
            if record.run_id == run_id:
                return record
        return None

    def record_exists(self, run_id: str) -> bool:
        with self._lock:
            return run_id in self._ids

    def curve_path(self, run_id: str) -> Path:
        return self.curve_dir / f"{run_id}.csv"

    def write_curve(self, run_id: str, rows: Iterable[Sequence[float]]) -> Path:
        """Write the metric curve of one run as CSV with a header row."""
        path = self.curve_path(run_id)
        tmp = path.with_suffix(".csv.tmp")
        with tmp.open("w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CURVE_COLUMNS)
            writer.writerows([f"{v:.6g}" for v in row] for row in rows)
            f.flush()
            os.fsync(f.fileno())
        tmp.replace(path)
        return path

    def read_curve(self, run_id: str) -> list[CurveRow]:
        path = self.curve_path(run_id)
        if not path.exists():
            return []
        with path.open(encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            next(reader, None)
            return [tuple(float(v) for v in row) for row in reader]
