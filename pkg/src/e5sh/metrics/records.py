"""Per-frame experiment records and their CSV log."""

from __future__ import annotations

import csv
import io
import threading
from dataclasses import asdict, dataclass, fields

FIELDS = ("frame_id", "robot_id", "protocol", "network", "model", "platform",
          "t_capture", "t_sent", "t_goal", "t_seg_start", "t_seg_end", "t_result",
          "t_map_done", "bytes_up", "bytes_down")
STAGES = ("t_capture", "t_sent", "t_goal", "t_seg_start", "t_seg_end", "t_result", "t_map_done")
_INT_FIELDS = {"frame_id", "robot_id", "bytes_up", "bytes_down", *STAGES}


class SchemaError(ValueError):
    pass


@dataclass
class ExperimentRecord:
    frame_id: int
    robot_id: int
    protocol: str
    network: str
    model: str
    platform: str
    t_capture: int = -1
    t_sent: int = -1
    t_goal: int = -1
    t_seg_start: int = -1
    t_seg_end: int = -1
    t_result: int = -1
    t_map_done: int = -1
    bytes_up: int = 0
    bytes_down: int = 0

    @property
    def ok(self) -> bool:
        """A frame succeeded when every stage was stamped."""
        return all(getattr(self, s) >= 0 for s in STAGES)

    @property
    def config(self) -> str:
        return f"{self.protocol}/{self.network}/{self.model}/{self.platform}"

    def stages_monotone(self) -> bool:
        ts = [getattr(self, s) for s in STAGES]
        return all(a <= b for a, b in zip(ts, ts[1:]))

    # seconds
    @property
    def seg_s(self) -> float:
        return (self.t_seg_end - self.t_seg_start) / 1e9

    @property
    def cycle_s(self) -> float:
        return (self.t_map_done - self.t_capture) / 1e9

    @property
    def network_rtt_ms(self) -> float:
        """Request-to-result time minus compute and edge-side queueing."""
        return ((self.t_result - self.t_sent) - (self.t_seg_end - self.t_goal)) / 1e6


assert tuple(f.name for f in fields(ExperimentRecord)) == FIELDS


class RecordLog:
    """Append-only, thread-safe record sink."""

    def __init__(self):
        self._records: list[ExperimentRecord] = []
        self._lock = threading.Lock()

    def append(self, rec: ExperimentRecord) -> None:
        with self._lock:
            self._records.append(rec)

    def snapshot(self) -> list[ExperimentRecord]:
        with self._lock:
            return list(self._records)

    def __len__(self):
        return len(self._records)


def write_csv(records, path_or_file) -> None:
    rows = sorted(records, key=lambda r: (r.config, r.robot_id, r.frame_id))
    if hasattr(path_or_file, "write"):
        _write(rows, path_or_file)
    else:
        with open(path_or_file, "w", newline="") as fh:
            _write(rows, fh)


def _write(rows, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(FIELDS)
    for r in rows:
        d = asdict(r)
        w.writerow([d[k] for k in FIELDS])


def to_csv_text(records) -> str:
    buf = io.StringIO()
    write_csv(records, buf)
    return buf.getvalue()


def read_csv(path_or_file) -> list[ExperimentRecord]:
    if hasattr(path_or_file, "read"):
        return _read(path_or_file)
    with open(path_or_file, newline="") as fh:
        return _read(fh)


def _read(fh) -> list[ExperimentRecord]:
    reader = csv.reader(fh)
    out = []
    header = None
    for row in reader:
        if not row:
            continue
        if header is None or tuple(row) == FIELDS or row[0] == "frame_id":
            if tuple(row) != FIELDS:
                raise SchemaError(f"unexpected record header: {','.join(row)}")
            header = row
            continue
        if len(row) != len(FIELDS):
            raise SchemaError(f"row has {len(row)} fields, expected {len(FIELDS)}")
        vals = {k: (int(v) if k in _INT_FIELDS else v) for k, v in zip(FIELDS, row)}
        out.append(ExperimentRecord(**vals))
    if header is None:
        raise SchemaError("empty record log")
    return out
