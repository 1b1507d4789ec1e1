"""Video containers, tracking results and MOTChallenge CSV I/O."""
from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Union

import numpy as np

MOT_HEADER = ("frame", "id", "x", "y", "w", "h", "conf", "class", "vis")


@dataclass
class Video:
    """An unlabeled frame sequence. Carries no annotations by construction."""

    name: str
    frames: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)


class TrackRow(NamedTuple):
    frame: int  # 1-based
    track_id: int
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int = 0
    conf: float = 1.0

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass
class TrackingResult:
    rows: list[TrackRow] = field(default_factory=list)
    num_frames: int | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def frames(self) -> int:
        last = max((r.frame for r in self.rows), default=0)
        return max(last, self.num_frames or 0)

    def by_frame(self) -> dict[int, list[TrackRow]]:
        out: dict[int, list[TrackRow]] = {}
        for r in self.rows:
            out.setdefault(r.frame, []).append(r)
        return out

    def classes(self) -> list[int]:
        return sorted({r.class_id for r in self.rows})

    def for_class(self, class_id: int) -> "TrackingResult":
        return TrackingResult([r for r in self.rows if r.class_id == class_id], self.num_frames)

    def sorted(self) -> "TrackingResult":
        return TrackingResult(sorted(self.rows, key=lambda r: (r.frame, r.track_id)), self.num_frames)


@dataclass
class LabeledVideo:
    video: Video
    gt: TrackingResult


def _fmt(v: float) -> str:
    text = f"{v:.2f}"
    return "0.00" if text == "-0.00" else text


def format_mot(result: TrackingResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MOT_HEADER)
    for r in result.sorted().rows:
        writer.writerow(
            [r.frame, r.track_id, _fmt(r.x1), _fmt(r.y1), _fmt(r.x2 - r.x1), _fmt(r.y2 - r.y1),
             _fmt(r.conf), r.class_id, 1]
        )
    return buf.getvalue()


def parse_mot(text: str) -> TrackingResult:
    rows = []
    for rec in csv.reader(io.StringIO(text)):
        if not rec or rec[0] == "frame":
            continue
        frame, tid, x, y, w, h, conf = (float(v) for v in rec[:7])
        cls = int(float(rec[7])) if len(rec) > 7 else 0
        rows.append(TrackRow(int(frame), int(tid), x, y, x + w, y + h, cls, conf))
    return TrackingResult(rows)


def atomic_write(path: Union[str, Path], data: Union[str, bytes]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_mot(result: TrackingResult, path: Union[str, Path]) -> None:
    atomic_write(path, format_mot(result))


def read_mot(path: Union[str, Path]) -> TrackingResult:
    return parse_mot(Path(path).read_text())


def ignore_filtered(gt: TrackingResult) -> TrackingResult:
    """Drop gt rows whose conf column flags them as ignored (conf == 0)."""
    return TrackingResult([r for r in gt.rows if r.conf != 0], gt.num_frames)
