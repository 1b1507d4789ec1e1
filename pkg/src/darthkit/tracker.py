"""Appearance-only tracking by detection.

Detections are linked to tracks through a bidirectional softmax over
cosine similarities of instance embeddings, followed by greedy (or
Hungarian) one-to-one matching.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import softmax

from .geometry import BoundingBox, Detection
from .model import DetectConfig, ModelWeights, detect_with_embeddings
from .mot_io import TrackingResult, TrackRow, Video


@dataclass(frozen=True)
class TrackerConfig:
    match_score_thr: float = 0.5
    init_conf_thr: float = 0.7
    max_age: int = 10
    embed_momentum: float = 0.8
    temperature: float = 0.1
    matcher: str = "greedy"

    def __post_init__(self):
        for name in ("match_score_thr", "init_conf_thr", "embed_momentum"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.matcher not in ("greedy", "hungarian"):
            raise ValueError(f"unknown matcher {self.matcher!r}")


@dataclass
class Track:
    track_id: int
    last_box: BoundingBox
    embedding: np.ndarray
    last_seen_frame: int
    age: int = 0


def _normalize(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(n, 1e-12)


def _rows(embeds, n: int) -> np.ndarray:
    embeds = np.asarray(embeds, dtype=np.float64)
    return embeds.reshape(n, -1) if n else embeds.reshape(0, embeds.shape[-1] if embeds.ndim == 2 else 0)


def similarity(track_embeds: np.ndarray, det_embeds: np.ndarray, temperature: float) -> np.ndarray:
    """``[M dets, T tracks]`` bi-softmax score of cosine similarities."""
    cos = _normalize(det_embeds) @ _normalize(track_embeds).T
    logits = cos / temperature
    return 0.5 * (softmax(logits, axis=1) + softmax(logits, axis=0))


def greedy_match(scores: np.ndarray, thr: float) -> list[tuple[int, int]]:
    """Pairs ``(row, col)`` taken in descending score order; ties go to the lower index."""
    m, t = scores.shape
    order = sorted(((-scores[i, j], i, j) for i in range(m) for j in range(t)))
    used_r, used_c, out = set(), set(), []
    for neg, i, j in order:
        if -neg < thr:
            break
        if i in used_r or j in used_c:
            continue
        used_r.add(i)
        used_c.add(j)
        out.append((i, j))
    return out


def hungarian_match(scores: np.ndarray, thr: float) -> list[tuple[int, int]]:
    rows, cols = linear_sum_assignment(-scores)
    return sorted((int(i), int(j)) for i, j in zip(rows, cols) if scores[i, j] >= thr)


def associate(
    tracks: Sequence[Track],
    dets: Sequence[Detection],
    det_embeds: np.ndarray,
    cfg: TrackerConfig = TrackerConfig(),
) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Return ``(assignments as (track, det) index pairs, born det indices, dead track indices)``."""
    det_embeds = _rows(det_embeds, len(dets))
    pairs: list[tuple[int, int]] = []
    if tracks and dets:
        track_embeds = np.stack([t.embedding for t in tracks])
        scores = similarity(track_embeds, det_embeds, cfg.temperature)
        match = greedy_match if cfg.matcher == "greedy" else hungarian_match
        pairs = [(j, i) for i, j in match(scores, cfg.match_score_thr)]
    matched_dets = {d for _, d in pairs}
    matched_tracks = {t for t, _ in pairs}
    births = [i for i, d in enumerate(dets) if i not in matched_dets and d.confidence >= cfg.init_conf_thr]
    deaths = [k for k, t in enumerate(tracks) if k not in matched_tracks and t.age + 1 > cfg.max_age]
    return sorted(pairs), births, deaths


class Tracker:
    """Per-sequence association state machine."""

    def __init__(self, cfg: TrackerConfig = TrackerConfig()):
        self.cfg = cfg
        self.tracks: list[Track] = []
        self.next_id = 1

    def update(self, frame: int, dets: Sequence[Detection], embeds: np.ndarray) -> list[TrackRow]:
        cfg = self.cfg
        embeds = _rows(embeds, len(dets))
        pairs, births, deaths = associate(self.tracks, dets, embeds, cfg)
        rows = []
        matched = set()
        for k, i in pairs:
            t = self.tracks[k]
            d = dets[i]
            t.embedding = cfg.embed_momentum * t.embedding + (1 - cfg.embed_momentum) * embeds[i]
            t.last_box = d
            t.last_seen_frame = frame
            t.age = 0
            matched.add(k)
            rows.append(TrackRow(frame, t.track_id, d.x1, d.y1, d.x2, d.y2, d.class_id, d.confidence))
        for k, t in enumerate(self.tracks):
            if k not in matched:
                t.age += 1
        dead = set(deaths)
        self.tracks = [t for k, t in enumerate(self.tracks) if k not in dead]
        for i in births:
            d = dets[i]
            self.tracks.append(Track(self.next_id, d, embeds[i].copy(), frame))
            rows.append(TrackRow(frame, self.next_id, d.x1, d.y1, d.x2, d.y2, d.class_id, d.confidence))
            self.next_id += 1
        return sorted(rows, key=lambda r: r.track_id)


Detector = Callable[[np.ndarray], tuple[list[Detection], np.ndarray]]


def model_detector(weights: ModelWeights, detect_cfg: DetectConfig = DetectConfig()) -> Detector:
    def run(img: np.ndarray):
        return detect_with_embeddings(weights, img, detect_cfg.score_thr, detect_cfg.nms_iou)

    return run


def track_sequence(
    weights: Optional[ModelWeights],
    frames: Video | Sequence[np.ndarray],
    cfg: TrackerConfig = TrackerConfig(),
    detect_cfg: DetectConfig = DetectConfig(),
    detector: Optional[Detector] = None,
) -> TrackingResult:
    """Track one time-ordered sequence; frame numbers in the result are 1-based."""
    seq = frames.frames if isinstance(frames, Video) else list(frames)
    if detector is None:
        if weights is None:
            raise ValueError("need weights or a detector")
        detector = model_detector(weights, detect_cfg)
    tracker = Tracker(cfg)
    rows: list[TrackRow] = []
    for t, img in enumerate(seq):
        dets, emb = detector(img)
        rows.extend(tracker.update(t + 1, dets, emb))
    return TrackingResult(rows, len(seq))
