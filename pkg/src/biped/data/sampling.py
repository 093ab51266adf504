"""Tracks and observation/prediction window sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .grid import GridSpec, grid_class
from .manifest import SceneSample

TTE_RANGE = (30, 60)


@dataclass
class Track:
    """One pedestrian seen over contiguous frames starting at ``start_frame``."""

    track_id: str
    boxes: np.ndarray  # N x 4 pixels
    ego: np.ndarray  # N x 3
    event_frame: Optional[int] = None  # crossing onset, track-relative
    lateral_distance: Optional[np.ndarray] = None  # N, metres to the ego lane
    scene: str = ""
    start_frame: int = 0
    split: str = "train"
    rasters: list = field(default_factory=list)  # per frame, may be empty

    @property
    def crossing(self):
        return self.event_frame is not None

    def anchor(self, m, tte_min=TTE_RANGE[0]):
        """Frame the windows are timed against.

        Crossing tracks use the event frame. Non-crossing tracks use the
        frame where the pedestrian is laterally nearest the ego lane,
        searched only where a full observation window can precede it.
        """
        if self.event_frame is not None:
            return int(self.event_frame)
        if self.lateral_distance is None:
            return len(self.boxes) - 1
        first = m - 1 + tte_min
        if first >= len(self.boxes):
            return None
        return first + int(np.argmin(self.lateral_distance[first:]))


def window_stride(m):
    # round half up: 15 -> 8
    return int(np.floor(m / 2 + 0.5))


def sample_sequences(tracks, m, tau, grid=GridSpec(), tte_range=TTE_RANGE, report=None):
    """Cut tracks into SceneSamples with 50% overlapping observation windows.

    A window ending at frame t is kept when ``anchor - t`` lies inside
    ``tte_range`` and the tau future frames exist before the clip point.
    ``report`` (a dict) collects skip counts.
    """
    report = {} if report is None else report
    report.setdefault("tracks", 0)
    report.setdefault("skipped_short", 0)
    report.setdefault("skipped_no_window", 0)
    stride = window_stride(m)
    samples = []
    for track in tracks:
        report["tracks"] += 1
        n = len(track.boxes)
        if n < m + tau:
            report["skipped_short"] += 1
            continue
        anchor = track.anchor(m, tte_range[0])
        if anchor is None:
            report["skipped_no_window"] += 1
            continue
        last = min(anchor, n - 1)  # clip up to the event frame
        kept = 0
        for start in range(0, last + 1, stride):
            t = start + m - 1
            tte = anchor - t
            if t + tau > last or not (tte_range[0] <= tte <= tte_range[1]):
                continue
            obs = slice(start, t + 1)
            fut = slice(t + 1, t + tau + 1)
            fboxes = np.asarray(track.boxes[fut], dtype=np.float64)
            samples.append(SceneSample(
                sample_id=f"{track.track_id}_{start:04d}",
                track_id=track.track_id,
                scene=track.scene,
                split=track.split,
                crossing=int(track.crossing),
                obs_start=track.start_frame + start,
                tte=int(tte),
                boxes=np.asarray(track.boxes[obs], dtype=np.float64),
                grid=np.asarray(grid_class(track.boxes[obs], grid), dtype=np.int64),
                ego=np.asarray(track.ego[obs], dtype=np.float64),
                future_boxes=fboxes,
                future_ego=np.asarray(track.ego[fut], dtype=np.float64),
                final_grid=int(grid_class(fboxes[-1], grid)),
                rasters=list(track.rasters[obs]) if track.rasters else [],
            ))
            kept += 1
        if not kept:
            report["skipped_no_window"] += 1
    return samples
