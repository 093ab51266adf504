"""Line-delimited JSON manifest of SceneSamples plus raster access.

The first line is a header object (``"format": "biped-manifest"``); each
following line is one sample. Raster paths are relative to the manifest's
directory.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import InputError
from .grid import GridSpec, grid_class
from .maps import MAP_FACTOR, build_category_maps, check_pgm, read_pgm

FORMAT = "biped-manifest"
VERSION = 1
MANIFEST_NAME = "manifest.jsonl"


@dataclass
class SceneSample:
    sample_id: str
    track_id: str
    crossing: int
    boxes: np.ndarray  # m x 4
    grid: np.ndarray  # m
    ego: np.ndarray  # m x 3
    future_boxes: np.ndarray  # tau x 4
    future_ego: np.ndarray  # tau x 3
    final_grid: int
    scene: str = ""
    split: str = "train"
    obs_start: int = 0
    tte: int = 0
    rasters: list = field(default_factory=list)

    def to_record(self, ndigits=4):
        def arr(a):
            return np.round(np.asarray(a, dtype=np.float64), ndigits).tolist()

        return {
            "id": self.sample_id,
            "track": self.track_id,
            "scene": self.scene,
            "split": self.split,
            "crossing": int(self.crossing),
            "obs_start": int(self.obs_start),
            "tte": int(self.tte),
            "boxes": arr(self.boxes),
            "grid": [int(g) for g in self.grid],
            "ego": arr(self.ego),
            "future_boxes": arr(self.future_boxes),
            "future_ego": arr(self.future_ego),
            "final_grid": int(self.final_grid),
            "rasters": list(self.rasters),
        }

    @classmethod
    def from_record(cls, rec):
        return cls(
            sample_id=rec["id"],
            track_id=rec["track"],
            scene=rec.get("scene", ""),
            split=rec.get("split", "train"),
            crossing=rec["crossing"],
            obs_start=rec.get("obs_start", 0),
            tte=rec.get("tte", 0),
            boxes=np.asarray(rec["boxes"], dtype=np.float64),
            grid=np.asarray(rec["grid"], dtype=np.int64),
            ego=np.asarray(rec["ego"], dtype=np.float64),
            future_boxes=np.asarray(rec["future_boxes"], dtype=np.float64),
            future_ego=np.asarray(rec["future_ego"], dtype=np.float64),
            final_grid=rec["final_grid"],
            rasters=list(rec.get("rasters", [])),
        )

    def rounded(self, ndigits=4):
        """Copy with arrays rounded exactly as the manifest stores them."""
        return SceneSample.from_record(self.to_record(ndigits))


def default_header(obs_len=15, pred_len=30, grid=GridSpec(), raster_downsample=1, **extra):
    header = {
        "format": FORMAT,
        "version": VERSION,
        "obs_len": obs_len,
        "pred_len": pred_len,
        "image_width": grid.image_width,
        "image_height": grid.image_height,
        "grid_cell": grid.cell,
        "raster_downsample": raster_downsample,
        "map_factor": MAP_FACTOR,
    }
    header.update(extra)
    return header


def save_manifest(samples, path, header=None):
    header = dict(header or default_header())
    header["num_samples"] = len(samples)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in samples:
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")


_REQUIRED = ("id", "track", "crossing", "boxes", "grid", "ego", "future_boxes", "future_ego", "final_grid")


def validate_sample(s, header, grid, where):
    m, tau = header["obs_len"], header["pred_len"]

    def fail(fieldname, msg):
        raise InputError(f"{where}: sample {s.sample_id!r} field {fieldname!r}: {msg}")

    if s.boxes.shape != (m, 4):
        fail("boxes", f"expected shape {(m, 4)}, got {s.boxes.shape}")
    if s.future_boxes.shape != (tau, 4):
        fail("future_boxes", f"expected shape {(tau, 4)}, got {s.future_boxes.shape}")
    if s.ego.shape != (m, 3):
        fail("ego", f"expected shape {(m, 3)}, got {s.ego.shape}")
    if s.future_ego.shape != (tau, 3):
        fail("future_ego", f"expected shape {(tau, 3)}, got {s.future_ego.shape}")
    if s.grid.shape != (m,):
        fail("grid", f"expected {m} entries, got {s.grid.shape}")
    for name, b in (("boxes", s.boxes), ("future_boxes", s.future_boxes)):
        if not np.all(np.isfinite(b)):
            fail(name, "non-finite coordinate")
        if np.any(b[:, 0] > b[:, 2]) or np.any(b[:, 1] > b[:, 3]):
            fail(name, "corners must satisfy x1 <= x2 and y1 <= y2")
    n = grid.num_classes
    if np.any(s.grid < 0) or np.any(s.grid >= n):
        fail("grid", f"class outside [0, {n})")
    if not 0 <= s.final_grid < n:
        fail("final_grid", f"class {s.final_grid} outside [0, {n})")
    if s.crossing not in (0, 1):
        fail("crossing", f"label {s.crossing!r} not in {{0, 1}}")
    if not np.array_equal(s.grid, grid_class(s.boxes, grid)):
        fail("grid", "does not match the nearest grid cell of the boxes")
    if s.final_grid != grid_class(s.future_boxes[-1], grid):
        fail("final_grid", "does not match the last future box")
    if s.rasters and len(s.rasters) != m:
        fail("rasters", f"expected {m} paths, got {len(s.rasters)}")


def load_manifest(path, check_rasters=True):
    """Read and validate a manifest; returns (header, samples)."""
    path = str(path)
    root = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise InputError(f"{path}:1: empty manifest (missing header)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:1: malformed header: {exc.msg}") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise InputError(f"{path}:1: not a {FORMAT} header")
    if header.get("version") != VERSION:
        raise InputError(f"{path}:1: unsupported version {header.get('version')!r}")
    grid = GridSpec.from_cell(header["grid_cell"], header["image_width"], header["image_height"])
    samples, seen, raster_dims = [], set(), None
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InputError(f"{where}: malformed line: {exc.msg}") from None
        if not isinstance(rec, dict):
            raise InputError(f"{where}: malformed line: expected an object")
        missing = [k for k in _REQUIRED if k not in rec]
        if missing:
            raise InputError(f"{where}: malformed line: missing fields {missing}")
        try:
            s = SceneSample.from_record(rec)
        except (TypeError, ValueError) as exc:
            raise InputError(f"{where}: malformed line: {exc}") from None
        if s.sample_id in seen:
            raise InputError(f"{where}: duplicate sample id {s.sample_id!r}")
        seen.add(s.sample_id)
        validate_sample(s, header, grid, where)
        if check_rasters:
            for rel in s.rasters:
                full = os.path.join(root, rel)
                if not os.path.exists(full):
                    raise InputError(f"{where}: sample {s.sample_id!r} raster {rel!r} missing")
                dims = check_pgm(full)
                if raster_dims is None:
                    raster_dims = dims
                elif dims != raster_dims:
                    raise InputError(f"{where}: raster {rel!r} is {dims}, others are {raster_dims}")
        samples.append(s)
    if "num_samples" in header and header["num_samples"] != len(samples):
        raise InputError(f"{path}: header announces {header['num_samples']} samples, found {len(samples)}")
    return header, samples


class Dataset:
    """Samples of one manifest, with lazily built category map stacks."""

    def __init__(self, samples, header=None, root="."):
        self.samples = list(samples)
        self.header = header or default_header()
        self.root = root
        self._maps = {}

    @classmethod
    def load(cls, path, check_rasters=True):
        path = str(path)
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_NAME)
        header, samples = load_manifest(path, check_rasters=check_rasters)
        return cls(samples, header, os.path.dirname(os.path.abspath(path)))

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def grid(self):
        h = self.header
        return GridSpec.from_cell(h["grid_cell"], h["image_width"], h["image_height"])

    @property
    def map_shape(self):
        h = self.header
        r, f = h.get("raster_downsample", 1), h.get("map_factor", MAP_FACTOR)
        return h["image_height"] // r // f, h["image_width"] // r // f

    def split(self, name):
        return [s for s in self.samples if s.split == name]

    def subset(self, samples):
        out = Dataset(samples, self.header, self.root)
        out._maps = self._maps
        return out

    def maps(self, sample):
        """uint8 array m x 5 x h x w for ``sample`` (cached)."""
        cached = self._maps.get(sample.sample_id)
        if cached is not None:
            return cached
        if not sample.rasters:
            raise InputError(f"sample {sample.sample_id!r} has no rasters")
        scale = 1.0 / self.header.get("raster_downsample", 1)
        factor = self.header.get("map_factor", MAP_FACTOR)
        frames = [
            build_category_maps(read_pgm(os.path.join(self.root, rel)), box, factor, scale)
            for rel, box in zip(sample.rasters, sample.boxes)
        ]
        out = np.stack(frames)
        self._maps[sample.sample_id] = out
        return out

    def maps_batch(self, samples):
        return np.stack([self.maps(s) for s in samples]).astype(np.float64)
