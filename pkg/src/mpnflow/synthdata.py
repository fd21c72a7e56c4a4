"""Synthetic tracking scenarios plus the file formats around them.

The generator renders identities moving with constant velocity, corrupted by
positional noise, detection dropout, box jitter, and spurious detections.
Every detection carries an appearance vector (a stand-in for a CNN patch
embedding) and a small RoI grid whose first channel holds the rendered
object shape.  Everything is driven by one seeded generator, so a given
config reproduces byte-identical output.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, ParseError

log = logging.getLogger(__name__)

Box = tuple[float, float, float, float]  # x, y, w, h with top-left origin


@dataclass
class Detection:
    """One detected box in one frame, with optional learning payloads."""

    node_id: int
    frame: int
    box: Box
    confidence: float = 1.0
    appearance: np.ndarray | None = None
    roi_grid: np.ndarray | None = None      # (H, W, d_roi)
    gt_identity: int | None = None
    gt_mask: np.ndarray | None = None       # (H, W) binary, absent for clutter

    def __post_init__(self):
        x, y, w, h = self.box
        if not (w > 0 and h > 0):
            raise ConfigError(f"detection {self.node_id}: box needs positive size, got w={w}, h={h}")
        if self.frame < 0:
            raise ConfigError(f"detection {self.node_id}: frame must be >= 0, got {self.frame}")
        if self.roi_grid is not None and self.gt_mask is not None:
            if self.roi_grid.shape[:2] != self.gt_mask.shape:
                raise ConfigError(
                    f"detection {self.node_id}: roi grid {self.roi_grid.shape[:2]} and "
                    f"mask {self.gt_mask.shape} disagree")


@dataclass
class ScenarioConfig:
    num_frames: int = 40
    num_identities: int = 4
    image_width: float = 512.0
    image_height: float = 512.0
    speed_max: float = 3.0            # constant per-identity velocity bound, px/frame
    pos_noise_std: float = 1.0        # per-frame positional noise, px
    detection_dropout: float = 0.0
    false_positive_rate: float = 0.0  # expected spurious detections per frame
    box_jitter_std: float = 0.0
    box_size_min: float = 24.0
    box_size_max: float = 64.0
    d_app: int = 16
    app_noise_std: float = 0.1
    roi_h: int = 8
    roi_w: int = 8
    d_roi: int = 4
    roi_noise_std: float = 0.1
    mask_fill_min: float = 0.55
    mask_fill_max: float = 0.85
    frame_stride: int = 1             # keep every k-th frame
    seed: int = 0

    def validate(self) -> None:
        if self.num_frames < 2:
            raise ConfigError(f"num_frames must be >= 2, got {self.num_frames}")
        if self.num_identities < 1:
            raise ConfigError(f"num_identities must be >= 1, got {self.num_identities}")
        for name in ("detection_dropout",):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        for name in ("speed_max", "pos_noise_std", "false_positive_rate",
                     "box_jitter_std", "app_noise_std", "roi_noise_std"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ConfigError("image_width and image_height must be positive")
        if not 0 < self.box_size_min <= self.box_size_max:
            raise ConfigError(
                f"box sizes must satisfy 0 < box_size_min <= box_size_max, "
                f"got {self.box_size_min}, {self.box_size_max}")
        if self.d_app < 1:
            raise ConfigError(f"d_app must be >= 1, got {self.d_app}")
        if self.roi_h < 4 or self.roi_w < 4:
            raise ConfigError(f"roi grid must be at least 4x4, got {self.roi_h}x{self.roi_w}")
        if self.d_roi < 1:
            raise ConfigError(f"d_roi must be >= 1, got {self.d_roi}")
        if not 0.0 < self.mask_fill_min <= self.mask_fill_max <= 1.0:
            raise ConfigError("mask fill fractions must satisfy 0 < min <= max <= 1")
        if self.frame_stride < 1:
            raise ConfigError(f"frame_stride must be >= 1, got {self.frame_stride}")


@dataclass
class Scenario:
    config: ScenarioConfig
    detections: list[Detection]
    # identity -> node ids in frame order, true detections only
    gt_trajectories: dict[int, list[int]] = field(default_factory=dict)

    def detection_by_id(self) -> dict[int, Detection]:
        return {d.node_id: d for d in self.detections}


def _render_mask(h: int, w: int, shape: str, fill: float) -> np.ndarray:
    # shape indicator on pixel centers of the box-local unit square
    v = (np.arange(h) + 0.5) / h - 0.5
    u = (np.arange(w) + 0.5) / w - 0.5
    vv, uu = np.meshgrid(v, u, indexing="ij")
    half = fill / 2.0
    if shape == "ellipse":
        inside = (uu / half) ** 2 + (vv / half) ** 2 <= 1.0
    else:
        inside = np.maximum(np.abs(uu), np.abs(vv)) <= half
    return inside.astype(np.float64)


def _roi_grid(cfg: ScenarioConfig, indicator: np.ndarray, appearance: np.ndarray,
              rng: np.random.Generator) -> np.ndarray:
    grid = np.zeros((cfg.roi_h, cfg.roi_w, cfg.d_roi))
    # the shape channel is observed through per-detection noise, so a single
    # view does not determine the mask; aggregating views of the same object
    # does
    grid[:, :, 0] = indicator + rng.normal(0.0, cfg.roi_noise_std,
                                           size=(cfg.roi_h, cfg.roi_w))
    for c in range(1, cfg.d_roi - 1):
        grid[:, :, c] = appearance[(c - 1) % appearance.size]
    if cfg.d_roi >= 2:
        grid[:, :, cfg.d_roi - 1] = rng.normal(0.0, cfg.roi_noise_std, size=(cfg.roi_h, cfg.roi_w))
    return grid


def generate_scenario(cfg: ScenarioConfig) -> Scenario:
    """Simulate one scenario; the output is a pure function of the config."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    m = cfg.num_identities

    base_app = rng.normal(0.0, 1.0, size=(m, cfg.d_app))
    velocity = rng.uniform(-cfg.speed_max, cfg.speed_max, size=(m, 2))
    start = np.column_stack([
        rng.uniform(0.15 * cfg.image_width, 0.85 * cfg.image_width, size=m),
        rng.uniform(0.15 * cfg.image_height, 0.85 * cfg.image_height, size=m),
    ])
    box_w = rng.uniform(cfg.box_size_min, cfg.box_size_max, size=m)
    box_h = rng.uniform(cfg.box_size_min, cfg.box_size_max, size=m)
    shapes = ["ellipse" if rng.uniform() < 0.5 else "rectangle" for _ in range(m)]
    fills = rng.uniform(cfg.mask_fill_min, cfg.mask_fill_max, size=m)
    masks = [_render_mask(cfg.roi_h, cfg.roi_w, shapes[i], fills[i]) for i in range(m)]

    detections: list[Detection] = []
    trajectories: dict[int, list[int]] = {i: [] for i in range(m)}
    next_id = 0
    for frame in range(1, cfg.num_frames + 1, cfg.frame_stride):
        step = frame - 1
        for ident in range(m):
            if rng.uniform() < cfg.detection_dropout:
                continue
            center = start[ident] + velocity[ident] * step \
                + rng.normal(0.0, cfg.pos_noise_std, size=2)
            jitter = rng.normal(0.0, cfg.box_jitter_std, size=4)
            w = max(box_w[ident] + jitter[2], 1.0)
            h = max(box_h[ident] + jitter[3], 1.0)
            x = center[0] - w / 2.0 + jitter[0]
            y = center[1] - h / 2.0 + jitter[1]
            app = base_app[ident] + rng.normal(0.0, cfg.app_noise_std, size=cfg.d_app)
            conf = rng.uniform(0.7, 1.0)
            roi = _roi_grid(cfg, masks[ident], app, rng)
            detections.append(Detection(
                node_id=next_id, frame=frame, box=(x, y, w, h), confidence=conf,
                appearance=app, roi_grid=roi, gt_identity=ident,
                gt_mask=masks[ident].copy()))
            trajectories[ident].append(next_id)
            next_id += 1
        for _ in range(rng.poisson(cfg.false_positive_rate)):
            w = rng.uniform(cfg.box_size_min, cfg.box_size_max)
            h = rng.uniform(cfg.box_size_min, cfg.box_size_max)
            x = rng.uniform(0.0, max(cfg.image_width - w, 1.0))
            y = rng.uniform(0.0, max(cfg.image_height - h, 1.0))
            app = rng.normal(0.0, 1.0, size=cfg.d_app)
            conf = rng.uniform(0.3, 0.8)
            roi = _roi_grid(cfg, np.zeros((cfg.roi_h, cfg.roi_w)), app, rng)
            detections.append(Detection(
                node_id=next_id, frame=frame, box=(x, y, w, h), confidence=conf,
                appearance=app, roi_grid=roi, gt_identity=None, gt_mask=None))
            next_id += 1
    trajectories = {i: ids for i, ids in trajectories.items() if ids}
    return Scenario(config=replace(cfg), detections=detections, gt_trajectories=trajectories)


def scenario_config_from_dict(raw: dict) -> ScenarioConfig:
    known = {f.name for f in fields(ScenarioConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown scenario config keys: {sorted(unknown)}")
    cfg = ScenarioConfig(**raw)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# detection and track files (MOTChallenge CSV layout)

def load_mot_detections(path) -> list[Detection]:
    """Read frame,id,x,y,w,h,conf[,...] rows; id -1 means unknown identity."""
    detections = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 7:
                raise ParseError(f"{path}:{ln}: expected at least 7 fields, got {len(parts)}")
            try:
                frame = int(float(parts[0]))
                ident = int(float(parts[1]))
                x, y, w, h, conf = (float(v) for v in parts[2:7])
            except ValueError as e:
                raise ParseError(f"{path}:{ln}: {e}") from e
            if w <= 0 or h <= 0:
                raise ParseError(f"{path}:{ln}: box needs positive size, got w={w}, h={h}")
            if frame < 0:
                raise ParseError(f"{path}:{ln}: frame must be >= 0, got {frame}")
            detections.append(Detection(
                node_id=len(detections), frame=frame, box=(x, y, w, h),
                confidence=conf, gt_identity=None if ident < 0 else ident))
    return detections


def write_detections(detections: list[Detection], path) -> None:
    with open(path, "w") as fh:
        for d in sorted(detections, key=lambda d: (d.frame, d.node_id)):
            ident = -1 if d.gt_identity is None else d.gt_identity
            x, y, w, h = d.box
            fh.write(f"{d.frame},{ident},{x:.2f},{y:.2f},{w:.2f},{h:.2f},{d.confidence:.2f},-1,-1,-1\n")


def write_results(tracks, path) -> None:
    """Write track series as frame,track_id,x,y,w,h,conf,-1,-1,-1 rows.

    tracks is a list of series, each a list of (frame, box, conf); ids are
    reassigned 1..m in order of first appearance, boxes rounded to 2
    decimals.
    """
    order = sorted(range(len(tracks)), key=lambda i: (min(f for f, _, _ in tracks[i]), i))
    rows = []
    for new_id, i in enumerate(order, start=1):
        for frame, box, conf in tracks[i]:
            x, y, w, h = box
            rows.append((frame, new_id, x, y, w, h, conf))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w") as fh:
        for frame, tid, x, y, w, h, conf in rows:
            fh.write(f"{frame},{tid},{x:.2f},{y:.2f},{w:.2f},{h:.2f},{conf:.2f},-1,-1,-1\n")


def load_tracks(path) -> dict[int, dict[int, Box]]:
    """Read a gt or results file into track_id -> frame -> box."""
    tracks: dict[int, dict[int, Box]] = {}
    for det in load_mot_detections(path):
        if det.gt_identity is None:
            raise ParseError(f"{path}: row for frame {det.frame} lacks a track id")
        tracks.setdefault(det.gt_identity, {})[det.frame] = det.box
    return tracks


# ---------------------------------------------------------------------------
# sidecar files: embeddings, RoI grids, ground-truth masks

def write_embeddings(detections: list[Detection], path) -> None:
    with open(path, "w") as fh:
        for d in detections:
            if d.appearance is None:
                raise ConfigError(f"detection {d.node_id} has no appearance vector")
            vals = ",".join(repr(float(v)) for v in d.appearance)
            fh.write(f"{d.node_id},{vals}\n")


def attach_embeddings(detections: list[Detection], path) -> None:
    """Fill detection.appearance from a node_id,v0,...,vk CSV in place."""
    table: dict[int, np.ndarray] = {}
    width = None
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 2:
                raise ParseError(f"{path}:{ln}: expected node_id plus at least one value")
            try:
                nid = int(parts[0])
                vec = np.asarray([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as e:
                raise ParseError(f"{path}:{ln}: {e}") from e
            if width is None:
                width = vec.size
            elif vec.size != width:
                raise ParseError(f"{path}:{ln}: dimension {vec.size} does not match earlier {width}")
            table[nid] = vec
    missing = [d.node_id for d in detections if d.node_id not in table]
    if missing:
        raise ParseError(f"{path}: no embedding for node ids {missing[:5]}"
                         + ("..." if len(missing) > 5 else ""))
    for d in detections:
        d.appearance = table[d.node_id]


def write_roi_grids(detections: list[Detection], path) -> None:
    with open(path, "w") as fh:
        for d in detections:
            if d.roi_grid is None:
                raise ConfigError(f"detection {d.node_id} has no roi grid")
            h, w, c = d.roi_grid.shape
            vals = ",".join(repr(float(v)) for v in d.roi_grid.reshape(-1))
            fh.write(f"{d.node_id},{h},{w},{c},{vals}\n")


def attach_roi_grids(detections: list[Detection], path) -> None:
    table: dict[int, np.ndarray] = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                nid, h, w, c = (int(v) for v in parts[:4])
                grid = np.asarray([float(v) for v in parts[4:]], dtype=np.float64)
            except (ValueError, IndexError) as e:
                raise ParseError(f"{path}:{ln}: {e}") from e
            if grid.size != h * w * c:
                raise ParseError(f"{path}:{ln}: expected {h * w * c} values, got {grid.size}")
            table[nid] = grid.reshape(h, w, c)
    for d in detections:
        if d.node_id in table:
            d.roi_grid = table[d.node_id]
        else:
            raise ParseError(f"{path}: no roi grid for node id {d.node_id}")


def write_gt_masks(detections: list[Detection], path) -> None:
    with open(path, "w") as fh:
        for d in detections:
            if d.gt_mask is None:
                continue
            h, w = d.gt_mask.shape
            ident = -1 if d.gt_identity is None else d.gt_identity
            bits = ",".join(str(int(v)) for v in d.gt_mask.reshape(-1))
            fh.write(f"{d.node_id},{ident},{d.frame},{h},{w},{bits}\n")


def load_gt_masks(path) -> dict[int, tuple[int, int, np.ndarray]]:
    """Read node_id -> (identity, frame, mask) from a mask CSV."""
    table: dict[int, tuple[int, int, np.ndarray]] = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                nid, ident, frame, h, w = (int(v) for v in parts[:5])
                mask = np.asarray([float(v) for v in parts[5:]], dtype=np.float64)
            except (ValueError, IndexError) as e:
                raise ParseError(f"{path}:{ln}: {e}") from e
            if mask.size != h * w:
                raise ParseError(f"{path}:{ln}: expected {h * w} values, got {mask.size}")
            table[nid] = (ident, frame, mask.reshape(h, w))
    return table
