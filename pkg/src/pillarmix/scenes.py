"""Synthetic 2D point-cloud scenes with heavy-tailed intensity outliers.

Each scene is a square field of (x, y, intensity) points plus axis-aligned
ground-truth boxes in three size classes. Object points carry a
class-dependent intensity band; background points are dim. With probability
``outlier_rate`` a scene contains one extreme intensity spike
(``outlier_magnitude`` times the base scale), so tiny calibration samples
rarely see a spike while large ones almost surely do.

Raw point features are (x, y, intensity, dx, dy) where dx, dy are offsets to
the mean of the points sharing the pillar; absolute coordinates and offsets
deliberately live on very different scales, which is what makes the first
weight layer fragile under per-tensor INT8 quantization.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import DIFFICULTIES
from .tensor_ops import PillarSample

__all__ = [
    "DatasetConfig",
    "POINT_FEATURES",
    "Scene",
    "assign_difficulty",
    "generate_dataset",
    "load_dataset",
    "pillarize",
    "save_dataset",
]

POINT_FEATURES = 5  # x, y, intensity, dx-to-pillar-mean, dy-to-pillar-mean

CLASS_NAMES = ("large", "medium", "small")
# per-class (min side, max side), intensity band (low, high), point density range
CLASS_SIZES = ((3.0, 4.5), (2.0, 3.0), (1.2, 2.0))
CLASS_INTENSITY = ((0.12, 0.32), (0.40, 0.62), (0.70, 0.95))
CLASS_DENSITY = ((2.0, 3.0), (3.0, 4.5), (5.0, 8.0))
BACKGROUND_INTENSITY = (0.0, 0.08)


@dataclass(frozen=True)
class DatasetConfig:
    """Scene-generation knobs; defaults give the heavy-tailed desk-scale task."""

    size: int = 64
    classes: tuple[str, ...] = CLASS_NAMES
    field_size: float = 16.0
    outlier_rate: float = 0.02
    outlier_magnitude: float = 50.0
    boxes_per_scene: tuple[int, int] = (2, 3)
    background_points: tuple[int, int] = (12, 24)
    # difficulty rule: easy = area >= easy_area and points >= easy_points;
    # hard = area < hard_area or points < hard_points; moderate otherwise
    easy_area: float = 7.0
    easy_points: int = 22
    hard_area: float = 2.5
    hard_points: int = 8

    def __post_init__(self):
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise ValueError(f"outlier_rate must lie in [0, 1], got {self.outlier_rate}")
        if self.size < 1 or self.field_size <= 0 or self.outlier_magnitude <= 0:
            raise ValueError("dataset config must have positive size, field, and magnitude")


@dataclass(frozen=True)
class Scene:
    """Points [N, 3] as (x, y, intensity); boxes [M, 4] as (cx, cy, w, h)."""

    points: np.ndarray
    boxes: np.ndarray
    classes: np.ndarray
    difficulty: np.ndarray  # string labels from DIFFICULTIES


def assign_difficulty(area: float, n_points: int, cfg: DatasetConfig) -> str:
    if area < cfg.hard_area or n_points < cfg.hard_points:
        return "hard"
    if area >= cfg.easy_area and n_points >= cfg.easy_points:
        return "easy"
    return "moderate"


def _overlaps(cx, cy, w, h, boxes, margin=0.5) -> bool:
    for ox, oy, ow, oh in boxes:
        if abs(cx - ox) < (w + ow) / 2 + margin and abs(cy - oy) < (h + oh) / 2 + margin:
            return True
    return False


def _generate_scene(rng: np.random.Generator, cfg: DatasetConfig) -> Scene:
    field = cfg.field_size
    n_boxes = int(rng.integers(cfg.boxes_per_scene[0], cfg.boxes_per_scene[1] + 1))
    boxes, classes, difficulties = [], [], []
    point_chunks = []
    for _ in range(n_boxes):
        cls = int(rng.integers(0, len(cfg.classes)))
        lo, hi = CLASS_SIZES[cls]
        w = h = cx = cy = None
        for _attempt in range(20):
            w = float(rng.uniform(lo, hi))
            h = float(rng.uniform(lo, hi))
            cx = float(rng.uniform(w / 2, field - w / 2))
            cy = float(rng.uniform(h / 2, field - h / 2))
            if not _overlaps(cx, cy, w, h, boxes):
                break
        else:
            continue  # field too crowded, drop this box
        density = float(rng.uniform(*CLASS_DENSITY[cls]))
        n_pts = max(3, int(round(density * w * h)))
        xs = rng.uniform(cx - w / 2, cx + w / 2, size=n_pts)
        ys = rng.uniform(cy - h / 2, cy + h / 2, size=n_pts)
        ilo, ihi = CLASS_INTENSITY[cls]
        intensity = rng.uniform(ilo, ihi, size=n_pts)
        point_chunks.append(np.stack([xs, ys, intensity], axis=1))
        boxes.append((cx, cy, w, h))
        classes.append(cls)
        difficulties.append(assign_difficulty(w * h, n_pts, cfg))
    n_bg = int(rng.integers(cfg.background_points[0], cfg.background_points[1] + 1))
    bg = np.stack(
        [
            rng.uniform(0, field, size=n_bg),
            rng.uniform(0, field, size=n_bg),
            rng.uniform(*BACKGROUND_INTENSITY, size=n_bg),
        ],
        axis=1,
    )
    point_chunks.append(bg)
    points = np.concatenate(point_chunks, axis=0)
    if rng.random() < cfg.outlier_rate:
        spike = int(rng.integers(0, len(points)))
        points[spike, 2] = cfg.outlier_magnitude * float(rng.uniform(0.8, 1.2))
    return Scene(
        points=points.astype(np.float32),
        boxes=np.asarray(boxes, dtype=np.float32).reshape(-1, 4),
        classes=np.asarray(classes, dtype=np.int64),
        difficulty=np.asarray(difficulties, dtype=object),
    )


def generate_dataset(cfg: DatasetConfig, seed: int = 0) -> list[Scene]:
    """Deterministically generate ``cfg.size`` scenes from the seed."""
    rng = np.random.default_rng(seed)
    return [_generate_scene(rng, cfg) for _ in range(cfg.size)]


def pillarize(
    scene: Scene, grid: tuple[int, int], max_points_per_pillar: int, field_size: float
) -> PillarSample:
    """Bucket points into grid cells and build padded per-pillar features.

    Pillars are emitted in (row, col) order; points keep their scene order
    within a pillar, and pillars holding more than max_points_per_pillar
    points are truncated first-come.
    """
    h, w = grid
    if h < 1 or w < 1:
        raise ValueError(f"grid extents must be positive, got {grid}")
    pts = scene.points
    if len(pts) == 0:
        return PillarSample(
            features=np.zeros((0, max_points_per_pillar, POINT_FEATURES), np.float32),
            point_mask=np.zeros((0, max_points_per_pillar), bool),
            coords=np.zeros((0, 2), np.int64),
            grid=grid,
        )
    cell_h = field_size / h
    cell_w = field_size / w
    rows = np.clip((pts[:, 1] / cell_h).astype(np.int64), 0, h - 1)
    cols = np.clip((pts[:, 0] / cell_w).astype(np.int64), 0, w - 1)
    flat = rows * w + cols
    pillar_ids = np.unique(flat)
    features = np.zeros((len(pillar_ids), max_points_per_pillar, POINT_FEATURES), np.float32)
    mask = np.zeros((len(pillar_ids), max_points_per_pillar), bool)
    coords = np.stack([pillar_ids // w, pillar_ids % w], axis=1)
    for p, pid in enumerate(pillar_ids):
        members = np.nonzero(flat == pid)[0][:max_points_per_pillar]
        chunk = pts[members]
        center = chunk[:, :2].mean(axis=0)
        k = len(members)
        features[p, :k, 0:2] = chunk[:, :2]
        features[p, :k, 2] = chunk[:, 2]
        features[p, :k, 3:5] = chunk[:, :2] - center
        mask[p, :k] = True
    return PillarSample(features=features, point_mask=mask, coords=coords, grid=grid)


# ---------------------------------------------------------------------------
# JSONL dataset files: one scene per line


def _f32_json(v) -> float:
    # shortest decimal that round-trips to the same float32 bits
    return float(str(np.float32(v)))


def save_dataset(scenes: Sequence[Scene], path, config: DatasetConfig | None = None, seed: int | None = None) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for scene in scenes:
            rec = {
                "points": [[_f32_json(v) for v in row] for row in scene.points],
                "boxes": [[_f32_json(v) for v in row] for row in scene.boxes],
                "classes": [int(c) for c in scene.classes],
                "difficulty": [str(d) for d in scene.difficulty],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if config is not None:
        manifest = {"config": asdict(config), "seed": seed, "n_scenes": len(scenes)}
        path.with_suffix(path.suffix + ".manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        )
    return path


def load_dataset(path) -> list[Scene]:
    scenes = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        for d in rec["difficulty"]:
            if d not in DIFFICULTIES:
                raise ValueError(f"unknown difficulty label {d!r}")
        scenes.append(
            Scene(
                points=np.asarray(rec["points"], dtype=np.float32).reshape(-1, 3),
                boxes=np.asarray(rec["boxes"], dtype=np.float32).reshape(-1, 4),
                classes=np.asarray(rec["classes"], dtype=np.int64),
                difficulty=np.asarray(rec["difficulty"], dtype=object),
            )
        )
    return scenes
