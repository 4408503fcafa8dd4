"""Toy pillar detector: build, decode, and evaluate on synthetic scenes.

The network follows the usual five-stage pillar pipeline at miniature scale:
a per-point linear encoder with masked max over points, a scatter into a
pseudo-image, three conv blocks (the first two downsample by 2), a 2x
upsample + conv neck, and two 1x1 conv heads (per-class logits and 4 box
offsets per cell). All weight layers are indexed 1..L for precision plans.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .calibration import CalibrationStats
from .metrics import DIFFICULTIES, Detection, EvalResult, ap40, iou_matrix
from .model import BatchNorm, LayerSpec, ModelGraph, PrecisionPlan, apply_plan, fold_all_bn, forward
from .scenes import CLASS_NAMES, POINT_FEATURES, Scene, pillarize
from .tensor_ops import ConvParams, PillarSample

__all__ = [
    "DetectorConfig",
    "build_toy_detector",
    "decode_and_nms",
    "encode_targets",
    "evaluate",
    "make_evaluator",
    "pillarize_dataset",
]


@dataclass(frozen=True)
class DetectorConfig:
    grid: tuple[int, int] = (16, 16)
    field_size: float = 16.0
    max_points_per_pillar: int = 8
    pfn_channels: int = 16
    block_channels: tuple[int, int, int] = (16, 24, 32)
    convs_per_block: int = 3
    block_strides: tuple[int, int, int] = (2, 2, 1)
    neck_channels: int = 24
    n_classes: int = len(CLASS_NAMES)
    base_size: float = 2.5
    score_thresh: float = 0.1
    nms_iou: float = 0.5
    match_iou: float = 0.5

    @property
    def out_grid(self) -> tuple[int, int]:
        h, w = self.grid
        down = 1
        for s in self.block_strides:
            down *= s
        return (h // down) * 2, (w // down) * 2

    def to_meta(self) -> dict:
        return {
            "grid": list(self.grid),
            "field_size": self.field_size,
            "max_points_per_pillar": self.max_points_per_pillar,
            "n_classes": self.n_classes,
            "base_size": self.base_size,
            "score_thresh": self.score_thresh,
            "nms_iou": self.nms_iou,
            "match_iou": self.match_iou,
        }

    @staticmethod
    def from_meta(meta: dict) -> "DetectorConfig":
        det = meta["detector"]
        return DetectorConfig(
            grid=tuple(det["grid"]),
            field_size=det["field_size"],
            max_points_per_pillar=det["max_points_per_pillar"],
            n_classes=det["n_classes"],
            base_size=det["base_size"],
            score_thresh=det["score_thresh"],
            nms_iou=det["nms_iou"],
            match_iou=det["match_iou"],
        )


def _bn(channels: int, rng: np.random.Generator) -> BatchNorm:
    return BatchNorm(
        gamma=rng.uniform(0.8, 1.2, size=channels).astype(np.float32),
        beta=rng.normal(scale=0.05, size=channels).astype(np.float32),
        mean=rng.normal(scale=0.1, size=channels).astype(np.float32),
        var=rng.uniform(0.8, 1.4, size=channels).astype(np.float32),
        eps=1e-5,
    )


def build_toy_detector(cfg: DetectorConfig = DetectorConfig(), seed: int = 0) -> ModelGraph:
    """Fresh detector with He-initialized weights and plausible BN stats."""
    rng = np.random.default_rng(seed)
    layers: list[LayerSpec] = []
    stages: dict[str, list[str]] = {s: [] for s in ("voxel_encoder", "middle_encoder", "backbone", "neck", "bbox_head")}
    index = 1

    def he_linear(dout, din):
        return rng.normal(scale=math.sqrt(2.0 / din), size=(dout, din)).astype(np.float32)

    def he_conv(cout, cin, k):
        return rng.normal(scale=math.sqrt(2.0 / (cin * k * k)), size=(cout, cin, k, k)).astype(np.float32)

    # balance the init against the very unequal raw feature ranges; the raw
    # inputs themselves stay unnormalized (that is the whole point of the task)
    feature_scale = np.array(
        [cfg.field_size / 2, cfg.field_size / 2, 0.5, 0.5, 0.5], dtype=np.float32
    )
    pfn_weight = he_linear(cfg.pfn_channels, POINT_FEATURES) / feature_scale[None, :]
    name = "voxel_encoder.pfn.linear"
    layers.append(
        LayerSpec(
            name=name,
            kind="linear",
            index=index,
            weight=pfn_weight.astype(np.float32),
            bias=np.zeros(cfg.pfn_channels, np.float32),
            bn=_bn(cfg.pfn_channels, rng),
            relu=True,
        )
    )
    stages["voxel_encoder"].append(name)
    index += 1
    layers.append(LayerSpec(name="voxel_encoder.maxpool", kind="maxpool"))
    stages["voxel_encoder"].append("voxel_encoder.maxpool")
    layers.append(LayerSpec(name="middle_encoder.scatter", kind="scatter", grid=cfg.grid))
    stages["middle_encoder"].append("middle_encoder.scatter")

    cin = cfg.pfn_channels
    for b, (cout, stride) in enumerate(zip(cfg.block_channels, cfg.block_strides)):
        for c in range(cfg.convs_per_block):
            name = f"backbone.block{b}.conv{c}"
            layers.append(
                LayerSpec(
                    name=name,
                    kind="conv2d",
                    index=index,
                    weight=he_conv(cout, cin, 3),
                    bias=np.zeros(cout, np.float32),
                    bn=_bn(cout, rng),
                    relu=True,
                    conv=ConvParams(stride=(stride, stride) if c == 0 else (1, 1), padding=(1, 1)),
                )
            )
            stages["backbone"].append(name)
            index += 1
            cin = cout

    layers.append(LayerSpec(name="neck.upsample", kind="upsample2x"))
    stages["neck"].append("neck.upsample")
    name = "neck.conv"
    layers.append(
        LayerSpec(
            name=name,
            kind="conv2d",
            index=index,
            weight=he_conv(cfg.neck_channels, cin, 3),
            bias=np.zeros(cfg.neck_channels, np.float32),
            bn=_bn(cfg.neck_channels, rng),
            relu=True,
            conv=ConvParams(stride=(1, 1), padding=(1, 1)),
        )
    )
    stages["neck"].append(name)
    index += 1
    cin = cfg.neck_channels

    cls_bias = np.full(cfg.n_classes, -2.0, np.float32)  # low-score prior
    layers.append(
        LayerSpec(
            name="bbox_head.conv_cls",
            kind="conv2d",
            index=index,
            weight=(0.1 * rng.normal(size=(cfg.n_classes, cin, 1, 1))).astype(np.float32),
            bias=cls_bias,
            conv=ConvParams(),
            is_head=True,
        )
    )
    stages["bbox_head"].append("bbox_head.conv_cls")
    index += 1
    layers.append(
        LayerSpec(
            name="bbox_head.conv_reg",
            kind="conv2d",
            index=index,
            weight=(0.1 * rng.normal(size=(4, cin, 1, 1))).astype(np.float32),
            bias=np.zeros(4, np.float32),
            conv=ConvParams(),
            is_head=True,
        )
    )
    stages["bbox_head"].append("bbox_head.conv_reg")

    meta = {"stages": stages, "detector": DetectorConfig(  # record resolved geometry
        grid=cfg.grid,
        field_size=cfg.field_size,
        max_points_per_pillar=cfg.max_points_per_pillar,
        n_classes=cfg.n_classes,
        base_size=cfg.base_size,
        score_thresh=cfg.score_thresh,
        nms_iou=cfg.nms_iou,
        match_iou=cfg.match_iou,
    ).to_meta()}
    return ModelGraph(layers=tuple(layers), meta=meta)


def pillarize_dataset(scenes: Sequence[Scene], cfg: DetectorConfig) -> list[PillarSample]:
    return [pillarize(s, cfg.grid, cfg.max_points_per_pillar, cfg.field_size) for s in scenes]


def encode_targets(scene: Scene, cfg: DetectorConfig):
    """Center-cell targets: class one-hot map, box offsets, positive and ignore masks.

    The cell holding a box center is positive; other cells whose centers fall
    inside the box are excluded from the classification loss so the convs are
    not penalized for responding to off-center object parts.
    """
    oh, ow = cfg.out_grid
    cell_h = cfg.field_size / oh
    cell_w = cfg.field_size / ow
    cls_t = np.zeros((cfg.n_classes, oh, ow), np.float32)
    reg_t = np.zeros((4, oh, ow), np.float32)
    pos = np.zeros((oh, ow), bool)
    ignore = np.zeros((oh, ow), bool)
    cell_cx = (np.arange(ow) + 0.5) * cell_w
    cell_cy = (np.arange(oh) + 0.5) * cell_h
    for box, cls in zip(scene.boxes, scene.classes):
        cx, cy, w, h = (float(v) for v in box)
        inside = (np.abs(cell_cy[:, None] - cy) <= h / 2) & (np.abs(cell_cx[None, :] - cx) <= w / 2)
        ignore |= inside
        i = min(oh - 1, max(0, int(cy / cell_h)))
        j = min(ow - 1, max(0, int(cx / cell_w)))
        if pos[i, j]:
            continue  # first box claims the cell
        pos[i, j] = True
        cls_t[int(cls), i, j] = 1.0
        reg_t[0, i, j] = cx / cell_w - (j + 0.5)
        reg_t[1, i, j] = cy / cell_h - (i + 0.5)
        reg_t[2, i, j] = math.log(w / cfg.base_size)
        reg_t[3, i, j] = math.log(h / cfg.base_size)
    ignore &= ~pos
    return cls_t, reg_t, pos, ignore


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def _local_peaks(score_map: np.ndarray) -> np.ndarray:
    """Cells that are the maximum of their 3x3 neighborhood (ties keep both)."""
    padded = np.pad(score_map, 1, constant_values=-np.inf)
    neighborhood = np.max(
        [padded[1 + di : padded.shape[0] - 1 + di, 1 + dj : padded.shape[1] - 1 + dj]
         for di in (-1, 0, 1) for dj in (-1, 0, 1)],
        axis=0,
    )
    return score_map >= neighborhood


def decode_and_nms(
    cls_map: np.ndarray,
    reg_map: np.ndarray,
    cfg: DetectorConfig,
    score_thresh: float | None = None,
    iou_thresh: float | None = None,
) -> list[Detection]:
    """Local-peak box decoding followed by per-class greedy NMS."""
    score_thresh = cfg.score_thresh if score_thresh is None else score_thresh
    iou_thresh = cfg.nms_iou if iou_thresh is None else iou_thresh
    if not (0.0 <= score_thresh <= 1.0 and 0.0 <= iou_thresh <= 1.0):
        raise ValueError(f"thresholds must lie in [0, 1], got {score_thresh}, {iou_thresh}")
    logits = cls_map[0] if cls_map.ndim == 4 else cls_map
    reg = reg_map[0] if reg_map.ndim == 4 else reg_map
    n_classes, oh, ow = logits.shape
    cell_h = cfg.field_size / oh
    cell_w = cfg.field_size / ow
    scores = _sigmoid(logits.astype(np.float64))
    detections: list[Detection] = []
    for cls in range(n_classes):
        peaks = _local_peaks(scores[cls])
        cand: list[Detection] = []
        for i, j in np.argwhere(peaks):
            s = float(scores[cls, i, j])
            if s < score_thresh:
                continue
            dx, dy, dw, dh = (float(v) for v in reg[:, i, j])
            cx = (j + 0.5 + dx) * cell_w
            cy = (i + 0.5 + dy) * cell_h
            w = cfg.base_size * math.exp(min(4.0, max(-4.0, dw)))
            h = cfg.base_size * math.exp(min(4.0, max(-4.0, dh)))
            cand.append(Detection(box=np.array([cx, cy, w, h]), class_id=cls, score=s))
        cand.sort(key=lambda d: -d.score)
        kept: list[Detection] = []
        for det in cand:
            if any(
                iou_matrix(det.box[None, :], k.box[None, :])[0, 0] >= iou_thresh for k in kept
            ):
                continue
            kept.append(det)
        detections.extend(kept)
    return detections


def evaluate(
    graph: ModelGraph,
    plan: PrecisionPlan,
    stats: CalibrationStats | None,
    dataset: Sequence[Scene],
    cfg: DetectorConfig | None = None,
    samples: Sequence[PillarSample] | None = None,
) -> EvalResult:
    """Full per-class x per-difficulty AP40 table for the planned model."""
    cfg = cfg or DetectorConfig.from_meta(graph.meta)
    planned = apply_plan(fold_all_bn(graph), plan)
    if samples is None:
        samples = pillarize_dataset(dataset, cfg)
    dets_per_scene = []
    for sample in samples:
        cls_map, reg_map = forward(planned, sample, stats=stats)
        dets_per_scene.append(decode_and_nms(cls_map, reg_map, cfg))
    ap = {}
    for cls_id, cls_name in enumerate(CLASS_NAMES[: cfg.n_classes]):
        for diff in DIFFICULTIES:
            ap[(cls_name, diff)] = ap40(dets_per_scene, dataset, cls_id, diff, cfg.match_iou)
    return EvalResult(ap=ap, class_names=CLASS_NAMES[: cfg.n_classes])


def make_train_examples(scenes: Sequence[Scene], cfg: DetectorConfig):
    """Pillarize scenes and attach center-cell targets for the detection loss."""
    from .qat import TrainExample

    examples = []
    for scene, sample in zip(scenes, pillarize_dataset(scenes, cfg)):
        cls_t, reg_t, pos, ignore = encode_targets(scene, cfg)
        examples.append(
            TrainExample(
                sample=sample,
                cls_target=cls_t,
                reg_target=reg_t,
                pos_mask=pos,
                ignore_mask=ignore,
            )
        )
    return examples


def make_evaluator(
    dataset: Sequence[Scene], cfg: DetectorConfig
) -> Callable[[ModelGraph, PrecisionPlan, CalibrationStats | None], float]:
    """mAP evaluator closure with the eval set pillarized once up front."""
    samples = None

    def evaluator(graph, plan, stats):
        nonlocal samples
        if samples is None:
            samples = pillarize_dataset(dataset, cfg)
        return evaluate(graph, plan, stats, dataset, cfg, samples=samples).map

    return evaluator
