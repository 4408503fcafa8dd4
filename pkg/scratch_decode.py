"""Scratch: inspect predictions vs GT after training."""

import numpy as np

from pillarmix.detector import (
    DetectorConfig,
    build_toy_detector,
    decode_and_nms,
    make_evaluator,
    make_train_examples,
    pillarize_dataset,
)
from pillarmix.model import PrecisionPlan, apply_plan, fold_all_bn, forward
from pillarmix.qat import TrainConfig, train_qat
from pillarmix.scenes import DatasetConfig, generate_dataset

det_cfg = DetectorConfig()
train_scenes = generate_dataset(DatasetConfig(size=192, outlier_rate=0.0), seed=100)
eval_scenes = generate_dataset(DatasetConfig(size=48, outlier_rate=0.0), seed=200)
graph = apply_plan(fold_all_bn(build_toy_detector(det_cfg, seed=0)), PrecisionPlan())
examples = make_train_examples(train_scenes, det_cfg)

cfg = TrainConfig(learning_rate=0.004, epochs=80, batch_size=8, seed=0, pos_weight=4.0, momentum=0.9, max_grad_norm=10.0)
trained, hist = train_qat(graph, PrecisionPlan(), None, examples, cfg)
print("last losses:", [f"{h['loss']:.2f}" for h in hist[-5:]])

samples = pillarize_dataset(eval_scenes, det_cfg)
for k in range(3):
    scene = eval_scenes[k]
    cls_map, reg_map = forward(trained, samples[k])
    scores = 1 / (1 + np.exp(-cls_map[0]))
    print(f"scene {k}: max score per class {scores.reshape(3, -1).max(axis=1)}")
    dets = decode_and_nms(cls_map, reg_map, det_cfg, score_thresh=0.15)
    print("  GT:")
    for box, cls, diff in zip(scene.boxes, scene.classes, scene.difficulty):
        print(f"    cls={cls} {diff:9s} box=({box[0]:.1f},{box[1]:.1f},{box[2]:.1f},{box[3]:.1f})")
    print("  detections (thresh 0.15):")
    for d in dets[:8]:
        print(f"    cls={d.class_id} score={d.score:.2f} box=({d.box[0]:.1f},{d.box[1]:.1f},{d.box[2]:.1f},{d.box[3]:.1f})")
