"""Scratch: finite-difference check of the full-detector backward pass."""

import numpy as np

from pillarmix.detector import DetectorConfig, build_toy_detector, make_train_examples
from pillarmix.model import PrecisionPlan, apply_plan, fold_all_bn, forward
from pillarmix.qat import TrainConfig, backward, detection_loss
from pillarmix.scenes import DatasetConfig, generate_dataset

det_cfg = DetectorConfig(grid=(8, 8), block_channels=(8, 8, 8), convs_per_block=1, pfn_channels=8, neck_channels=8)
scenes = generate_dataset(DatasetConfig(size=1, boxes_per_scene=(2, 2)), seed=1)
graph = apply_plan(fold_all_bn(build_toy_detector(det_cfg, seed=3)), PrecisionPlan())
example = make_train_examples(scenes, det_cfg)[0]
cfg = TrainConfig(learning_rate=1e-3)


def loss_at(g):
    outs = forward(g, example.sample)
    return detection_loss(outs, example, cfg)[0]


tape = []
outs = forward(graph, example.sample, tape=tape)
loss, d_outs = detection_loss(outs, example, cfg)
grads = backward(tape, d_outs)

rng = np.random.default_rng(0)
max_rel = 0.0
for layer in graph.weight_layers:
    dw, db = grads[layer.index]
    for name, arr, g_arr in (("w", layer.weight, dw), ("b", layer.bias, db)):
        idx = tuple(rng.integers(0, s) for s in arr.shape)
        eps = 1e-3
        orig = arr[idx]
        arr[idx] = orig + eps
        lp = loss_at(graph)
        arr[idx] = orig - eps
        lm = loss_at(graph)
        arr[idx] = orig
        fd = (lp - lm) / (2 * eps)
        an = g_arr[idx]
        rel = abs(fd - an) / max(1e-8, abs(fd), abs(an))
        max_rel = max(max_rel, rel)
        print(f"layer {layer.index:2d} {layer.name:28s} {name}: fd={fd:+.6f} an={an:+.6f} rel={rel:.2e}")
print(f"max rel err: {max_rel:.3e}")
