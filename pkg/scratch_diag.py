"""Scratch: inspect activation/gradient flow in the toy detector."""

import numpy as np

from pillarmix.detector import DetectorConfig, build_toy_detector, make_train_examples
from pillarmix.model import PrecisionPlan, apply_plan, fold_all_bn, forward
from pillarmix.qat import TrainConfig, backward, detection_loss, train_qat
from pillarmix.scenes import DatasetConfig, generate_dataset

det_cfg = DetectorConfig()
data_cfg = DatasetConfig(size=64)
scenes = generate_dataset(data_cfg, seed=100)
graph = apply_plan(fold_all_bn(build_toy_detector(det_cfg, seed=0)), PrecisionPlan())
examples = make_train_examples(scenes, det_cfg)

# activation stats per layer at init
acts = {}
forward(graph, examples[0].sample, observe_fn=lambda l, x: acts.__setitem__(l.name, (x.min(), x.mean(), x.max(), (x > 0).mean())))
print("layer input stats at init (min/mean/max/frac>0):")
for name, v in acts.items():
    print(f"  {name:30s} {v[0]:+8.3f} {v[1]:+8.3f} {v[2]:+8.3f} {v[3]:.2f}")

cfg = TrainConfig(learning_rate=0.1, epochs=4, batch_size=8, seed=0, pos_weight=2.0)
trained, hist = train_qat(graph, PrecisionPlan(), None, examples, cfg)
print([f"{h['loss']:.3f}" for h in hist])

ex = examples[0]
cls_map, reg_map = forward(trained, ex.sample)
pos = ex.pos_mask
print("pos cells:", np.argwhere(pos))
print("cls logits at pos cells:")
for i, j in np.argwhere(pos):
    k = int(np.argmax(ex.cls_target[:, i, j]))
    print(f"  cell({i},{j}) true class {k}: logits {cls_map[0, :, i, j]}")
print("neg logit stats:", cls_map[0][:, ~pos].min(), cls_map[0][:, ~pos].mean(), cls_map[0][:, ~pos].max())

# gradient magnitude per layer on one example
tape = []
outs = forward(trained, ex.sample, tape=tape)
loss, d_outs = detection_loss(outs, ex, cfg)
grads = backward(tape, d_outs)
print(f"loss {loss:.3f}")
for idx in sorted(grads):
    dw, db = grads[idx]
    layer = trained.layer_by_index(idx)
    wn = float(np.abs(trained.layer_by_index(idx).weight).mean())
    print(f"  L{idx:2d} {layer.name:28s} |dW|={np.abs(dw).mean():.2e} |W|={wn:.2e} ratio={np.abs(dw).mean()/wn:.2e}")
