"""
Anatomy-change prediction on synthetic phantoms
===============================================

Generate a small phantom corpus, look at the ground-truth deformation, train a
tiny displacement network for a few epochs and compare the predicted follow-up
anatomy with the unchanged baseline.

Run with ``python demos/phantom_walkthrough.py``; takes about a minute on one core.
"""

import numpy as np

from anapred.dataset import split_cases, stack_input
from anapred.metrics import aggregate, dice
from anapred.model import ModelConfig
from anapred.phantom import PhantomRanges, PhantomSpec, generate_corpus
from anapred.train import TrainConfig, evaluate_model, predict, prepare_case, train
from anapred.warp import WarpMode, warp

# a compact phantom family on a 32 x 32 x 16 grid of 2 mm voxels
ranges = PhantomRanges(gtvp_radius_mm=(6, 7), gtvn_radius_mm=(4, 5), body_shrink_mm=(0.5, 1.5),
                       body_semiaxis_x_mm=(24, 26), body_semiaxis_y_mm=(19, 21))
base = PhantomSpec(shape=(32, 32, 16), body_semiaxes_mm=(25, 20, 100))
cases, _ = generate_corpus(10, ranges, seed=1, base=base)
cases = {c.case_id: c for c in cases}
train_ids, val_ids, test_ids = split_cases(sorted(cases), (0.8, 0.1, 0.1), seed=0)
print("split sizes:", len(train_ids), len(val_ids), len(test_ids))

# the ground-truth field maps each follow-up voxel back into the baseline
c = cases[test_ids[0]]
moved = warp(c.gtvp01, c.gt_dvf, WarpMode.NEAREST)
print("primary tumour volume ratio (follow-up / baseline): %.2f" % (c.gtvp21.data.sum() / c.gtvp01.data.sum()))
print("dice(baseline, follow-up)          = %.3f" % dice(c.gtvp01.data, c.gtvp21.data))
print("dice(warped baseline, follow-up)   = %.3f" % dice(moved.data, c.gtvp21.data))

# the network sees seven stacked channels
x = stack_input(c)
print("input tensor:", x.shape, x.dtype)

# a few epochs of a tiny model
model = ModelConfig(embed_dim=8, depths=(1, 1), heads=(2, 2), input_shape=(32, 32, 16), decoder_channels=8)
result = train(cases, (train_ids, val_ids, test_ids), TrainConfig(epochs=8, batch_size=2, seed=0), model)
for h in result.history:
    print("epoch %2d  train %.4f  val %.4f  lr %.1e" % (h["epoch"], h["train_total"], h["val_total"], h["lr"]))

report = aggregate(evaluate_model(result.net, [cases[i] for i in test_ids]))
print(report.to_text())
print("median GTVp dice gain over baseline: %.3f"
      % (report.median("Predicted", "dice_gtvp") - report.median("CBCT01", "dice_gtvp")))

pred = predict(result.net, prepare_case(c))
print("largest predicted displacement: %.3f voxels (ground truth %.3f)"
      % (np.abs(pred.dvf).max(), np.abs(c.gt_dvf).max()))
