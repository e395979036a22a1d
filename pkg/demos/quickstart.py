"""Train a small model on synthetic clips and score it.

Run from the repository root:  python3 demos/quickstart.py
Takes about ten seconds on one CPU core.
"""

import numpy as np

from f2net import F2Net, GenConfig, ModelConfig, gen_synthetic
from f2net.data import static_pairs
from f2net.metrics import evaluate_masks
from f2net.train import TrainConfig, predict_masks, train


def main():
    videos = gen_synthetic(GenConfig(count=6, size=64, length=8), seed=1)
    val = gen_synthetic(GenConfig(count=4, size=64, length=8), seed=3)
    print("scenarios:", [v.scenario for v in videos])

    model = F2Net(ModelConfig(c2=8, c4=8, channels=16, center_channels=16, decoder_channels=16), seed=0)
    cfg = TrainConfig(epochs=30, gt_center_epochs=20, batch_size=3, val_every=10)
    for row in train(model, static_pairs(videos), videos, cfg, val_set=val):
        if row.val_j is not None:
            print(f"epoch {row.epoch:3d}  L_f {row.loss_f:8.2f}  L_b {row.loss_b:9.2f}  val J {row.val_j:.3f}")

    preds = {s.name: predict_masks(model, s) for s in val}
    report = evaluate_masks(preds, {s.name: s.gt_masks for s in val})
    print(report.table())

    res = model.forward(val[0].frames[0], val[0].frames[4])
    print("center on the quarter grid:", res.center, "heatmap peak:", float(np.max(res.heatmap.data)))


if __name__ == "__main__":
    main()
