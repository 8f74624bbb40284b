"""Pick a head learning rate by training-set mask agreement.

Retrains only the gating heads on a frozen backbone for each candidate lr and
reports, per gated block, the agreement between predicted and ground-truth
masks and the predicted keep rate. Everything is measured on the training
subset, so the test split never steers the choice.

    python demos/head_lr_sweep.py CKPT MNIST_DIR --r 0.84 [--no-softmax]
"""
import argparse
from pathlib import Path

import numpy as np

from ftwt.checkpoint import load_checkpoint
from ftwt.data import MNIST_MEAN, MNIST_STD, load_mnist_idx, normalize, stratified_subset
from ftwt.efficiency import predicted_masks
from ftwt.gating import build_heads
from ftwt.supervision import MassCriterion, generate_gt_masks
from ftwt.training import TrainConfig, train_loop

p = argparse.ArgumentParser()
p.add_argument("ckpt")
p.add_argument("mnist_dir", type=Path)
p.add_argument("--r", type=float, default=0.84)
p.add_argument("--lrs", type=float, nargs="+", default=[0.1, 1.0, 3.0, 10.0, 30.0])
p.add_argument("--no-softmax", action="store_true")
p.add_argument("--epochs", type=int, default=20)
args = p.parse_args()

x, y = load_mnist_idx(args.mnist_dir / "train-images-idx3-ubyte", args.mnist_dir / "train-labels-idx1-ubyte")
idx = stratified_subset(y, 2000, 0)
x, y = normalize(x[idx], MNIST_MEAN, MNIST_STD), y[idx]
rule = MassCriterion(args.r)

for lr in args.lrs:
    net, _, _ = load_checkpoint(args.ckpt)
    heads = build_heads(net.arch, use_softmax=not args.no_softmax)
    # a vanishing backbone lr keeps the backbone fixed while heads follow the usual schedule
    cfg = TrainConfig(mode="decoupled", epochs=args.epochs, batch_size=64, lr=1e-12, head_lr=lr,
                      pred_loss_reduction="sum", weight_decay=0.0)
    train_loop(cfg, net, x, y, x[:10], y[:10], heads=heads, rule=rule)
    gt = generate_gt_masks(net, x, rule).gt
    pm = predicted_masks(net, heads, x)
    agree = {b: float((pm[b] == gt[b]).mean()) for b in gt}
    cells = "  ".join(f"block {b}: agree {agree[b]:.3f} keep {pm[b].mean():.3f}/{gt[b].mean():.3f}" for b in gt)
    print(f"head_lr {lr:<6g} mean agree {np.mean(list(agree.values())):.3f}  {cells}", flush=True)
