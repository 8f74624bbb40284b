"""Library-level tour on random data: masks, FLOPs estimate, sliced inference.

Runs in a few seconds and needs no dataset.
"""
import numpy as np

from ftwt.efficiency import dense_macs, estimate_reduction_pretraining, sliced_inference
from ftwt.gating import build_heads
from ftwt.network import build_network, fold_batchnorm, forward, mnist_net
from ftwt.supervision import MassCriterion, generate_gt_masks, mass_masks

acts = [2.0, 1.5, 1.0, 0.5, 0.0]
for r in (0.5, 0.85, 0.9, 1.0):
    print(f"r={r:<4}  keep {mass_masks(acts, MassCriterion(r)).astype(int).tolist()}")

net = build_network(mnist_net(), seed=0)
x = np.random.default_rng(0).normal(size=(32, 1, 28, 28)).astype(np.float32)

print("dense MACs per image:", dense_macs(net.arch)["total"])
for r in (1.0, 0.9, 0.7):
    rep = estimate_reduction_pretraining(net, x, MassCriterion(r))
    print(f"estimated reduction at r={r}: {rep.reduction:6.2f}%")

gt = generate_gt_masks(net, x[:1], MassCriterion(0.7))
folded = fold_batchnorm(net)
res = sliced_inference(folded, None, x[0], masks={b: m[0] for b, m in gt.gt.items()})
ref = forward(folded, x[:1], masks={b: m[:1] for b, m in gt.gt.items()}).logits[0]
print("kept filters per block:", {b: len(k) for b, k in res.kept.items()})
print("sliced vs masked dense max |diff|:", float(np.abs(res.logits - ref).max()))

# untrained heads keep every channel
heads = build_heads(net.arch)
print("untrained heads keep:", {b: len(k) for b, k in sliced_inference(folded, heads, x[0]).kept.items()})
