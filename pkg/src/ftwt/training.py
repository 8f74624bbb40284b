"""Baseline and gated training.

The objective is ``L_total = L_ent + L_pred``: task cross-entropy plus the
heads' per-filter BCE against ground-truth masks regenerated from the current
backbone every step. In decoupled mode the two terms train disjoint parameter
sets; in joint mode one backward pass covers both, with the binarisation
treated as identity (straight-through).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigurationError
from .gating import bce_with_logits, binarize, head_backward, head_forward, predicted_mask_fn
from .network import backward, forward
from .supervision import masks_from_outputs

MODES = ("baseline", "decoupled", "joint")


@dataclass
class TrainConfig:
    mode: str = "baseline"
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.1
    head_lr: float = 0.1
    milestones: tuple = (8, 12, 15)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    mask_source: str = "predicted"  # or "ground_truth" (teacher forcing)
    pred_loss_reduction: str = "mean"
    use_softmax: bool = True
    from_scratch: bool = False
    flip: bool = False

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigurationError("milestones must be strictly increasing")
        if self.mask_source not in ("predicted", "ground_truth"):
            raise ConfigurationError("mask_source must be 'predicted' or 'ground_truth'")
        if self.pred_loss_reduction not in ("mean", "sum"):
            raise ConfigurationError("pred_loss_reduction must be 'mean' or 'sum'")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")


def lr_schedule(epoch, lr0, milestones=(), decay=0.1):
    """Step decay: ``lr0 * decay ** (number of milestones <= epoch)``."""
    if epoch < 0:
        raise ConfigurationError("epoch must be >= 0")
    return lr0 * decay ** sum(1 for m in milestones if epoch >= m)


@dataclass
class LossReport:
    l_ent: float
    l_pred: float
    per_layer: dict = field(default_factory=dict)
    head_acc: float = float("nan")
    correct: int = 0
    count: int = 0

    @property
    def l_total(self):
        return self.l_ent + self.l_pred


def total_loss(logits, labels, head_logits=None, gt_masks=None, reduction="mean"):
    """``(report, dlogits, dP per block)`` for the unweighted sum of both losses."""
    l_ent, dlogits = ops.cross_entropy_with_logits(logits, labels)
    head_logits = head_logits or {}
    dps, per_layer = {}, {}
    hits = total = 0
    for b in sorted(head_logits):
        loss, dp = bce_with_logits(head_logits[b], gt_masks[b], reduction)
        per_layer[b] = loss
        dps[b] = dp
        hits += int((binarize(head_logits[b]) == gt_masks[b]).sum())
        total += gt_masks[b].size
    l_pred = 0.0
    if per_layer:
        l_pred = sum(per_layer.values())
        if reduction == "mean":
            l_pred /= len(per_layer)
            dps = {b: dp / len(per_layer) for b, dp in dps.items()}
    report = LossReport(l_ent, l_pred, per_layer, hits / total if total else float("nan"),
                        int((logits.argmax(axis=1) == labels).sum()), len(labels))
    return report, dlogits, dps


def head_params(heads):
    out = {}
    for b, h in heads.items():
        out[f"head.{b}.weight"] = h.weight
        out[f"head.{b}.bias"] = h.bias
    return out


def _apply_head_params(heads, params):
    for b, h in heads.items():
        h.weight = params[f"head.{b}.weight"]
        h.bias = params[f"head.{b}.bias"]


def new_optimizers(cfg):
    return (ops.SGD(cfg.lr, cfg.momentum, cfg.weight_decay),
            ops.SGD(cfg.head_lr, cfg.momentum, cfg.weight_decay))


@dataclass
class StepGradients:
    report: LossReport
    grads: dict  # backbone parameter name -> gradient
    head_grads: dict  # "head.{b}.weight" / "head.{b}.bias" -> gradient
    running_stats: dict


def compute_gradients(net, heads, xb, yb, cfg, rule=None):
    """Losses and gradients of one batch in ``cfg.mode``, without updating anything.

    Decoupled: backbone grads see the masks as constants and head grads come
    from the BCE term alone. Joint: the binarisation is bypassed with the
    straight-through identity, so the task loss reaches the heads through
    dL/dM and the heads' BCE gradient reaches the backbone through I^b.
    """
    gated = cfg.mode != "baseline" and heads
    head_caches, head_logits, gt = {}, {}, {}

    def mask_fn(b, inp, out):
        head = heads.get(b)
        if head is None:
            return None
        p, head_caches[b] = head_forward(inp, head)
        head_logits[b] = p
        gt[b] = masks_from_outputs(out, b, rule)
        return binarize(p) if cfg.mask_source == "predicted" else gt[b]

    if gated and rule is None:
        raise ConfigurationError("gated training needs a mass criterion or a signature")
    res = forward(net, xb, mask_fn=mask_fn if gated else None, train=True, keep_cache=True)
    report, dlogits, dps = total_loss(res.logits, yb, head_logits, gt, cfg.pred_loss_reduction)

    head_grads = {}
    hook = None
    if gated and cfg.mode == "joint":
        def hook(b, dmask):
            dp = dps[b] + dmask if cfg.mask_source == "predicted" else dps[b]
            dw, db, di = head_backward(dp, head_caches[b], input_grad=True)
            head_grads[f"head.{b}.weight"], head_grads[f"head.{b}.bias"] = dw, db
            return di
    grads = backward(net, res, dlogits, hook)
    if gated and cfg.mode == "decoupled":
        for b, dp in dps.items():
            dw, db, _ = head_backward(dp, head_caches[b])
            head_grads[f"head.{b}.weight"], head_grads[f"head.{b}.bias"] = dw, db
    return StepGradients(report, grads, head_grads, res.running_stats)


def train_step(net, heads, xb, yb, cfg, rule=None, optimizers=None, lr=None, head_lr=None):
    """One SGD step in ``cfg.mode``; parameters are updated in place."""
    opt_net, opt_heads = optimizers or new_optimizers(cfg)
    lr = cfg.lr if lr is None else lr
    head_lr = cfg.head_lr if head_lr is None else head_lr
    g = compute_gradients(net, heads, xb, yb, cfg, rule)
    net.params.update(g.running_stats)
    opt_net.step(net.params, g.grads, lr)
    if g.head_grads:
        hp = head_params(heads)
        opt_heads.step(hp, g.head_grads, head_lr)
        _apply_head_params(heads, hp)
    return g.report


def train_step_decoupled(net, heads, xb, yb, cfg, rule, optimizers=None, lr=None, head_lr=None):
    if cfg.mode != "decoupled":
        raise ConfigurationError("train_step_decoupled needs mode='decoupled'")
    return train_step(net, heads, xb, yb, cfg, rule, optimizers, lr, head_lr)


def train_step_joint(net, heads, xb, yb, cfg, rule, optimizers=None, lr=None, head_lr=None):
    if cfg.mode != "joint":
        raise ConfigurationError("train_step_joint needs mode='joint'")
    return train_step(net, heads, xb, yb, cfg, rule, optimizers, lr, head_lr)


# ---------------------------------------------------------------------------
# evaluation and the epoch loop
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    keep_rates: dict  # block -> mean fraction of kept filters
    logits: np.ndarray


def evaluate(net, heads, x, y, batch_size=256):
    """Eval-mode accuracy; heads (if any) gate the forward pass."""
    logits, kept = [], {b: [] for b in (heads or {})}
    for s in range(0, len(x), batch_size):
        res = forward(net, x[s:s + batch_size],
                      mask_fn=predicted_mask_fn(heads) if heads else None)
        logits.append(res.logits)
        for b in kept:
            kept[b].append(res.masks[b].mean(axis=1))
    logits = np.concatenate(logits)
    acc = float((logits.argmax(axis=1) == y).mean()) if len(y) else float("nan")
    return EvalResult(acc, {b: float(np.concatenate(v).mean()) for b, v in kept.items()}, logits)


@dataclass
class TrainResult:
    net: object
    heads: dict
    history: list


CSV_FIELDS = ["epoch", "lr", "L_ent", "L_pred", "train_acc", "test_acc",
              "mean_keep_rate_per_layer", "wall_seconds"]


def train_loop(cfg, net, train_x, train_y, test_x=None, test_y=None, heads=None, rule=None,
               csv_path=None, log=None):
    """Train for ``cfg.epochs`` epochs with a seeded shuffle; mutates ``net``/``heads``."""
    rng = np.random.default_rng(cfg.seed)
    optimizers = new_optimizers(cfg)
    heads = heads if cfg.mode != "baseline" else {}
    history = []
    n = len(train_x)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, cfg.lr, cfg.milestones, cfg.lr_decay)
        head_lr = lr_schedule(epoch, cfg.head_lr, cfg.milestones, cfg.lr_decay)
        order = rng.permutation(n)
        flips = rng.random(n) < 0.5 if cfg.flip else None
        sums = np.zeros(2)
        correct = steps = 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            xb = train_x[idx]
            if flips is not None:
                xb = np.where(flips[idx][:, None, None, None], xb[..., ::-1], xb)
            rep = train_step(net, heads, xb, train_y[idx], cfg, rule, optimizers, lr, head_lr)
            sums += (rep.l_ent, rep.l_pred)
            correct += rep.correct
            steps += 1
        row = {"epoch": epoch + 1, "lr": lr, "L_ent": sums[0] / steps, "L_pred": sums[1] / steps,
               "train_acc": correct / n, "test_acc": float("nan"), "keep_rates": {}}
        if test_x is not None:
            ev = evaluate(net, heads, test_x, test_y)
            row["test_acc"] = ev.accuracy
            row["keep_rates"] = ev.keep_rates
        row["wall_seconds"] = time.perf_counter() - t0
        history.append(row)
        if log is not None:
            log(row)
    if csv_path is not None:
        write_metrics_csv(history, csv_path)
    return TrainResult(net, heads, history)


def write_metrics_csv(history, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_FIELDS)
        for row in history:
            keep = ";".join(f"{row['keep_rates'][b]:.6f}" for b in sorted(row["keep_rates"]))
            w.writerow([row["epoch"], f"{row['lr']:.6g}", f"{row['L_ent']:.6f}",
                        f"{row['L_pred']:.6f}", f"{row['train_acc']:.6f}",
                        f"{row['test_acc']:.6f}", keep, f"{row['wall_seconds']:.3f}"])
