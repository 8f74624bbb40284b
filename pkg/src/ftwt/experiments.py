"""High-level runners shared by the command line and the acceptance suite.

Every runner writes its reports (JSON plus CSV or a text table) into an output
directory together with a ``manifest.json`` that records what produced them.
"""

from __future__ import annotations

import csv
import json
import platform
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import __version__
from .analysis import BLUR_SIGMAS, NOISE_SIGMAS, collect_routes, heatmap_export, shift_evaluation
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (CriterionConfig, DatasetConfig, config_digest, config_to_dict, echo_config)
from .data import Split, load_cifar10_binary, load_mnist_idx, stratified_subset
from .efficiency import (estimate_reduction_pretraining, latency_benchmark,
                         measured_flops_post_training)
from .errors import ConfigurationError, FormatError
from .gating import build_heads
from .network import build_network, fold_batchnorm, get_architecture
from .supervision import MassCriterion, load_signature
from .training import TrainConfig, evaluate, train_loop


def load_splits(ds):
    """``(train, test)`` :class:`Split` objects for a :class:`DatasetConfig`."""
    if ds.kind == "mnist_idx":
        tr = load_mnist_idx(ds.train_images, ds.train_labels)
        te = load_mnist_idx(ds.test_images, ds.test_labels)
    else:
        tr = load_cifar10_binary(ds.train_files)
        te = load_cifar10_binary(ds.test_files)
    splits = []
    for (x, y), n in ((tr, ds.subset), (te, ds.test_subset)):
        if n is not None:
            if n > len(y):
                raise ConfigurationError(f"subset of {n} exceeds the {len(y)} available samples")
            idx = stratified_subset(y, n, ds.subset_seed)
            x, y = x[idx], y[idx]
        splits.append(Split(x, y, tuple(ds.mean), tuple(ds.std)))
    return tuple(splits)


def dataset_from_file(path):
    """Dataset section from a JSON file holding either a full config or just the section."""
    from .config import config_from_dict, parse_config
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as e:
        raise ConfigurationError(f"{path}: {e.strerror or e}") from None
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: invalid JSON ({e})") from None
    if isinstance(data, dict) and "dataset" in data:
        return parse_config(path).dataset
    return config_from_dict({"dataset": data}, path.parent).dataset


def _train_config(cfg):
    t = cfg.train
    return TrainConfig(mode=t.mode, epochs=t.epochs, batch_size=t.batch_size, lr=t.lr,
                       head_lr=t.head_lr, milestones=tuple(t.milestones), lr_decay=t.lr_decay,
                       momentum=t.momentum, weight_decay=t.weight_decay, seed=cfg.seed,
                       mask_source=t.mask_source, pred_loss_reduction=t.pred_loss_reduction,
                       use_softmax=t.use_softmax, from_scratch=t.from_scratch, flip=t.flip)


def resolve_rule(cfg, arch):
    if cfg.signature is not None:
        return load_signature(cfg.signature, arch)
    if cfg.criterion is not None:
        c = cfg.criterion
        return MassCriterion(c.r, c.inclusive_crossing, c.zero_eps)
    return None


def _check_shape(arch, split):
    if tuple(split.images.shape[1:]) != tuple(arch.input_shape):
        raise ConfigurationError(
            f"architecture {arch.name} expects inputs {tuple(arch.input_shape)}, "
            f"dataset provides {tuple(split.images.shape[1:])}")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(out_dir, command, args, digest=None, seed=None, outputs=()):
    """Record what produced the files in ``out_dir`` (no timestamps, no output paths)."""
    manifest = {
        "command": command,
        "args": args,
        "config_digest": digest,
        "seed": seed,
        "versions": {"ftwt": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "outputs": sorted(outputs),
    }
    _write_json(Path(out_dir) / "manifest.json", manifest)
    return manifest


def _out(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _info_dataset(info):
    ds = info.get("dataset")
    if ds is None:
        raise ConfigurationError("checkpoint records no dataset; pass --dataset")
    try:
        return DatasetConfig.model_validate(ds)
    except ValidationError as e:
        raise FormatError(f"checkpoint dataset record is invalid: {e.error_count()} error(s)") from None


# ---------------------------------------------------------------------------
# runners
# ---------------------------------------------------------------------------

def run_train(cfg, out_dir, log=None):
    """Train a dense baseline or a gated network; returns the report dict."""
    out = _out(out_dir)
    echo_config(cfg, out)
    train, test = load_splits(cfg.dataset)
    arch = get_architecture(cfg.architecture)
    _check_shape(arch, train)
    tc = _train_config(cfg)
    heads = {}
    if tc.mode == "baseline" or tc.from_scratch:
        net = build_network(arch, cfg.seed)
    else:
        net, _, _ = load_checkpoint(cfg.pretrained)
        if net.arch != arch:
            raise ConfigurationError(f"pretrained checkpoint is a {net.arch.name}, config asks for {arch.name}")
        if net.folded:
            raise ConfigurationError("pretrained checkpoint is BN-folded and cannot be trained")
    if tc.mode != "baseline":
        heads = build_heads(arch, use_softmax=tc.use_softmax)
    rule = resolve_rule(cfg, arch)
    xt, xe = train.normalized(), test.normalized()
    result = train_loop(tc, net, xt, train.labels, xe, test.labels, heads=heads, rule=rule,
                        csv_path=out / "metrics.csv", log=log)
    ev = evaluate(net, result.heads, xe, test.labels)
    digest = config_digest(cfg)
    report = {"mode": tc.mode, "epochs": tc.epochs, "test_accuracy": ev.accuracy,
              "keep_rates": {str(b): v for b, v in sorted(ev.keep_rates.items())}}
    if result.heads:
        report["flops"] = measured_flops_post_training(net, result.heads, xe).to_dict()
    info = {"mode": tc.mode, "seed": cfg.seed, "epochs": tc.epochs, "config_digest": digest,
            "dataset": config_to_dict(cfg)["dataset"], "test_accuracy": ev.accuracy}
    save_checkpoint(out / "model.ftwt", net, result.heads, info)
    _write_json(out / "report.json", report)
    write_manifest(out, "train", {"config": config_to_dict(cfg) | {"output_dir": None}}, digest,
                   cfg.seed, ["config.json", "metrics.csv", "model.ftwt", "report.json"])
    return report


def run_estimate(cfg, ckpt, rs, out_dir, cascaded=True, split="train"):
    """One-shot FLOPs reduction estimate per ``r`` on the frozen dense network."""
    out = _out(out_dir)
    net, _, info = load_checkpoint(ckpt)
    train, test = load_splits(cfg.dataset)
    data = train if split == "train" else test
    _check_shape(net.arch, data)
    x = data.normalized()
    base = cfg.criterion or CriterionConfig(r=1.0)
    rows = []
    for r in rs:
        crit = MassCriterion(r, base.inclusive_crossing, base.zero_eps)
        rep = estimate_reduction_pretraining(net, x, crit, cascaded)
        rows.append({"r": r, "reduction": rep.reduction, "report": rep.to_dict()})
    _write_json(out / "estimate.json", {"cascaded": cascaded, "split": split, "samples": len(x),
                                        "estimates": rows})
    with open(out / "estimate.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["r", "estimated_reduction_percent"])
        for row in rows:
            w.writerow([row["r"], f"{row['reduction']:.6f}"])
    write_manifest(out, "estimate", {"r": list(rs), "cascaded": cascaded, "split": split},
                   config_digest(cfg), cfg.seed, ["estimate.csv", "estimate.json"])
    return rows


def _resolve_split(info, dataset, split):
    ds = dataset if dataset is not None else _info_dataset(info)
    train, test = load_splits(ds)
    return train if split == "train" else test


def run_eval(ckpt, out_dir, dataset=None, split="test"):
    out = _out(out_dir)
    net, heads, info = load_checkpoint(ckpt)
    data = _resolve_split(info, dataset, split)
    _check_shape(net.arch, data)
    x = data.normalized()
    ev = evaluate(net, heads, x, data.labels)
    report = {"split": split, "samples": len(x), "accuracy": ev.accuracy,
              "keep_rates": {str(b): v for b, v in sorted(ev.keep_rates.items())}}
    if heads:
        report["flops"] = measured_flops_post_training(net, heads, x).to_dict()
    _write_json(out / "eval.json", report)
    write_manifest(out, "eval", {"split": split}, info.get("config_digest"), info.get("seed"),
                   ["eval.json"])
    return report


def run_bench(ckpt, out_dir, reps=30, warmup=5, n_images=16, dense_ckpt=None, dataset=None,
              label=""):
    """Batch-1 single-thread latency of the dense backbone vs sliced dynamic inference."""
    out = _out(out_dir)
    net, heads, info = load_checkpoint(ckpt)
    if not heads:
        raise ConfigurationError("bench needs a checkpoint with gating heads")
    dense = load_checkpoint(dense_ckpt)[0] if dense_ckpt else net
    if dense.arch != net.arch:
        raise ConfigurationError("dense and dynamic checkpoints have different architectures")
    data = _resolve_split(info, dataset, "test")
    x = data.normalized()[:n_images]
    dyn_f = net if net.folded else fold_batchnorm(net)
    dense_f = dense if dense.folded else fold_batchnorm(dense)
    rep = latency_benchmark(dense_f, dyn_f, heads, x, reps=reps, warmup=warmup, label=label)
    _write_json(out / "bench.json", rep.to_dict())
    (out / "bench.txt").write_text(rep.to_table() + "\n")
    write_manifest(out, "bench", {"reps": reps, "warmup": warmup, "n_images": n_images,
                                  "label": label}, info.get("config_digest"), info.get("seed"),
                   ["bench.json", "bench.txt"])
    return rep


def run_routes(ckpt, out_dir, dataset=None, split="test"):
    out = _out(out_dir)
    net, heads, info = load_checkpoint(ckpt)
    if not heads:
        raise ConfigurationError("routes needs a checkpoint with gating heads")
    data = _resolve_split(info, dataset, split)
    stats = collect_routes(net, heads, data.normalized())
    _write_json(out / "routes.json", stats.to_dict())
    stats.write_csv(out / "routes.csv")
    write_manifest(out, "routes", {"split": split}, info.get("config_digest"), info.get("seed"),
                   ["routes.csv", "routes.json"])
    return stats


def run_shift(ckpt, kind, out_dir, compare=None, dataset=None, sigmas=None, seed=0):
    """Brier score under blur or additive noise for the checkpoint and any ``compare`` models."""
    if kind not in ("blur", "noise"):
        raise ConfigurationError("kind must be 'blur' or 'noise'")
    out = _out(out_dir)
    net, heads, info = load_checkpoint(ckpt)
    models = {"model": (net, heads)}
    for name, path in (compare or {}).items():
        if name in models:
            raise ConfigurationError(f"duplicate model name {name!r}")
        n2, h2, _ = load_checkpoint(path)
        models[name] = (n2, h2)
    data = _resolve_split(info, dataset, "test")
    if sigmas is None:
        sigmas = BLUR_SIGMAS if kind == "blur" else NOISE_SIGMAS
    rep = shift_evaluation(models, data, kind, sigmas, seed)
    _write_json(out / f"shift_{kind}.json", rep.to_dict())
    with open(out / f"shift_{kind}.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sigma"] + [f"brier_{n}" for n in models])
        for i, s in enumerate(rep.sigmas):
            w.writerow([s] + [f"{rep.brier[n][i]:.6f}" for n in models])
    write_manifest(out, "shift", {"kind": kind, "models": sorted(models), "sigmas": list(sigmas),
                                  "seed": seed}, info.get("config_digest"), seed,
                   [f"shift_{kind}.csv", f"shift_{kind}.json"])
    return rep


def run_heatmaps(ckpt, layer, n, out_dir, dataset=None):
    out = _out(out_dir)
    net, heads, info = load_checkpoint(ckpt)
    data = _resolve_split(info, dataset, "test")
    rows = heatmap_export(net, heads, data, layer, n, out)
    files = ["manifest.csv"] + [r[k] for r in rows for k in ("input", "baseline", "pruned")]
    write_manifest(out, "heatmaps", {"layer": layer, "n": n}, info.get("config_digest"),
                   info.get("seed"), files)
    return rows
