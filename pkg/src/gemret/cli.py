"""``gemret`` command line: synth, train, whiten, index, eval, gradcheck."""
import argparse
from concurrent.futures import ThreadPoolExecutor
import json
from pathlib import Path
import sys

import numpy as np

from . import gradcheck
from .backbone import TinyFCN
from .imageio import read_pnm
from .loss import LossConfig
from .mining import MiningConfig, load_graph, m3_candidates, positive_pool
from .pooling import PoolingConfig
from .retrieval import (DEFAULT_SCALES, DescriptorIndex, QEConfig, load_index,
                        multiscale_descriptor, per_query_ap, save_index, write_ranked_lists)
from .synth import SynthConfig, generate, load_images, write_dataset
from .trainer import TrainConfig, fit, load_checkpoint, save_checkpoint
from .whitening import (LabeledPairSet, learn_lw, learn_pcaw, load_whitening,
                        save_whitening)


class ConfigError(ValueError):
    pass


def _bool(s):
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s):
    return [int(v) for v in s.split(",") if v.strip()]


def _floats(s):
    return [float(v) for v in s.split(",") if v.strip()]


def _opt_int(s):
    return None if s.lower() == "none" else int(s)


CONFIG_KEYS = {
    # trainer
    "optimizer": str, "lr": float, "momentum": float, "weight_decay": float,
    "batch_tuples": int, "epochs": int, "remine_per_epoch": int, "loss": str,
    "query_budget": _opt_int, "val_query_budget": _opt_int, "max_side": int,
    "margin": float, "triplet_margin": float,
    "train_clusters": _ints, "val_clusters": _ints,
    # mining
    "pool_size": int, "inlier_overlap": float, "scale_threshold": float,
    "negatives_per_tuple": int, "negative_strategy": str, "positive_strategy": str,
    "extra_negative_candidates_per_model": int,
    # model
    "pooling": str, "p": float, "per_map": _bool, "trainable_p": _bool,
    "maps": _ints, "kernel": int, "stride": int, "channels": int,
    # descriptors
    "scales": _floats,
    # synthetic data
    "clusters": int, "images_min": int, "images_max": int, "points_per_cluster": int,
    "camera_jitter": float, "image_size": int, "crop_min": float, "crop_max": float,
    "gratings": int, "nuisance": float,
}


def parse_config(path):
    """Flat ``key = value`` file; ``#`` starts a comment; unknown keys are errors."""
    out = {}
    if path is None:
        return out
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        try:
            out[key] = CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{n}: bad value for {key}: {exc}") from None
    return out


def _pick(conf, *keys):
    return {k: conf[k] for k in keys if k in conf}


def synth_config(conf, seed):
    return SynthConfig(seed=seed, **_pick(conf, "clusters", "images_min", "images_max",
                                           "points_per_cluster", "camera_jitter", "image_size",
                                           "crop_min", "crop_max", "gratings", "nuisance"))


def train_config(conf, seed):
    mining = MiningConfig(seed=seed, **_pick(
        conf, "pool_size", "inlier_overlap", "scale_threshold", "negatives_per_tuple",
        "negative_strategy", "positive_strategy", "extra_negative_candidates_per_model"))
    loss = LossConfig(**_pick(conf, "margin", "triplet_margin"))
    return TrainConfig(seed=seed, mining=mining, loss_cfg=loss, **_pick(
        conf, "optimizer", "lr", "momentum", "weight_decay", "batch_tuples", "epochs",
        "remine_per_epoch", "loss", "query_budget", "val_query_budget", "max_side"))


def model_from_config(conf, seed, in_channels=3):
    net = TinyFCN.init(conf.get("channels", in_channels), conf.get("maps", (8, 16, 32)),
                       conf.get("kernel", 3), conf.get("stride", 1), seed)
    mode = conf.get("pooling", "gem")
    if mode == "gem":
        pcfg = PoolingConfig.gem(conf.get("p", 3.0),
                                 net.out_maps if conf.get("per_map", False) else 0,
                                 conf.get("trainable_p", True))
    else:
        pcfg = PoolingConfig(mode)
    return net, pcfg


def _map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


# ---------------------------------------------------------------- commands

def cmd_synth(args, conf):
    cfg = synth_config(conf, args.seed)
    ds = generate(cfg)
    write_dataset(ds, args.out_dir)
    print(f"wrote {len(ds.images)} images in {len(ds.graph.clusters)} clusters to {args.out_dir}")


def _require(path, what):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")


def cmd_train(args, conf):
    _require(args.graph, "graph file")
    graph = load_graph(args.graph)
    images = load_images(graph, Path(args.graph).parent)
    channels = next(iter(images.values())).shape[2] if images else 3
    net, pcfg = model_from_config(conf, args.seed, channels)
    cfg = train_config(conf, args.seed)
    report = fit(net, pcfg, graph, images, cfg,
                 conf.get("train_clusters"), conf.get("val_clusters"))
    save_checkpoint(args.checkpoint, net, pcfg)
    report_path = args.report or str(args.checkpoint) + ".json"
    Path(report_path).write_text(report.to_json())
    print(f"selected epoch {report.selected_epoch} "
          f"(validation {report.val_score[report.selected_epoch]:.4f}); "
          f"checkpoint {args.checkpoint}, report {report_path}")


def whitening_pairs(graph, descriptors, mining: MiningConfig):
    """Matching: same-cluster pairs passing the relaxed-inlier thresholds.
    Non-matching: every cross-cluster pair."""
    pos = set()
    for q in sorted(graph.images):
        for i in m3_candidates(graph, q, positive_pool(graph, q, mining.pool_size), mining):
            pos.add((min(q, i), max(q, i)))
    ids = sorted(graph.images)
    neg = [(a, b) for n, a in enumerate(ids) for b in ids[n + 1:]
           if graph.cluster_of(a) != graph.cluster_of(b)]
    pairs = [(a, b, 1) for a, b in sorted(pos)] + [(a, b, 0) for a, b in neg]
    return LabeledPairSet(pairs, descriptors)


def cmd_whiten(args, conf):
    _require(args.checkpoint, "checkpoint")
    _require(args.graph, "graph file")
    net, pcfg = load_checkpoint(args.checkpoint)
    graph = load_graph(args.graph)
    images = load_images(graph, Path(args.graph).parent)
    scales = conf.get("scales", DEFAULT_SCALES)
    max_side = conf.get("max_side", 362)
    ids = sorted(images)
    vecs = _map(lambda i: multiscale_descriptor(net, pcfg, images[i], scales, max_side),
                ids, args.threads)
    descriptors = dict(zip(ids, vecs))
    if args.pcaw:
        t = learn_pcaw(descriptors, args.dim)
    else:
        pairs = whitening_pairs(graph, descriptors, train_config(conf, args.seed).mining)
        t = learn_lw(pairs, args.dim)
    save_whitening(t, args.out)
    print(f"wrote {args.dim}-d {'PCAw' if args.pcaw else 'Lw'} whitening to {args.out}")


def load_manifest(path):
    _require(path, "manifest")
    doc = json.loads(Path(path).read_text())
    root = Path(path).parent / doc.get("root", ".")
    return doc, root


def _load_entry(entry, root):
    path = root / entry["file"]
    try:
        img = read_pnm(path)
    except (OSError, ValueError) as exc:
        raise ValueError(f"entry {entry['id']}: cannot read image {path}: {exc}") from None
    crop = entry.get("crop")
    if crop:
        x, y, w, h = (int(v) for v in crop)
        if x < 0 or y < 0 or w < 1 or h < 1 or x + w > img.shape[1] or y + h > img.shape[0]:
            raise ValueError(f"entry {entry['id']}: crop {crop} outside image bounds")
        img = img[y:y + h, x:x + w]
    return img


def cmd_index(args, conf):
    _require(args.checkpoint, "checkpoint")
    net, pcfg = load_checkpoint(args.checkpoint)
    white = load_whitening(args.whitening) if args.whitening else None
    doc, root = load_manifest(args.manifest)
    entries = doc.get("entries", [])
    scales = conf.get("scales", DEFAULT_SCALES)
    max_side = conf.get("max_side", 362)
    vecs = _map(lambda e: multiscale_descriptor(net, pcfg, _load_entry(e, root), scales,
                                                max_side, whitening=white),
                entries, args.threads)
    dim = white.out_dim if white is not None else net.out_maps
    index = DescriptorIndex([int(e["id"]) for e in entries], vecs, dim)
    save_index(index, args.out)
    print(f"indexed {len(index)} images ({dim}-d) into {args.out}")


def cmd_eval(args, conf):
    _require(args.index, "index")
    index = load_index(args.index)
    doc, _ = load_manifest(args.manifest)
    gt_raw = doc.get("ground_truth", {})
    queries = {}
    for q in doc.get("queries", []):
        try:
            queries[int(q)] = index.vector(int(q))
        except KeyError:
            raise KeyError(f"query {q} is not in the index") from None
    gt = {int(k): [int(v) for v in vals] for k, vals in gt_raw.items()}
    qe, method = None, "alpha"
    if args.alpha_qe is not None:
        qe = QEConfig(nqe=int(args.alpha_qe[1]), alpha=float(args.alpha_qe[0]))
    elif args.aqe is not None:
        qe, method = QEConfig(nqe=args.aqe, alpha=0.0), "average"
    aps, ranked = per_query_ap(index, queries, gt, qe, method)
    for q in sorted(aps):
        print(f"query {q} AP {aps[q]:.6f}")
    print(f"mAP {np.mean(list(aps.values())) if aps else 0.0:.6f}")
    if args.ranked_out:
        write_ranked_lists(ranked, args.ranked_out)


def cmd_gradcheck(args, conf):
    results = gradcheck.run_all(args.seed, args.instances, args.corrupt)
    ok = True
    for r in results:
        ok &= r.passed
        print(f"{r.name:12s} instances {r.instances:4d} max_rel_err {r.max_rel_error:.3e} "
              f"tol {r.tolerance:.0e} {'PASS' if r.passed else 'FAIL'}")
    return 0 if ok else 1


def build_parser():
    ap = argparse.ArgumentParser(prog="gemret", description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", default=None, help="flat 'key = value' config file")
    ap.add_argument("--threads", type=int, default=1)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic visibility graph and images")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="siamese fine-tuning on a visibility graph")
    p.add_argument("graph")
    p.add_argument("checkpoint")
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("whiten", help="learn Lw (or PCAw) whitening")
    p.add_argument("checkpoint")
    p.add_argument("graph")
    p.add_argument("dim", type=int)
    p.add_argument("out")
    p.add_argument("--pcaw", action="store_true")
    p.set_defaults(func=cmd_whiten)

    p = sub.add_parser("index", help="extract descriptors for a manifest")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("out")
    p.add_argument("--whitening", default=None)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("eval", help="mAP of the manifest queries against an index")
    p.add_argument("index")
    p.add_argument("manifest")
    qe = p.add_mutually_exclusive_group()
    qe.add_argument("--aqe", type=int, metavar="NQE")
    qe.add_argument("--alpha-qe", nargs=2, type=float, metavar=("ALPHA", "NQE"))
    p.add_argument("--ranked-out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all gradients")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--corrupt", default=None, choices=sorted(gradcheck.SUITES),
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        conf = parse_config(args.config)
        return args.func(args, conf) or 0
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"gemret {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
