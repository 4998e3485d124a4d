"""Command line entry point: gen-data, train, eval, diagnose, export-embeddings.

Exit codes: 0 success, 2 usage or configuration error, 3 non-finite loss.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings

import numpy as np

from . import config as C
from .data import DataError, MultiDomainDataset, augment_batch, generate_toy, load_dataset, save_dataset, split
from .evaluation import (condition_number, embed, export_embeddings, knn_probe, linear_probe,
                         similarity_matrix)
from .losses import ContrastiveBatch, partition_negatives, suppression_metric
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .train import NonFiniteLossError, train

log = logging.getLogger("domclp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _dump(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False)
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text + "\n")
    return text


def _out_path(args, cfg, key, override=None):
    name = override or cfg["output"][key]
    if os.path.isabs(name):
        return name
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _load_config(args):
    if args.config is None:
        return C.resolve({}, args.seed)
    return C.load(args.config, args.seed)


def _dataset(args, cfg) -> MultiDomainDataset:
    if getattr(args, "data", None):
        return load_dataset(args.data, d_in=cfg["model"]["encoder_layers"][0])
    return generate_toy(C.toy_config(cfg))


def _checkpoint(args, cfg):
    path = args.checkpoint or _out_path(args, cfg, "checkpoint")
    if not os.path.exists(path):
        raise UsageError(f"checkpoint not found: {path}")
    mcfg, params, _, epoch, _ = load_checkpoint(path, C.model_config(cfg))
    return mcfg, params, epoch, path


def cmd_gen_data(args, cfg):
    ds = generate_toy(C.toy_config(cfg))
    path = _out_path(args, cfg, "dataset", args.file)
    save_dataset(ds, path)
    summary = {"dataset": path, "counts": ds.counts(), "config": cfg}
    print(_dump(summary))
    return EXIT_OK


def _read_metrics(path, before_epoch):
    kept = []
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip() and json.loads(line)["epoch"] < before_epoch:
                    kept.append(line)
    return kept


def cmd_train(args, cfg):
    ds = _dataset(args, cfg)
    mcfg, tcfg = C.model_config(cfg), C.train_config(cfg)
    pretrain = split(ds, C.split_spec(cfg, ds.n_domains, 1.0))[0]
    ck_path = _out_path(args, cfg, "checkpoint")
    metrics_path = _out_path(args, cfg, "metrics")
    _dump(cfg, _out_path(args, cfg, "config"))
    params = opt = None
    start = 0
    if args.resume:
        _, params, opt, start, _ = load_checkpoint(args.resume, mcfg)
    proto_dir = None
    if cfg["output"]["prototype_dumps"]:
        proto_dir = os.path.join(args.out, "prototypes")
        os.makedirs(proto_dir, exist_ok=True)
    lines = _read_metrics(metrics_path, start) if args.resume else []
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)

        def on_epoch(m, p, o, protos):
            fh.write(json.dumps(m.to_dict(), sort_keys=True) + "\n")
            fh.flush()
            save_checkpoint(ck_path, mcfg, p, o, m.epoch + 1, {"config": cfg})
            if proto_dir is not None and protos:
                _dump([ps.to_json() for ps in protos], os.path.join(proto_dir, f"epoch_{m.epoch:04d}.json"))
            if not args.quiet:
                print(f"epoch {m.epoch:4d}  loss {m.loss_total:.6f}  dcon {m.loss_dcon:.4f}  "
                      f"pmix {m.loss_pmix:.4f}  pcl {m.loss_pcl:.4f}", file=sys.stderr)

        try:
            train(pretrain, mcfg, tcfg, params, opt, start_epoch=start, on_epoch=on_epoch)
        except NonFiniteLossError as exc:
            print(f"error: {exc}; last good checkpoint kept at {ck_path}", file=sys.stderr)
            return EXIT_NUMERIC
    return EXIT_OK


def _probe_one(cfg, params, mcfg, ds, fraction):
    pc = cfg["probe"]
    _, labeled, _, target = split(ds, C.split_spec(cfg, ds.n_domains, fraction))
    test = labeled if pc["sanity"] else target
    tr = embed(params, mcfg, labeled.X, pc["layer"])
    te = embed(params, mcfg, test.X, pc["layer"])
    out = {"label_fraction": fraction, "n_labeled": len(labeled), "n_test": len(test)}
    if pc["kind"] in ("knn", "both"):
        out["knn"] = knn_probe(tr, labeled.classes, te, test.classes, test.domains,
                               int(pc["k"]), float(pc["temperature"])).to_dict()
    if pc["kind"] in ("linear", "both"):
        try:
            out["linear"] = linear_probe(tr, labeled.classes, te, test.classes, test.domains,
                                         float(pc["lr"]), int(pc["iters"]), C.substream_seed(cfg["seed"], "probe")
                                         ).to_dict()
        except ValueError as exc:
            warnings.warn(f"linear probe skipped at label fraction {fraction}: {exc}")
            out["linear"] = None
    return out


def cmd_eval(args, cfg):
    ds = _dataset(args, cfg)
    if not ds.has_classes:
        raise UsageError("evaluation needs class labels in the dataset")
    mcfg, params, epoch, ck = _checkpoint(args, cfg)
    fractions = cfg["split"]["label_fractions"]
    if args.label_fraction:
        fractions = args.label_fraction
    reports = [_probe_one(cfg, params, mcfg, ds, float(f)) for f in fractions]
    doc = {"checkpoint": ck, "epoch": epoch, "reports": reports, "config": cfg}
    text = _dump(doc, _out_path(args, cfg, "report"))
    if not args.quiet:
        print(text)
    return EXIT_OK


def _partition_stats(cfg, params, mcfg, ds, tau, seed):
    dg = cfg["diagnose"]
    rng = np.random.default_rng(seed)
    bs = min(int(dg["batch_size"]) // 2, len(ds))
    keys = ("positive", "n_alpha", "n_beta", "n_gamma", "count_alpha", "count_beta", "count_gamma")
    acc = {k: [] for k in keys}
    eps = None
    for _ in range(int(dg["n_batches"])):
        idx = rng.choice(len(ds), size=bs, replace=False)
        views = np.vstack([augment_batch(ds.X[idx], C.train_config(cfg).augment, rng) for _ in range(2)])
        Z = embed(params, mcfg, views, dg["layer"])
        batch = ContrastiveBatch(Z, np.concatenate([ds.domains[idx]] * 2), tau)
        parts = partition_negatives(batch, np.vstack([ds.common[idx]] * 2), dg["epsilon"])
        eps = parts[0].epsilon
        for p in parts:
            for k in keys:
                acc[k].append(getattr(p, k))
    stats = {f"mean_{k}": float(np.mean(v)) if v else None for k, v in acc.items()}
    stats.update({"n_batches": int(dg["n_batches"]), "rows_per_batch": 2 * bs, "epsilon": eps})
    return stats


def cmd_diagnose(args, cfg):
    ds = _dataset(args, cfg)
    mcfg, params, epoch, ck = _checkpoint(args, cfg)
    dg = cfg["diagnose"]
    Z = embed(params, mcfg, ds.X, dg["layer"])
    try:
        kappa = condition_number(Z, int(dg["n"])).to_dict()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    doc = {"checkpoint": ck, "epoch": epoch, "condition_number": kappa, "config": cfg}
    if ds.has_classes:
        doc["similarity_matrix"] = similarity_matrix(Z, ds.domains, ds.classes).to_dict()
    else:
        warnings.warn("dataset has no class labels; similarity_matrix is null")
        doc["similarity_matrix"] = None
    if ds.has_truth:
        s = suppression_metric(Z, ds.common, ds.domain_part)
        doc["suppression"] = s._asdict()
        doc["negative_partition"] = _partition_stats(cfg, params, mcfg, ds, C.train_config(cfg).tau,
                                                     C.substream_seed(cfg["seed"], "diagnose"))
    else:
        warnings.warn("dataset has no ground-truth components; suppression and negative_partition are null")
        doc["suppression"] = doc["negative_partition"] = None
    text = _dump(doc, _out_path(args, cfg, "diagnostics"))
    if not args.quiet:
        print(text)
    return EXIT_OK


def cmd_export_embeddings(args, cfg):
    ds = _dataset(args, cfg)
    mcfg, params, _, _ = _checkpoint(args, cfg)
    path = _out_path(args, cfg, "embeddings", args.file)
    Z = export_embeddings(params, mcfg, ds, path, args.layer)
    if not args.quiet:
        print(_dump({"embeddings": path, "rows": int(Z.shape[0]), "dim": int(Z.shape[1])}))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "export-embeddings": cmd_export_embeddings,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults are used when omitted)")
    common.add_argument("--out", default=".", help="output directory (default: current directory)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--quiet", action="store_true", help="suppress progress and report echo")

    parser = argparse.ArgumentParser(prog="domclp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic multi-domain dataset")
    g.add_argument("--file", help="dataset file name or path (default from config)")
    t = sub.add_parser("train", parents=[common], help="pretrain the encoder")
    t.add_argument("--data", help="dataset CSV (default: generate from config)")
    t.add_argument("--resume", help="checkpoint to continue from")
    for name, text in (("eval", "kNN / linear probes per label fraction"),
                       ("diagnose", "condition number, similarity, suppression, negative partitions"),
                       ("export-embeddings", "write embeddings as CSV")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", help="dataset CSV (default: generate from config)")
        p.add_argument("--checkpoint", help="checkpoint file (default: <out>/checkpoint.json)")
        if name == "eval":
            p.add_argument("--label-fraction", type=float, action="append",
                           help="label fraction; repeat for several (default from config)")
        if name == "export-embeddings":
            p.add_argument("--file", help="output CSV name or path")
            p.add_argument("--layer", choices=["projection", "encoder"], default="projection")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](args, cfg)
    except (C.ConfigError, CheckpointError, DataError, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
