"""Command-line entry point: train / eval / synth / checkgrad.

Exit codes: 0 success, 2 configuration or input error, 3 numerical abort.

A run's config is one JSON file: a ``data`` section naming the dataset source
plus the training fields (see TrainConfig).  Any scalar can be overridden on
the command line with ``--override key=value`` (dotted keys reach into the
data section).  Before training starts, the run directory gets a
``manifest.json`` with the full config, master seed, and a dataset
fingerprint; a manifest is itself a valid ``--config`` argument, which makes
every run replayable from its manifest alone.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from discenc import data as data_mod
from discenc import evaluate, gradcheck, nn
from discenc.regularize import NegativeSampler
from discenc.train import ConfigError, Trainer, TrainConfig, TrainingAbort

VERSION = "0.1.0"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _fail(message, code=EXIT_CONFIG):
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(code)


def _load_json(path):
    if not os.path.exists(path):
        _fail(f"config file does not exist: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            _fail(f"{path} is not valid JSON: {exc}")


def _parse_override(text):
    if "=" not in text:
        _fail(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _apply_overrides(cfg, overrides):
    for key, value in overrides:
        target = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                _fail(f"override {key!r} path crosses a non-object field")
        target[parts[-1]] = value
    return cfg


def _fingerprint(dataset, paths=()):
    h = hashlib.sha256()
    for p in paths:
        with open(p, "rb") as fh:
            h.update(fh.read())
    if not paths:
        feats = dataset.features if hasattr(dataset, "features") else dataset.matrix.toarray()
        h.update(np.ascontiguousarray(feats).tobytes())
        if dataset.labels is not None:
            h.update(np.ascontiguousarray(dataset.labels).tobytes())
    return f"sha256:{h.hexdigest()}"


def build_dataset(spec):
    """Dataset plus training extras (negative sampler / tf-idf) from a data spec."""
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("data section must be an object with a 'kind' field")
    kind = spec["kind"]
    extras = {}
    paths = ()
    if kind == "gmm":
        ds = data_mod.synth_gmm(spec.get("classes", 4), spec.get("dim", 2),
                                spec.get("per_cluster", 100), spec.get("separation", 6.0),
                                spec.get("std", 1.0), spec.get("data_seed", 0))
    elif kind == "digits":
        ds = data_mod.synth_digits(spec.get("n", 1000), spec.get("data_seed", 0))
    elif kind == "idx":
        if "features" not in spec:
            raise ConfigError("data kind 'idx' needs a 'features' path")
        for key in ("features", "labels"):
            if key in spec and not os.path.exists(spec[key]):
                raise ConfigError(f"dataset path does not exist: {spec[key]}")
        ds = data_mod.load_idx(spec["features"], spec.get("labels"))
        paths = tuple(spec[k] for k in ("features", "labels") if k in spec)
    elif kind in ("sparse_text", "topics"):
        if kind == "sparse_text":
            if "path" not in spec:
                raise ConfigError("data kind 'sparse_text' needs a 'path'")
            if not os.path.exists(spec["path"]):
                raise ConfigError(f"dataset path does not exist: {spec['path']}")
            counts = data_mod.read_sparse_text(spec["path"], spec.get("vocab_size"))
            paths = (spec["path"],)
        else:
            counts = data_mod.synth_topics(spec.get("classes", 4), spec.get("vocab_size", 1000),
                                           spec.get("docs_per_class", 250),
                                           spec.get("mean_length", 80),
                                           spec.get("data_seed", 0),
                                           overlap=spec.get("overlap", 0.5),
                                           concentration=spec.get("concentration", 0.05))
        if spec.get("tfidf", True):
            weights = data_mod.TfidfWeights.fit(counts.matrix)
            ds = data_mod.SparseDataset(weights.apply(counts.matrix), counts.labels)
            extras["fake_transform"] = weights.apply
        else:
            ds = counts
        extras["negative_sampler"] = NegativeSampler.from_counts(counts.matrix)
    else:
        raise ConfigError(f"unknown data kind {kind!r}")
    if "normalization" in spec and hasattr(ds, "normalization"):
        ds.normalization = spec["normalization"]
    return ds, extras, paths


def _split_config(merged):
    if "data" not in merged:
        raise ConfigError("config needs a 'data' section")
    data_spec = merged["data"]
    train_fields = {k: v for k, v in merged.items() if k != "data"}
    return data_spec, TrainConfig.from_dict(train_fields)


def cmd_train(args) -> int:
    merged = _load_json(args.config)
    if "config" in merged and "dataset_fingerprint" in merged:
        # Replaying a manifest: unwrap, keep its seed unless overridden.
        if args.seed is None and "seed" in merged:
            args.seed = merged["seed"]
        merged = merged["config"]
    merged = _apply_overrides(merged, [_parse_override(o) for o in args.override])
    if args.seed is not None:
        merged["seed"] = args.seed
    try:
        data_spec, config = _split_config(merged)
        dataset, extras, paths = build_dataset(data_spec)
        split = None
        if config.semi_supervised_per_class > 0:
            split = data_mod.split_semi_supervised(dataset, config.semi_supervised_per_class,
                                                   seed=config.seed)
        trainer = Trainer(config, dataset, split=split,
                          negative_sampler=extras.get("negative_sampler"),
                          fake_transform=extras.get("fake_transform"))
    except (ConfigError, ValueError) as exc:
        _fail(str(exc))

    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "version": VERSION,
        "command": "train",
        "seed": config.seed,
        "config": {"data": data_spec, **config.to_dict()},
        "dataset_fingerprint": _fingerprint(dataset, paths),
        "artifacts": {
            "metrics": os.path.join(out_dir, "metrics.csv"),
            "final_checkpoint": os.path.join(out_dir, "checkpoint_final"),
        },
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)

    try:
        trainer.run(out_dir=out_dir, checkpoint_every=args.checkpoint_every, quiet=args.quiet)
    except TrainingAbort as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if not args.quiet:
        print(f"done: artifacts in {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = args.checkpoint
    if os.path.isdir(ckpt):
        ckpt = os.path.join(ckpt, "encoder.disc")
    if not os.path.exists(ckpt):
        _fail(f"checkpoint does not exist: {args.checkpoint}")
    encoder = nn.load_network(ckpt)
    merged = _load_json(args.config)
    if "config" in merged and "dataset_fingerprint" in merged:
        merged = merged["config"]
    try:
        dataset, _, _ = build_dataset(merged.get("data", merged))
    except (ConfigError, ValueError) as exc:
        _fail(str(exc))
    if dataset.labels is None:
        _fail("evaluation needs labels in the dataset")
    categorical = isinstance(encoder.head, nn.SoftmaxHead)
    if categorical and args.scheme == "probe":
        _fail("scheme 'probe' needs a gaussian-head checkpoint")
    if not categorical and args.scheme in ("intersection", "confidence", "both"):
        _fail(f"clustering scheme {args.scheme!r} needs a categorical-head checkpoint")

    os.makedirs(args.out_dir, exist_ok=True)
    report_txt = os.path.join(args.out_dir, "report.txt")
    report_csv = os.path.join(args.out_dir, "report.csv")
    features = dataset.features if hasattr(dataset, "features") else dataset.matrix

    if categorical:
        post, _ = evaluate.posterior_clusters(encoder, features)
        rep = evaluate.evaluation_report(post, dataset.labels)
        with open(report_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rep["clusters"][0].keys()))
            writer.writeheader()
            writer.writerows(rep["clusters"])
        lines = [
            f"samples: {dataset.n}   clusters: {post.shape[1]}",
            f"clustering error (max intersection): {rep['error_max_intersection']:.4f}%",
            f"clustering error (max confidence):   {rep['error_max_confidence']:.4f}%",
            "",
            "cluster  size  label_inter  label_conf  purity",
        ]
        for row in rep["clusters"]:
            lines.append(f"{row['cluster']:7d}  {row['size']:4d}  {row['label_max_intersection']:11d}"
                         f"  {row['label_max_confidence']:10d}  {row['purity']:.3f}")
        with open(report_txt, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        print("\n".join(lines[:3]))
    else:
        _, emb = nn.encode(encoder, features)
        split = data_mod.split_semi_supervised(dataset, args.probe_per_class,
                                               seed=args.probe_seed)
        acc = evaluate.linear_probe(emb, dataset.labels, split.all_labeled,
                                    split.unlabeled_ids, epochs=args.probe_epochs,
                                    lr=args.probe_lr, seed=args.probe_seed)
        lines = [f"samples: {dataset.n}   embedding dim: {emb.shape[1]}",
                 f"linear probe accuracy ({args.probe_per_class}/class labels): {acc:.4f}%"]
        with open(report_txt, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        with open(report_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["probe_per_class", "accuracy"])
            writer.writerow([args.probe_per_class, repr(acc)])
        print("\n".join(lines))
    return EXIT_OK


def cmd_synth(args) -> int:
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    if args.kind == "gmm":
        ds = data_mod.synth_gmm(args.classes, args.dim, args.per_cluster,
                                args.separation, args.std, args.seed)
        data_mod.save_idx(ds.features, f"{args.out}.features.idx")
        data_mod.save_idx(ds.labels.astype(np.uint8), f"{args.out}.labels.idx")
        print(f"{args.out}.features.idx")
        print(f"{args.out}.labels.idx")
    elif args.kind == "digits":
        ds = data_mod.synth_digits(args.n, args.seed)
        images = np.round(ds.features * 255).astype(np.uint8).reshape(-1, 28, 28)
        data_mod.save_idx(images, f"{args.out}.images.idx")
        data_mod.save_idx(ds.labels.astype(np.uint8), f"{args.out}.labels.idx")
        print(f"{args.out}.images.idx")
        print(f"{args.out}.labels.idx")
    else:
        ds = data_mod.synth_topics(args.classes, args.vocab_size, args.docs_per_class,
                                   args.mean_length, args.seed)
        data_mod.write_sparse_text(ds, f"{args.out}.corpus.txt")
        print(f"{args.out}.corpus.txt")
    return EXIT_OK


def cmd_checkgrad(args) -> int:
    ok = gradcheck.report(seed=args.seed)
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="discenc",
                                     description="discriminative encoder training and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out-dir", default="discenc-run")
    p.add_argument("--checkpoint-every", type=int, default=0, metavar="EPOCHS")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    p.add_argument("--checkpoint", required=True, help="checkpoint dir or encoder file")
    p.add_argument("--config", required=True, help="config or manifest naming the dataset")
    p.add_argument("--scheme", choices=["both", "intersection", "confidence", "probe"],
                   default="both")
    p.add_argument("--out-dir", default="discenc-eval")
    p.add_argument("--probe-per-class", type=int, default=100)
    p.add_argument("--probe-epochs", type=int, default=100)
    p.add_argument("--probe-lr", type=float, default=0.01)
    p.add_argument("--probe-seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic dataset to files")
    p.add_argument("--kind", choices=["gmm", "digits", "topics"], required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--per-cluster", type=int, default=100)
    p.add_argument("--separation", type=float, default=6.0)
    p.add_argument("--std", type=float, default=1.0)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--vocab-size", type=int, default=1000)
    p.add_argument("--docs-per-class", type=int, default=250)
    p.add_argument("--mean-length", type=float, default=80.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("checkgrad", help="run the finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_checkgrad)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
