"""Command line entry point: ``kacnet synth | train | eval | ground``.

Every RunConfig key is also a flag (``--d_q`` or ``--d-q``).  Values are
resolved as flags > ``--config`` file > defaults.  Exit codes: 0 success,
1 usage or config error, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from kacnet import corpus as cio
from kacnet.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from kacnet.config import RunConfig, resolve, write_config_file
from kacnet.errors import ConfigError, ContractError, KacError, exit_code_for
from kacnet.evaluation import load_tags
from kacnet.kbp import extract_nouns
from kacnet.model import ground_batch, prepare_sample
from kacnet.records import UNK, Query
from kacnet.synthetic import SyntheticSpec, generate_synthetic
from kacnet.train import METRICS_HEADER, build_model, cap_proposals, evaluate, knowledge_config, train

log = logging.getLogger("kacnet")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    for f in fields(RunConfig):
        names = [f"--{f.name}"]
        if "_" in f.name:
            names.append(f"--{f.name.replace('_', '-')}")
        parser.add_argument(*names, dest=f.name, default=None, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kacnet", description="Weakly supervised phrase grounding.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic benchmark")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="accuracy of a trained model at IoU > 0.5")
    _add_config_flags(p)

    p = sub.add_parser("ground", help="ground one query in one image")
    _add_config_flags(p)
    p.add_argument("--image-id", required=True)
    p.add_argument("--query", required=True, help="query text, whitespace tokenized")
    p.add_argument("--nouns", help="comma-separated noun positions (default: lexicon lookup)")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    return {f.name: getattr(args, f.name) for f in fields(RunConfig)}


def _require(cfg: RunConfig, *keys: str) -> None:
    for key in keys:
        if not getattr(cfg, key):
            raise ConfigError(f"--{key} is required")


def _echo(cfg: RunConfig) -> str:
    return "# config " + json.dumps(cfg.to_dict(), sort_keys=True)


def _knowledge(cfg: RunConfig):
    _require(cfg, "embeddings", "class_names")
    return knowledge_config(cfg, cio.load_class_names(cfg.class_names), cio.load_embeddings(cfg.embeddings))


def _lexicon(cfg: RunConfig):
    return cio.load_lexicon(cfg.lexicon) if cfg.lexicon else None


def run_synth(cfg: RunConfig, out=None) -> dict:
    out = out or sys.stdout
    out_dir = Path(cfg.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out_dir}: {exc.strerror}") from None
    base = dict(num_classes=cfg.syn_classes, proposals=cfg.syn_proposals, feature_dim=cfg.syn_feature_dim,
                noise=cfg.syn_noise, overlap_prob=cfg.syn_overlap, corrupt_prob=cfg.syn_corrupt, seed=cfg.seed)
    train_set = generate_synthetic(SyntheticSpec(images=cfg.syn_images, **base))
    counts = {"train_images": len(train_set.images), "train_queries": len(train_set.queries)}
    cio.write_images(out_dir / "train.images.jsonl", train_set.images, len(train_set.class_names))
    cio.write_queries(out_dir / "train.queries.jsonl", train_set.queries)
    if cfg.syn_test_images > 0:
        test_set = generate_synthetic(SyntheticSpec(images=cfg.syn_test_images, stream=1, id_prefix="test-", **base))
        cio.write_images(out_dir / "test.images.jsonl", test_set.images, len(test_set.class_names))
        cio.write_queries(out_dir / "test.queries.jsonl", test_set.queries)
        counts.update(test_images=len(test_set.images), test_queries=len(test_set.queries))
    cio.write_embeddings(out_dir / "embeddings.txt", train_set.embeddings)
    cio.write_class_names(out_dir / "classes.txt", train_set.class_names)
    cio.write_lexicon(out_dir / "lexicon.txt", train_set.lexicon)
    write_config_file(out_dir / "synth.config", cfg)
    counts["classes"] = len(train_set.class_names)
    counts["embeddings"] = len(train_set.embeddings)
    for key, value in counts.items():
        print(f"{key}: {value}", file=out)
    return counts


def run_train(cfg: RunConfig, out=None):
    out = out or sys.stdout
    _require(cfg, "images", "queries", "checkpoint")
    lexicon = _lexicon(cfg)
    data = cio.load_grounding_corpus(cfg.images, cfg.queries, lexicon)
    val = None
    if cfg.val_images and cfg.val_queries:
        val = cio.load_grounding_corpus(cfg.val_images, cfg.val_queries, lexicon)
    kcfg = _knowledge(cfg)
    model = build_model(cfg, data)
    run_cfg = cfg.to_dict()
    save_checkpoint(model, cfg.checkpoint, run_cfg)
    metrics_path = cfg.metrics_log or str(cfg.checkpoint) + ".metrics.tsv"

    def save_best(m, report):
        save_checkpoint(m, str(cfg.checkpoint) + ".best", run_cfg)
        print(f"validation accuracy {report.accuracy:.4f} (best so far)", file=out)

    with open(metrics_path, "w") as metrics:
        metrics.write(_echo(cfg) + "\n" + METRICS_HEADER + "\n")
        result = train(model, data, kcfg, cfg, metrics=metrics,
                       on_epoch=lambda epoch, m: save_checkpoint(m, cfg.checkpoint, run_cfg),
                       val=val, on_best=save_best)
    print(f"trained {result.steps} steps over {len(data.queries)} queries; checkpoint {cfg.checkpoint}", file=out)
    return result


_INVOCATION_KEYS = ("images", "queries", "val_images", "val_queries", "checkpoint", "metrics_log", "out_dir",
                   "report", "per_query_csv", "tags")


def _load(cfg_path: str | None, overrides: dict):
    ckpt = overrides.get("checkpoint") or RunConfig().checkpoint
    if cfg_path and not overrides.get("checkpoint"):
        from kacnet.config import read_config_file

        ckpt = read_config_file(cfg_path).get("checkpoint", ckpt)
    if not Path(ckpt).exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    meta, _ = read_checkpoint(ckpt)
    stored = meta.get("run_config", {})
    # Data paths come from this invocation, not from the training run.
    base = {k: v for k, v in stored.items() if k not in _INVOCATION_KEYS}
    cfg = resolve(cfg_path, overrides, base)
    model, _ = load_checkpoint(cfg.checkpoint)
    return cfg, model


def run_eval(cfg: RunConfig, model, out=None):
    out = out or sys.stdout
    _require(cfg, "images", "queries")
    data = cio.load_grounding_corpus(cfg.images, cfg.queries, _lexicon(cfg))
    missing = [q.query_id for q in data.queries if q.gt_box is None]
    if missing:
        raise ContractError(f"queries without a ground-truth box: {', '.join(missing[:10])}")
    tags = load_tags(cfg.tags) if cfg.tags else None
    report = evaluate(model, data, _knowledge(cfg), cfg.n_cap, tags)
    report.config = cfg.to_dict()
    print(report.to_table(), file=out)
    report_path = cfg.report or str(cfg.checkpoint) + ".report.json"
    Path(report_path).write_text(report.to_json() + "\n")
    if cfg.per_query_csv:
        report.write_csv(cfg.per_query_csv)
    return report


def run_ground(cfg: RunConfig, model, query_text: str, image_id: str, nouns: str | None = None, out=None):
    out = out or sys.stdout
    _require(cfg, "images")
    images_header, records = cio._read_jsonl(Path(cfg.images), "kacnet-images")
    images = {}
    for lineno, obj in records:
        if str(obj.get("image_id")) == image_id:
            images[image_id] = cio.parse_image(obj, f"{cfg.images}:{lineno}", int(images_header["feature_dim"]),
                                               int(images_header["num_classes"]))
    if image_id not in images:
        from kacnet.errors import DanglingReferenceError

        raise DanglingReferenceError(f"unknown image_id {image_id!r}")
    words = query_text.split()
    if not words:
        raise ContractError("query text is empty")
    if nouns is not None:
        positions = [int(p) for p in nouns.split(",") if p.strip()]
    else:
        lexicon = _lexicon(cfg)
        positions = extract_nouns(words, lexicon) if lexicon is not None else []
    query = Query("cli", image_id, words, positions)
    query.validate()
    unknown = [w for w, i in zip(words, model.token_ids(query)) if i == UNK]
    if unknown:
        log.warning("words outside the vocabulary map to <unk>: %s", " ".join(unknown))
    kcfg = _knowledge(cfg)
    sample = prepare_sample(model, query, cap_proposals(images[image_id], cfg.n_cap), kcfg)
    result = ground_batch(model, [sample], kcfg)[0]
    print(_echo(cfg), file=out)
    print(f"chosen {result.chosen_index} box {' '.join(f'{v:g}' for v in result.chosen_box)}", file=out)
    print(f"{'idx':>4} {'confidence':>12} {'knowledge':>10} {'gate':>8} {'final':>12}", file=out)
    for i in range(len(result.scores)):
        print(f"{i:>4} {result.conf_softmax[i]:>12.6g} {result.raw[i]:>10.4f} {result.gate[i]:>8.4f} "
              f"{result.scores[i]:>12.6g}", file=out)
    return result


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _overrides(args)
        if args.command == "synth":
            run_synth(resolve(args.config, overrides))
        elif args.command == "train":
            run_train(resolve(args.config, overrides))
        elif args.command == "eval":
            cfg, model = _load(args.config, overrides)
            run_eval(cfg, model)
        elif args.command == "ground":
            cfg, model = _load(args.config, overrides)
            run_ground(cfg, model, args.query, args.image_id, args.nouns)
    except KacError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
