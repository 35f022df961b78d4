"""Command-line front end.

Subcommands cover the full pipeline: synthesize a planted world, run the
two per-modality pre-training stages, co-train, evaluate a checkpoint,
and link entity mentions in raw text. Every subcommand accepts --config,
--seed, --out, and --force; exit codes are 0 (ok), 2 (usage or bad
config), 3 (data problem), 4 (numeric failure).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_dict, default_config, load_config
from .data import (RelationVocab, TokenTable, bag_to_record, link_entities,
                   load_bags, load_cooc, load_init_embeddings, load_kg,
                   write_bags, write_cooc, write_init_embeddings, write_kg)
from .errors import (ConfigError, DataError, EvalError, GenerationError,
                     NumericError, ThresholdError)
from .evaluation import ThresholdSet, compute_report, scores_by_type
from .checkpoint import load_checkpoint
from .synthetic import build_world
from .text_encoder import MarkerVocab
from .training import (CotrainedModel, GraphModel, MetricsWriter, TextModel,
                       TrainData, cotrain, holdout_split, load_model,
                       pretrain_graph, pretrain_text, save_model,
                       score_bags_eval, score_pairs_eval)

MODALITIES = ("text", "graph", "both")


def _anchor_paths(config: RunConfig, base: Path) -> None:
    """Resolve relative path entries against the config file's directory
    so a generated directory works no matter where it is invoked from."""
    p = config.paths
    for name in ("kg", "bags", "tokens", "cooc", "init_embeddings",
                 "out_dir"):
        value = getattr(p, name)
        if value is not None and not os.path.isabs(value):
            setattr(p, name, str(base / value))


def _run_config(args) -> RunConfig:
    if args.config is not None:
        config = load_config(args.config)
        _anchor_paths(config, Path(args.config).resolve().parent)
    else:
        config = default_config()
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.paths.out_dir = args.out
    return config.validate()


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.paths.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_path(value, key: str):
    if value is None:
        raise ConfigError(f"config is missing paths.{key}")
    return value


def _load_train_data(config: RunConfig) -> TrainData:
    paths = config.paths
    kg_path = _require_path(paths.kg, "kg")
    bags_path = _require_path(paths.bags, "bags")
    tokens_path = _require_path(paths.tokens, "tokens")
    vocab = RelationVocab()
    try:
        kg = load_kg(kg_path, vocab)
        table = TokenTable.from_file(tokens_path)
        markers = MarkerVocab.build(table)
        bags = load_bags(bags_path, vocab, table)
        cooc = load_cooc(paths.cooc) if paths.cooc else None
        init = (load_init_embeddings(paths.init_embeddings)
                if paths.init_embeddings else None)
    except OSError as exc:
        raise DataError(f"cannot read input file: {exc}") from None
    return TrainData(kg=kg, bags=bags, vocab=vocab, table=table,
                     markers=markers, cooc=cooc, init=init)


# ---------------------------------------------------------------------------
# training commands

def cmd_pretrain_text(args) -> int:
    config = _run_config(args)
    out = _out_dir(config)
    data = _load_train_data(config)
    train_data, _, _ = holdout_split(data, config)
    with MetricsWriter(out / "pretrain-text.jsonl") as metrics:
        model = pretrain_text(train_data, config, metrics=metrics)
    save_model(out / "text.ckpt", model, config)
    print(f"wrote {out / 'text.ckpt'} and {out / 'pretrain-text.jsonl'}")
    return 0


def cmd_pretrain_graph(args) -> int:
    config = _run_config(args)
    out = _out_dir(config)
    data = _load_train_data(config)
    train_data, _, _ = holdout_split(data, config)
    with MetricsWriter(out / "pretrain-graph.jsonl") as metrics:
        model = pretrain_graph(train_data, config, metrics=metrics)
    save_model(out / "graph.ckpt", model, config)
    print(f"wrote {out / 'graph.ckpt'} and {out / 'pretrain-graph.jsonl'}")
    return 0


def _load_component(path, data: TrainData, kind: str):
    model, ck = load_model(path, data)
    ck.require(kind)
    if isinstance(model, CotrainedModel):
        return model.text if kind == "text" else model.graph
    return model


def cmd_cotrain(args) -> int:
    config = _run_config(args)
    out = _out_dir(config)
    data = _load_train_data(config)
    train_data, _, _ = holdout_split(data, config)
    with MetricsWriter(out / "cotrain.jsonl") as metrics:
        if args.text_ckpt:
            text_model = _load_component(args.text_ckpt, train_data, "text")
        else:
            text_model = pretrain_text(train_data, config, metrics=metrics)
        if args.graph_ckpt:
            graph_model = _load_component(args.graph_ckpt, train_data,
                                          "graph")
        else:
            graph_model = pretrain_graph(train_data, config, metrics=metrics)
        model = cotrain(train_data, text_model, graph_model, config,
                        metrics=metrics)
    save_model(out / "cotrain.ckpt", model, config)
    print(f"wrote {out / 'cotrain.ckpt'} and {out / 'cotrain.jsonl'}")
    return 0


# ---------------------------------------------------------------------------
# evaluation

def _submodels(model):
    if isinstance(model, CotrainedModel):
        return model.text, model.graph
    if isinstance(model, TextModel):
        return model, None
    if isinstance(model, GraphModel):
        return None, model
    raise DataError(f"unsupported model object {type(model).__name__}")


def _modal_scores(modality: str, bags, text_model, graph_model, config):
    """Probability rows for the bags reachable under the modality plus
    the list of scored bags; unreachable pairs are skipped."""
    if modality == "text":
        usable = list(bags)
    else:
        kg = graph_model.kg
        usable = [b for b in bags
                  if kg.has_node(b.subject) and kg.has_node(b.object)]
    if not usable:
        return np.zeros((0, 0)), usable
    if modality == "text":
        probs = score_bags_eval(text_model, usable)
    elif modality == "graph":
        probs = score_pairs_eval(graph_model, [b.pair for b in usable],
                                 batch_size=config.graph.eval_batch_size)
    else:
        probs = np.maximum(
            score_bags_eval(text_model, usable),
            score_pairs_eval(graph_model, [b.pair for b in usable],
                             batch_size=config.graph.eval_batch_size))
    return probs, usable


def cmd_eval(args) -> int:
    if args.config is None:
        header = load_checkpoint(args.ckpt)
        config = config_from_dict(header.config)
        if args.seed is not None:
            config.seed = args.seed
        if args.out is not None:
            config.paths.out_dir = args.out
        config.validate()
    else:
        config = _run_config(args)
    out = _out_dir(config)
    data = _load_train_data(config)
    train_data, valid_bags, test_bags = holdout_split(data, config)
    model, ck = load_model(args.ckpt, train_data)
    if args.modality in ("text", "both"):
        ck.require("text")
    if args.modality in ("graph", "both"):
        ck.require("graph")
    text_model, graph_model = _submodels(model)

    names = data.vocab.scored_types

    def typed_scores(bags):
        probs, usable = _modal_scores(args.modality, bags, text_model,
                                      graph_model, config)
        pairs = [(probs[i], b.label) for i, b in enumerate(usable)]
        return scores_by_type(pairs, names), len(usable)

    valid_scores, _ = typed_scores(valid_bags)
    thresholds = ThresholdSet.fit(valid_scores)
    test_scores, scored = typed_scores(test_bags)
    report = compute_report(test_scores, thresholds)
    coverage = {"total": len(test_bags), "scored": scored,
                "skipped": len(test_bags) - scored}
    record = {"modality": args.modality,
              "thresholds": thresholds.values,
              "report": report.as_record(),
              "coverage": coverage}
    report_path = out / f"eval-{args.modality}.json"
    report_path.write_text(json.dumps(record, indent=2, sort_keys=True)
                           + "\n", encoding="utf-8")
    print(report.format_table())
    print(f"coverage: scored {scored} of {len(test_bags)} test pairs "
          f"({coverage['skipped']} skipped)")
    print(f"wrote {report_path}")
    return 0


# ---------------------------------------------------------------------------
# dataset synthesis

SYNTH_FILES = ("kg.tsv", "bags.jsonl", "tokens.txt", "cooc.txt",
               "init_embeddings.txt", "manifest.json", "config.toml")


def _write_demo_config(path: Path, world, seed: int) -> None:
    lines = [
        f"seed = {seed}",
        "",
        "[dims]",
        "d_l = 64",
        "d_hs = 32",
        "d_ha = 32",
        f"d_hi = {world.init.dim}",
        "d_h = 32",
        "d_r = 32",
        "l_max = 4",
        "n_heads = 4",
        "",
        "[text]",
        "epochs = 4",
        "lr = 3e-3",
        "",
        "[graph]",
        "lr = 1e-2",
        "neighbor_cap = 16",
        "",
        "[paths]",
        'kg = "kg.tsv"',
        'bags = "bags.jsonl"',
        'tokens = "tokens.txt"',
        'cooc = "cooc.txt"',
        'init_embeddings = "init_embeddings.txt"',
        'out_dir = "run"',
        "",
    ]
    path.write_text("\n".join(lines), encoding="utf-8")


def cmd_synth(args) -> int:
    if args.out is None:
        raise ConfigError("synth needs --out DIRECTORY")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty; "
                          f"pass --force to overwrite")
    seed = args.seed if args.seed is not None else 7
    world = build_world(n_entities=args.entities, K=args.types,
                        d=args.latent_dim, density=args.density,
                        noise_rate=args.noise, d_hi=args.hi_dim,
                        seed=seed, n_max_sentences=args.max_sentences)
    write_kg(out / "kg.tsv", world.kg.edges)
    world.table.to_file(out / "tokens.txt")
    write_bags(out / "bags.jsonl",
               [bag_to_record(b, world.vocab, world.table)
                for b in world.bags])
    write_cooc(out / "cooc.txt", world.cooc)
    write_init_embeddings(out / "init_embeddings.txt", world.init.vectors,
                          world.init.dim)
    _write_demo_config(out / "config.toml", world, seed)
    na_bags = sum(1 for b in world.bags if b.is_na)
    manifest = {
        "seed": seed,
        "entities": len(world.entities),
        "relation_types": list(world.vocab.scored_types),
        "triplets": world.kg.num_edges,
        "positive_pairs": len(world.positive_pairs),
        "bags": len(world.bags),
        "na_bags": na_bags,
        "cooc_pairs": len(world.cooc),
        "embedding_dim": world.init.dim,
        "params": {"latent_dim": args.latent_dim, "density": args.density,
                   "noise_rate": args.noise,
                   "max_sentences": args.max_sentences},
        "files": [name for name in SYNTH_FILES if name != "manifest.json"],
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    print(f"wrote {world.kg.num_edges} triplets, {len(world.bags)} bags "
          f"to {out}")
    return 0


# ---------------------------------------------------------------------------
# entity linking

def _load_dictionary(path) -> dict:
    terms = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                stripped = line.rstrip("\n")
                if not stripped.strip() or stripped.startswith("#"):
                    continue
                parts = stripped.split("\t")
                if len(parts) != 2 or not all(p.strip() for p in parts):
                    raise DataError(f"{path}:{lineno}: expected "
                                    f"`term<TAB>cui`, got {stripped!r}")
                terms[parts[0].strip()] = parts[1].strip()
    except OSError as exc:
        raise DataError(f"cannot read dictionary: {exc}") from None
    if not terms:
        raise DataError(f"{path}: dictionary has no entries")
    return terms


def cmd_link_entities(args) -> int:
    dictionary = _load_dictionary(args.dictionary)
    try:
        with open(args.text, encoding="utf-8") as fh:
            sentences = [line.rstrip("\n") for line in fh]
    except OSError as exc:
        raise DataError(f"cannot read text: {exc}") from None
    records = []
    for i, sentence in enumerate(sentences):
        tokens = sentence.split()
        if not tokens:
            continue
        spans = link_entities(tokens, dictionary, nested=not args.flat)
        records.append({"line": i,
                        "mentions": [{"start": s, "end": e, "cui": cui}
                                     for (s, e), cui in spans]})
    payload = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if args.out:
        Path(args.out).write_text(payload, encoding="utf-8")
        print(f"wrote {len(records)} records to {args.out}")
    else:
        sys.stdout.write(payload)
    return 0


# ---------------------------------------------------------------------------
# parser / dispatch

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--out", help="output directory (file for "
                                      "link-entities)")
    common.add_argument("--force", action="store_true",
                        help="overwrite non-empty output directories")

    parser = argparse.ArgumentParser(
        prog="remex",
        description="multimodal disease relation extraction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-text", parents=[common],
                       help="train the text encoder alone")
    p.set_defaults(func=cmd_pretrain_text)

    p = sub.add_parser("pretrain-graph", parents=[common],
                       help="train the graph encoder alone")
    p.set_defaults(func=cmd_pretrain_graph)

    p = sub.add_parser("cotrain", parents=[common],
                       help="pre-train both encoders then co-train them")
    p.add_argument("--text-ckpt", help="reuse a text pre-training checkpoint")
    p.add_argument("--graph-ckpt",
                   help="reuse a graph pre-training checkpoint")
    p.set_defaults(func=cmd_cotrain)

    p = sub.add_parser("eval", parents=[common],
                       help="fit thresholds on the validation split and "
                            "report on the test split")
    p.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
    p.add_argument("--modality", choices=MODALITIES, default="both")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a planted benchmark directory")
    p.add_argument("--entities", type=int, default=200)
    p.add_argument("--types", type=int, default=3)
    p.add_argument("--latent-dim", type=int, default=16)
    p.add_argument("--density", type=float, default=0.01)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--hi-dim", type=int, default=24)
    p.add_argument("--max-sentences", type=int, default=4)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("link-entities", parents=[common],
                       help="nested maximum matching of dictionary terms")
    p.add_argument("--dictionary", required=True,
                   help="TSV of term<TAB>cui rows")
    p.add_argument("--text", required=True,
                   help="input sentences, one per line, whitespace-tokenized")
    p.add_argument("--flat", action="store_true",
                   help="emit only top-level matches")
    p.set_defaults(func=cmd_link_entities)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ThresholdError, EvalError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
