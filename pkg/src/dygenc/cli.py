"""Command-line entry point: generate / train / eval / ablate / encode / retrieve.

Every subcommand writes a ``manifest.json`` into its output directory
recording the config snapshot, the seed, a content hash of the corpus it
consumed or produced, and the paths of every artifact, so a rerun with the
same manifest reproduces the metrics bit-exactly.

Exit codes: 0 success, 1 config/data error, 2 usage error, 3 numerics.
``DYGENC_SEED`` overrides the configured seed everywhere.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .embed import TextEmbedder
from .errors import ConfigError, DygencError, NumericsError
from .model import DygencModel, ModelConfig
from .qa_lm import Tokenizer
from .retrieval import retrieve_frames
from .seq_encoder import write_attention_csv
from .sg import load_jsonl, save_jsonl
from .synth import WorldSpec, generate_corpus
from .trainer import (
    TrainConfig,
    compression_report,
    evaluation_rows,
    run_ablation,
    split_corpus,
    train,
    write_ablation_csv,
    write_eval_csv,
    write_metrics_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_USAGE = 2
EXIT_NUMERICS = 3


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def write_manifest(out_dir, command, config, seed, corpus_hash, outputs):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "corpus_hash": corpus_hash,
        "outputs": outputs,
    }
    path = Path(out_dir) / "manifest.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    return path


def _filter_section(section, cls, name):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown [{name}] config keys: {sorted(unknown)}")
    return cls(**section)


def load_config(path):
    """TOML with [model], [train] and optional [world] sections."""
    if not path:
        return ModelConfig(), TrainConfig(), {}
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config parse failure in {path}: {e}") from None
    model_cfg = _filter_section(data.get("model", {}), ModelConfig, "model")
    train_cfg = _filter_section(data.get("train", {}), TrainConfig, "train")
    return model_cfg, train_cfg, data.get("world", {})


def apply_seed_override(train_cfg):
    env = os.environ.get("DYGENC_SEED")
    if env is not None:
        try:
            train_cfg.seed = int(env)
        except ValueError:
            raise ConfigError(f"DYGENC_SEED must be an integer, got {env!r}") from None
    return train_cfg


def _require_corpus(path):
    if not path:
        raise ConfigError("missing required corpus path (--corpus)")
    if not Path(path).exists():
        raise ConfigError(f"corpus file does not exist: {path}")
    return load_jsonl(path)


def _save_model(path, result, model_cfg, train_cfg):
    meta = {
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "vocab": result.tokenizer.vocab,
        "best_epoch": result.best_epoch,
        "best_val_accuracy": result.best_val_accuracy,
    }
    save_checkpoint(path, result.model.export_arrays(), groups=result.model.groups(), meta=meta)


def load_model(ckpt_path):
    arrays, _groups, meta = load_checkpoint(ckpt_path)
    model_cfg = ModelConfig(**meta["model_config"])
    tokenizer = Tokenizer(meta["vocab"])
    assert tokenizer.vocab == meta["vocab"], "vocabulary drifted on reload"
    model = DygencModel(model_cfg, tokenizer, init_seed=meta["train_config"].get("seed", 0))
    model.load_arrays(arrays)
    return model, model_cfg, meta


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    out_dir = Path(args.out).resolve().parent
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = int(os.environ.get("DYGENC_SEED", args.seed))
    samples = generate_corpus(args.episodes, seed, spec=WorldSpec(), global_unique=args.global_dedup)
    save_jsonl(samples, args.out)
    write_manifest(
        out_dir,
        "generate",
        {"episodes": args.episodes, "global_dedup": args.global_dedup},
        seed,
        sha256_file(args.out),
        {"corpus": str(args.out)},
    )
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args):
    model_cfg, train_cfg, _ = load_config(args.config)
    apply_seed_override(train_cfg)
    corpus = _require_corpus(args.corpus)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train(model_cfg, train_cfg, corpus, log=print)
    ckpt = out_dir / "model.ckpt"
    metrics_csv = out_dir / "metrics.csv"
    _save_model(ckpt, result, model_cfg, train_cfg)
    write_metrics_csv(result.metrics, metrics_csv)
    report = compression_report(corpus, result.tokenizer, k_tokens=model_cfg.k_tokens, enable_se=model_cfg.enable_se)
    (out_dir / "compression.txt").write_text(f"{report!r}\n")
    write_manifest(
        out_dir,
        "train",
        {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
        train_cfg.seed,
        sha256_file(args.corpus),
        {"checkpoint": str(ckpt), "metrics_csv": str(metrics_csv), "compression": str(out_dir / "compression.txt")},
    )
    print(f"best epoch {result.best_epoch}, val accuracy {result.best_val_accuracy:.4f}")
    return EXIT_OK


def cmd_eval(args):
    corpus = _require_corpus(args.corpus)
    model, model_cfg, meta = load_model(args.ckpt)
    splits = split_corpus(corpus)
    if not splits.get(args.split):
        raise ConfigError(f"split {args.split!r} is empty in {args.corpus}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = evaluation_rows(model, splits[args.split], reverse_time=args.reverse_time)
    csv_path = out_dir / f"eval_{args.split}{'_reversed' if args.reverse_time else ''}.csv"
    write_eval_csv(rows, csv_path)
    write_manifest(
        out_dir,
        "eval",
        {"split": args.split, "reverse_time": args.reverse_time, "model": meta["model_config"]},
        meta["train_config"].get("seed", 0),
        sha256_file(args.corpus),
        {"eval_csv": str(csv_path), "checkpoint": str(args.ckpt)},
    )
    for tid, n, acc in rows:
        print(f"{tid:>20}  n={n:<6} acc={acc:.4f}")
    return EXIT_OK


def cmd_ablate(args):
    model_cfg, train_cfg, _ = load_config(args.config)
    apply_seed_override(train_cfg)
    corpus = _require_corpus(args.corpus)
    grid = parse_grid(args.grid)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = run_ablation(model_cfg, train_cfg, corpus, grid, log=print)
    outputs = {}
    for i, cell in enumerate(cells):
        cell_dir = out_dir / f"cell_{i:02d}"
        cell_dir.mkdir(exist_ok=True)
        tag = "_".join(f"{k}-{v}" for k, v in sorted(cell["overrides"].items()))
        ckpt = cell_dir / "model.ckpt"
        metrics_csv = cell_dir / "metrics.csv"
        eval_csv = cell_dir / "eval_val.csv"
        from dataclasses import replace

        _save_model(ckpt, cell["result"], replace(model_cfg, **cell["overrides"]), train_cfg)
        write_metrics_csv(cell["result"].metrics, metrics_csv)
        write_eval_csv(cell["rows"], eval_csv)
        write_manifest(
            cell_dir,
            "ablate-cell",
            {"overrides": cell["overrides"], "train": train_cfg.to_dict()},
            train_cfg.seed,
            sha256_file(args.corpus),
            {"checkpoint": str(ckpt), "metrics_csv": str(metrics_csv), "eval_csv": str(eval_csv)},
        )
        outputs[tag] = str(cell_dir)
    merged = out_dir / "ablation.csv"
    write_ablation_csv(cells, merged)
    outputs["merged_csv"] = str(merged)
    write_manifest(out_dir, "ablate", {"grid": grid, "train": train_cfg.to_dict()},
                   train_cfg.seed, sha256_file(args.corpus), outputs)
    print(f"ablation table: {merged}")
    return EXIT_OK


def cmd_encode(args):
    corpus = _require_corpus(args.corpus)
    model, model_cfg, meta = load_model(args.ckpt)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    limit = args.limit if args.limit > 0 else len(corpus)
    subset = corpus[:limit]
    vec_path = out_dir / "soft_prompts.jsonl"
    outputs = {"soft_prompts": str(vec_path)}
    with ad.no_grad(), open(vec_path, "w", encoding="utf-8") as f:
        for i, sample in enumerate(subset):
            enc = model.encode_soft([sample], collect_maps=model_cfg.enable_se)
            vecs = enc.soft.data.tolist()
            f.write(json.dumps({"index": i, "question": sample.question, "vectors": vecs}) + "\n")
            if enc.maps is not None:
                attn_path = out_dir / f"attention_{i:05d}.csv"
                write_attention_csv(enc.maps[0], attn_path)
                outputs[f"attention_{i:05d}"] = str(attn_path)
    write_manifest(out_dir, "encode", {"limit": limit, "model": meta["model_config"]},
                   meta["train_config"].get("seed", 0), sha256_file(args.corpus), outputs)
    print(f"encoded {len(subset)} samples into {out_dir}")
    return EXIT_OK


def cmd_retrieve(args):
    corpus = _require_corpus(args.infile)
    emb = TextEmbedder(d=args.embed_dim, seed=args.embed_seed)
    out = []
    from dataclasses import replace

    for s in corpus:
        budget = args.budget if args.budget > 0 else max(1, int(np.ceil(len(s.dg) / 4)))
        kept = retrieve_frames(s.dg, args.query, emb, budget)
        out.append(replace(s, dg=kept))
    save_jsonl(out, args.out)
    out_dir = Path(args.out).resolve().parent
    write_manifest(
        out_dir,
        "retrieve",
        {"query": args.query, "budget": args.budget},
        args.embed_seed,
        sha256_file(args.infile),
        {"retrieved": str(args.out)},
    )
    print(f"retrieved {len(out)} sequences into {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def parse_grid(spec_str):
    """'k_tokens=1,2,4,16 temporal_kind=rope,ape' -> {field: [values]}."""
    grid = {}
    model_fields = {f.name: f.type for f in fields(ModelConfig)}
    aliases = {"k": "k_tokens", "temporal": "temporal_kind"}
    for part in spec_str.split():
        if "=" not in part:
            raise ConfigError(f"bad grid axis {part!r}; expected field=v1,v2,...")
        key, vals = part.split("=", 1)
        key = aliases.get(key, key)
        if key not in model_fields:
            raise ConfigError(f"unknown grid field {key!r}")
        parsed = []
        for v in vals.split(","):
            if v.lower() in ("true", "false"):
                parsed.append(v.lower() == "true")
            else:
                try:
                    parsed.append(int(v))
                except ValueError:
                    parsed.append(v)
        grid[key] = parsed
    if not grid:
        raise ConfigError("empty ablation grid")
    return grid


def build_parser():
    p = argparse.ArgumentParser(prog="dygenc", description="dynamic scene-graph QA pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic QA corpus")
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--global-dedup", action="store_true", help="keep only globally unique frames")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train the pipeline on a corpus")
    t.add_argument("--config", default=None, help="TOML with [model] and [train] sections")
    t.add_argument("--corpus", default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", default=None)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--reverse-time", action="store_true")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train a grid of config variants")
    a.add_argument("--config", default=None)
    a.add_argument("--corpus", default=None)
    a.add_argument("--grid", required=True, help="e.g. 'k=1,2,4,16' or 'temporal=te,ape,rope'")
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)

    n = sub.add_parser("encode", help="emit soft-prompt vectors and attention maps")
    n.add_argument("--ckpt", required=True)
    n.add_argument("--corpus", default=None)
    n.add_argument("--limit", type=int, default=8)
    n.add_argument("--out", required=True)
    n.set_defaults(fn=cmd_encode)

    r = sub.add_parser("retrieve", help="keep the query-relevant frames of each sequence")
    r.add_argument("--query", required=True)
    r.add_argument("--budget", type=int, default=0, help="frames to keep; 0 = ceil(m/4)")
    r.add_argument("--in", dest="infile", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--embed-dim", type=int, default=64)
    r.add_argument("--embed-seed", type=int, default=0)
    r.set_defaults(fn=cmd_retrieve)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NumericsError as e:
        print(f"numerics error: {e}", file=sys.stderr)
        return EXIT_NUMERICS
    except DygencError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
