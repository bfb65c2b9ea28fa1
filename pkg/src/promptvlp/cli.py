"""Command line entry point: build-corpus, pretrain, evaluate, and ablations.

Config precedence is defaults < config file < CLI flags; the resolved config
is echoed into a run manifest under the run directory, which fully determines
reproduction. Exit codes: 0 success, 1 runtime failure, 2 usage/input error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .corpus import (
    SPLIT_POLICIES,
    assign_splits,
    build_manifest,
    load_image_records,
    load_manifest,
    make_synthetic_images,
    save_manifest,
    split_records,
)
from .errors import PromptVlpError, TrainingDivergedError
from .evalkit import RetrievalReport, evaluate_model, overall_avg_recall
from .model import ModelConfig
from .promptgen import (
    BackendConfig,
    FixtureBackend,
    OpenAICompatibleBackend,
    PromptCache,
    build_text_corpus,
    load_category_entries,
    load_description_corpus,
    save_description_corpus,
    select_templates,
)
from .trainer import TrainConfig, load_trainer_state, run_pretraining

logger = logging.getLogger(__name__)

MODEL_CONFIG_KEYS = tuple(ModelConfig().to_dict())


def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def resolve_config(defaults: dict, config_file: str | None, cli_values: dict) -> dict:
    resolved = dict(defaults)
    if config_file:
        path = Path(config_file)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        loaded = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(loaded, dict):
            raise ValueError("config file must contain a flat JSON object")
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(loaded)
    resolved.update({k: v for k, v in cli_values.items() if v is not None})
    return resolved


def make_run_dir(args, resolved: dict) -> tuple[Path, str]:
    chash = config_hash(resolved)
    if args.run_dir:
        run_dir = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
        run_dir = Path("runs") / f"{stamp}-{chash[:8]}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir, chash


def write_run_manifest(run_dir: Path, payload: dict) -> Path:
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n",
                    encoding="utf-8")
    return path


def format_table_row(i2t: RetrievalReport, t2i: RetrievalReport) -> str:
    def row(report: RetrievalReport) -> str:
        return (f"{report.direction:<4} "
                + " ".join(f"{report.r_at[k]:6.1f}" for k in sorted(report.r_at))
                + f" {report.avg_r:6.1f}")

    header = "dir  " + " ".join(f"{'R@' + str(k):>6}" for k in sorted(i2t.r_at)) + f" {'AvgR':>6}"
    overall = overall_avg_recall(i2t, t2i)
    return "\n".join([header, row(i2t), row(t2i), f"Overall AvgR: {overall:.1f}"])


# ---------------------------------------------------------------------------
# build-corpus
# ---------------------------------------------------------------------------

BUILD_DEFAULTS = {
    "responses_per_prompt": 5,
    "templates": None,
    "backend": "fixture",
    "images_per_category": 8,
    "split_policy": "category-holdout",
    "eval_fraction": 0.25,
    "seed": 0,
}


def cmd_build_corpus(args) -> int:
    cli_values = {
        "responses_per_prompt": args.responses_per_prompt,
        "templates": args.templates,
        "backend": args.backend,
        "images_per_category": args.images_per_category,
        "split_policy": args.split_policy,
        "eval_fraction": args.eval_fraction,
        "seed": args.seed,
    }
    resolved = resolve_config(BUILD_DEFAULTS, args.config, cli_values)
    if not args.categories and not args.descriptions:
        raise ValueError("either --categories or --descriptions is required")
    input_hashes = {}
    for name in ("categories", "descriptions", "images"):
        value = getattr(args, name)
        if value:
            path = Path(value)
            if not path.exists():
                raise FileNotFoundError(f"{name} file not found: {path}")
            input_hashes[name] = file_hash(path)
    run_dir, chash = make_run_dir(args, resolved)
    manifest_payload = {
        "subcommand": "build-corpus",
        "tool_version": __version__,
        "config": resolved,
        "config_hash": chash,
        "seeds": {"split": resolved["seed"]},
        "input_hashes": input_hashes,
        "output_paths": {},
    }
    write_run_manifest(run_dir, manifest_payload)

    output_paths = {}
    if args.descriptions:
        records = load_description_corpus(args.descriptions)
    else:
        entries = load_category_entries(args.categories)
        templates = select_templates(
            resolved["templates"].split(",") if isinstance(resolved["templates"], str)
            else resolved["templates"]
        )
        if resolved["backend"] == "fixture":
            backend = FixtureBackend()
        elif resolved["backend"] == "live":
            backend = OpenAICompatibleBackend(config=BackendConfig())
        else:
            raise ValueError(f"unknown backend {resolved['backend']!r}")
        cache = PromptCache(args.cache_dir) if args.cache_dir else PromptCache()
        corpus = build_text_corpus(
            entries, templates, backend,
            responses_per_prompt=int(resolved["responses_per_prompt"]), cache=cache,
        )
        records = corpus.records
        descriptions_path = run_dir / "descriptions.jsonl"
        save_description_corpus(corpus, descriptions_path)
        output_paths["descriptions"] = str(descriptions_path)
        if corpus.stats.duplicates:
            print(f"duplicates collapsed: {corpus.stats.duplicates}")

    if args.images:
        images = load_image_records(args.images)
    else:
        category_ids = sorted({r.category_id for r in records})
        images = make_synthetic_images(
            category_ids, int(resolved["images_per_category"]),
            seed=int(resolved["seed"]),
        )
    images, desc_splits = assign_splits(
        images, records, policy=resolved["split_policy"],
        eval_fraction=float(resolved["eval_fraction"]), seed=int(resolved["seed"]),
    )
    manifest_path = run_dir / "corpus.jsonl"
    save_manifest(manifest_path, images, records, desc_splits,
                  extra_header={"split_policy": resolved["split_policy"],
                                "split_seed": resolved["seed"]})
    build_manifest(images, records)  # validates referential integrity
    output_paths["corpus"] = str(manifest_path)

    manifest_payload["output_paths"] = output_paths
    write_run_manifest(run_dir, manifest_payload)

    histogram = {}
    for record in records:
        histogram[record.prompt_id] = histogram.get(record.prompt_id, 0) + 1
    print(f"run_dir: {run_dir}")
    print(f"categories: {len({r.category_id for r in records})}")
    print(f"descriptions: {len(records)}")
    print(f"images: {len(images)}")
    print("per-prompt histogram:")
    for pid in sorted(histogram):
        print(f"  {pid}: {histogram[pid]}")
    return 0


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

PRETRAIN_DEFAULTS = {
    "steps": 200,
    "batch_size": 8,
    "learning_rate": 1e-4,
    "weight_decay": 0.02,
    "warmup_steps": None,
    "seed": 0,
    "queue_size": 256,
    "mask_rate": 0.15,
    "checkpoint_interval": 0,
    "itm_strategy": "uniform",
    "target_mode": "uniform",
    "allow_repeated_categories": False,
    "ema_momentum": None,
    "prompt_filter": None,
    "shuffled": False,
    **ModelConfig().to_dict(),
}


def _pretrain_configs(resolved: dict) -> tuple[TrainConfig, ModelConfig]:
    prompt_filter = resolved["prompt_filter"]
    if isinstance(prompt_filter, str):
        prompt_filter = tuple(p.strip() for p in prompt_filter.split(",") if p.strip())
    train = TrainConfig(
        steps=int(resolved["steps"]),
        batch_size=int(resolved["batch_size"]),
        learning_rate=float(resolved["learning_rate"]),
        weight_decay=float(resolved["weight_decay"]),
        warmup_steps=None if resolved["warmup_steps"] is None else int(resolved["warmup_steps"]),
        seed=int(resolved["seed"]),
        queue_size=int(resolved["queue_size"]),
        mask_rate=float(resolved["mask_rate"]),
        checkpoint_interval=int(resolved["checkpoint_interval"]),
        prompt_filter=prompt_filter or None,
        shuffled=bool(resolved["shuffled"]),
        itm_strategy=resolved["itm_strategy"],
        target_mode=resolved["target_mode"],
        allow_repeated_categories=bool(resolved["allow_repeated_categories"]),
        ema_momentum=resolved["ema_momentum"],
    )
    model = ModelConfig.from_dict({k: resolved[k] for k in MODEL_CONFIG_KEYS})
    return train, model


def cmd_pretrain(args) -> int:
    cli_values = {name: getattr(args, name.replace("-", "_"), None) for name in PRETRAIN_DEFAULTS}
    resolved = resolve_config(PRETRAIN_DEFAULTS, args.config, cli_values)
    corpus_path = Path(args.corpus)
    if not corpus_path.exists():
        raise FileNotFoundError(f"corpus manifest not found: {corpus_path}")
    run_dir, chash = make_run_dir(args, resolved)
    data = load_manifest(corpus_path)
    train_config, model_config = _pretrain_configs(resolved)

    manifest_payload = {
        "subcommand": "pretrain",
        "tool_version": __version__,
        "config": resolved,
        "config_hash": chash,
        "seeds": {"master": train_config.seed},
        "input_hashes": {"corpus": file_hash(corpus_path)},
        "output_paths": {},
    }
    write_run_manifest(run_dir, manifest_payload)

    result = run_pretraining(
        train_config, model_config, data.images, data.descriptions,
        out_dir=run_dir, desc_splits=data.desc_splits, resume_from=args.resume,
    )
    manifest_payload["seeds"]["shuffle"] = result.shuffle_seed
    manifest_payload["output_paths"] = {
        "checkpoint": str(result.checkpoint_path),
        "metrics": str(run_dir / "metrics.jsonl"),
    }
    write_run_manifest(run_dir, manifest_payload)
    print(f"run_dir: {run_dir}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"steps: {result.state.step}")
    if result.metrics:
        last = result.metrics[-1]
        print(f"final loss: {last['loss_total']:.4f} (itc {last['loss_itc']:.4f}, "
              f"itm {last['loss_itm']:.4f}, mlm {last['loss_mlm']:.4f}, "
              f"imc {last['loss_imc']:.4f})")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

EVAL_DEFAULTS = {
    "split": "eval",
    "mode": "category",
    "rerank_k": 0,
}


def _evaluate_checkpoint(checkpoint: Path, corpus_path: Path, split: str, mode: str,
                         rerank_k: int, chash: str) -> tuple[RetrievalReport, RetrievalReport]:
    state, _ = load_trainer_state(checkpoint)
    data = load_manifest(corpus_path)
    images, texts = split_records(data.images, data.descriptions, data.desc_splits, split)
    return evaluate_model(
        state.model, images, texts, state.tokenizer, mode=mode,
        rerank_k=rerank_k, config_hash=chash,
    )


def cmd_evaluate(args) -> int:
    cli_values = {"split": args.split, "mode": args.mode, "rerank_k": args.rerank_k}
    resolved = resolve_config(EVAL_DEFAULTS, args.config, cli_values)
    checkpoint = Path(args.checkpoint)
    corpus_path = Path(args.corpus)
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    if not corpus_path.exists():
        raise FileNotFoundError(f"corpus manifest not found: {corpus_path}")
    run_dir, chash = make_run_dir(args, resolved)
    manifest_payload = {
        "subcommand": "evaluate",
        "tool_version": __version__,
        "config": resolved,
        "config_hash": chash,
        "seeds": {},
        "input_hashes": {"checkpoint": file_hash(checkpoint),
                         "corpus": file_hash(corpus_path)},
        "output_paths": {},
    }
    write_run_manifest(run_dir, manifest_payload)

    i2t, t2i = _evaluate_checkpoint(checkpoint, corpus_path, resolved["split"],
                                    resolved["mode"], int(resolved["rerank_k"]), chash)
    i2t_path = run_dir / "report_i2t.json"
    t2i_path = run_dir / "report_t2i.json"
    i2t.save(i2t_path)
    t2i.save(t2i_path)
    manifest_payload["output_paths"] = {"report_i2t": str(i2t_path),
                                        "report_t2i": str(t2i_path)}
    write_run_manifest(run_dir, manifest_payload)
    print(f"run_dir: {run_dir}")
    print(format_table_row(i2t, t2i))
    return 0


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------


def cmd_ablate_prompts(args) -> int:
    from .promptgen import TEMPLATE_IDS

    cli_values = {name: getattr(args, name.replace("-", "_"), None) for name in PRETRAIN_DEFAULTS}
    resolved = resolve_config(PRETRAIN_DEFAULTS, args.config, cli_values)
    corpus_path = Path(args.corpus)
    if not corpus_path.exists():
        raise FileNotFoundError(f"corpus manifest not found: {corpus_path}")
    run_dir, chash = make_run_dir(args, resolved)
    manifest_payload = {
        "subcommand": "ablate-prompts",
        "tool_version": __version__,
        "config": resolved,
        "config_hash": chash,
        "seeds": {"master": resolved["seed"]},
        "input_hashes": {"corpus": file_hash(corpus_path)},
        "output_paths": {},
    }
    write_run_manifest(run_dir, manifest_payload)

    data = load_manifest(corpus_path)
    summary = []
    variants = [(pid, (pid,)) for pid in TEMPLATE_IDS] + [("All", None)]
    for label, prompt_filter in variants:
        variant_resolved = dict(resolved, prompt_filter=prompt_filter)
        train_config, model_config = _pretrain_configs(variant_resolved)
        variant_dir = run_dir / label
        result = run_pretraining(
            train_config, model_config, data.images, data.descriptions,
            out_dir=variant_dir, desc_splits=data.desc_splits,
        )
        images, texts = split_records(data.images, data.descriptions,
                                      data.desc_splits, "eval")
        i2t, t2i = evaluate_model(result.state.model, images, texts,
                                  result.state.tokenizer, mode="category",
                                  config_hash=chash)
        summary.append({
            "prompts": label,
            "i2t": i2t.to_dict(),
            "t2i": t2i.to_dict(),
            "overall_avg_recall": overall_avg_recall(i2t, t2i),
        })
        print(f"--- prompts={label}")
        print(format_table_row(i2t, t2i))
    summary_path = run_dir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
    manifest_payload["output_paths"] = {"summary": str(summary_path)}
    write_run_manifest(run_dir, manifest_payload)
    print(f"run_dir: {run_dir}")
    return 0


def cmd_ablate_shuffle(args) -> int:
    cli_values = {name: getattr(args, name.replace("-", "_"), None) for name in PRETRAIN_DEFAULTS}
    resolved = resolve_config(PRETRAIN_DEFAULTS, args.config, cli_values)
    corpus_path = Path(args.corpus)
    if not corpus_path.exists():
        raise FileNotFoundError(f"corpus manifest not found: {corpus_path}")
    run_dir, chash = make_run_dir(args, resolved)
    manifest_payload = {
        "subcommand": "ablate-shuffle",
        "tool_version": __version__,
        "config": resolved,
        "config_hash": chash,
        "seeds": {"master": resolved["seed"]},
        "input_hashes": {"corpus": file_hash(corpus_path)},
        "output_paths": {},
    }
    write_run_manifest(run_dir, manifest_payload)

    data = load_manifest(corpus_path)
    images, texts = split_records(data.images, data.descriptions, data.desc_splits, "eval")
    summary = {}
    for label, shuffled in (("aligned", False), ("shuffled", True)):
        variant_resolved = dict(resolved, shuffled=shuffled)
        train_config, model_config = _pretrain_configs(variant_resolved)
        result = run_pretraining(
            train_config, model_config, data.images, data.descriptions,
            out_dir=run_dir / label, desc_splits=data.desc_splits,
        )
        i2t, t2i = evaluate_model(result.state.model, images, texts,
                                  result.state.tokenizer, mode="category",
                                  config_hash=chash)
        summary[label] = {
            "shuffle_seed": result.shuffle_seed,
            "i2t": i2t.to_dict(),
            "t2i": t2i.to_dict(),
        }
        print(f"--- pairs={label}")
        print(format_table_row(i2t, t2i))
    gap_i2t = (summary["aligned"]["i2t"]["recall"]["1"]
               - summary["shuffled"]["i2t"]["recall"]["1"])
    gap_t2i = (summary["aligned"]["t2i"]["recall"]["1"]
               - summary["shuffled"]["t2i"]["recall"]["1"])
    summary["gap_r1"] = {"i2t": gap_i2t, "t2i": gap_t2i}
    print(f"R@1 drop from shuffling: I2T {gap_i2t:.1f}, T2I {gap_t2i:.1f}")
    summary_path = run_dir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
    manifest_payload["output_paths"] = {"summary": str(summary_path)}
    write_run_manifest(run_dir, manifest_payload)
    print(f"run_dir: {run_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat JSON config file")
    parser.add_argument("--run-dir", help="output directory (default runs/<stamp>-<hash>)")


def _add_pretrain_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--corpus", required=True, help="corpus manifest file")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--learning-rate", type=float)
    parser.add_argument("--weight-decay", type=float)
    parser.add_argument("--warmup-steps", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--queue-size", type=int)
    parser.add_argument("--mask-rate", type=float)
    parser.add_argument("--checkpoint-interval", type=int)
    parser.add_argument("--prompt-filter", help="comma-separated prompt ids, e.g. P1,P3")
    parser.add_argument("--shuffled", action="store_true", default=None,
                        help="train on shuffled image-description pairs")
    parser.add_argument("--itm-strategy", choices=("uniform", "hard"))
    parser.add_argument("--target", dest="target_mode", choices=("uniform", "binary-sum"))
    parser.add_argument("--allow-repeated-categories", action="store_true", default=None)
    parser.add_argument("--ema-momentum", type=float)
    for key in MODEL_CONFIG_KEYS:
        if key == "similarity":
            parser.add_argument("--similarity", choices=("projected", "raw"))
        else:
            parser.add_argument(f"--{key.replace('_', '-')}", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptvlp",
                                     description="category-prompted vision-language pre-training")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("build-corpus", help="generate descriptions and a corpus manifest")
    p.add_argument("--categories", help="JSON file of category entries")
    p.add_argument("--descriptions", help="existing description corpus (JSONL) to reuse")
    p.add_argument("--images", help="existing image records (JSONL) instead of synthetic ones")
    p.add_argument("--templates", help="comma-separated template ids (default: all nine)")
    p.add_argument("--responses-per-prompt", type=int)
    p.add_argument("--backend", choices=("fixture", "live"))
    p.add_argument("--cache-dir", help="prompt cache directory")
    p.add_argument("--images-per-category", type=int)
    p.add_argument("--split-policy", choices=SPLIT_POLICIES)
    p.add_argument("--eval-fraction", type=float)
    p.add_argument("--seed", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_build_corpus)

    p = sub.add_parser("pretrain", help="run pre-training on a corpus manifest")
    _add_pretrain_flags(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("evaluate", help="retrieval evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=("pretrain", "eval"))
    p.add_argument("--mode", choices=("instance", "category"))
    p.add_argument("--rerank-k", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate-prompts", help="loop pretrain+evaluate over P1..P9 and All")
    _add_pretrain_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_ablate_prompts)

    p = sub.add_parser("ablate-shuffle", help="paired aligned vs shuffled runs")
    _add_pretrain_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_ablate_shuffle)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: training diverged at step {exc.step}", file=sys.stderr)
        if exc.last_checkpoint is not None:
            print(f"last good checkpoint: {exc.last_checkpoint}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as exc:
        # PromptVlpError input subclasses (manifest/sampling/etc.) are ValueErrors.
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PromptVlpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
