"""Command-line entry points.

Subcommands: build-corpus, pretrain, evaluate, extract. Every command that
produces artifacts writes the merged configuration (file values + overrides)
next to them as run_config.json, so a run can be reproduced from its output
directory alone.

Exit codes: 0 success, 1 usage/configuration error, 2 data error, 3
runtime/numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .conll import read_conll
from .corpus import (
    NerInstance,
    SyntheticCorpusSpec,
    corpus_types,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
    split_by_types,
)
from .codec import Vocabulary
from .errors import ConfigurationError, DataError, IcnerError, RuntimeFailure
from .evaluate import Episode, evaluate_in_context, measure_meta_gap, predict_mentions
from .model import ModelConfig, load_checkpoint
from .sampler import CorpusIndex, SamplerConfig, anonymize_types, sample_task
from .train import TrainConfig, finetune, pretrain


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage problems; this project reserves 2 for data
    errors, so usage failures are remapped to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--config",
        default=None,
        help="JSON file of flat option defaults; command-line flags override",
    )


def _apply_config_file(parser, args, argv):
    """Re-parse with file-provided defaults under the explicit flags."""
    if not args.config:
        return args
    try:
        defaults = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"cannot read config file: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"config file is not valid JSON: {e}") from e
    if not isinstance(defaults, dict):
        raise DataError("config file must hold a flat JSON object")
    known = {a.dest for a in parser._actions}
    unknown = set(defaults) - known
    if unknown:
        raise ConfigurationError(
            f"config file sets unknown option(s): {sorted(unknown)}"
        )
    parser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _print_effective(args, skip=("config",)):
    view = {k: v for k, v in vars(args).items() if k not in skip and k != "func"}
    print("config: " + json.dumps(view, sort_keys=True, default=str), file=sys.stderr)


def _write_run_config(out_dir: Path, command: str, args):
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "artifact_version": __version__,
        "command": command,
        "config_file": args.config,
        "options": {
            k: v for k, v in vars(args).items() if k not in ("func", "config")
        },
    }
    (out_dir / "run_config.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2, default=str) + "\n",
        encoding="utf-8",
    )


def _parse_mix(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError as e:
        raise ConfigurationError(f"task mix must look like 1:1, got {text!r}") from e


def _load_model_dir(path_str: str):
    """Accept either a checkpoint directory or a model.npz path; returns
    (params, vocab, extra_meta)."""
    path = Path(path_str)
    if path.is_dir():
        model_file = path / "model.npz"
        vocab_file = path / "vocab.txt"
    else:
        model_file = path
        vocab_file = path.parent / "vocab.txt"
    if not model_file.exists():
        raise DataError(f"checkpoint not found: {model_file}")
    if not vocab_file.exists():
        raise DataError(f"vocabulary not found: {vocab_file}")
    params, _, extra_meta = load_checkpoint(model_file)
    vocab = Vocabulary.load(vocab_file)
    return params, vocab, extra_meta


def _holdout_names(args, corpus) -> list[str]:
    types = corpus_types(corpus)
    if args.holdout_types:
        names = [t.strip() for t in args.holdout_types.split(",") if t.strip()]
        missing = [n for n in names if n not in types]
        if missing:
            raise DataError(f"holdout type(s) not in corpus: {missing}")
        return names
    if args.holdout_count:
        if args.holdout_count >= len(types):
            raise ConfigurationError(
                f"holdout_count={args.holdout_count} leaves no training types "
                f"(corpus has {len(types)})"
            )
        return sorted(types)[-args.holdout_count :]
    return []


# --- build-corpus -----------------------------------------------------------


def cmd_build_corpus(args):
    out = Path(args.out)
    if args.from_conll:
        instances = read_conll(args.from_conll)
    else:
        spec = SyntheticCorpusSpec(
            num_types=args.num_types,
            instances_per_type=args.instances_per_type,
            vocabulary_size=args.vocabulary_size,
            nil_fraction=args.nil_fraction,
            seed=args.seed,
        )
        instances = generate_synthetic_corpus(spec)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(instances, out)
    type_counts: dict[str, int] = {}
    nil = 0
    for inst in instances:
        if not inst.entities:
            nil += 1
        for t in sorted(inst.types()):
            type_counts[t] = type_counts.get(t, 0) + 1
    stats = {
        "instances": len(instances),
        "types": len(type_counts),
        "type_counts": dict(sorted(type_counts.items())),
        "nil_instances": nil,
        "nil_rate": nil / len(instances) if instances else 0.0,
    }
    (out.parent / (out.name + ".stats.json")).write_text(
        json.dumps(stats, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    _write_run_config(out.parent, "build-corpus", args)
    print(json.dumps(stats, sort_keys=True))
    return 0


# --- pretrain ---------------------------------------------------------------


def cmd_pretrain(args):
    corpus = load_corpus(args.corpus)
    if args.documents:
        raw = Path(args.documents).read_text(encoding="utf-8")
        documents = [b.strip() for b in raw.split("\n\n") if b.strip()]
    else:
        documents = [inst.text for inst in corpus]
    holdout = _holdout_names(args, corpus)
    train_instances, _ = split_by_types(corpus, holdout) if holdout else (corpus, [])

    sampler_cfg = SamplerConfig(
        N=args.N,
        K=args.K,
        gamma=args.gamma,
        anonymize_prob=args.anonymize_prob,
        num_indicators=args.num_indicators,
        seed=args.seed,
    )
    train_cfg = TrainConfig(
        alpha=args.alpha,
        outer_lr=args.lr,
        inner_lr=args.inner_lr,
        steps=args.steps,
        warmup_steps=args.warmup_steps,
        batch_size=args.batch_size,
        task_mix=_parse_mix(args.task_mix),
        weight_decay=args.weight_decay,
        checkpoint_every=args.checkpoint_every,
        seed=args.seed,
    )
    model_cfg = ModelConfig(
        num_layers=args.layers,
        hidden_dim=args.hidden_dim,
        num_heads=args.heads,
        ffn_dim=args.ffn_dim,
        vocab_size=1,
        max_len=args.max_len,
        dropout=args.dropout,
        seed=args.seed,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_config(out_dir, "pretrain", args)

    from .train import build_vocabulary

    vocab = build_vocabulary(
        corpus, documents, num_type_indicators=args.num_indicators
    )

    def log(sm):
        if args.log_every and sm.step_index % args.log_every == 0:
            print(sm.to_json(), file=sys.stderr)

    params, vocab, metrics = pretrain(
        train_instances,
        documents,
        model_cfg,
        train_cfg,
        sampler_cfg,
        out_dir=out_dir,
        ablate=tuple(args.ablate or ()),
        vocab=vocab,
        resume=args.resume,
        log_fn=log,
    )
    last = metrics[-1] if metrics else None
    print(
        json.dumps(
            {
                "steps": len(metrics),
                "final_combined_loss": last.combined_loss if last else None,
                "checkpoint": str(out_dir / "model.npz"),
                "parameters": params.num_params(),
                "ablations": sorted(args.ablate or ()),
            },
            sort_keys=True,
        )
    )
    return 0


# --- evaluate ---------------------------------------------------------------


def _eval_split(instances, rng, support_fraction):
    idx = rng.permutation(len(instances))
    cut = max(1, int(len(instances) * support_fraction))
    support_pool = [instances[int(i)] for i in idx[:cut]]
    test_pool = [instances[int(i)] for i in idx[cut:]]
    return support_pool, test_pool


def cmd_evaluate(args):
    params, vocab, extra_meta = _load_model_dir(args.checkpoint)
    corpus = load_corpus(args.corpus)
    holdout = _holdout_names(args, corpus)
    if holdout:
        _, instances = split_by_types(corpus, holdout)
        label_set = holdout
    else:
        instances = [i for i in corpus if i.entities]
        label_set = corpus_types(corpus)
    if not instances:
        raise DataError("evaluation split is empty")
    rng = np.random.default_rng(args.seed)
    support_pool, test_pool = _eval_split(instances, rng, args.support_fraction)
    if not test_pool:
        raise DataError("no test instances after support split")

    if args.mode == "finetune":
        report = _evaluate_finetuned(args, params, vocab, support_pool, test_pool,
                                     label_set, rng)
    else:
        report = evaluate_in_context(
            params,
            vocab,
            support_pool,
            test_pool,
            k=args.k,
            repeats=args.repeats,
            rng=rng,
            label_set=label_set,
            anonymize=args.anonymize_labels,
            max_new_tokens=args.max_new_tokens,
            max_test_instances=args.max_test_instances,
        )

    out_dir = Path(args.out_dir) if args.out_dir else None
    payload = json.loads(report.to_json())
    payload["mode"] = args.mode
    payload["checkpoint_ablations"] = extra_meta.get("ablations", [])
    if args.meta_gap_tasks:
        payload["meta_gap"] = _gap_over_split(
            args, params, vocab, instances, label_set, rng
        )
    text = json.dumps(payload, sort_keys=True, indent=2)
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(text + "\n", encoding="utf-8")
        report.write_csv(out_dir / "report.csv")
        _write_run_config(out_dir, "evaluate", args)
    print(text)
    return 0


def _evaluate_finetuned(args, params, vocab, support_pool, test_pool, label_set, rng):
    """Fine-tune a copy on each repeat's support set, then score it."""
    from .evaluate import EpisodeReport, build_kshot_episode, micro_f1

    report = EpisodeReport(k=args.k)
    ft_cfg = TrainConfig(
        alpha=0.0,
        outer_lr=args.ft_lr,
        steps=args.ft_steps,
        warmup_steps=0,
        batch_size=1,
        seed=args.seed,
    )
    for r in range(args.repeats):
        episode = build_kshot_episode(
            support_pool, test_pool, args.k, rng, label_set, repeat_index=r
        )
        tuned = finetune(
            params, list(episode.support), episode.label_set, ft_cfg, vocab
        )
        tests = list(episode.test_set)
        if args.max_test_instances and len(tests) > args.max_test_instances:
            picks = rng.choice(len(tests), args.max_test_instances, replace=False)
            tests = [tests[int(i)] for i in picks]
        labels = set(episode.label_set)
        predicted, gold = {}, {}
        for i, inst in enumerate(tests):
            spans, malformed, hallucinated = predict_mentions(
                tuned, vocab, episode, inst, {}, args.max_new_tokens
            )
            predicted[i] = spans
            gold[i] = [
                (m.start, m.end, m.type_name)
                for m in inst.entities
                if m.type_name in labels
            ]
            report.malformed_clauses += malformed
            report.hallucinated_surfaces += hallucinated
        p, rec, f1 = micro_f1(predicted, gold)
        report.repeats.append(
            {"repeat_index": r, "precision": p, "recall": rec, "micro_f1": f1}
        )
    return report.finalize()


def _gap_over_split(args, params, vocab, instances, label_set, rng):
    n = min(args.N, len(label_set))
    cfg = SamplerConfig(
        N=n,
        K=args.k,
        gamma=0.0,
        anonymize_prob=1.0 if args.anonymize_labels else 0.0,
        num_indicators=99,
        seed=args.seed,
    )
    index = CorpusIndex(instances)
    tasks = []
    for _ in range(args.meta_gap_tasks):
        task = sample_task(index, cfg, rng)
        if args.anonymize_labels:
            task = anonymize_types(task, 1.0, rng)
        tasks.append(task)
    inner_lr = args.ft_lr
    return measure_meta_gap(params, tasks, inner_lr, vocab)["default"]


# --- extract ----------------------------------------------------------------


def cmd_extract(args):
    params, vocab, _ = _load_model_dir(args.checkpoint)
    types = tuple(t.strip() for t in args.types.split(",") if t.strip())
    if not types:
        raise ConfigurationError("--types must name at least one entity type")
    demos = load_corpus(args.demos)
    if not demos:
        raise ConfigurationError(f"demonstration file {args.demos} has no instances")
    if args.text is not None:
        text = args.text
    elif args.text_file:
        text = Path(args.text_file).read_text(encoding="utf-8").strip()
    else:
        raise ConfigurationError("one of --text or --text-file is required")
    if not text:
        return 0
    episode = Episode(
        support=tuple(demos), test_set=(), label_set=types, repeat_index=0
    )
    inst = NerInstance(text=text, entities=())
    spans, malformed, hallucinated = predict_mentions(
        params, vocab, episode, inst, {}, args.max_new_tokens
    )
    for start, end, label in spans:
        print(f"{text[start:end]} -> {label} [{start}:{end}]")
    if malformed or hallucinated:
        print(
            f"(diagnostics: {malformed} malformed clause(s), "
            f"{hallucinated} unlocatable surface(s))",
            file=sys.stderr,
        )
    return 0


# --- parser wiring ----------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="icner", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-corpus", help="generate or convert a corpus")
    b.add_argument("--out", required=True)
    b.add_argument("--from-conll", default=None, help="convert a column file")
    b.add_argument("--num-types", type=int, default=20)
    b.add_argument("--instances-per-type", type=int, default=30)
    b.add_argument("--vocabulary-size", type=int, default=120)
    b.add_argument("--nil-fraction", type=float, default=0.15)
    _add_common(b)
    b.set_defaults(func=cmd_build_corpus)

    p = sub.add_parser("pretrain", help="run meta-function pre-training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--documents", default=None,
                   help="plain text, blank-line separated docs (default: corpus texts)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--inner-lr", type=float, default=None)
    p.add_argument("--warmup-steps", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--task-mix", default="1:1")
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--checkpoint-every", type=int, default=500)
    p.add_argument("--N", type=int, default=3)
    p.add_argument("--K", type=int, default=2)
    p.add_argument("--gamma", type=float, default=0.2)
    p.add_argument("--anonymize-prob", type=float, default=0.8)
    p.add_argument("--num-indicators", type=int, default=99)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn-dim", type=int, default=128)
    p.add_argument("--max-len", type=int, default=512)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--holdout-types", default=None)
    p.add_argument("--holdout-count", type=int, default=0)
    p.add_argument("--ablate", action="append", choices=["mf", "lm", "anonymization"])
    p.add_argument("--resume", action="store_true")
    p.add_argument("--log-every", type=int, default=50)
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    e = sub.add_parser("evaluate", help="episodic few-shot evaluation")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--k", type=int, default=1)
    e.add_argument("--repeats", type=int, default=10)
    e.add_argument("--mode", choices=["incontext", "finetune"], default="incontext")
    e.add_argument("--holdout-types", default=None)
    e.add_argument("--holdout-count", type=int, default=0)
    e.add_argument("--support-fraction", type=float, default=0.5)
    e.add_argument("--anonymize-labels", action="store_true")
    e.add_argument("--max-new-tokens", type=int, default=64)
    e.add_argument("--max-test-instances", type=int, default=None)
    e.add_argument("--meta-gap-tasks", type=int, default=0)
    e.add_argument("--N", type=int, default=3)
    e.add_argument("--ft-steps", type=int, default=100)
    e.add_argument("--ft-lr", type=float, default=1e-3)
    e.add_argument("--out-dir", default=None)
    _add_common(e)
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("extract", help="extract entities from one text")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--types", required=True, help="comma-separated type names")
    x.add_argument("--demos", required=True, help="JSONL demonstration instances")
    x.add_argument("--text", default=None)
    x.add_argument("--text-file", default=None)
    x.add_argument("--max-new-tokens", type=int, default=64)
    _add_common(x)
    x.set_defaults(func=cmd_extract)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config_file(parser, args, argv)
        _print_effective(args)
        return args.func(args)
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (RuntimeFailure, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except IcnerError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
