"""Command line entry point.

Subcommands mirror the pipeline stages: ``gen`` writes a synthetic corpus,
``annotate`` derives an annotation from geometry records, ``train`` fits
the predictors on a corpus, ``prune`` runs a full experiment from a config
(or prunes an existing corpus with existing checkpoints), ``sweep`` and
``compare`` evaluate ratio schedules and strategy baselines, and
``validate`` re-parses every artifact in an output directory.

The output directory falls back to the ``MVPRUNE_OUT_DIR`` environment
variable when ``--out`` is omitted.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .core import (
    AnnotationError,
    ConfigError,
    ContractError,
    FORMAT_VERSION,
    ParseError,
    PruneConfig,
    Strategy,
    TrainingError,
    load_annotation,
    save_annotation,
    write_jsonl,
    ViewRoles,
)
from .annotate import annotate_episode, load_geometry
from .bench import (
    evaluate_strategy,
    _flop_model,
    _prune_config,
    compare_strategies,
    load_experiment_config,
    resolve_config,
    run_experiment,
    scenario_template,
    sweep_beta,
    train_predictors,
    validate_artifacts,
    write_report_csv,
)
from .predictor import load_params, save_params, save_trace
from .synth import generate_corpus, load_corpus, write_corpus


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    env = os.environ.get("MVPRUNE_OUT_DIR")
    if env:
        return Path(env)
    raise ConfigError("no output directory: pass --out or set MVPRUNE_OUT_DIR")


def _load_config(args) -> dict:
    if getattr(args, "config", None):
        return load_experiment_config(args.config)
    return resolve_config(None)


def _corpus_overrides(args, config: dict) -> dict:
    for name in ("episodes", "seed", "episode_length", "noise_sigma",
                 "distractors", "embed_dim", "patch_size"):
        value = getattr(args, name, None)
        if value is not None:
            key = "count" if name == "episodes" else name
            config["corpus"][key] = value
    return config


def _cmd_gen(args) -> int:
    config = _corpus_overrides(args, _load_config(args))
    template = scenario_template(config)
    corpus = config["corpus"]
    episodes = generate_corpus(template, corpus["count"], corpus["seed"])
    manifest = write_corpus(episodes, corpus["seed"], _out_dir(args))
    print(f"wrote {manifest['count']} episodes to {_out_dir(args)}")
    return 0


def _cmd_annotate(args) -> int:
    episode_id, geometry = load_geometry(args.geometry)
    roles = ViewRoles(head=args.head, left_wrist=args.left_wrist,
                      right_wrist=args.right_wrist)
    annotation = annotate_episode(
        geometry, roles, episode_id,
        detection_view=args.detection_view,
        debounce_width=args.debounce)
    save_annotation(args.annotation_out, annotation)
    print(f"annotated {annotation.length} frames of {episode_id} "
          f"to {args.annotation_out}")
    return 0


def _cmd_train(args) -> int:
    config = _load_config(args)
    for name in ("hidden", "learning_rate", "steps", "batch_size", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            config["train"][name] = value
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(args.corpus)
    observations = [obs for entry in corpus for obs in entry["observations"]]
    annotations = {entry["episode_id"]: entry["annotation"]
                   for entry in corpus}
    intra, inter, intra_losses, inter_losses = train_predictors(
        observations, annotations, config)
    save_params(out / "intra.mlp.json", intra)
    save_params(out / "inter.mlp.json", inter)
    save_trace(out / "intra_trace.csv", intra_losses)
    save_trace(out / "inter_trace.csv", inter_losses)
    print(f"trained on {len(observations)} frames; final losses "
          f"intra {intra_losses[-1]:.4f}, inter {inter_losses[-1]:.4f}")
    return 0


def _prune_config_from_args(args, config: dict) -> None:
    if args.alphas is not None:
        config["prune"]["alphas"] = [float(a) for a in args.alphas.split(",")]
    for name in ("beta", "epsilon", "strategy", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            config["prune"][name] = value


def _cmd_prune(args) -> int:
    config = _load_config(args)
    _prune_config_from_args(args, config)
    out = _out_dir(args)
    if args.corpus is None:
        report = run_experiment(config, out)
    else:
        if not args.intra or not args.inter:
            raise ConfigError(
                "pruning an existing corpus needs --intra and --inter "
                "checkpoints")
        out.mkdir(parents=True, exist_ok=True)
        corpus = load_corpus(args.corpus)
        intra = load_params(args.intra)
        inter = load_params(args.inter)
        observations_by_episode = [entry["observations"] for entry in corpus]
        annotations = [entry["annotation"] for entry in corpus]
        report, results = evaluate_strategy(
            observations_by_episode, annotations, intra, inter,
            _prune_config(config), _flop_model(config))
        for entry, per_episode in zip(corpus, results):
            write_jsonl(
                out / f"{entry['episode_id']}.prune.jsonl",
                ({"fmt": FORMAT_VERSION, "kind": "prune",
                  "episode_id": entry["episode_id"], "frame_index": t,
                  "result": result.to_obj()}
                 for t, result in enumerate(per_episode)))
        write_report_csv(out / "report.csv", [report])
    print(f"strategy {report.strategy}: kept {report.kept_total} of "
          f"{report.before_total} tokens "
          f"(reduction {report.reduction_ratio:.4f}, "
          f"speedup {report.flop_speedup:.2f}x, "
          f"relevant retention {report.retention_relevant:.4f})")
    return 0


def _cmd_sweep(args) -> int:
    config = _load_config(args)
    betas = [float(b) for b in args.betas.split(",")]
    rows = sweep_beta(config, betas, _out_dir(args))
    for row in rows:
        print(f"beta {row['beta']}: kept {row['kept_total']}, "
              f"speedup {row['flop_speedup']:.2f}x, "
              f"retention {row['retention_relevant']:.4f}")
    return 0


def _cmd_compare(args) -> int:
    config = _load_config(args)
    strategies = tuple(Strategy(s) for s in args.strategies.split(","))
    reports = compare_strategies(config, _out_dir(args), strategies)
    for name, report in reports.items():
        print(f"{name}: kept {report.kept_total}, "
              f"relevant retention {report.retention_relevant:.4f}, "
              f"speedup {report.flop_speedup:.2f}x")
    return 0


def _cmd_validate(args) -> int:
    problems = validate_artifacts(args.dir)
    if problems:
        for problem in problems:
            print(problem, file=sys.stderr)
        return 1
    print("all artifacts valid")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvprune",
        description="hierarchical multi-view token pruning pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic corpus")
    gen.add_argument("--out", help="corpus directory")
    gen.add_argument("--config", help="experiment config JSON")
    gen.add_argument("--episodes", type=int)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--episode-length", dest="episode_length", type=int)
    gen.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    gen.add_argument("--distractors", type=int)
    gen.add_argument("--embed-dim", dest="embed_dim", type=int)
    gen.add_argument("--patch-size", dest="patch_size", type=int)
    gen.set_defaults(func=_cmd_gen)

    ann = sub.add_parser("annotate",
                         help="derive an annotation from geometry records")
    ann.add_argument("--geometry", required=True,
                     help="geometry JSONL of one episode")
    ann.add_argument("--annotation-out", required=True,
                     help="annotation JSONL to write")
    ann.add_argument("--head", type=int, default=0)
    ann.add_argument("--left-wrist", dest="left_wrist", type=int, default=1)
    ann.add_argument("--right-wrist", dest="right_wrist", type=int, default=2)
    ann.add_argument("--detection-view", dest="detection_view", type=int,
                     default=None)
    ann.add_argument("--debounce", type=int, default=3)
    ann.set_defaults(func=_cmd_annotate)

    tr = sub.add_parser("train", help="train both predictors on a corpus")
    tr.add_argument("--corpus", required=True, help="corpus directory")
    tr.add_argument("--out", help="checkpoint directory")
    tr.add_argument("--config", help="experiment config JSON")
    tr.add_argument("--hidden", type=int)
    tr.add_argument("--learning-rate", dest="learning_rate", type=float)
    tr.add_argument("--steps", type=int)
    tr.add_argument("--batch-size", dest="batch_size", type=int)
    tr.add_argument("--seed", type=int)
    tr.set_defaults(func=_cmd_train)

    pr = sub.add_parser(
        "prune",
        help="run a full experiment from a config, or prune an existing "
             "corpus with existing checkpoints")
    pr.add_argument("--out", help="output directory")
    pr.add_argument("--config", help="experiment config JSON")
    pr.add_argument("--corpus", help="prune this corpus instead of running "
                                     "the full pipeline")
    pr.add_argument("--intra", help="token predictor checkpoint")
    pr.add_argument("--inter", help="view predictor checkpoint")
    pr.add_argument("--alphas", help="comma-separated local ratios")
    pr.add_argument("--beta", type=float)
    pr.add_argument("--epsilon", type=float)
    pr.add_argument("--strategy",
                    choices=[s.value for s in Strategy])
    pr.add_argument("--seed", type=int)
    pr.set_defaults(func=_cmd_prune)

    sw = sub.add_parser("sweep", help="sweep the global prune ratio")
    sw.add_argument("--out", help="output directory")
    sw.add_argument("--config", help="experiment config JSON")
    sw.add_argument("--betas", required=True,
                    help="comma-separated global ratios")
    sw.set_defaults(func=_cmd_sweep)

    cp = sub.add_parser("compare", help="compare pruning strategies")
    cp.add_argument("--out", help="output directory")
    cp.add_argument("--config", help="experiment config JSON")
    cp.add_argument("--strategies",
                    default="hierarchical,random_drop,adaptive_ratio_drop,"
                            "no_prune")
    cp.set_defaults(func=_cmd_compare)

    va = sub.add_parser("validate", help="re-parse experiment artifacts")
    va.add_argument("--dir", required=True, help="experiment directory")
    va.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, ParseError, AnnotationError,
            TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
