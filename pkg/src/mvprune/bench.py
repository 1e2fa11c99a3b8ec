"""Benchmark harness: seeded end-to-end experiments over synthetic corpora.

An experiment generates a corpus, re-derives its annotations from geometry
(aborting if they disagree with the generator's ground truth), trains both
predictors on the derived labels, prunes every frame, and folds the results
into a metrics report. Everything is driven by one JSON config whose
defaults are materialized and written next to the outputs, and every
artifact except the timing file is byte-identical across reruns of the same
config.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import (
    FORMAT_VERSION,
    AnnotationError,
    ConfigError,
    ContractError,
    EpisodeAnnotation,
    MultiViewObservation,
    ParseError,
    PruneConfig,
    PruneResult,
    Strategy,
    _check_int,
    dumps_obj,
    load_annotation,
    loads_obj,
    read_jsonl,
    write_jsonl,
)
from .annotate import DEFAULT_DEBOUNCE, annotate_episode, load_geometry
from .predictor import (
    MlpParams,
    TrainConfig,
    build_inter_dataset,
    build_intra_dataset,
    init_mlp,
    load_params,
    load_trace,
    save_params,
    save_trace,
    train,
)
from .pruner import (
    FlopModel,
    flop_estimate,
    prune_observation,
)
from .synth import (
    ArmScript,
    ScenarioSpec,
    SynthEpisode,
    generate_corpus,
    write_corpus,
)


# ---------------------------------------------------------------------------
# classifier metrics


def auc_score(scores, labels) -> float:
    """Area under the ROC curve via tie-averaged ranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ContractError("scores and labels must be aligned 1-d arrays")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be 0 or 1")
    positives = int(y.sum())
    negatives = y.shape[0] - positives
    if positives == 0 or negatives == 0:
        raise ContractError("AUC needs both classes present")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.shape[0])
    sorted_scores = s[order]
    i = 0
    while i < s.shape[0]:
        j = i
        while j + 1 < s.shape[0] and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[y == 1].sum() - positives * (positives + 1) / 2.0
    return float(u / (positives * negatives))


def precision_recall(scores, labels, threshold: float = 0.5
                     ) -> tuple[float, float]:
    """Precision and recall of thresholded scores.

    Precision is 0 when nothing is predicted positive; recall requires at
    least one true positive label.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ContractError("scores and labels must be aligned 1-d arrays")
    predicted = s >= threshold
    actual = y == 1
    if not actual.any():
        raise ContractError("recall needs at least one positive label")
    true_positive = int((predicted & actual).sum())
    precision = true_positive / int(predicted.sum()) if predicted.any() else 0.0
    recall = true_positive / int(actual.sum())
    return float(precision), float(recall)


def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape or p.size == 0:
        raise ContractError("predictions and labels must be aligned and nonempty")
    return float((p == y).mean())


# ---------------------------------------------------------------------------
# metrics report


@dataclass(frozen=True)
class MetricsReport:
    """Aggregated outcome of pruning a corpus with one strategy.

    Token counts are totals over all frames, per view. ``flop_speedup``
    compares the summed transformer cost of the unpruned and pruned token
    sequences; ``retention_relevant`` is the fraction of ground-truth
    relevant tokens that survived pruning.
    """

    strategy: str
    episodes: int
    frames: int
    tokens_before: tuple[int, ...]
    tokens_post_local: tuple[int, ...]
    tokens_kept: tuple[int, ...]
    reduction_ratio: float
    flop_speedup: float
    retention_relevant: float
    intra_auc: float
    intra_precision: float
    intra_recall: float
    inter_accuracy: float
    inter_precision: float
    inter_recall: float

    def __post_init__(self):
        Strategy(self.strategy)
        _check_int(self.episodes, "episodes", minimum=1)
        _check_int(self.frames, "frames", minimum=1)
        before = tuple(int(n) for n in self.tokens_before)
        post = tuple(int(n) for n in self.tokens_post_local)
        kept = tuple(int(n) for n in self.tokens_kept)
        if not len(before) == len(post) == len(kept):
            raise ContractError("per-view counts must align")
        for v, (b, p, k) in enumerate(zip(before, post, kept)):
            if not 0 <= k <= p <= b:
                raise ContractError(
                    f"view {v}: counts must satisfy kept <= post_local <= before")
        object.__setattr__(self, "tokens_before", before)
        object.__setattr__(self, "tokens_post_local", post)
        object.__setattr__(self, "tokens_kept", kept)
        for name in ("reduction_ratio", "retention_relevant", "intra_auc",
                     "intra_precision", "intra_recall", "inter_accuracy",
                     "inter_precision", "inter_recall"):
            value = float(getattr(self, name))
            object.__setattr__(self, name, value)
            if not math.isfinite(value) or not 0.0 <= value <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {value}")
        speedup = float(self.flop_speedup)
        object.__setattr__(self, "flop_speedup", speedup)
        if not math.isfinite(speedup) or speedup < 1.0 - 1e-12:
            raise ContractError(
                f"flop_speedup must be at least 1, got {speedup}")

    @property
    def kept_total(self) -> int:
        return sum(self.tokens_kept)

    @property
    def before_total(self) -> int:
        return sum(self.tokens_before)

    @property
    def kept_share_per_view(self) -> tuple[float, ...]:
        total = self.kept_total
        if total == 0:
            return (0.0,) * len(self.tokens_kept)
        return tuple(k / total for k in self.tokens_kept)

    def rows(self) -> list[tuple[str, str]]:
        """Flat metric rows in a fixed order, values as repr text."""
        out = [("episodes", str(self.episodes)), ("frames", str(self.frames))]
        out.append(("tokens_before_total", str(self.before_total)))
        out.append(("tokens_post_local_total", str(sum(self.tokens_post_local))))
        out.append(("tokens_kept_total", str(self.kept_total)))
        for v in range(len(self.tokens_before)):
            out.append((f"tokens_before_view{v}", str(self.tokens_before[v])))
            out.append((f"tokens_post_local_view{v}",
                        str(self.tokens_post_local[v])))
            out.append((f"tokens_kept_view{v}", str(self.tokens_kept[v])))
            out.append((f"kept_share_view{v}",
                        repr(self.kept_share_per_view[v])))
        for name in ("reduction_ratio", "flop_speedup", "retention_relevant",
                     "intra_auc", "intra_precision", "intra_recall",
                     "inter_accuracy", "inter_precision", "inter_recall"):
            out.append((name, repr(getattr(self, name))))
        return out

    def to_obj(self) -> dict:
        return {
            "fmt": FORMAT_VERSION,
            "kind": "metrics_report",
            "strategy": self.strategy,
            "episodes": self.episodes,
            "frames": self.frames,
            "tokens_before": list(self.tokens_before),
            "tokens_post_local": list(self.tokens_post_local),
            "tokens_kept": list(self.tokens_kept),
            "reduction_ratio": self.reduction_ratio,
            "flop_speedup": self.flop_speedup,
            "retention_relevant": self.retention_relevant,
            "intra_auc": self.intra_auc,
            "intra_precision": self.intra_precision,
            "intra_recall": self.intra_recall,
            "inter_accuracy": self.inter_accuracy,
            "inter_precision": self.inter_precision,
            "inter_recall": self.inter_recall,
        }


# ---------------------------------------------------------------------------
# experiment configuration


DEFAULT_CONFIG = {
    "fmt": FORMAT_VERSION,
    "kind": "experiment_config",
    "corpus": {
        "count": 4,
        "seed": 7,
        "episode_length": 16,
        "noise_sigma": 0.05,
        "distractors": 2,
        "embed_dim": 32,
        "patch_size": 16,
    },
    "train": {
        "hidden": 64,
        "learning_rate": 0.5,
        "steps": 600,
        "batch_size": 128,
        "lambda_inter": 0.1,
        "lambda_intra": 0.1,
        "reduction": "mean",
        "seed": 3,
    },
    "prune": {
        "alphas": [0.3, 0.2, 0.2],
        "beta": 0.5,
        "epsilon": 0.01,
        "strategy": "hierarchical",
        "adaptive_threshold": 0.5,
        "adaptive_multiplier": 0.8,
        "seed": 0,
    },
    "flop": {
        "layers": 18,
        "embed_dim": 2048,
        "linear_coeff": 12.0,
        "quadratic_coeff": 2.0,
    },
}

# arm scripts scale with episode length inside _template_for, so length is
# the only timing knob the config exposes
_MIN_EPISODE_LENGTH = 12


def resolve_config(overrides: dict | None) -> dict:
    """Materialize an experiment config: defaults plus user overrides.

    Unknown keys are rejected so a typo cannot silently fall back to a
    default.
    """
    resolved = {
        "fmt": FORMAT_VERSION,
        "kind": "experiment_config",
        "corpus": dict(DEFAULT_CONFIG["corpus"]),
        "train": dict(DEFAULT_CONFIG["train"]),
        "prune": dict(DEFAULT_CONFIG["prune"]),
        "flop": dict(DEFAULT_CONFIG["flop"]),
    }
    if overrides is None:
        return resolved
    if not isinstance(overrides, dict):
        raise ConfigError("experiment config must be a JSON object")
    for key, value in overrides.items():
        if key == "fmt":
            if value != FORMAT_VERSION:
                raise ConfigError(f"unsupported config format {value!r}")
            continue
        if key == "kind":
            if value != "experiment_config":
                raise ConfigError(f"unexpected config kind {value!r}")
            continue
        if key not in ("corpus", "train", "prune", "flop"):
            raise ConfigError(f"unknown config section {key!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"config section {key!r} must be an object")
        for sub, sub_value in value.items():
            if sub not in resolved[key]:
                raise ConfigError(f"unknown config key {key}.{sub}")
            resolved[key][sub] = sub_value
    return resolved


def load_experiment_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return resolve_config(loads_obj(fh.read()))


def _scaled_script(grasp: int, close: int, release: int, target: int,
                   length: int) -> ArmScript:
    """Scale the default script timings from a 24 frame episode to ``length``."""
    scale = length / 24.0
    g = max(1, round(grasp * scale))
    c = max(g + 1, round(close * scale))
    r = min(max(c + 1, round(release * scale)), length - DEFAULT_DEBOUNCE)
    if not g < c < r:
        raise ConfigError(f"episode_length {length} leaves no room for a script")
    return ArmScript(grasp=g, close=c, release=r, target_object=target)


def _template_for(config: dict) -> ScenarioSpec:
    corpus = config["corpus"]
    try:
        length = _check_int(corpus["episode_length"], "corpus.episode_length",
                            minimum=_MIN_EPISODE_LENGTH)
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc
    arms = (_scaled_script(4, 8, 14, 0, length),
            _scaled_script(8, 12, 18, 1, length))
    return ScenarioSpec(
        episode_length=length,
        arms=arms,
        distractors=corpus["distractors"],
        embed_dim=corpus["embed_dim"],
        noise_sigma=corpus["noise_sigma"],
        patch_size=corpus["patch_size"],
    )


def scenario_template(config: dict) -> ScenarioSpec:
    """The corpus scenario template an experiment config describes."""
    return _template_for(config)


def _prune_config(config: dict, strategy: Strategy | None = None) -> PruneConfig:
    section = dict(config["prune"])
    if strategy is not None:
        section["strategy"] = strategy.value
    obj = {"fmt": FORMAT_VERSION, "kind": "prune_config", **section}
    try:
        return PruneConfig.from_obj(obj)
    except ParseError as exc:
        raise ConfigError(f"invalid prune section: {exc}") from exc


def _flop_model(config: dict) -> FlopModel:
    obj = {"fmt": FORMAT_VERSION, "kind": "flop_model", **config["flop"]}
    try:
        return FlopModel.from_obj(obj)
    except ParseError as exc:
        raise ConfigError(f"invalid flop section: {exc}") from exc


# ---------------------------------------------------------------------------
# experiment stages


def derive_annotations(episodes: Sequence[SynthEpisode]
                       ) -> list[EpisodeAnnotation]:
    """Annotate every episode from geometry and check against ground truth.

    A mismatch means the annotation pipeline broke an invariant; the error
    names the episode and frame.
    """
    derived = []
    for episode in episodes:
        ann = annotate_episode(episode.geometry, episode.spec.roles,
                               episode.episode_id)
        truth = episode.annotation
        if ann != truth:
            for t, (a, b) in enumerate(zip(ann.frames, truth.frames)):
                if a != b:
                    raise AnnotationError(
                        f"episode {episode.episode_id}: derived annotation "
                        f"diverges from ground truth", frame=t)
            raise AnnotationError(
                f"episode {episode.episode_id}: derived annotation diverges "
                f"from ground truth")
        derived.append(ann)
    return derived


def train_predictors(observations: Sequence[MultiViewObservation],
                     annotations: dict, config: dict
                     ) -> tuple[MlpParams, MlpParams, np.ndarray, np.ndarray]:
    """Train the token and the view predictor on annotated observations."""
    section = config["train"]
    hidden = _check_int(section["hidden"], "train.hidden", minimum=1)
    train_config = TrainConfig(
        learning_rate=section["learning_rate"], steps=section["steps"],
        batch_size=section["batch_size"],
        lambda_inter=section["lambda_inter"],
        lambda_intra=section["lambda_intra"],
        reduction=section["reduction"], seed=section["seed"])
    first = observations[0]
    d = first.embed_dim
    views = first.view_count
    intra_x, intra_y = build_intra_dataset(observations, annotations)
    inter_x, inter_y = build_inter_dataset(observations, annotations)
    intra = init_mlp((d, hidden, 1), seed=train_config.seed)
    inter = init_mlp((views * d, hidden, views), seed=train_config.seed + 1)
    intra, intra_losses = train(intra, intra_x, intra_y, train_config)
    inter, inter_losses = train(inter, inter_x, inter_y, train_config)
    return intra, inter, intra_losses, inter_losses


def evaluate_strategy(observations_by_episode: Sequence[
                          Sequence[MultiViewObservation]],
                      annotations: (Sequence[EpisodeAnnotation]
                                    | Mapping[str, EpisodeAnnotation]),
                      intra: MlpParams, inter: MlpParams,
                      prune_config: PruneConfig, flop_model: FlopModel,
                      ) -> tuple[MetricsReport, list[list[PruneResult]]]:
    """Prune every frame of a corpus and fold the outcomes into a report.

    ``annotations`` is either a sequence aligned with the episodes or a
    mapping keyed by episode id.
    """
    if not observations_by_episode or not observations_by_episode[0]:
        raise ContractError("evaluation needs at least one observation")
    if isinstance(annotations, Mapping):
        annotations = [annotations[episode[0].episode_id]
                       for episode in observations_by_episode]
    view_count = observations_by_episode[0][0].view_count
    before = np.zeros(view_count, dtype=np.int64)
    post_local = np.zeros(view_count, dtype=np.int64)
    kept = np.zeros(view_count, dtype=np.int64)
    relevant_kept = 0
    relevant_total = 0
    flops_before = 0.0
    flops_after = 0.0
    intra_scores, intra_labels = [], []
    inter_scores, inter_labels = [], []
    frames = 0
    results = []
    for episode_obs, ann in zip(observations_by_episode, annotations):
        per_episode = []
        for obs in episode_obs:
            if ann.episode_id != obs.episode_id:
                raise ContractError(
                    f"annotation {ann.episode_id!r} does not match "
                    f"observation episode {obs.episode_id!r}")
            frame = ann.frames[obs.frame_index]
            scores, result = prune_observation(obs, intra, inter, prune_config)
            frames += 1
            per_episode.append(result)
            before += np.array(result.view_token_counts)
            post_local += np.array(result.post_local_counts)
            kept += np.array(result.kept_per_view)
            flops_before += flop_estimate(flop_model, obs.total_tokens)
            flops_after += flop_estimate(flop_model, max(result.kept_total, 1))
            for v in range(view_count):
                mask = np.asarray(frame.masks[v])
                relevant_total += int(mask.sum())
                if result.kept[v]:
                    relevant_kept += int(mask[list(result.kept[v])].sum())
                intra_scores.append(scores.intra_raw[v])
                intra_labels.append(mask)
            inter_scores.append(scores.inter)
            inter_labels.append(np.array(frame.inter_labels))
        results.append(per_episode)
    intra_s = np.concatenate(intra_scores)
    intra_y = np.concatenate(intra_labels)
    inter_s = np.concatenate(inter_scores)
    inter_y = np.concatenate(inter_labels)
    intra_precision, intra_recall = precision_recall(intra_s, intra_y)
    inter_precision, inter_recall = precision_recall(inter_s, inter_y)
    report = MetricsReport(
        strategy=prune_config.strategy.value,
        episodes=len(observations_by_episode),
        frames=frames,
        tokens_before=tuple(int(n) for n in before),
        tokens_post_local=tuple(int(n) for n in post_local),
        tokens_kept=tuple(int(n) for n in kept),
        reduction_ratio=1.0 - kept.sum() / before.sum(),
        flop_speedup=flops_before / flops_after,
        retention_relevant=(relevant_kept / relevant_total
                            if relevant_total else 1.0),
        intra_auc=auc_score(intra_s, intra_y),
        intra_precision=intra_precision,
        intra_recall=intra_recall,
        inter_accuracy=accuracy((inter_s >= 0.5).astype(int), inter_y),
        inter_precision=inter_precision,
        inter_recall=inter_recall,
    )
    return report, results


# ---------------------------------------------------------------------------
# experiment driver


def run_experiment(config: dict | None, out_dir) -> MetricsReport:
    """Run the full pipeline under ``out_dir`` and return the report.

    Writes the corpus, derived annotations, checkpoints, loss traces, prune
    records, ``report.csv``, ``timings.csv``, and the resolved config. All
    artifacts except ``timings.csv`` are byte-identical across reruns.
    """
    config = resolve_config(config) if not _is_resolved(config) else config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}

    start = time.perf_counter()
    template = _template_for(config)
    corpus_section = config["corpus"]
    episodes = generate_corpus(template, corpus_section["count"],
                               corpus_section["seed"])
    write_corpus(episodes, corpus_section["seed"], out / "corpus")
    timings["corpus"] = time.perf_counter() - start

    start = time.perf_counter()
    derived = derive_annotations(episodes)
    for ann in derived:
        write_jsonl(out / "corpus" / f"{ann.episode_id}.derived.jsonl",
                    ann.frame_objs())
    timings["annotate"] = time.perf_counter() - start

    start = time.perf_counter()
    observations = [obs for ep in episodes for obs in ep.observations]
    by_episode = {ann.episode_id: ann for ann in derived}
    intra, inter, intra_losses, inter_losses = train_predictors(
        observations, by_episode, config)
    save_params(out / "intra.mlp.json", intra)
    save_params(out / "inter.mlp.json", inter)
    save_trace(out / "intra_trace.csv", intra_losses)
    save_trace(out / "inter_trace.csv", inter_losses)
    timings["train"] = time.perf_counter() - start

    start = time.perf_counter()
    prune_config = _prune_config(config)
    flop_model = _flop_model(config)
    report, results = evaluate_strategy(
        [ep.observations for ep in episodes], derived, intra, inter,
        prune_config, flop_model)
    for episode, per_episode in zip(episodes, results):
        write_jsonl(
            out / "corpus" / f"{episode.episode_id}.prune.jsonl",
            ({"fmt": FORMAT_VERSION, "kind": "prune",
              "episode_id": episode.episode_id, "frame_index": t,
              "result": result.to_obj()}
             for t, result in enumerate(per_episode)))
    timings["prune"] = time.perf_counter() - start

    write_report_csv(out / "report.csv", [report])
    with open(out / "config.resolved.json", "w", encoding="utf-8") as fh:
        fh.write(dumps_obj(config))
        fh.write("\n")
    write_timings_csv(out / "timings.csv", timings)
    return report


def _is_resolved(config) -> bool:
    return (isinstance(config, dict)
            and set(config) == {"fmt", "kind", "corpus", "train", "prune",
                                "flop"})


def compare_strategies(config: dict | None, out_dir,
                       strategies: Sequence[Strategy] = (
                           Strategy.HIERARCHICAL, Strategy.RANDOM_DROP,
                           Strategy.ADAPTIVE_RATIO_DROP, Strategy.NO_PRUNE),
                       ) -> dict[str, MetricsReport]:
    """Evaluate several strategies on one corpus with shared predictors.

    The corpus and the trained predictors are identical across strategies,
    so differences in the reports come from the pruning rule alone. Writes
    ``compare.csv``.
    """
    config = resolve_config(config) if not _is_resolved(config) else config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    template = _template_for(config)
    corpus_section = config["corpus"]
    episodes = generate_corpus(template, corpus_section["count"],
                               corpus_section["seed"])
    derived = derive_annotations(episodes)
    observations = [obs for ep in episodes for obs in ep.observations]
    by_episode = {ann.episode_id: ann for ann in derived}
    intra, inter, _, _ = train_predictors(observations, by_episode, config)
    flop_model = _flop_model(config)
    observations_by_episode = [ep.observations for ep in episodes]
    reports = {}
    for strategy in strategies:
        prune_config = _prune_config(config, strategy)
        report, _ = evaluate_strategy(observations_by_episode, derived,
                                      intra, inter, prune_config, flop_model)
        reports[strategy.value] = report
    write_report_csv(out / "compare.csv", list(reports.values()))
    return reports


def sweep_beta(config: dict | None, betas: Sequence[float], out_dir
               ) -> list[dict]:
    """Evaluate the hierarchical strategy across global prune ratios.

    Validates that kept counts never increase and the speedup never
    decreases as the ratio grows, then writes ``sweep.csv``.
    """
    if not betas:
        raise ConfigError("sweep needs at least one ratio")
    betas = [float(b) for b in betas]
    if any(not 0.0 <= b < 1.0 for b in betas):
        raise ConfigError("sweep ratios must lie in [0, 1)")
    config = resolve_config(config) if not _is_resolved(config) else config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    template = _template_for(config)
    corpus_section = config["corpus"]
    episodes = generate_corpus(template, corpus_section["count"],
                               corpus_section["seed"])
    derived = derive_annotations(episodes)
    observations = [obs for ep in episodes for obs in ep.observations]
    by_episode = {ann.episode_id: ann for ann in derived}
    intra, inter, _, _ = train_predictors(observations, by_episode, config)
    flop_model = _flop_model(config)
    observations_by_episode = [ep.observations for ep in episodes]
    base = _prune_config(config, Strategy.HIERARCHICAL)
    rows = []
    for beta in sorted(betas):
        prune_config = replace_beta(base, beta)
        report, _ = evaluate_strategy(observations_by_episode, derived,
                                      intra, inter, prune_config, flop_model)
        rows.append({"beta": beta, "kept_total": report.kept_total,
                     "reduction_ratio": report.reduction_ratio,
                     "flop_speedup": report.flop_speedup,
                     "retention_relevant": report.retention_relevant})
    for a, b in zip(rows, rows[1:]):
        if b["kept_total"] > a["kept_total"]:
            raise ContractError(
                f"kept count grew from ratio {a['beta']} to {b['beta']}")
        if b["flop_speedup"] < a["flop_speedup"] - 1e-12:
            raise ContractError(
                f"speedup shrank from ratio {a['beta']} to {b['beta']}")
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["beta", "kept_total", "reduction_ratio",
                         "flop_speedup", "retention_relevant"])
        for row in rows:
            writer.writerow([repr(row["beta"]), row["kept_total"],
                             repr(row["reduction_ratio"]),
                             repr(row["flop_speedup"]),
                             repr(row["retention_relevant"])])
    return rows


def replace_beta(config: PruneConfig, beta: float) -> PruneConfig:
    """Copy of a prune config with a different global ratio."""
    return replace(config, beta=float(beta))


def write_report_csv(path, reports: Sequence[MetricsReport]) -> None:
    """Long-form deterministic CSV: one row per strategy and metric."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "metric", "value"])
        for report in reports:
            for metric, value in report.rows():
                writer.writerow([report.strategy, metric, value])


def write_timings_csv(path, timings: dict[str, float]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "seconds"])
        for stage, seconds in timings.items():
            writer.writerow([stage, f"{seconds:.6f}"])


# ---------------------------------------------------------------------------
# artifact validation


def validate_artifacts(out_dir) -> list[str]:
    """Re-parse every artifact under an experiment directory.

    Returns human-readable problem descriptions; an empty list means every
    artifact parsed, round-tripped, and satisfied its invariants.
    """
    out = Path(out_dir)
    problems = []
    if not out.is_dir():
        return [f"{out}: not a directory"]

    def check(path, loader):
        try:
            loader(path)
        except (ParseError, ContractError, AnnotationError, OSError) as exc:
            problems.append(f"{path.name}: {exc}")

    corpus = out / "corpus"
    if corpus.is_dir():
        for path in sorted(corpus.glob("*.jsonl")):
            name = path.name
            if name.endswith(".obs.jsonl"):
                check(path, _validate_observations)
            elif name.endswith(".ann.jsonl") or name.endswith(".derived.jsonl"):
                check(path, load_annotation)
            elif name.endswith(".geom.jsonl"):
                check(path, _validate_geometry)
            elif name.endswith(".prune.jsonl"):
                check(path, _validate_prune_records)
    for name, loader in (("intra.mlp.json", load_params),
                         ("inter.mlp.json", load_params),
                         ("config.resolved.json", _validate_config_file),
                         ("intra_trace.csv", load_trace),
                         ("inter_trace.csv", load_trace)):
        path = out / name
        if path.exists():
            check(path, loader)
    return problems


def _validate_observations(path) -> None:
    for obj in read_jsonl(path):
        record = MultiViewObservation.from_obj(obj)
        if dumps_obj(record.to_obj()) != dumps_obj(obj):
            raise ParseError(
                f"observation frame {record.frame_index} does not round-trip",
                field="views")


def _validate_geometry(path) -> None:
    load_geometry(path)


def _validate_prune_records(path) -> None:
    for obj in read_jsonl(path):
        if obj.get("kind") != "prune" or obj.get("fmt") != FORMAT_VERSION:
            raise ParseError("not a prune record", field="kind")
        PruneResult.from_obj(obj["result"])


def _validate_config_file(path) -> None:
    load_experiment_config(path)
