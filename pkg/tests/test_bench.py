"""Benchmark harness: metrics, experiment driver, artifacts, and the CLI."""

import json
import shutil
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import oracles
from mvprune.bench import (
    DEFAULT_CONFIG,
    MetricsReport,
    accuracy,
    auc_score,
    compare_strategies,
    derive_annotations,
    evaluate_strategy,
    load_experiment_config,
    precision_recall,
    replace_beta,
    resolve_config,
    run_experiment,
    scenario_template,
    sweep_beta,
    train_predictors,
    validate_artifacts,
)
from mvprune.cli import main
from mvprune.core import (
    AnnotationError,
    ConfigError,
    ContractError,
    PruneConfig,
    Strategy,
    load_annotation,
)
from mvprune.pruner import FlopModel
from mvprune.synth import ArmScript, generate_corpus, load_corpus

SMALL = {
    "corpus": {"count": 2, "seed": 11, "episode_length": 12, "embed_dim": 8,
               "distractors": 1},
    "train": {"hidden": 16, "steps": 120, "batch_size": 64},
}


# ---------------------------------------------------------------------------
# classifier metrics


def test_auc_golden():
    assert auc_score([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auc_score([0.1, 0.2, 0.9], [0, 0, 1]) == 1.0
    assert auc_score([0.9, 0.2, 0.1], [0, 0, 1]) == 0.0
    assert auc_score([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]),
                          st.integers(0, 1)), min_size=2, max_size=40))
def test_auc_matches_pairwise_oracle(pairs):
    labels = [label for _, label in pairs]
    assume(0 < sum(labels) < len(labels))
    scores = [score for score, _ in pairs]
    want = oracles.oracle_auc(scores, labels)
    assert auc_score(scores, labels) == pytest.approx(want, abs=1e-12)


def test_auc_rejects_degenerate_inputs():
    with pytest.raises(ContractError):
        auc_score([0.1, 0.2], [1, 1])
    with pytest.raises(ContractError):
        auc_score([0.1, 0.2], [0, 0])
    with pytest.raises(ContractError):
        auc_score([0.1, 0.2, 0.3], [0, 1])
    with pytest.raises(ContractError):
        auc_score([0.1, 0.2], [0, 2])


def test_precision_recall_golden():
    precision, recall = precision_recall([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0])
    assert precision == 0.5
    assert recall == 0.5
    precision, recall = precision_recall([0.9, 0.6, 0.4], [1, 1, 0],
                                         threshold=0.7)
    assert precision == 1.0
    assert recall == 0.5


def test_precision_recall_edges():
    precision, recall = precision_recall([0.1, 0.1], [1, 0], threshold=0.9)
    assert precision == 0.0
    assert recall == 0.0
    with pytest.raises(ContractError):
        precision_recall([0.9, 0.1], [0, 0])
    with pytest.raises(ContractError):
        precision_recall([0.9], [0, 1])


def test_accuracy():
    assert accuracy([1, 0, 1, 1], [1, 0, 0, 1]) == 0.75
    with pytest.raises(ContractError):
        accuracy([], [])
    with pytest.raises(ContractError):
        accuracy([1, 0], [1])


# ---------------------------------------------------------------------------
# metrics report


def report_kwargs(**overrides):
    kwargs = dict(
        strategy="hierarchical", episodes=1, frames=2,
        tokens_before=(512, 512), tokens_post_local=(360, 410),
        tokens_kept=(200, 95), reduction_ratio=1.0 - 295 / 1024,
        flop_speedup=2.5, retention_relevant=0.9, intra_auc=0.97,
        intra_precision=0.8, intra_recall=0.7, inter_accuracy=0.95,
        inter_precision=0.9, inter_recall=0.85)
    kwargs.update(overrides)
    return kwargs


def test_report_totals_and_shares():
    report = MetricsReport(**report_kwargs())
    assert report.before_total == 1024
    assert report.kept_total == 295
    assert report.kept_share_per_view == (200 / 295, 95 / 295)
    zero = MetricsReport(**report_kwargs(
        tokens_kept=(0, 0), reduction_ratio=1.0))
    assert zero.kept_share_per_view == (0.0, 0.0)


def test_report_validates_count_ordering():
    with pytest.raises(ContractError):
        MetricsReport(**report_kwargs(tokens_kept=(400, 95)))
    with pytest.raises(ContractError):
        MetricsReport(**report_kwargs(tokens_post_local=(600, 410)))
    with pytest.raises(ContractError):
        MetricsReport(**report_kwargs(tokens_kept=(200,)))


def test_report_validates_metric_ranges():
    with pytest.raises(ContractError):
        MetricsReport(**report_kwargs(intra_auc=1.5))
    with pytest.raises(ContractError):
        MetricsReport(**report_kwargs(reduction_ratio=-0.1))
    with pytest.raises(ContractError):
        MetricsReport(**report_kwargs(flop_speedup=0.99))
    with pytest.raises(ContractError):
        MetricsReport(**report_kwargs(episodes=0))
    assert MetricsReport(**report_kwargs(flop_speedup=1.0)).flop_speedup == 1.0


def test_report_rows_fixed_order():
    report = MetricsReport(**report_kwargs())
    names = [name for name, _ in report.rows()]
    assert names == [
        "episodes", "frames", "tokens_before_total",
        "tokens_post_local_total", "tokens_kept_total",
        "tokens_before_view0", "tokens_post_local_view0",
        "tokens_kept_view0", "kept_share_view0",
        "tokens_before_view1", "tokens_post_local_view1",
        "tokens_kept_view1", "kept_share_view1",
        "reduction_ratio", "flop_speedup", "retention_relevant",
        "intra_auc", "intra_precision", "intra_recall",
        "inter_accuracy", "inter_precision", "inter_recall",
    ]
    as_dict = dict(report.rows())
    assert as_dict["tokens_kept_view0"] == "200"
    assert as_dict["flop_speedup"] == "2.5"


def test_report_to_obj():
    obj = MetricsReport(**report_kwargs()).to_obj()
    assert obj["kind"] == "metrics_report"
    assert obj["tokens_kept"] == [200, 95]
    assert obj["inter_recall"] == 0.85


# ---------------------------------------------------------------------------
# configuration


def test_resolve_config_defaults_are_copied():
    resolved = resolve_config(None)
    assert resolved["corpus"] == DEFAULT_CONFIG["corpus"]
    resolved["corpus"]["count"] = 999
    assert DEFAULT_CONFIG["corpus"]["count"] == 4


def test_resolve_config_merges_overrides():
    resolved = resolve_config({"corpus": {"count": 2},
                               "prune": {"beta": 0.25}})
    assert resolved["corpus"]["count"] == 2
    assert resolved["corpus"]["seed"] == DEFAULT_CONFIG["corpus"]["seed"]
    assert resolved["prune"]["beta"] == 0.25
    assert resolved["train"] == DEFAULT_CONFIG["train"]


def test_resolve_config_rejects_unknowns():
    with pytest.raises(ConfigError):
        resolve_config({"corpsu": {}})
    with pytest.raises(ConfigError):
        resolve_config({"corpus": {"episodes": 3}})
    with pytest.raises(ConfigError):
        resolve_config({"corpus": 3})
    with pytest.raises(ConfigError):
        resolve_config({"fmt": 99})
    with pytest.raises(ConfigError):
        resolve_config({"kind": "something_else"})
    with pytest.raises(ConfigError):
        resolve_config([1, 2])


def test_load_experiment_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"corpus": {"count": 2}}), encoding="utf-8")
    config = load_experiment_config(path)
    assert config["corpus"]["count"] == 2
    assert config["kind"] == "experiment_config"


def test_scenario_template_scales_scripts():
    default = scenario_template(resolve_config(None))
    assert default.episode_length == 16
    assert default.arms == (ArmScript(3, 5, 9, 0), ArmScript(5, 8, 12, 1))
    assert default.distractors == 2
    assert default.noise_sigma == 0.05
    short = scenario_template(resolve_config(SMALL))
    assert short.arms == (ArmScript(2, 4, 7, 0), ArmScript(4, 6, 9, 1))
    with pytest.raises(ConfigError):
        scenario_template(resolve_config({"corpus": {"episode_length": 8}}))


# ---------------------------------------------------------------------------
# experiment stages


@pytest.fixture(scope="module")
def small_run():
    config = resolve_config(SMALL)
    template = scenario_template(config)
    episodes = generate_corpus(template, config["corpus"]["count"],
                               config["corpus"]["seed"])
    derived = derive_annotations(episodes)
    observations = [obs for ep in episodes for obs in ep.observations]
    by_id = {ann.episode_id: ann for ann in derived}
    intra, inter, intra_losses, inter_losses = train_predictors(
        observations, by_id, config)
    assert intra_losses[-1] < intra_losses[0]
    assert inter_losses[-1] < inter_losses[0]
    return config, episodes, derived, intra, inter


def small_eval(small_run, annotations=None, prune_config=None):
    config, episodes, derived, intra, inter = small_run
    return evaluate_strategy(
        [ep.observations for ep in episodes],
        derived if annotations is None else annotations,
        intra, inter, prune_config or PruneConfig(), FlopModel(18, 2048))


def test_derive_annotations_match_ground_truth(small_run):
    _, episodes, derived, _, _ = small_run
    assert [a == e.annotation for a, e in zip(derived, episodes)] == [True] * 2


def test_derive_annotations_detect_divergence(small_run):
    _, episodes, _, _, _ = small_run
    episode = episodes[0]
    frames = list(episode.annotation.frames)
    masks = [mask.copy() for mask in frames[2].masks]
    masks[1][0] = 1 - masks[1][0]
    frames[2] = replace(frames[2], masks=tuple(masks))
    tampered = replace(episode.annotation, frames=tuple(frames))
    with pytest.raises(AnnotationError) as err:
        derive_annotations([replace(episode, annotation=tampered)])
    assert err.value.frame == 2


def test_evaluate_strategy_totals(small_run):
    report, results = small_eval(small_run)
    assert report.strategy == "hierarchical"
    assert report.episodes == 2
    assert report.frames == 24
    assert report.tokens_before == (6144, 6144, 6144)
    assert report.tokens_post_local == (180 * 24, 205 * 24, 205 * 24)
    assert report.kept_total == 295 * 24
    assert report.reduction_ratio == pytest.approx(1 - 295 / 768)
    assert report.flop_speedup > 2.0
    assert len(results) == 2 and all(len(r) == 12 for r in results)


def test_evaluate_strategy_accepts_mapping(small_run):
    _, _, derived, _, _ = small_run
    by_id = {ann.episode_id: ann for ann in derived}
    a, results_a = small_eval(small_run)
    b, results_b = small_eval(small_run, annotations=by_id)
    assert a == b
    assert results_a == results_b


def test_evaluate_strategy_rejects_misaligned_annotations(small_run):
    _, _, derived, _, _ = small_run
    with pytest.raises(ContractError):
        small_eval(small_run, annotations=list(reversed(derived)))


def test_evaluate_strategy_no_prune_is_identity(small_run):
    report, _ = small_eval(
        small_run, prune_config=PruneConfig(strategy=Strategy.NO_PRUNE))
    assert report.kept_total == report.before_total
    assert report.reduction_ratio == 0.0
    assert report.flop_speedup == 1.0
    assert report.retention_relevant == 1.0


def test_trained_predictors_beat_random_drop(small_run):
    hier, _ = small_eval(small_run)
    rand, _ = small_eval(
        small_run, prune_config=PruneConfig(strategy=Strategy.RANDOM_DROP))
    assert hier.kept_total == rand.kept_total
    assert hier.retention_relevant > rand.retention_relevant


# ---------------------------------------------------------------------------
# experiment driver and artifacts


@pytest.fixture(scope="module")
def experiment_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("experiment")
    report = run_experiment(resolve_config(SMALL), out)
    return out, report


def test_run_experiment_layout(experiment_dir):
    out, report = experiment_dir
    assert report.frames == 24
    names = {p.name for p in out.iterdir()}
    assert names == {"corpus", "intra.mlp.json", "inter.mlp.json",
                     "intra_trace.csv", "inter_trace.csv", "report.csv",
                     "timings.csv", "config.resolved.json"}
    corpus_names = {p.name for p in (out / "corpus").iterdir()}
    for eid in ("ep0000", "ep0001"):
        for suffix in ("obs", "ann", "geom", "derived", "prune"):
            assert f"{eid}.{suffix}.jsonl" in corpus_names
    header = (out / "report.csv").read_text().splitlines()[0]
    assert header == "strategy,metric,value"


def test_run_experiment_is_reproducible(experiment_dir, tmp_path):
    out, report = experiment_dir
    again = run_experiment(resolve_config(SMALL), tmp_path)
    assert again == report
    for path in sorted(out.rglob("*")):
        if not path.is_file():
            continue
        rel = path.relative_to(out)
        if rel.name == "timings.csv":
            continue
        assert (tmp_path / rel).read_bytes() == path.read_bytes(), str(rel)


def test_validate_artifacts_clean(experiment_dir):
    out, _ = experiment_dir
    assert validate_artifacts(out) == []
    assert validate_artifacts(out / "missing") == [
        f"{out / 'missing'}: not a directory"]


def test_validate_artifacts_flag_corruption(experiment_dir, tmp_path):
    out, _ = experiment_dir
    broken = tmp_path / "broken"
    shutil.copytree(out, broken)
    (broken / "intra.mlp.json").write_text("{", encoding="utf-8")
    prune_file = broken / "corpus" / "ep0000.prune.jsonl"
    prune_file.write_text(prune_file.read_text() + "{\"kind\": \"nope\"}\n",
                          encoding="utf-8")
    problems = validate_artifacts(broken)
    assert len(problems) == 2
    assert any("intra.mlp.json" in p for p in problems)
    assert any("ep0000.prune.jsonl" in p for p in problems)


def test_compare_strategies(tmp_path):
    reports = compare_strategies(
        resolve_config(SMALL), tmp_path,
        strategies=(Strategy.HIERARCHICAL, Strategy.RANDOM_DROP,
                    Strategy.NO_PRUNE))
    assert set(reports) == {"hierarchical", "random_drop", "no_prune"}
    no_prune = reports["no_prune"]
    assert no_prune.kept_total == no_prune.before_total
    assert no_prune.flop_speedup == 1.0
    assert (reports["hierarchical"].retention_relevant
            > reports["random_drop"].retention_relevant)
    lines = (tmp_path / "compare.csv").read_text().splitlines()
    strategies_seen = {line.split(",")[0] for line in lines[1:]}
    assert strategies_seen == set(reports)


def test_sweep_beta_counts_and_monotonicity(tmp_path):
    rows = sweep_beta(resolve_config(SMALL), [0.75, 0.0, 0.5, 0.25], tmp_path)
    assert [row["beta"] for row in rows] == [0.0, 0.25, 0.5, 0.75]
    assert [row["kept_total"] for row in rows] == [
        590 * 24, 443 * 24, 295 * 24, 148 * 24]
    speedups = [row["flop_speedup"] for row in rows]
    assert speedups == sorted(speedups)
    header = (tmp_path / "sweep.csv").read_text().splitlines()[0]
    assert header == "beta,kept_total,reduction_ratio,flop_speedup,retention_relevant"


def test_sweep_beta_rejects_bad_ratios(tmp_path):
    with pytest.raises(ConfigError):
        sweep_beta(None, [], tmp_path)
    with pytest.raises(ConfigError):
        sweep_beta(None, [0.5, 1.0], tmp_path)


def test_replace_beta():
    base = PruneConfig()
    bumped = replace_beta(base, 0.75)
    assert bumped.beta == 0.75
    assert base.beta == 0.5
    assert bumped.alphas == base.alphas


# ---------------------------------------------------------------------------
# command line


CLI_GEN = ["--episodes", "2", "--seed", "11", "--episode-length", "12",
           "--embed-dim", "8", "--distractors", "1"]


@pytest.fixture(scope="module")
def cli_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["gen", "--out", str(out)] + CLI_GEN) == 0
    return out


def write_small_config(tmp_path):
    path = tmp_path / "config.json"
    small = dict(SMALL)
    small["train"] = dict(SMALL["train"], steps=40, hidden=8)
    path.write_text(json.dumps(small), encoding="utf-8")
    return path


def test_cli_gen_writes_corpus(cli_corpus):
    entries = load_corpus(cli_corpus)
    assert [e["episode_id"] for e in entries] == ["ep0000", "ep0001"]
    assert entries[0]["observations"][0].embed_dim == 8


def test_cli_annotate_round_trip(cli_corpus, tmp_path, capsys):
    out = tmp_path / "derived.ann.jsonl"
    code = main(["annotate", "--geometry",
                 str(cli_corpus / "ep0000.geom.jsonl"),
                 "--annotation-out", str(out)])
    assert code == 0
    assert "annotated 12 frames" in capsys.readouterr().out
    derived = load_annotation(out)
    assert derived == load_corpus(cli_corpus)[0]["annotation"]


def test_cli_train_then_prune_existing(cli_corpus, tmp_path, capsys):
    ckpt = tmp_path / "ckpt"
    code = main(["train", "--corpus", str(cli_corpus), "--out", str(ckpt),
                 "--hidden", "8", "--steps", "40", "--batch-size", "32"])
    assert code == 0
    assert (ckpt / "intra.mlp.json").exists()
    assert (ckpt / "inter_trace.csv").exists()

    pruned = tmp_path / "pruned"
    code = main(["prune", "--corpus", str(cli_corpus),
                 "--intra", str(ckpt / "intra.mlp.json"),
                 "--inter", str(ckpt / "inter.mlp.json"),
                 "--out", str(pruned), "--beta", "0.25"])
    assert code == 0
    assert "kept 10632 of 18432" in capsys.readouterr().out  # 443 * 24
    assert (pruned / "report.csv").exists()
    assert (pruned / "ep0001.prune.jsonl").exists()

    code = main(["prune", "--corpus", str(cli_corpus),
                 "--out", str(tmp_path / "nope")])
    assert code == 2


def test_cli_prune_runs_full_experiment(tmp_path, capsys):
    config = write_small_config(tmp_path)
    out = tmp_path / "experiment"
    assert main(["prune", "--config", str(config), "--out", str(out)]) == 0
    assert "strategy hierarchical" in capsys.readouterr().out
    assert (out / "report.csv").exists()

    assert main(["validate", "--dir", str(out)]) == 0
    assert "all artifacts valid" in capsys.readouterr().out
    (out / "inter.mlp.json").write_text("[", encoding="utf-8")
    assert main(["validate", "--dir", str(out)]) == 1
    assert "inter.mlp.json" in capsys.readouterr().err


def test_cli_sweep_and_compare(tmp_path, capsys):
    config = write_small_config(tmp_path)
    sweep_dir = tmp_path / "sweep"
    code = main(["sweep", "--config", str(config), "--betas", "0.5,0.0",
                 "--out", str(sweep_dir)])
    assert code == 0
    assert "beta 0.5" in capsys.readouterr().out
    assert (sweep_dir / "sweep.csv").exists()

    compare_dir = tmp_path / "compare"
    code = main(["compare", "--config", str(config),
                 "--strategies", "hierarchical,no_prune",
                 "--out", str(compare_dir)])
    assert code == 0
    assert "no_prune" in capsys.readouterr().out
    assert (compare_dir / "compare.csv").exists()


def test_cli_out_dir_env_fallback(tmp_path, monkeypatch, capsys):
    target = tmp_path / "from-env"
    monkeypatch.setenv("MVPRUNE_OUT_DIR", str(target))
    assert main(["gen"] + CLI_GEN[:2] + ["--episode-length", "12",
                                          "--embed-dim", "8"]) == 0
    assert (target / "manifest.json").exists()

    monkeypatch.delenv("MVPRUNE_OUT_DIR")
    assert main(["gen"] + CLI_GEN) == 2
    assert "no output directory" in capsys.readouterr().err
