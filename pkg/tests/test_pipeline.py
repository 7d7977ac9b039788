import json
from pathlib import Path

import numpy as np
import pytest

from conftest import tiny_experiment
from drm.analysis import cluster_margin, pair_similarities
from drm.config import ConfigError, DKTConfig, ablation_configs
from drm.pipeline import RUN_DIR_ENV, RunResult, output_root, run_pipeline, tail_mean_recall
from drm.plotting import PlotError, emit_plots, similarity_histogram
from drm.report import COLUMNS, ReportError, emit_report
from drm.training import frozen_hashes, load_checkpoint


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    return run_pipeline(tiny_experiment(), tmp_path_factory.mktemp("runs"))


# ---------------------------------------------------------------- pipeline


def test_run_directory_layout(tiny_run):
    run_dir = Path(tiny_run.run_dir)
    for name in ("config.json", "stage1.ckpt", "stats.json", "stage2.ckpt", "predictions_stage1.jsonl",
                 "predictions_stage2.jsonl", "report.json", "train_log.jsonl", "features_test.npz",
                 "plots/tiny_predrecall.svg", "plots/tiny_similarity.svg"):
        assert (run_dir / name).exists(), name
    lines = (run_dir / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(x) for x in lines] == tiny_run.train_log
    assert set(tiny_run.train_log[0]) == {"epoch", "L", "L_e", "L_r", "L_p", "L_t", "val_mR50"}


def test_two_stage_reports_and_frozen_encoders(tiny_run):
    assert set(tiny_run.reports) == {"stage1", "stage2"}
    assert tiny_run.frozen_hashes["stage1"] == tiny_run.frozen_hashes["stage2"]
    s1, _, _ = load_checkpoint(Path(tiny_run.run_dir) / "stage1.ckpt")
    s2, _, _ = load_checkpoint(Path(tiny_run.run_dir) / "stage2.ckpt")
    assert frozen_hashes(s1) == frozen_hashes(s2)
    counts = tiny_run.transfer["counts"]
    assert counts == [tiny_run.transfer["q"]] * len(counts)


def test_result_reload_matches(tiny_run):
    back = RunResult.load(tiny_run.run_dir)
    assert back.report_json() == tiny_run.report_json()
    assert back.run_id == "tiny"
    assert back.final.values == pytest.approx(tiny_run.reports["stage2"].values, rel=1e-12)


def test_dkt_none_gives_single_report(tmp_path):
    res = run_pipeline(tiny_experiment(dkt=DKTConfig(mode="none")), tmp_path, plots=False)
    assert list(res.reports) == ["stage1"]
    assert not (Path(res.run_dir) / "stage2.ckpt").exists()


def test_same_config_same_report_bytes(tmp_path, tiny_run):
    again = run_pipeline(tiny_experiment(), tmp_path, plots=False)
    assert (Path(again.run_dir) / "report.json").read_bytes() == (Path(tiny_run.run_dir) / "report.json").read_bytes()


def test_input_hash_ignores_run_label_only(tmp_path, tiny_run):
    relabelled = run_pipeline(tiny_experiment(run_id="other", dkt=DKTConfig(mode="none")), tmp_path, plots=False)
    reseeded = run_pipeline(tiny_experiment(run_id="seeded", seed=1, dkt=DKTConfig(mode="none")), tmp_path,
                            plots=False)
    base = run_pipeline(tiny_experiment(run_id="base", dkt=DKTConfig(mode="none")), tmp_path, plots=False)
    assert relabelled.input_hash == base.input_hash != reseeded.input_hash


def test_dataset_mismatch_rejected(tmp_path):
    cfg = tiny_experiment(dataset_path=str(Path(tmp_path)))
    from drm.synthgraph import default_spec, generate_dataset, save_dataset

    save_dataset(generate_dataset(default_spec(samples_per_split={"train": 5, "val": 2, "test": 2}), 0), tmp_path)
    with pytest.raises(ConfigError, match="model expects"):
        run_pipeline(cfg, tmp_path / "runs", plots=False)


def test_ablation_grid_emits_eight_results(tmp_path):
    base = tiny_experiment(run_id="abl")
    base.train.epochs = 1
    results = [run_pipeline(c, tmp_path, plots=False) for c in ablation_configs(base)]
    assert len({r.run_dir for r in results}) == 8
    assert all((Path(r.run_dir) / "report.json").exists() for r in results)
    text, doc = emit_report(results)
    assert len(doc["rows"]) == 8


def test_run_dir_env_overrides(monkeypatch, tmp_path):
    monkeypatch.setenv(RUN_DIR_ENV, str(tmp_path / "elsewhere"))
    assert output_root("runs") == tmp_path / "elsewhere"
    monkeypatch.delenv(RUN_DIR_ENV)
    assert output_root("runs") == Path("runs")


def test_tail_mean_recall(tiny_run):
    rep = tiny_run.reports["stage1"]
    per = {d["predicate"]: d["recall"] for d in rep.per_class["predicates"]}
    tails = tiny_run.transfer["tail_predicates"]
    assert tail_mean_recall(rep, tails) == pytest.approx(np.mean([per[p] for p in tails if p in per]))
    with pytest.raises(ValueError):
        tail_mean_recall(rep, [99])


# ---------------------------------------------------------------- cluster statistics


def test_cluster_margin_on_hand_example():
    reps = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    m = cluster_margin(reps, [0, 0, 1, 1])
    assert m["intra"] == pytest.approx(1.0) and m["inter"] == pytest.approx(0.0)
    assert m["margin"] == pytest.approx(1.0) and m["pairs_intra"] == 2 and m["pairs_inter"] == 4


def test_pair_similarities_accept_row_labels():
    reps = np.random.default_rng(0).standard_normal((5, 3))
    labels = np.array([[0, 1, 2], [0, 1, 2], [1, 1, 1], [0, 1, 2], [1, 1, 1]])
    intra, inter = pair_similarities(reps, labels)
    assert len(intra) == 3 + 1 and len(inter) == 10 - 4


# ---------------------------------------------------------------- report


def test_single_row_report(tiny_run):
    text, doc = emit_report([tiny_run], stage="stage1")
    assert len(doc["rows"]) == 1 and doc["task"] == "PredCls"
    row = doc["rows"][0]
    assert row["values"]["R@50"] == round(100 * tiny_run.reports["stage1"].values["R@50"], 2)
    assert f"{row['values']['mR@50']:.2f}" in text
    assert list(doc["columns"]) == list(COLUMNS)


def test_report_rows_follow_input_order(tiny_run, tmp_path):
    other = run_pipeline(tiny_experiment(run_id="zzz", dkt=DKTConfig(mode="none")), tmp_path, plots=False)
    _, doc = emit_report([other, tiny_run])
    assert [(r["run"], r["stage"]) for r in doc["rows"]] == [("zzz", "stage1"), ("tiny", "stage1"),
                                                            ("tiny", "stage2")]
    with pytest.raises(ReportError):
        emit_report([other], stage="stage2")


def test_report_records_deltas_against_first_row(tiny_run):
    text, doc = emit_report([tiny_run])
    s1, s2 = doc["rows"]
    assert s1["delta"]["mR@50"] == 0.0
    expected = 100 * (tiny_run.reports["stage2"].values["mR@50"] - tiny_run.reports["stage1"].values["mR@50"])
    assert s2["delta"]["mR@50"] == round(expected, 2)
    assert "delta vs tiny stage1" in text and f"{s2['delta']['mR@50']:+.2f}" in text


def test_report_rejects_mixed_tasks(tiny_run, tmp_path):
    sg = run_pipeline(tiny_experiment(run_id="sg", task="SGCls", dkt=DKTConfig(mode="none")), tmp_path, plots=False)
    with pytest.raises(ReportError, match="mix"):
        emit_report([tiny_run, sg])
    with pytest.raises(ReportError):
        emit_report([])


# ---------------------------------------------------------------- plots


def test_plot_files_named_by_run(tiny_run, tmp_path):
    paths = emit_plots(tiny_run, tmp_path)
    assert Path(paths["predrecall"]).name == "tiny_predrecall.svg"
    assert Path(paths["similarity"]).read_text().lstrip().startswith("<?xml")


def test_plots_are_reproducible(tiny_run, tmp_path):
    a, b = emit_plots(tiny_run, tmp_path / "a"), emit_plots(tiny_run, tmp_path / "b")
    for k in a:
        assert Path(a[k]).read_bytes() == Path(b[k]).read_bytes()


def test_histogram_means_match_cluster_statistics(tiny_run, tmp_path):
    means = similarity_histogram(tiny_run, tmp_path / "h.svg")
    for name, key in (("p''", "p"), ("t''", "t")):
        assert abs(means[name]["intra"] - tiny_run.cluster[key]["intra"]) < 1e-9
        assert abs(means[name]["inter"] - tiny_run.cluster[key]["inter"]) < 1e-9


def test_single_predicate_chart(tmp_path, tiny_run):
    res = RunResult.load(tiny_run.run_dir)
    rep = res.reports["stage1"]
    rep.per_class["predicates"] = rep.per_class["predicates"][:1]
    res.reports = {"stage1": rep}
    path = tmp_path / "one.svg"
    from drm.plotting import predicate_recall_chart

    predicate_recall_chart(res, path)
    assert path.stat().st_size > 0
    rep.per_class["predicates"] = []
    with pytest.raises(PlotError):
        predicate_recall_chart(res, path)


def test_histogram_needs_features(tmp_path, tiny_run):
    res = RunResult.load(tiny_run.run_dir)
    res.run_dir = str(tmp_path)
    with pytest.raises(PlotError):
        similarity_histogram(res, tmp_path / "x.svg")
