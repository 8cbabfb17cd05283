import json
from dataclasses import asdict

import pytest

from poisonguard import harness as H
from poisonguard.cli import main as cli_main
from poisonguard.detectors import Gmm, TopK


def tiny(**kw):
    base = dict(tasks=("synthetic:ab",), attacks=("flip",), detectors=("CAEPlus", "Centroid"),
                n_detector_rounds=2, n_eval_rounds=2, split_sizes=(20, 30, 30),
                epoch_scale=0.05, batch_size=16, synthetic_size=8, synthetic_per_class=150)
    base.update(kw)
    return H.ExperimentConfig(**base)


@pytest.fixture(scope="module")
def periodic_report():
    return H.run_periodic_update(tiny())


def test_periodic_rows_cover_eval_rounds(periodic_report):
    rows = periodic_report.rows
    assert {r["round"] for r in rows} == {2, 3}
    assert {r["detector"] for r in rows} == {"CAEPlus", "Centroid"}
    for r in rows:
        assert r["n_poisons"] == 2  # ceil(0.1 * 20)
        assert 0.0 <= r["f1"] <= 1.0
        assert set(r) == set(H.ROW_COLUMNS)


def test_report_records_config_and_sampling(periodic_report):
    cfg = periodic_report.config
    assert cfg["svm_C"] == 1.0 and cfg["alpha"] == 0.66
    assert cfg["attack_step"] == 0.1 and cfg["attack_iters"] == 50
    sampling = periodic_report.meta["tasks"]["synthetic:ab"]["sampling"]
    assert "policy" in sampling and "replacement_from_round" in sampling


def test_identical_seeds_identical_reports(periodic_report):
    again = H.run_periodic_update(tiny())
    for fmt in ("csv", "json"):
        assert H.emit_report(periodic_report, fmt) == H.emit_report(again, fmt)


def test_csv_roundtrip(periodic_report, tmp_path):
    path = tmp_path / "r.csv"
    H.emit_report(periodic_report, "csv", path)
    rows = H.read_csv_report(path)
    assert len(rows) == len(periodic_report.rows)
    assert list(rows[0]) == list(H.ROW_COLUMNS)
    for got, want in zip(rows, periodic_report.rows):
        assert float(got["f1"]) == pytest.approx(want["f1"], rel=1e-5)
        assert got["detector"] == want["detector"]
    text = path.read_text()
    config = json.loads(text.splitlines()[0].removeprefix("# config="))
    assert H.config_from_dict(config) == tiny()


def test_json_report(periodic_report):
    doc = json.loads(H.emit_report(periodic_report, "json"))
    assert doc["columns"] == list(H.ROW_COLUMNS)
    assert len(doc["rows"]) == 4 and len(doc["summary"]) == 2


def test_empty_report_rejected():
    with pytest.raises(ValueError):
        H.emit_report(H.Report("periodic", {}, []), "csv")
    with pytest.raises(ValueError):
        H.emit_report(H.Report("periodic", {}, [{}]), "xml")


def test_config_validation():
    with pytest.raises(ValueError):
        tiny(rates=(0.7,))
    with pytest.raises(ValueError):
        tiny(attacks=("noise",))
    with pytest.raises(ValueError):
        tiny(separator="kmeans")
    with pytest.raises(ValueError):
        tiny(epoch_scale=0.0)


def test_parse_separator():
    assert H.parse_separator("gmm") == Gmm()
    assert H.parse_separator("topk:7") == TopK(7)


def test_seed_for_is_stable_and_distinct():
    assert H.seed_for(0, 1, 2) == H.seed_for(0, 1, 2)
    assert len({H.seed_for(0, i) for i in range(50)}) == 50


def test_sweeps_and_ablation_shapes():
    cfg = tiny(detectors=("CAEPlus",))
    thr = H.run_threshold_sweep(cfg, [0, 2, 4])
    assert {r["k"] for r in thr.rows} == {0, 2, 4, None}
    assert all(r["n_flagged"] == 0 for r in thr.rows if r["k"] == 0)
    alp = H.run_alpha_sweep(cfg, [0.0, 1.0])
    assert {r["alpha"] for r in alp.rows} == {0.0, 1.0}
    with pytest.raises(ValueError):
        H.run_alpha_sweep(cfg, [1.5])
    abl = H.run_ablation(cfg)
    assert {r["detector"] for r in abl.rows} == {"RAE", "CAE", "CAEPlus"}
    rob = H.run_robustness(cfg)
    assert {r["detector"] for r in rob.rows} == {
        "CAE-clean", "CAEPlus-contaminated", "Centroid-clean", "Centroid-contaminated"}


def test_fashion_falls_back_to_synthetic(caplog):
    task, origin = H.load_task("fashion:sandal-sneaker", tiny())
    assert origin == "synthetic substitute"
    assert task.samples.features.shape[1:] == (8, 8, 1)


def test_cli_experiment_writes_report(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(asdict(tiny(detectors=("Centroid",)))))
    out = tmp_path / "r.json"
    assert cli_main(["experiment", "periodic", "--config", str(cfg_path),
                     "--format", "json", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["experiment"] == "periodic" and doc["rows"]


def test_cli_parser_rejects_unknown_experiment():
    with pytest.raises(SystemExit):
        cli_main(["experiment", "bogus"])
