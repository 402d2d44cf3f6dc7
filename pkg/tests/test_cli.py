import csv
import json

import numpy as np
import pytest

from modens import detectors as det
from modens import pipeline
from modens.cli import main
from modens.data import read_datasets, read_tensor
from modens.metrics import REPORT_COLUMNS, evaluate, report_rows, to_csv

from conftest import SMALL_OVERRIDES

ACCURACY_FLOOR = 0.95


def _write_cfg(path, overrides=None):
    cfg = pipeline._merge(pipeline.DEFAULT_CONFIG, pipeline._merge(SMALL_OVERRIDES, overrides or {}))
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write_cfg(root / "cfg.json")
    out = root / "run"
    for cmd in ("gen-data", "train-modes", "eval", "landscape", "theory", "ablate"):
        if cmd == "eval":
            ckpts = sorted(str(p) for p in (out / "modes").glob("*.mckp"))
            assert main(["dump", "--ckpt", *ckpts, "--datasets", str(out / "data"), "--out", str(out / "dumps")]) == 0
        assert main([cmd, "--config", cfg, "--out", str(out)]) == 0, cmd
    return root, cfg, out


def _rows(path):
    return list(csv.DictReader(open(path)))


def test_usage_errors(tmp_path, capsys):
    assert main([]) == 2
    assert main(["gen-data", "--out", str(tmp_path)]) == 2
    assert main(["gen-data", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.json").write_text("{")
    assert main(["gen-data", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 2
    assert main(["bogus"]) == 2


def test_init_config_round_trips(tmp_path):
    assert main(["init-config", "--out", str(tmp_path / "c.json")]) == 0
    assert pipeline.load_config(tmp_path / "c.json") == pipeline.DEFAULT_CONFIG


def test_invalid_config_is_a_data_error(tmp_path):
    cfg = _write_cfg(tmp_path / "c.json", {"mode_seeds": [1, 1, 2]})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == 3
    cfg = _write_cfg(tmp_path / "d.json", {"ensemble_sizes": [5]})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == 3


def test_gen_data_is_deterministic(small_run, tmp_path):
    _, cfg, out = small_run
    ds = read_datasets(out / "data")
    assert sorted(ds) == ["far_ood", "near_ood", "scale_ood", "test", "train"]
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == 0
    for p in (out / "data").iterdir():
        assert (tmp_path / "data" / p.name).read_bytes() == p.read_bytes()


def test_train_summary(small_run):
    rows = _rows(small_run[2] / "modes" / "train_summary.csv")
    assert [r["mode_id"] for r in rows] == ["seed1", "seed2", "seed3"]


def test_dump_files_and_errors(small_run, tmp_path):
    _, _, out = small_run
    logits = read_tensor(out / "dumps" / "seed2" / "near_ood.logits.mten")
    assert logits.shape == (200, 4)
    assert read_tensor(out / "dumps" / "seed2" / "train.feature_matrix.mten").shape == (300, 8, 8)
    ck = str(out / "modes" / "seed2.mckp")
    assert main(["dump", "--ckpt", ck, "--datasets", str(out / "data"), "--names", "test", "--out", str(tmp_path)]) == 0
    for f in ("logits", "penultimate", "feature_matrix"):
        assert (tmp_path / "seed2" / f"test.{f}.mten").read_bytes() == (out / "dumps" / "seed2" / f"test.{f}.mten").read_bytes()
    assert main(["dump", "--ckpt", str(tmp_path / "no.mckp"), "--datasets", str(out / "data"), "--out", str(tmp_path)]) == 3
    assert main(["dump", "--ckpt", ck, "--datasets", str(out / "data"), "--names", "nope", "--out", str(tmp_path)]) == 3


def test_eval_row_counts(small_run):
    rows = _rows(small_run[2] / "eval" / "reports.csv")
    k1 = [r for r in rows if r["k"] == "1"]
    cells = {(r["detector"], r["dataset"]) for r in k1}
    assert len(cells) == 8 * 3
    for cell in cells:
        assert sum((r["detector"], r["dataset"]) == cell for r in k1) == 3
    agg = _rows(small_run[2] / "eval" / "aggregate.csv")
    assert list(agg[0])[:7] == ["detector", "dataset", "k", "fpr95_mean", "fpr95_std", "auroc_mean", "auroc_std"]


def test_k1_ensemble_rows_equal_single_mode_path(small_run):
    _, cfgpath, out = small_run
    cfg = pipeline.load_config(cfgpath)
    ds = read_datasets(out / "data")
    ckpts = pipeline.load_modes(cfg, out)
    oods = pipeline.ood_names(ds)
    reports = []
    for sid, ck in enumerate(ckpts):
        d = {n: pipeline.read_dump(out / "dumps", ck.mode_id, n) for n in ds}
        stats = det.fit_mahalanobis(d["train"].penultimate, ds["train"].y)
        idx = det.build_knn(d["train"].penultimate)
        score = {
            "msp": det.score_msp, "odin": det.score_odin, "energy": det.score_energy,
            "mahalanobis": lambda x: det.score_mahalanobis(stats, x), "knn": lambda x: det.score_knn(idx, x),
            "rankfeat": lambda x: det.score_rankfeat(x, ck), "gradnorm": det.score_gradnorm,
        }
        for name in det.DETECTORS:
            ind = score[name](d["test"])
            for o in oods:
                reports.append(evaluate(ind, score[name](d[o]), cfg["tpr"], detector_id=name,
                                        mode_ids=(ck.mode_id,), dataset_id=o, k=1, subset_id=sid))
    single = to_csv(report_rows(reports), REPORT_COLUMNS).splitlines()
    lines = (out / "eval" / "reports.csv").read_text().splitlines()
    ens_k1 = [ln for ln in lines[1:] if ln.split(",")[2] == "1" and ln.split(",")[0] in det.DETECTORS]
    assert ens_k1 == single[1:]


def test_landscape_outputs(small_run):
    out = small_run[2]
    s = json.loads((out / "landscape" / "summary.json").read_text())
    assert set(s["planes"]) == {"test", "near_ood", "far_ood", "scale_ood"}
    assert max(p["anchor_max_abs_error"] for p in s["planes"].values()) <= 1e-6
    assert read_tensor(out / "landscape" / "plane_far_ood.mten").shape == (5, 5)
    traj = list((out / "landscape" / "trajectory").glob("seed1.step*.test.mten"))
    assert len(traj) == 2


def test_theory_report(small_run):
    rep = json.loads((small_run[2] / "theory" / "report.json").read_text())
    assert rep["n_trials"] == 20 and len(rep["trials"]) == 20


def test_ablation_outputs(small_run):
    rows = _rows(small_run[2] / "ablation" / "ablation.csv")
    fams = {r["family"] for r in rows}
    assert fams == {"independent", "subspace", "single"}
    assert sum(r["family"] == "subspace" for r in rows) == 3 * 3


def test_ablation_with_vanishing_radius_matches_single_mode(small_run, tmp_path):
    root, _, out = small_run
    cfg = _write_cfg(tmp_path / "c.json", {"ablation": {"r_max": 1e-60}})
    run = tmp_path / "run"
    run.mkdir()
    for sub in ("data", "modes", "dumps"):
        (run / sub).symlink_to(out / sub)
    assert main(["ablate", "--config", cfg, "--out", str(run)]) == 0
    rows = _rows(run / "ablation" / "ablation.csv")
    single = {r["dataset"]: (r["fpr95"], r["auroc"]) for r in rows if r["family"] == "single"}
    for r in rows:
        if r["family"] == "subspace":
            assert (r["fpr95"], r["auroc"]) == single[r["dataset"]]


def test_corrupt_input_is_a_data_error(small_run, tmp_path):
    _, cfg, out = small_run
    run = tmp_path / "run"
    assert main(["gen-data", "--config", cfg, "--out", str(run)]) == 0
    p = run / "data" / "test.x.mten"
    p.write_bytes(b"JUNK" + p.read_bytes()[4:])
    assert main(["train-modes", "--config", cfg, "--out", str(run)]) == 3


def test_divergence_is_a_numeric_error(tmp_path):
    cfg = _write_cfg(tmp_path / "c.json", {"training": {"lr": 1e6}, "mode_seeds": [1], "ensemble_sizes": [1]})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert main(["train-modes", "--config", cfg, "--out", str(tmp_path)]) == 4


def test_pinned_study_accuracy_floor(study):
    rows = _rows(study["runs"][0]["dir"] / "modes" / "train_summary.csv")
    assert len(rows) == 10
    assert min(float(r["test_accuracy"]) for r in rows) >= ACCURACY_FLOOR
