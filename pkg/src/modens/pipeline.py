"""Desk-scale study: data -> modes -> dumps -> scores -> reports.

Every stage reads and writes a run directory with a fixed layout::

    data/       manifest.json + MTEN datasets
    modes/      <mode_id>.mckp, train_summary.csv
    dumps/      <mode_id>/<dataset>.{logits,penultimate,feature_matrix}.mten
    eval/       reports.csv, aggregate.csv
    landscape/  plane_*/slice_* grids, trajectory/, summary.json
    theory/     report.json
    ablation/   ablation.csv, summary.json

All randomness derives from the config's top-level ``seed``.
"""

from __future__ import annotations

import copy
import json
import logging
from pathlib import Path

import numpy as np

from . import detectors as det
from . import ensemble as ens
from .data import (
    DEFAULT_BENCHMARK,
    LabeledDataset,
    atomic_write_bytes,
    dumps_json,
    gen_benchmark,
    read_datasets,
    read_tensor,
    write_datasets,
    write_tensor,
)
from .errors import DataError
from .landscape import dump_feature_trajectory, plane_grid, slice_grid, write_grid
from .metrics import (
    AGGREGATE_COLUMNS,
    REPORT_COLUMNS,
    DetectionReport,
    aggregate,
    evaluate,
    report_rows,
    subset_protocol,
    to_csv,
)
from .model import (
    MlpArch,
    ModeCheckpoint,
    OutputDump,
    accuracy,
    forward,
    load_ckpt,
    mean_loss,
    sample_subspace_modes,
    save_ckpt,
    train_mode,
    train_trajectory,
)
from .numkit import Rng
from .theory import DEFAULT_SWEEP, sweep

log = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "seed": 2024,
    "data": {**{k: v for k, v in copy.deepcopy(DEFAULT_BENCHMARK).items() if k != "seed"}, "dim": 8},
    "arch": {"hidden": [64, 64], "feature_matrix_shape": [8, 8]},
    "training": {"epochs": 100, "lr": 0.05, "batch_size": 64},
    "mode_seeds": list(range(1, 11)),
    "detectors": {
        "odin": {"T": 1000.0, "eps": 0.0},
        "knn": {"k": 5},
        "mahalanobis": {"rel_eps": 1e-6},
    },
    "ensemble_sizes": [1, 2, 4],
    "repeats": 3,
    "tpr": 0.95,
    "landscape": {
        "modes": [0, 1, 2],
        "resolution": 41,
        "margin": 0.2,
        "slice_resolution": 41,
        "slice_radius": 1.0,
        "trajectory_every": 4,
    },
    "theory": dict(DEFAULT_SWEEP),
    "ablation": {"base_mode": 0, "num_modes": 10, "r_max": 0.5, "k": 4, "detector": "energy"},
}

DETECTOR_ORDER = ("msp", "odin", "energy", "mahalanobis", "knn", "rankfeat", "gradnorm", "pvalue-min-energy")
STAGES = ("data", "modes", "dumps", "eval", "landscape", "theory", "ablation")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else copy.deepcopy(v)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        cfg = _merge(cfg, json.loads(Path(path).read_text()))
    if overrides:
        cfg = _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    seeds = cfg["mode_seeds"]
    if len(set(seeds)) != len(seeds):
        raise DataError("mode seeds must be unique")
    for k in cfg["ensemble_sizes"]:
        if not 1 <= k <= len(seeds):
            raise DataError(f"ensemble size {k} outside 1..{len(seeds)}")
    if not 1 <= cfg["ablation"]["k"] <= cfg["ablation"]["num_modes"]:
        raise DataError("ablation k exceeds the number of subspace modes")


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def _root_rng(cfg) -> Rng:
    return Rng(int(cfg["seed"]))


def arch_for(cfg, datasets) -> MlpArch:
    dim = datasets["train"].x.shape[1]
    classes = int(cfg["data"]["num_classes"])
    return MlpArch((dim, *cfg["arch"]["hidden"], classes), tuple(cfg["arch"]["feature_matrix_shape"]))


def ood_names(datasets) -> list[str]:
    return [n for n in datasets if n not in ("train", "test")]


# ---------------------------------------------------------------- stages


def stage_data(cfg, run_dir) -> dict[str, LabeledDataset]:
    data_cfg = {**cfg["data"], "seed": int(cfg["seed"])}
    datasets = gen_benchmark(data_cfg)
    write_datasets(Path(run_dir) / "data", datasets)
    return datasets


def load_data(run_dir) -> dict[str, LabeledDataset]:
    return read_datasets(Path(run_dir) / "data")


def stage_modes(cfg, run_dir, datasets=None) -> list[ModeCheckpoint]:
    datasets = datasets or load_data(run_dir)
    arch = arch_for(cfg, datasets)
    out = Path(run_dir) / "modes"
    ckpts = []
    rows = ["mode_id,seed,final_train_loss,test_accuracy"]
    for seed in cfg["mode_seeds"]:
        ck = train_mode(arch, datasets["train"], int(seed), datasets["test"], **cfg["training"])
        save_ckpt(out / f"{ck.mode_id}.mckp", ck)
        rows.append(f"{ck.mode_id},{seed},{ck.train_meta['final_train_loss']!r},{ck.train_meta['final_test_accuracy']!r}")
        log.info("trained %s: test acc %.4f", ck.mode_id, ck.train_meta["final_test_accuracy"])
        ckpts.append(ck)
    _write_text(out / "train_summary.csv", "\n".join(rows) + "\n")
    return ckpts


def load_modes(cfg, run_dir) -> list[ModeCheckpoint]:
    return [load_ckpt(Path(run_dir) / "modes" / f"seed{s}.mckp") for s in cfg["mode_seeds"]]


DUMP_FIELDS = ("logits", "penultimate", "feature_matrix")


def write_dump(out_dir, dump: OutputDump) -> list[Path]:
    paths = []
    for field in DUMP_FIELDS:
        p = Path(out_dir) / dump.mode_id / f"{dump.dataset_id}.{field}.mten"
        write_tensor(p, getattr(dump, field))
        paths.append(p)
    return paths


def read_dump(out_dir, mode_id: str, dataset_id: str) -> OutputDump:
    base = Path(out_dir) / mode_id
    arrays = [read_tensor(base / f"{dataset_id}.{f}.mten") for f in DUMP_FIELDS]
    if not np.array_equal(arrays[0].shape[0], arrays[1].shape[0]):
        raise DataError(f"inconsistent dump for {mode_id}/{dataset_id}")
    return OutputDump(*arrays, mode_id=mode_id, dataset_id=dataset_id)


def dump_modes(ckpts, datasets: dict[str, LabeledDataset], out_dir) -> dict[str, list[OutputDump]]:
    """Forward every mode on every dataset and write the dumps."""
    dumps = {name: [] for name in datasets}
    for ck in ckpts:
        for name, ds in datasets.items():
            d = forward(ck, ds.x, name)
            write_dump(out_dir, d)
            dumps[name].append(d)
    return dumps


def stage_dumps(cfg, run_dir, datasets=None, ckpts=None):
    datasets = datasets or load_data(run_dir)
    ckpts = ckpts or load_modes(cfg, run_dir)
    return dump_modes(ckpts, datasets, Path(run_dir) / "dumps")


def load_dumps(run_dir, mode_ids, dataset_names) -> dict[str, list[OutputDump]]:
    return {n: [read_dump(Path(run_dir) / "dumps", m, n) for m in mode_ids] for n in dataset_names}


# ---------------------------------------------------------------- scoring


def score_subset(cfg, detector: str, sets: dict[str, ens.ModeSet], datasets, train_labels):
    """Ensemble scores of one detector for every non-training dataset."""
    dcfg = cfg["detectors"]
    names = [n for n in sets if n != "train"]
    if detector == "msp":
        return {n: ens.ens_score_msp(sets[n]) for n in names}
    if detector == "energy":
        return {n: ens.ens_score_energy(sets[n]) for n in names}
    if detector == "odin":
        T, eps = float(dcfg["odin"]["T"]), float(dcfg["odin"]["eps"])
        return {n: ens.ens_score_odin(sets[n], T, eps, datasets[n].x if eps else None) for n in names}
    if detector == "mahalanobis":
        stats = ens.ens_fit_mahalanobis(sets["train"], train_labels, rel_eps=float(dcfg["mahalanobis"]["rel_eps"]))
        return {n: ens.ens_score_mahalanobis(stats, sets[n]) for n in names}
    if detector == "knn":
        index = ens.ens_build_knn(sets["train"], int(dcfg["knn"]["k"]))
        return {n: ens.ens_score_knn(sets[n], index) for n in names}
    if detector == "rankfeat":
        return {n: ens.ens_score_rankfeat(sets[n]) for n in names}
    if detector == "gradnorm":
        return {n: ens.ens_score_gradnorm(sets[n]) for n in names}
    raise DataError(f"unknown detector {detector!r}")


def _split_calibration(sv: det.ScoreVector):
    s = sv.scores
    return det.ScoreVector(s[0::2], sv.detector_id, sv.mode_ids, sv.dataset_id), det.ScoreVector(
        s[1::2], sv.detector_id, sv.mode_ids, sv.dataset_id
    )


def pvalue_reports(cfg, sets, names, k, sid) -> list[DetectionReport]:
    """Min-p ensemble of per-mode energy scores.

    Even-indexed test samples calibrate each mode; odd-indexed ones are the
    InD evaluation set for this detector only.
    """
    per_mode = {n: [] for n in names}
    calib, ind = [], []
    for j in range(len(sets["test"].dumps)):
        e_test = det.score_energy(sets["test"].dumps[j])
        c, i = _split_calibration(e_test)
        calib.append(c)
        ind.append(i)
        for n in names:
            per_mode[n].append(det.score_energy(sets[n].dumps[j]))
    ind_p = ens.ens_score_pvalue(ind, calib)
    out = []
    for n in names:
        ood_p = ens.ens_score_pvalue(per_mode[n], calib)
        out.append(evaluate(ind_p, ood_p, cfg["tpr"], detector_id="pvalue-min-energy",
                            mode_ids=sets["test"].mode_ids, dataset_id=n, k=k, subset_id=sid))
    return out


def mode_sets(dumps, ckpts_by_id, subset, names) -> dict[str, ens.ModeSet]:
    idx = [i for i, d in enumerate(dumps["test"]) if d.mode_id in subset]
    cks = [ckpts_by_id[dumps["test"][i].mode_id] for i in idx]
    return {n: ens.ModeSet([dumps[n][i] for i in idx], cks) for n in names}


def subsets_for(cfg, mode_ids, k, salt: int = 1000):
    return subset_protocol(mode_ids, k, int(cfg["repeats"]), _root_rng(cfg).child(salt + k))


def evaluate_modes(cfg, datasets, ckpts, dumps, sizes=None, detectors=DETECTOR_ORDER) -> list[DetectionReport]:
    mode_ids = [c.mode_id for c in ckpts]
    by_id = {c.mode_id: c for c in ckpts}
    oods = ood_names(datasets)
    reports = []
    for k in sizes or cfg["ensemble_sizes"]:
        for sid, subset in enumerate(subsets_for(cfg, mode_ids, k)):
            sets = mode_sets(dumps, by_id, subset, ["train", "test", *oods])
            for name in detectors:
                if name == "pvalue-min-energy":
                    reports.extend(pvalue_reports(cfg, sets, oods, k, sid))
                    continue
                scores = score_subset(cfg, name, sets, datasets, datasets["train"].y)
                for o in oods:
                    reports.append(evaluate(scores["test"], scores[o], cfg["tpr"], detector_id=name,
                                            mode_ids=tuple(subset), dataset_id=o, k=k, subset_id=sid))
    return reports


def aggregate_rows(reports) -> list[dict]:
    rows = aggregate(reports)
    spans = {}
    for r in reports:
        spans.setdefault((r.detector_id, r.dataset_id, r.k), []).append(r.fpr95)
    for row in rows:
        vals = spans[(row["detector"], row["dataset"], row["k"])]
        row["fpr95_min"], row["fpr95_max"] = float(min(vals)), float(max(vals))
    return rows


AGGREGATE_COLUMNS_EXT = (*AGGREGATE_COLUMNS, "fpr95_min", "fpr95_max")


def stage_eval(cfg, run_dir, datasets=None, ckpts=None):
    datasets = datasets or load_data(run_dir)
    ckpts = ckpts or load_modes(cfg, run_dir)
    dumps = load_dumps(run_dir, [c.mode_id for c in ckpts], list(datasets))
    reports = evaluate_modes(cfg, datasets, ckpts, dumps)
    out = Path(run_dir) / "eval"
    _write_text(out / "reports.csv", to_csv(report_rows(reports), REPORT_COLUMNS))
    _write_text(out / "aggregate.csv", to_csv(aggregate_rows(reports), AGGREGATE_COLUMNS_EXT))
    return reports


# ---------------------------------------------------------------- landscape


def stage_landscape(cfg, run_dir, datasets=None, ckpts=None) -> dict:
    datasets = datasets or load_data(run_dir)
    ckpts = ckpts or load_modes(cfg, run_dir)
    lc = cfg["landscape"]
    out = Path(run_dir) / "landscape"
    trio = [ckpts[i] for i in lc["modes"]]
    evals = {n: ds for n, ds in datasets.items() if n != "train"}
    summary = {"modes": [c.mode_id for c in trio], "planes": {}, "slices": {}}
    for name, ds in evals.items():
        grid = plane_grid(trio, ds, int(lc["resolution"]), float(lc["margin"]))
        write_grid(grid, out / f"plane_{name}")
        direct = [mean_loss(c, ds) for c in trio]
        summary["planes"][name] = {
            "marker_losses": grid.marker_losses,
            "direct_losses": direct,
            "anchor_max_abs_error": float(max(abs(a - b) for a, b in zip(grid.marker_losses, direct))),
            "anchor_loss_ratio": float(max(direct) / min(direct)),
        }
    rng = _root_rng(cfg).child(4000)
    for i, ck in enumerate(trio):
        for name, ds in evals.items():
            grid = slice_grid(ck, ds, int(lc["slice_resolution"]), float(lc["slice_radius"]), rng.child(i))
            write_grid(grid, out / f"slice_{ck.mode_id}_{name}")
            summary["slices"].setdefault(ck.mode_id, {})[name] = grid.marker_losses[0]
    arch = arch_for(cfg, datasets)
    every = int(lc["trajectory_every"])
    for ck in trio:
        _, snaps = train_trajectory(arch, datasets["train"], ck.seed, None, snapshot_every=every, **cfg["training"])
        dump_feature_trajectory(snaps, evals, out / "trajectory")
    summary["trajectory"] = {"snapshot_every": every, "checkpoints_per_mode": cfg["training"]["epochs"] // every}
    _write_text(out / "summary.json", dumps_json(summary))
    return summary


# ---------------------------------------------------------------- theory


def stage_theory(cfg, run_dir) -> dict:
    report = sweep(cfg["theory"])
    _write_text(Path(run_dir) / "theory" / "report.json", dumps_json(report))
    return report


# ---------------------------------------------------------------- ablation

ABLATION_COLUMNS = ("family", "subset_id", "mode_ids", "dataset", "fpr95", "auroc", "ens_test_accuracy")


def _ensemble_accuracy(ms: ens.ModeSet, labels) -> float:
    return float((np.argmax(ens.ens_logits(ms), axis=1) == labels).mean())


def ablation_rows(cfg, datasets, family, ckpts, dumps, subsets) -> list[dict]:
    by_id = {c.mode_id: c for c in ckpts}
    oods = ood_names(datasets)
    detector = cfg["ablation"]["detector"]
    rows = []
    for sid, subset in enumerate(subsets):
        sets = mode_sets(dumps, by_id, subset, ["train", "test", *oods])
        scores = score_subset(cfg, detector, sets, datasets, datasets["train"].y)
        acc = _ensemble_accuracy(sets["test"], datasets["test"].y)
        for o in oods:
            r = evaluate(scores["test"], scores[o], cfg["tpr"])
            rows.append({"family": family, "subset_id": sid, "mode_ids": ";".join(subset), "dataset": o,
                         "fpr95": r.fpr95, "auroc": r.auroc, "ens_test_accuracy": acc})
    return rows


def stage_ablation(cfg, run_dir, datasets=None, ckpts=None) -> dict:
    datasets = datasets or load_data(run_dir)
    ckpts = ckpts or load_modes(cfg, run_dir)
    ac = cfg["ablation"]
    k = int(ac["k"])
    base = ckpts[int(ac["base_mode"])]
    sub = sample_subspace_modes(base, int(ac["num_modes"]), float(ac["r_max"]), _root_rng(cfg).child(2000))
    out = Path(run_dir) / "ablation"
    ind_dumps = load_dumps(run_dir, [c.mode_id for c in ckpts], list(datasets))
    sub_dumps = dump_modes(sub, datasets, out / "dumps")
    ind_subsets = subsets_for(cfg, [c.mode_id for c in ckpts], k)
    sub_subsets = subsets_for(cfg, [c.mode_id for c in sub], k, salt=3000)
    rows = ablation_rows(cfg, datasets, "independent", ckpts, ind_dumps, ind_subsets)
    rows += ablation_rows(cfg, datasets, "subspace", sub, sub_dumps, sub_subsets)
    rows += ablation_rows(cfg, datasets, "single", [base], {n: [d[int(ac["base_mode"])]] for n, d in ind_dumps.items()},
                          [(base.mode_id,)])
    _write_text(out / "ablation.csv", to_csv(rows, ABLATION_COLUMNS))
    summary = {"detector": ac["detector"], "k": k, "r_max": ac["r_max"], "base_mode": base.mode_id,
               "subspace_steps": [c.train_meta["step"] for c in sub], "families": {}}
    for fam in ("independent", "subspace", "single"):
        fam_rows = [r for r in rows if r["family"] == fam]
        summary["families"][fam] = {
            "mean_fpr95": float(np.mean([r["fpr95"] for r in fam_rows])),
            "mean_auroc": float(np.mean([r["auroc"] for r in fam_rows])),
            "mean_test_accuracy": float(np.mean([r["ens_test_accuracy"] for r in fam_rows])),
        }
    _write_text(out / "summary.json", dumps_json(summary))
    return summary


# ---------------------------------------------------------------- all


def reproduce(cfg, run_dir) -> dict:
    run_dir = Path(run_dir)
    datasets = stage_data(cfg, run_dir)
    ckpts = stage_modes(cfg, run_dir, datasets)
    stage_dumps(cfg, run_dir, datasets, ckpts)
    reports = stage_eval(cfg, run_dir, datasets, ckpts)
    land = stage_landscape(cfg, run_dir, datasets, ckpts)
    theory = stage_theory(cfg, run_dir)
    abl = stage_ablation(cfg, run_dir, datasets, ckpts)
    _write_text(run_dir / "config.json", dumps_json(cfg))
    return {"reports": reports, "landscape": land, "theory": theory, "ablation": abl}
