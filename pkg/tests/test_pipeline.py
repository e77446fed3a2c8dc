import json
import math
import shutil

import numpy as np
import pytest

from dlebm.biomarkers import BiomarkerTable, ColumnSource
from dlebm.cli import main
from dlebm.ebm import EbmConfig, NotFittedError, TabularDataset, fit_ebm, fit_ebm_with_pairs
from dlebm.pipeline import (STAGES, ConfigError, LeakageError, PipelineConfig, Run, RunManifest,
                            StageError, _disjoint, apply_overrides, compare_models, derive_seed,
                            report_importance, run_full)

TINY = {"seed": 3, "synth": {"dims": [16, 20, 16], "n_per_class": 25, "effects": [[3, 0.4]]},
        "scorer": {"c1": 2, "c2": 4}, "train": {"epochs": 2}, "occlusion": {"stride": 4},
        "ebm": {"rounds": 200}, "bootstrap_reps": 50}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = PipelineConfig.from_dict(TINY)
    return cfg, root, run_full(cfg, root)


# -- configuration ------------------------------------------------------------------------

def test_defaults_are_protocol():
    p = PipelineConfig().validate().protocol()
    assert p == {"test_fraction": 0.1, "n_folds": 5, "top_k_rois": 10, "n_features": 11,
                 "n_pairs": 2, "learning_rate": 5e-4, "batch_size": 16}


def test_yaml_roundtrip(tmp_path):
    cfg = PipelineConfig.from_dict(TINY)
    path = tmp_path / "c.yaml"
    path.write_text(cfg.dump())
    assert PipelineConfig.load(path).to_dict() == cfg.to_dict()


@pytest.mark.parametrize("bad", [
    {"nonsense": 1},
    {"synth": {"colour": 3}},
    {"n_features": 12},
    {"occlusion": {"roi_size": [40, 6, 6]}},
    {"occlusion": {"roi_size": [3, 3, 3]}},
    {"split": {"n_folds": 1}},
    {"synth": {"n_regions": 8}},
    {"train": {"learning_rate": -1}},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(bad)


def test_overrides():
    d = apply_overrides({"train": {"epochs": 3}}, ["train.epochs=7", "synth.dims=[8, 8, 8]", "seed=4"])
    assert d == {"train": {"epochs": 7}, "synth": {"dims": [8, 8, 8]}, "seed": 4}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["train.epochs"])
    with pytest.raises(ConfigError):
        apply_overrides({"seed": 1}, ["seed.x=2"])


def test_derive_seed():
    assert derive_seed(0, 4, 1) == derive_seed(0, 4, 1)
    assert len({derive_seed(0, 4, k) for k in range(5)} | {derive_seed(1, 4, 0)}) == 6


# -- comparison / importance ---------------------------------------------------------------

def test_compare_self_is_zero_and_degenerate(rng):
    s = rng.random(30)
    y = np.arange(30) % 2
    rows = compare_models({"a": s, "b": s}, y, None, [("a", "b")], reps=100)
    assert len(rows) == 2
    for r in rows:
        assert r["diff"] == 0.0 and r["degenerate"] and math.isnan(r["p"])


def test_compare_with_cv_rows(rng):
    from dlebm.pipeline import CvFoldMetrics
    y = np.arange(40) % 2
    cv = CvFoldMetrics({"a": {"ACC": [0.8, 0.7, 0.9], "AUC": [0.9, 0.8, 0.85]},
                        "b": {"ACC": [0.6, 0.7, 0.5], "AUC": [0.7, 0.6, 0.75]}}, 32, 8)
    rows = compare_models({"a": y + rng.random(40), "b": rng.random(40)}, y, cv, [("a", "b")], reps=100)
    cvrows = [r for r in rows if r["source"] == "cv"]
    assert len(cvrows) == 2 and cvrows[1]["diff"] == pytest.approx(np.mean([0.2, 0.2, 0.1]))
    with pytest.raises(ValueError):
        compare_models({"a": y[:5], "b": y}, y, None, [("a", "b")])


def _table(X, y, names):
    return BiomarkerTable(TabularDataset(X, y, names), [ColumnSource("volume", n) for n in names])


def test_report_importance_cases(rng):
    y = np.arange(80) % 2
    X = np.column_stack([y + 0.5 * rng.normal(size=80), rng.normal(size=80), np.zeros(80)])
    t = _table(X, y, ["sig", "noise", "flat"])
    with pytest.raises(NotFittedError):
        report_importance(None, t)
    zero = fit_ebm(t.data, EbmConfig(rounds=0))
    rows, shapes = report_importance(zero, t)
    assert rows == [] and len(shapes["terms"]) == 3
    m = fit_ebm_with_pairs(t.data, EbmConfig(rounds=300, early_stopping_rounds=0), 1)
    rows, shapes = report_importance(m, t)
    assert rows[0]["term"] == "sig" and [r["rank"] for r in rows] == list(range(1, len(rows) + 1))
    assert "flat" not in [r["term"] for r in rows]
    assert any(s["type"] == "pair" for s in shapes["terms"])


def test_leakage_guard():
    with pytest.raises(LeakageError):
        _disjoint("x", "fold 0", ["S1", "S2"], {"S2"})
    _disjoint("x", "fold 0", ["S1"], {"S2"})


# -- end to end --------------------------------------------------------------------------------

def test_full_run_outputs(tiny_run):
    cfg, root, manifest = tiny_run
    assert list(manifest.stages) == list(STAGES)
    assert manifest.verify() == []
    for f in ("reports/metrics.csv", "reports/comparison.csv", "reports/importance_dl.csv",
              "reports/importance_v.csv", "reports/summary.json", "models/ebm_dl.json"):
        assert (root / f).is_file()
    obs = manifest.observed
    assert obs["n_rois"] == 10 and obs["ebm_dl"]["n_features"] == 11 and obs["ebm_v"]["n_pairs"] == 2
    assert obs["n_test"] == 5 and obs["n_opt"] == 45


def test_no_test_subject_reaches_training(tiny_run):
    _, root, _ = tiny_run
    info = json.loads((root / "split.json").read_text())
    test = set(info["test_ids"])
    dl_opt = BiomarkerTable.load(root / "tables/dl_opt")
    assert not test & set(dl_opt.subject_ids)
    assert set(BiomarkerTable.load(root / "tables/dl_test").subject_ids) == test
    assert len(json.loads((root / "tables/v_selection.json").read_text())) >= 11


def test_resume_skips_and_detects_tampering(tiny_run, tmp_path):
    cfg, root, _ = tiny_run
    work = tmp_path / "copy"
    shutil.copytree(root, work)
    run = Run(cfg, work)
    assert not any(run.run_stage(s) for s in STAGES)
    (work / "reports/metrics.csv").write_text("tampered\n")
    assert run.run_stage("evaluate") is True
    assert RunManifest.load(work).verify() == []
    # downstream of a rerun stage is dropped and must rerun
    assert "compare" not in run.manifest.stages


def test_missing_upstream_is_stage_error(tmp_path):
    run = Run(PipelineConfig.from_dict(TINY), tmp_path / "r")
    with pytest.raises(StageError):
        run.run_stage("split")


# -- CLI -----------------------------------------------------------------------------------------------

def _cfg_file(tmp_path, d):
    import yaml
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(d))
    return str(p)


def test_cli_config_errors(tmp_path, capsys):
    out = str(tmp_path / "o")
    assert main(["generate", "-c", _cfg_file(tmp_path, {"bogus": 1}), "-o", out]) == 2
    assert main(["generate", "-c", str(tmp_path / "missing.yaml"), "-o", out]) == 2
    assert main(["generate", "-c", _cfg_file(tmp_path, TINY), "-o", out, "--set", "n_pairs"]) == 2
    with pytest.raises(SystemExit) as e:
        main(["no-such-verb"])
    assert e.value.code == 2


def test_cli_stage_failure_and_success(tmp_path, capsys):
    bad = dict(TINY, synth=dict(TINY["synth"], n_per_class=3))  # too few subjects to split 9:1
    assert main(["split", "-c", _cfg_file(tmp_path, bad), "-o", str(tmp_path / "b")]) == 3
    assert "stage failure" in capsys.readouterr().err
    assert main(["split", "-c", _cfg_file(tmp_path, TINY), "-o", str(tmp_path / "g")]) == 0
    assert (tmp_path / "g/split.json").is_file()
    assert main(["split", "-c", _cfg_file(tmp_path, TINY), "-o", str(tmp_path / "g"), "--force"]) == 0
